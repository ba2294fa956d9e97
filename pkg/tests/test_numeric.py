import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gated_fusion.diagnostics import (check_dense, check_gating, check_gem, check_mlp,
                                      check_netvlad)
from gated_fusion.exceptions import DimensionError, DomainError, NumericError, StateError
from gated_fusion.numeric import (MLP, Dense, LrSchedule, OptimizerState, Parameter, adam_step,
                                  grad_check, l2_normalize, lr_at, restore_rng, rng_state,
                                  seeded_rng)


def _dense(w, b, act):
    layer = Dense(len(w[0]), len(w), act, init="zeros", dtype=np.float64)
    layer.weight.value[...] = w
    layer.bias.value[...] = b
    return layer


class TestDense:
    def test_identity(self):
        layer = Dense(2, 2, "identity", init="identity", dtype=np.float64)
        np.testing.assert_array_equal(layer.forward(np.array([1.0, 2.0]))[0], [1.0, 2.0])

    def test_zero_relu(self, rng):
        layer = Dense(3, 4, "relu", init="zeros")
        np.testing.assert_array_equal(layer.forward(rng.standard_normal(3))[0], np.zeros(4))

    def test_sigmoid_half(self):
        out, _ = _dense([[1.0, 1.0]], [0.0], "sigmoid").forward(np.zeros(2))
        assert out[0] == 0.5

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            Dense(3, 2, init="zeros").forward(np.zeros(4))

    def test_backward_without_forward(self):
        with pytest.raises(StateError):
            Dense(3, 2, init="zeros").backward(None, np.zeros(2))

    def test_forward_is_pure(self, rng):
        mlp = MLP([5, 7, 3], rng)
        x = rng.standard_normal((4, 5)).astype(np.float32)
        a, b = mlp.forward(x)[0], mlp.forward(x)[0]
        assert a.tobytes() == b.tobytes()


class TestGradCheck:
    def test_square(self):
        w = Parameter(np.array([3.0]))

        def f(need_grad):
            if need_grad:
                w.grad += 2 * w.value
            return float(w.value[0] ** 2)

        f(True)
        assert w.grad[0] == 6.0
        assert grad_check(f, {"w": w}).max_rel_error < 1e-8

    def test_constant_output_has_zero_gradients(self, rng):
        layer = Dense(3, 2, "relu", init="zeros", dtype=np.float64)
        x = rng.standard_normal((5, 3))
        out, cache = layer.forward(x)
        layer.backward(cache, np.ones_like(out))
        assert not layer.weight.grad.any() and not layer.bias.grad.any()

    def test_mlp_seed7(self):
        rng = seeded_rng(7)
        mlp = MLP([4, 6, 3], rng, dtype=np.float64)
        x = rng.standard_normal((5, 4))
        r = rng.standard_normal((5, 3))

        def objective(need_grad):
            y, cache = mlp.forward(x)
            if need_grad:
                mlp.backward(cache, r)
            return float(np.sum(r * y))

        assert grad_check(objective, mlp.parameters(), eps=1e-5).max_rel_error < 1e-6

    def test_doubled_gradient_flagged(self):
        w = Parameter(np.array([1.5, -0.7]))

        def f(need_grad):
            if need_grad:
                w.grad += 2 * (3 * w.value ** 2)
            return float(np.sum(w.value ** 3))

        res = grad_check(f, {"w": w})
        assert res.max_rel_error == pytest.approx(0.5, abs=1e-6)
        assert not res.passed(1e-4)

    def test_zero_gradient_zero_error(self):
        w = Parameter(np.array([2.0]))
        assert grad_check(lambda need: 1.0, {"w": w}).max_rel_error == 0.0

    def test_nonfinite_loss(self):
        w = Parameter(np.array([1.0]))
        with pytest.raises(NumericError):
            grad_check(lambda need: float("nan"), {"w": w})

    # Central differences of an O(1) loss carry ~1e-10 absolute roundoff at
    # eps=1e-5, so components below 1e-4 are judged against a 1e-4 floor.
    # About 1 draw in 500 puts a ReLU pre-activation within eps of zero; the
    # step then straddles the kink. Such a layer must pass at a smaller step,
    # which a wrong analytic gradient would not.
    @settings(max_examples=100)
    @given(st.integers(0, 10_000))
    def test_every_layer_type(self, seed):
        rng = seeded_rng(seed)
        for check in (check_dense, check_mlp, check_netvlad, check_gem, check_gating):
            state = copy.deepcopy(rng)
            worst = max(r.max_rel_error for r in check(rng, floor=1e-4).values())
            if worst >= 1e-6:
                worst = min(max(r.max_rel_error for r in
                                check(copy.deepcopy(state), eps=eps, floor=1e-4).values())
                            for eps in (1e-6, 1e-7))
                assert worst < 1e-5, (check.__name__, worst)


class TestAdam:
    def test_zero_gradients_leave_params(self):
        p = {"w": np.array([1.0, -2.0])}
        state = OptimizerState()
        adam_step(p, {"w": np.zeros(2)}, state, 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_hand_computed(self):
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([1.0])}, OptimizerState(), 1e-3)
        assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_running_max_holds(self):
        p = {"w": np.array([0.0])}
        state = OptimizerState()
        adam_step(p, {"w": np.array([1.0])}, state, 1e-3)
        after_first = state.v_max["w"].copy()
        adam_step(p, {"w": np.array([0.1])}, state, 1e-3)
        np.testing.assert_array_equal(state.v_max["w"], after_first)

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=20))
    def test_max_moment_non_decreasing(self, grads):
        p = {"w": np.zeros(1)}
        state = OptimizerState()
        prev = np.zeros(1)
        for g in grads:
            adam_step(p, {"w": np.array([g])}, state, 1e-3)
            assert np.all(state.v_max["w"] >= prev)
            prev = state.v_max["w"].copy()

    def test_bad_inputs(self):
        with pytest.raises(DomainError):
            adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, OptimizerState(), 0.0)
        with pytest.raises(NumericError):
            adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, OptimizerState(), 1e-3)


class TestSchedule:
    sched = LrSchedule(1e-4, 10, 50, 1e-6)

    def test_endpoints(self):
        assert lr_at(self.sched, 10) == pytest.approx(1e-4)
        assert lr_at(self.sched, 50) == pytest.approx(1e-6)
        assert lr_at(self.sched, 30) == pytest.approx((1e-4 + 1e-6) / 2)

    def test_continuous_at_warm_boundary(self):
        assert lr_at(self.sched, 9) == lr_at(self.sched, 10)

    @given(st.floats(10, 49.999))
    def test_non_increasing(self, epoch):
        assert lr_at(self.sched, epoch + 1e-3) <= lr_at(self.sched, epoch) + 1e-18

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            lr_at(self.sched, 51)
        with pytest.raises(DomainError):
            LrSchedule(1e-4, 10, 5)


class TestRng:
    def test_same_seed(self):
        assert np.array_equal(seeded_rng(3).random(1000), seeded_rng(3).random(1000))

    def test_different_seeds(self):
        assert not np.array_equal(seeded_rng(1).random(10), seeded_rng(2).random(10))

    def test_state_round_trip(self):
        rng = seeded_rng(5)
        rng.random(17)
        state = json.loads(json.dumps(rng_state(rng)))
        expected = rng.random(100)
        np.testing.assert_array_equal(restore_rng(state).random(100), expected)


def test_l2_normalize_zero_row():
    y, _ = l2_normalize(np.array([[0.0, 0.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(y, [[0.0, 0.0], [0.6, 0.8]])
    assert math.isclose(float(np.linalg.norm(y[1])), 1.0)
