import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gated_fusion.aggregation import CommonProjection, NetVLAD, mean_pool, netvlad, project_common
from gated_fusion.diagnostics import check_netvlad
from gated_fusion.exceptions import ConfigurationError, DimensionError, DomainError
from gated_fusion.numeric import seeded_rng


def _vlad(dim, k, seed=0):
    return NetVLAD(dim, k, seeded_rng(seed), np.float64)


def _naive_netvlad(frames, module):
    """Loop-per-cluster reference of the soft-assignment VLAD."""
    w, b, c = module.assign_weight.value, module.assign_bias.value, module.centers.value
    blocks = []
    for k in range(module.n_clusters):
        v = np.zeros(module.dim)
        for x in frames:
            logits = w @ x + b
            a = np.exp(logits[k] - logits.max()) / np.exp(logits - logits.max()).sum()
            v += a * (x - c[k])
        n = np.linalg.norm(v)
        blocks.append(v / n if n > 0 else v)
    flat = np.concatenate(blocks)
    n = np.linalg.norm(flat)
    return flat / n if n > 0 else flat


class TestMeanPool:
    def test_identical_frames(self):
        v = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(mean_pool(np.tile(v, (5, 1))), v)

    def test_two_frames(self):
        np.testing.assert_array_equal(mean_pool([[0.0, 2.0], [2.0, 0.0]]), [1.0, 1.0])

    def test_empty(self):
        with pytest.raises(DomainError):
            mean_pool(np.zeros((0, 3)))

    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        frames = rng.standard_normal((int(rng.integers(1, 12)), 4))
        np.testing.assert_allclose(mean_pool(frames[rng.permutation(len(frames))]),
                                   mean_pool(frames), rtol=1e-12, atol=1e-12)


class TestNetVLAD:
    def test_matches_naive_loop(self, rng):
        module = _vlad(3, 4)
        frames = rng.standard_normal((6, 3))
        np.testing.assert_allclose(netvlad(frames, module), _naive_netvlad(frames, module),
                                   rtol=1e-12, atol=1e-14)

    def test_single_cluster_collapse(self, rng):
        module = _vlad(4, 1)
        frames = rng.standard_normal((5, 4))
        resid = (frames - module.centers.value[0]).sum(axis=0)
        np.testing.assert_allclose(netvlad(frames, module), resid / np.linalg.norm(resid),
                                   rtol=1e-12)

    def test_frame_at_center_is_zero(self):
        module = _vlad(3, 1)
        out = netvlad(module.centers.value.copy(), module)
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_segments_match_separate_calls(self, rng):
        module = _vlad(3, 2)
        frames = rng.standard_normal((7, 3))
        out, _ = module.forward(frames, np.array([0, 2, 7]))
        np.testing.assert_allclose(out[0], netvlad(frames[:2], module), rtol=1e-12)
        np.testing.assert_allclose(out[1], netvlad(frames[2:], module), rtol=1e-12)

    def test_errors(self):
        module = _vlad(3, 2)
        with pytest.raises(DomainError):
            netvlad(np.zeros((0, 3)), module)
        with pytest.raises(DimensionError):
            netvlad(np.zeros((2, 4)), module)
        with pytest.raises(DomainError):
            NetVLAD(3, 0, seeded_rng(0))

    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_permutation_invariant_unit_norm(self, seed, k):
        rng = np.random.default_rng(seed)
        module = _vlad(3, k, seed)
        frames = rng.standard_normal((int(rng.integers(1, 10)), 3))
        out = netvlad(frames, module)
        np.testing.assert_allclose(netvlad(frames[rng.permutation(len(frames))], module), out,
                                   rtol=1e-10, atol=1e-12)
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)

    def test_gradcheck(self):
        for seed in range(5):
            result = check_netvlad(seeded_rng(seed))["netvlad"]
            assert result.max_rel_error < 1e-5


class TestProjection:
    def _proj(self, init="glorot"):
        return CommonProjection({"appearance": 8, "audio": 12}, 16, seeded_rng(0), np.float64,
                                init=init)

    def test_zero_input_gives_zero_bias(self):
        np.testing.assert_array_equal(project_common(np.zeros(8), "appearance", self._proj()),
                                      np.zeros(16))

    def test_netvlad_output_to_common_width(self, rng):
        vlad = _vlad(3, 4)
        proj = CommonProjection({"audio": vlad.out_dim}, 768, rng, np.float64)
        out = project_common(netvlad(rng.standard_normal((5, 3)), vlad), "audio", proj)
        assert out.shape == (768,)

    def test_identity_passthrough(self, rng):
        proj = CommonProjection({"x": 6}, 6, rng, np.float64, init="identity")
        v = rng.standard_normal(6)
        np.testing.assert_array_equal(project_common(v, "x", proj), v)

    def test_unknown_expert(self):
        with pytest.raises(ConfigurationError, match="motion"):
            project_common(np.zeros(8), "motion", self._proj())

    def test_every_expert_common_width(self, rng):
        proj = self._proj()
        for name, d in (("appearance", 8), ("audio", 12)):
            assert project_common(rng.standard_normal(d), name, proj).shape == (16,)
