import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gated_fusion import GatedFusionClassifier
from gated_fusion._validation import check_label_matrix, check_trailers
from gated_fusion.evaluation import thresholded_prf
from gated_fusion.exceptions import ConfigurationError, DimensionError, DomainError

from .conftest import TINY_DIMS


def test_get_params_round_trip():
    est = GatedFusionClassifier(**TINY_DIMS, epochs=3)
    params = est.get_params()
    assert params["epochs"] == 3 and params["common_dim"] == 8
    assert GatedFusionClassifier(**params).get_params() == params


def test_clone_is_unfitted():
    est = clone(GatedFusionClassifier(**TINY_DIMS, learning_rate=1e-3))
    assert est.learning_rate == 1e-3 and not hasattr(est, "network_")


def test_set_params():
    est = GatedFusionClassifier().set_params(finetune_epochs=7)
    assert est.finetune_epochs == 7


def test_not_fitted(tiny_corpus):
    est = GatedFusionClassifier(**TINY_DIMS)
    with pytest.raises(NotFittedError):
        est.predict(tiny_corpus)
    with pytest.raises(NotFittedError):
        est.transform(tiny_corpus)


def test_published_defaults():
    p = GatedFusionClassifier().get_params()
    assert (p["learning_rate"], p["batch_size"], p["epochs"]) == (3e-5, 32, 200)
    assert (p["finetune_lr"], p["finetune_epochs"], p["warm_epochs"]) == (1e-4, 50, 10)
    assert (p["temperature"], p["threshold"], p["bottleneck_dim"]) == (0.5, 0.3, 2048)


class TestFitted:
    def test_outputs(self, tiny_model, tiny_corpus):
        n, G = len(tiny_corpus), len(tiny_corpus.genres)
        proba = tiny_model.predict_proba(tiny_corpus)
        assert proba.shape == (n, G) and np.all((proba > 0) & (proba < 1))
        assert set(np.unique(tiny_model.predict(tiny_corpus))) <= {0, 1}
        assert tiny_model.transform(tiny_corpus).shape == (n, 12)
        assert 0 <= tiny_model.score(tiny_corpus) <= 1
        assert tiny_model.genres_ == tiny_corpus.genres

    def test_explicit_labels_override(self, tiny_model, tiny_corpus):
        y = np.zeros((len(tiny_corpus), len(tiny_corpus.genres)), int)
        y[:, 0] = 1
        expected = thresholded_prf(tiny_model.predict_proba(tiny_corpus), y, 0.3)[2]
        assert tiny_model.score(tiny_corpus, y) == expected
        with pytest.raises(DimensionError):
            tiny_model.score(tiny_corpus, y[:, :2])
        with pytest.raises(DimensionError):
            tiny_model.score(tiny_corpus, y[:3])

    def test_checkpoint_round_trip(self, tiny_model, tiny_corpus, tmp_path):
        tiny_model.save(tmp_path / "m.gfck")
        back = GatedFusionClassifier.from_checkpoint(tmp_path / "m.gfck")
        assert back.get_params() == tiny_model.get_params()
        np.testing.assert_array_equal(back.decision_function(tiny_corpus),
                                      tiny_model.decision_function(tiny_corpus))

    def test_fit_is_deterministic(self, tiny_model, tiny_corpus):
        again = clone(tiny_model).fit(tiny_corpus)
        np.testing.assert_array_equal(again.decision_function(tiny_corpus),
                                      tiny_model.decision_function(tiny_corpus))

    def test_bad_dtype(self, tiny_corpus):
        with pytest.raises(ConfigurationError):
            GatedFusionClassifier(**TINY_DIMS, epochs=1, dtype="float16").fit(tiny_corpus)


def test_input_validation(tiny_corpus):
    assert len(check_trailers(tiny_corpus.records[0])) == 1
    with pytest.raises(TypeError):
        check_trailers([1, 2])
    with pytest.raises(DomainError):
        check_trailers([])
    with pytest.raises(DomainError):
        check_label_matrix([[0, 2]])
