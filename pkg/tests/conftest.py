import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gated_fusion.corpus import ExpertSpec, SyntheticSpec, generate_synthetic

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY_DIMS = dict(common_dim=8, gate_hidden=8, clip_hidden=16, clip_dim=8, seq_hidden=16,
                 seq_dim=8, bottleneck_hidden=16, bottleneck_dim=12, cls_hidden=16,
                 proj_hidden=8, proj_dim=6, netvlad_clusters=2, n_clips=3, n_sequences=2)


def tiny_spec(**kw):
    base = dict(n_genres=4, substyles_per_genre=2, n_trailers=24,
                experts=[ExpertSpec("appearance", 6), ExpertSpec("audio", 4)],
                clips=(10, 14), noise_sigma=0.3, seed=0)
    base.update(kw)
    return SyntheticSpec(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(tiny_spec())


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    from gated_fusion import GatedFusionClassifier
    est = GatedFusionClassifier(**TINY_DIMS, epochs=4, batch_size=8, learning_rate=1e-3,
                                finetune_epochs=2, warm_epochs=1, finetune_batch_size=8,
                                seq_head_epochs=3, random_state=0)
    return est.fit(tiny_corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> "PASS/FAIL criterion N: detail", filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
