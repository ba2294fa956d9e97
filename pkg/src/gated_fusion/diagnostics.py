"""Finite-difference gradient checks of every layer type and the full network.

All checks run in float64 on tiny widths so that a relative error of 1e-5
separates correct backprop from a wrong one with a wide margin.
"""

import numpy as np

from .aggregation import NetVLAD
from .corpus import ExpertSpec, SyntheticSpec, generate_synthetic
from .fusion import (ExpertConfig, FusionConfig, FusionNetwork, GatedEmbeddingModule,
                     GatingUnit, build_clip_batch, pack_sequences, prepare_trailer,
                     split_views)
from .losses import BceConfig, NtxentConfig, batch_contrastive_loss, bce_with_logits
from .numeric import (MLP, Dense, GradCheckResult, grad_check, l2_normalize,
                      l2_normalize_backward, relative_error, seeded_rng)

_F64 = np.float64


def jitter_biases(module, rng, scale=0.1):
    """Move every bias off zero.

    Zero-initialised biases put dead ReLU rows exactly on the kink, where
    central differences and the analytic subgradient legitimately disagree.
    """
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.value[...] = scale * rng.standard_normal(p.value.shape)
    return module


def _linear_objective(module, x, rng, forward=None, backward=None):
    """Loss ``sum(r * f(x))`` for a fixed random ``r``."""
    forward = forward or module.forward
    backward = backward or module.backward
    out, _ = forward(x)
    r = rng.standard_normal(out.shape)

    def objective(need_grad):
        y, cache = forward(x)
        if need_grad:
            backward(cache, r)
        return float(np.sum(r * y))

    return objective


def check_dense(rng, eps=1e-5, floor=1e-12):
    out = {}
    for act in ("identity", "relu", "sigmoid"):
        layer = jitter_biases(Dense(5, 4, act, rng=rng, dtype=_F64), rng)
        x = rng.standard_normal((6, 5))
        out[f"dense[{act}]"] = grad_check(_linear_objective(layer, x, rng),
                                          layer.parameters(), eps, floor=floor)
    return out


def check_mlp(rng, eps=1e-5, floor=1e-12):
    mlp = jitter_biases(MLP([5, 7, 3], rng, dtype=_F64), rng)
    x = rng.standard_normal((4, 5))
    return {"mlp": grad_check(_linear_objective(mlp, x, rng), mlp.parameters(), eps,
                              floor=floor)}


def check_l2_normalize(rng, eps=1e-5, floor=1e-12):
    """Input gradient of the row-wise L2 normalisation against central differences."""
    x = rng.standard_normal((3, 4))
    r = rng.standard_normal(x.shape)
    _, cache = l2_normalize(x)
    analytic = l2_normalize_backward(cache, r)
    numeric = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = np.sum(r * l2_normalize(x)[0])
        x[idx] = orig - eps
        down = np.sum(r * l2_normalize(x)[0])
        x[idx] = orig
        numeric[idx] = (up - down) / (2 * eps)
    err = relative_error(analytic, numeric, floor)
    return {"l2_normalize": GradCheckResult(float(err.max()), None, {"x": float(err.max())},
                                            x.size)}


def check_netvlad(rng, eps=1e-5, floor=1e-12):
    vlad = jitter_biases(NetVLAD(3, 2, rng, _F64), rng)
    frames = rng.standard_normal((7, 3))
    vlad.init_centers(frames, rng)
    offsets = np.array([0, 3, 7])
    obj = _linear_objective(vlad, frames, rng, forward=lambda x: vlad.forward(x, offsets))
    return {"netvlad": grad_check(obj, vlad.parameters(), eps, floor=floor)}


def check_gem(rng, eps=1e-5, floor=1e-12):
    gem = jitter_biases(GatedEmbeddingModule(4, rng, _F64), rng)
    x = rng.standard_normal((5, 4))
    return {"gem": grad_check(_linear_objective(gem, x, rng), gem.parameters(), eps,
                              floor=floor)}


def check_gating(rng, eps=1e-5, floor=1e-12):
    unit = jitter_biases(GatingUnit(4, 5, rng, _F64), rng)
    psi = rng.standard_normal((3, 2, 4))
    return {"gating": grad_check(_linear_objective(unit, psi, rng), unit.parameters(), eps,
                                 floor=floor)}


def tiny_network(seed=0, gating=True):
    """A float64 network with every layer type plus a few matching trailers.

    Biases are jittered off zero (see :func:`jitter_biases`); otherwise a clip
    whose ReLUs are all dead maps to the zero vector, where the L2
    normalisation is not differentiable.
    """
    spec = SyntheticSpec(n_genres=3, substyles_per_genre=1, n_trailers=4,
                         experts=[ExpertSpec("visual", 5, (1, 3)), ExpertSpec("sound", 3, (2, 3))],
                         clips=(4, 6), cardinality_weights=(0.5, 0.5), seed=seed)
    corpus = generate_synthetic(spec)
    config = FusionConfig(
        experts=[ExpertConfig("visual", 5, "mean"), ExpertConfig("sound", 3, "netvlad")],
        n_genres=3, common_dim=4, gate_hidden=5, clip_hidden=8, clip_dim=3, seq_hidden=8,
        seq_dim=3, bottleneck_hidden=8, bottleneck_dim=4, cls_hidden=6, proj_hidden=8,
        proj_dim=3, n_clips=2, n_sequences=2, netvlad_clusters=2, gating=gating)
    rng = seeded_rng(seed)
    network = FusionNetwork(config, rng, _F64)
    frames = np.concatenate([c for r in corpus.records for c in r.tracks["sound"].clips])
    network.netvlad["sound"].init_centers(frames, rng)
    network.add_sequence_head(rng)
    jitter_biases(network, rng)
    trailers = [prepare_trailer(r, config, _F64) for r in corpus.records]
    return network, trailers


def check_network_supervised(seed=0, eps=1e-5, floor=1e-12, gating=True):
    """Weighted BCE through classifier, encoder stack, gating, GEM and NetVLAD,
    plus the sequence head on the per-sequence embeddings."""
    network, trailers = tiny_network(seed, gating)
    cfg = network.config
    slots = [pack_sequences(t.windows(cfg.n_clips), cfg.n_sequences) for t in trailers]
    batch = build_clip_batch(trailers, slots, cfg, _F64)
    y = np.stack([t.labels for t in trailers]).astype(_F64)
    bce = BceConfig(pos_weight=np.array([1.0, 2.0, 3.0]))
    head = network.sequence_head

    def objective(need_grad):
        emb, seq, cache = network.encode(batch)
        logits, ccache = network.classify(emb)
        loss, dlogits = bce_with_logits(logits, y, bce)
        flat = seq.reshape(-1, cfg.seq_dim)
        slog, scache = head.forward(flat)
        sloss, dslog = bce_with_logits(slog, np.repeat(y, cfg.n_sequences, axis=0), bce)
        if need_grad:
            demb = network.classifier.backward(ccache, dlogits)
            dseq = head.backward(scache, dslog)
            network.backward_encode(cache, demb, dseq.reshape(seq.shape))
        return loss + sloss

    name = "network[bce]" if gating else "network[bce,no-gating]"
    return {name: grad_check(objective, network.parameters(), eps, floor=floor)}


def check_network_contrastive(seed=0, eps=1e-5, floor=1e-12,
                              denominator="include-positive"):
    """NT-Xent through the projection heads and the encoder on half-trailer views."""
    network, trailers = tiny_network(seed)
    cfg = network.config
    views = [split_views(t.windows(cfg.n_clips)) for t in trailers]
    slots = [pack_sequences(v[0], cfg.n_sequences) for v in views] + \
            [pack_sequences(v[1], cfg.n_sequences) for v in views]
    batch = build_clip_batch(trailers + trailers, slots, cfg, _F64)
    ntx = NtxentConfig(0.5, denominator)
    B = len(trailers)
    params = {n: p for n, p in network.named_parameters() if not n.startswith(("classifier.",
                                                                               "sequence_head."))}

    def objective(need_grad):
        emb, _, cache = network.encode(batch)
        z, pcache = network.project(emb)
        loss, da, db = batch_contrastive_loss(z[:B], z[B:], ntx)
        if need_grad:
            demb = network.backward_project(pcache, np.concatenate([da, db]))
            network.backward_encode(cache, demb)
        return loss

    return {f"network[ntxent,{denominator}]": grad_check(objective, params, eps, floor=floor)}


def run_all(seed=0, eps=1e-5, floor=1e-12):
    """Every check; returns ``{name: GradCheckResult}``."""
    rng = seeded_rng(seed)
    results = {}
    for check in (check_dense, check_mlp, check_l2_normalize, check_netvlad, check_gem,
                  check_gating):
        results.update(check(rng, eps, floor))
    results.update(check_network_supervised(seed, eps, floor=floor))
    results.update(check_network_supervised(seed, eps, floor=floor, gating=False))
    for mode in ("include-positive", "exclude-positive"):
        results.update(check_network_contrastive(seed, eps, floor, mode))
    return results
