"""Collaborative gating, gated embedding modules and the clip/sequence/trailer encoder.

Data flow for a batch of trailers::

    frames --pool--> per-expert clip vectors --project--> Psi (E, U, D)
    Psi --gating--> T; Psi * sigmoid(T) --GEM--> concat --clip MLP--> unit 128-d clips
    clips --gather into windows of n_clips--> sequence MLP --> (N, S, 256)
    sequences --concat--> bottleneck MLP --> (N, 2048)

Heads on the bottleneck: the genre classifier ``l`` and the contrastive
projection ``m`` then ``n``. A separate sequence-level readout maps each
256-d sequence embedding to genre logits.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .aggregation import CommonProjection, NetVLAD, mean_pool
from .corpus import DEFAULT_EXPERT_DIMS
from .exceptions import ConfigurationError, DimensionError, DomainError, StateError
from .numeric.layers import (MLP, Dense, Module, ModuleDict, l2_normalize,
                             l2_normalize_backward)

POOLINGS = ("mean", "netvlad")


@dataclass
class ExpertConfig:
    name: str
    native_dim: int
    pooling: str = "mean"

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ConfigurationError(f"unknown pooling {self.pooling!r} for expert {self.name!r}")


def default_experts():
    return [ExpertConfig(name, dim, "netvlad" if name == "audio" else "mean")
            for name, dim in DEFAULT_EXPERT_DIMS.items()]


@dataclass
class FusionConfig:
    """Layer widths of the fusion network. Defaults follow the published sizes."""

    experts: list = field(default_factory=default_experts)
    n_genres: int = 20
    common_dim: int = 768
    gate_hidden: int = 768
    clip_hidden: int = 512
    clip_dim: int = 128
    seq_hidden: int = 512
    seq_dim: int = 256
    bottleneck_hidden: int = 4096
    bottleneck_dim: int = 2048
    cls_hidden: int = 1024
    proj_hidden: int = 512
    proj_dim: int = 128
    n_clips: int = 9
    n_sequences: int = 4
    netvlad_clusters: int = 8
    gating: bool = True

    def __post_init__(self):
        self.experts = [e if isinstance(e, ExpertConfig) else ExpertConfig(**e)
                        for e in self.experts]
        names = [e.name for e in self.experts]
        if not names:
            raise ConfigurationError("at least one expert is required")
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate expert names in {names}")
        for key in ("n_genres", "common_dim", "gate_hidden", "clip_hidden", "clip_dim",
                    "seq_hidden", "seq_dim", "bottleneck_hidden", "bottleneck_dim",
                    "cls_hidden", "proj_hidden", "proj_dim", "n_clips", "n_sequences",
                    "netvlad_clusters"):
            if int(getattr(self, key)) < 1:
                raise ConfigurationError(f"{key} must be positive")
        if self.gating and len(self.experts) < 2:
            raise ConfigurationError("collaborative gating needs at least two experts")

    @property
    def expert_names(self):
        return [e.name for e in self.experts]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# sequence packing

def sequence_windows(clip_count, n_clips):
    """Consecutive non-overlapping windows of ``n_clips`` clip indices.

    Trailing clips that do not fill a window are dropped; a trailer shorter
    than one window is repeated circularly to fill it.
    """
    if clip_count < 1:
        raise DomainError("trailer has no clips")
    n_full = clip_count // n_clips
    if n_full == 0:
        return (np.arange(n_clips) % clip_count)[None, :]
    return np.arange(n_full * n_clips).reshape(n_full, n_clips)


def pack_sequences(windows, n_sequences):
    """Wrap-pad (or truncate) a window list to exactly ``n_sequences`` rows."""
    windows = np.asarray(windows)
    if len(windows) == 0:
        raise DomainError("no sequences to pack")
    return windows[np.arange(n_sequences) % len(windows)]


def split_views(sequences):
    """Split a trailer's sequences into first and second halves.

    An odd count drops the final sequence so both views have equal length.
    """
    n = len(sequences)
    if n < 2:
        raise DomainError(f"view splitting needs at least 2 sequences, got {n}")
    half = n // 2
    return sequences[:half], sequences[half:2 * half]


# ---------------------------------------------------------------------------
# prepared inputs

@dataclass
class PreparedTrailer:
    """A trailer's expert tracks reduced to what the network consumes.

    ``dense`` maps expert -> (clips, width) matrix of mean-pooled or
    pre-aggregated clip vectors; ``frames`` maps expert -> (frames, offsets)
    for experts pooled inside the network.
    """

    trailer_id: str
    labels: np.ndarray
    clip_count: int
    dense: dict
    frames: dict

    def windows(self, n_clips):
        return sequence_windows(self.clip_count, n_clips)


def prepare_trailer(record, config, dtype=np.float32):
    dense, frames = {}, {}
    for expert in config.experts:
        track = record.tracks.get(expert.name)
        if track is None:
            continue
        if track.native_dim != expert.native_dim and not (
                track.level == "clip" and expert.pooling == "netvlad"):
            raise ConfigurationError(
                f"trailer {record.trailer_id!r}: expert {expert.name!r} has width "
                f"{track.native_dim}, network expects {expert.native_dim}")
        if track.level == "clip":
            if expert.pooling == "netvlad" and track.native_dim != \
                    expert.native_dim * config.netvlad_clusters:
                raise ConfigurationError(
                    f"pre-aggregated {expert.name!r} vectors must have width "
                    f"{expert.native_dim * config.netvlad_clusters}")
            dense[expert.name] = np.concatenate(track.clips, axis=0).astype(dtype)
        elif expert.pooling == "mean":
            dense[expert.name] = np.stack([mean_pool(c) for c in track.clips]).astype(dtype)
        else:
            counts = [c.shape[0] for c in track.clips]
            offsets = np.concatenate([[0], np.cumsum(counts)])
            frames[expert.name] = (np.concatenate(track.clips, axis=0).astype(dtype), offsets)
    unknown = set(record.tracks) - set(config.expert_names)
    if unknown:
        raise ConfigurationError(
            f"trailer {record.trailer_id!r} has experts {sorted(unknown)} unknown to the network")
    if not dense and not frames:
        raise DomainError(f"trailer {record.trailer_id!r} has none of the network's experts")
    return PreparedTrailer(record.trailer_id, np.asarray(record.labels), record.clip_count,
                           dense, frames)


@dataclass
class ClipBatch:
    """Unique clips referenced by a batch, plus where each sequence slot reads from."""

    n_clips_unique: int
    dense: dict
    frames: dict
    present: dict
    gather: np.ndarray      # (N, S * n_clips) indices into the unique clips


def build_clip_batch(trailers, slots, config, dtype):
    """Collect the clips addressed by ``slots`` (one (S, n_clips) array per trailer)."""
    uniques, gathers, offset = [], [], 0
    for slot in slots:
        flat = np.asarray(slot).reshape(-1)
        u = np.unique(flat)
        uniques.append(u)
        gathers.append(offset + np.searchsorted(u, flat))
        offset += len(u)
    U = offset
    dense, frames, present = {}, {}, {}
    for expert in config.experts:
        name = expert.name
        mask = np.zeros(U, dtype=bool)
        pos = 0
        for tr, u in zip(trailers, uniques):
            if name in tr.dense or name in tr.frames:
                mask[pos:pos + len(u)] = True
            pos += len(u)
        present[name] = mask
        if not mask.any():
            continue
        if any(name in tr.frames for tr in trailers):
            rows, counts = [], []
            for tr, u in zip(trailers, uniques):
                if name not in tr.frames:
                    continue
                fr, off = tr.frames[name]
                for c in u:
                    rows.append(fr[off[c]:off[c + 1]])
                    counts.append(off[c + 1] - off[c])
            frames[name] = (np.concatenate(rows).astype(dtype, copy=False),
                            np.concatenate([[0], np.cumsum(counts)]))
        else:
            parts = [tr.dense[name][u] for tr, u in zip(trailers, uniques) if name in tr.dense]
            dense[name] = np.concatenate(parts).astype(dtype, copy=False)
    return ClipBatch(U, dense, frames, present, np.stack(gathers))


# ---------------------------------------------------------------------------
# modules

def modulate(psi, t):
    """Scale ``psi`` element-wise by ``sigmoid(t)``."""
    psi, t = np.asarray(psi), np.asarray(t)
    if psi.shape != t.shape:
        raise DimensionError(f"modulate shapes differ: {psi.shape} vs {t.shape}")
    return psi * expit(t)


class GatingUnit(Module):
    """Pairwise relation MLP ``g`` and attention MLP ``h`` shared by all experts.

    ``T_e = h(sum_{f != e} g([psi_e, psi_f]))``. Because the first layer of
    ``g`` is linear in the concatenation, its two halves are applied to each
    expert once and combined per pair before the ReLU.
    """

    def __init__(self, dim, hidden, rng, dtype=np.float32):
        super().__init__()
        self.dim = int(dim)
        self.g = MLP([2 * dim, hidden, dim], rng, dtype=dtype)
        self.h = MLP([dim, dim, dim], rng, dtype=dtype)

    def forward(self, psi):
        """``psi`` has shape (E, U, D); returns attention vectors of the same shape."""
        E = psi.shape[0]
        if E < 2:
            raise DomainError("attention needs at least two experts")
        if psi.shape[-1] != self.dim:
            raise DimensionError(f"gating expects width {self.dim}, got {psi.shape[-1]}")
        g_in, g_out = self.g.layers[0], self.g.layers[1]
        w = g_in.weight.value
        left = psi @ w[:, :self.dim].T
        right = psi @ w[:, self.dim:].T
        pre = left[:, None] + right[None, :] + g_in.bias.value      # (E, E, U, H)
        keep = ~np.eye(E, dtype=bool)
        act = np.maximum(pre, 0) * keep[:, :, None, None]
        pair_sum = np.zeros_like(left)
        for f in range(E):
            pair_sum += act[:, f]
        relation = pair_sum @ g_out.weight.value.T + (E - 1) * g_out.bias.value
        t, h_cache = self.h.forward(relation.reshape(-1, self.dim))
        cache = (psi, pre, keep, pair_sum, h_cache)
        return t.reshape(psi.shape), cache

    def backward(self, cache, dt):
        psi, pre, keep, pair_sum, h_cache = cache
        E = psi.shape[0]
        g_in, g_out = self.g.layers[0], self.g.layers[1]
        drel = self.h.backward(h_cache, dt.reshape(-1, self.dim)).reshape(psi.shape[0], -1, self.dim)
        g_out.weight.grad += np.einsum("eud,euh->dh", drel, pair_sum)
        g_out.bias.grad += (E - 1) * drel.sum(axis=(0, 1))
        dsum = drel @ g_out.weight.value                              # (E, U, H)
        dpre = dsum[:, None] * ((pre > 0) & keep[:, :, None, None])   # (E, E, U, H)
        dleft = dpre.sum(axis=1)
        dright = dpre.sum(axis=0)
        w = g_in.weight.value
        g_in.weight.grad[:, :self.dim] += np.einsum("euh,eud->hd", dleft, psi)
        g_in.weight.grad[:, self.dim:] += np.einsum("euh,eud->hd", dright, psi)
        g_in.bias.grad += dleft.sum(axis=(0, 1))
        return dleft @ w[:, :self.dim] + dright @ w[:, self.dim:]


def attention_vector(psi, e, gating):
    """Attention vector for expert ``e`` given stacked (E, D) expert embeddings."""
    psi = np.asarray(psi, dtype=gating.dtype)
    t, _ = gating.forward(psi[:, None, :])
    return t[e, 0]


class GatedEmbeddingModule(Module):
    """``z = W1 x + b1``; ``y = z * sigmoid(W2 z + b2)``; output ``y / |y|``."""

    def __init__(self, dim, rng, dtype=np.float32):
        super().__init__()
        self.linear = Dense(dim, dim, "identity", rng=rng, dtype=dtype)
        self.gate = Dense(dim, dim, "sigmoid", rng=rng, dtype=dtype)

    def forward(self, x):
        z, c1 = self.linear.forward(x)
        s, c2 = self.gate.forward(z)
        y, cn = l2_normalize(z * s)
        return y, (z, s, c1, c2, cn)

    def backward(self, cache, dout):
        z, s, c1, c2, cn = cache
        dy = l2_normalize_backward(cn, dout)
        dz = dy * s + self.gate.backward(c2, dy * z)
        return self.linear.backward(c1, dz)


def gem_forward(x, gem):
    return gem.forward(x)[0]


class FusionNetwork(Module):
    """The full trainable network; see the module docstring for the data flow."""

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__()
        self.config = config
        D = config.common_dim
        self.netvlad = ModuleDict({
            e.name: NetVLAD(e.native_dim, config.netvlad_clusters, rng, dtype)
            for e in config.experts if e.pooling == "netvlad"})
        in_dims = {e.name: (e.native_dim * config.netvlad_clusters if e.pooling == "netvlad"
                            else e.native_dim) for e in config.experts}
        self.projection = CommonProjection(in_dims, D, rng, dtype)
        if config.gating:
            self.gating = GatingUnit(D, config.gate_hidden, rng, dtype)
        self.gems = ModuleDict({e.name: GatedEmbeddingModule(D, rng, dtype)
                                for e in config.experts})
        E = len(config.experts)
        self.clip_mlp = MLP([E * D, config.clip_hidden, config.clip_dim], rng, dtype=dtype)
        self.sequence_mlp = MLP([config.n_clips * config.clip_dim, config.seq_hidden,
                                 config.seq_dim], rng, dtype=dtype)
        self.bottleneck = MLP([config.n_sequences * config.seq_dim, config.bottleneck_hidden,
                               config.bottleneck_dim], rng, dtype=dtype)
        self.classifier = MLP([config.bottleneck_dim, config.cls_hidden, config.n_genres],
                              rng, dtype=dtype)
        self.head_m = Dense(config.bottleneck_dim, config.proj_hidden, "relu", rng=rng, dtype=dtype)
        self.head_n = Dense(config.proj_hidden, config.proj_dim, "identity", rng=rng, dtype=dtype)
        self.sequence_head = None

    def add_sequence_head(self, rng):
        self.sequence_head = Dense(self.config.seq_dim, self.config.n_genres, "identity",
                                   rng=rng, dtype=self.dtype)
        return self.sequence_head

    def trunk_parameters(self):
        """Parameters of everything except the heads."""
        heads = ("classifier.", "head_m.", "head_n.", "sequence_head.")
        return {n: p for n, p in self.named_parameters() if not n.startswith(heads)}

    # -- clips -------------------------------------------------------------

    def encode_clips(self, batch):
        """Unit-norm clip embeddings (U, clip_dim) for a ``ClipBatch``."""
        cfg = self.config
        dtype = self.dtype
        U = batch.n_clips_unique
        psi = np.zeros((len(cfg.experts), U, cfg.common_dim), dtype=dtype)
        expert_caches = []
        for i, expert in enumerate(cfg.experts):
            name = expert.name
            mask = batch.present[name]
            if not mask.any():
                expert_caches.append(None)
                continue
            vlad_cache = None
            if name in batch.frames:
                fr, off = batch.frames[name]
                agg, vlad_cache = self.netvlad[name].forward(fr.astype(dtype, copy=False), off)
            else:
                agg = batch.dense[name].astype(dtype, copy=False)
            out, proj_cache = self.projection.forward(agg, name)
            psi[i, mask] = out
            expert_caches.append((vlad_cache, proj_cache))
        clip, fuse_cache = self.fuse_experts(psi)
        return clip, (batch, expert_caches, fuse_cache)

    def fuse_experts(self, psi):
        """Gate, GEM, concatenate and project (E, U, D) expert embeddings to clips."""
        cfg = self.config
        if cfg.gating:
            t, gate_cache = self.gating.forward(psi)
            sig = expit(t)
            modulated = psi * sig
        else:
            gate_cache, sig, modulated = None, None, psi
        gem_out, gem_caches = [], []
        for i, expert in enumerate(cfg.experts):
            y, c = self.gems[expert.name].forward(modulated[i])
            gem_out.append(y)
            gem_caches.append(c)
        concat = np.concatenate(gem_out, axis=1)
        clip_raw, clip_cache = self.clip_mlp.forward(concat)
        clip, norm_cache = l2_normalize(clip_raw)
        return clip, (psi, gate_cache, sig, gem_caches, clip_cache, norm_cache)

    def backward_fuse(self, cache, dclip):
        psi, gate_cache, sig, gem_caches, clip_cache, norm_cache = cache
        cfg = self.config
        D = cfg.common_dim
        dconcat = self.clip_mlp.backward(clip_cache, l2_normalize_backward(norm_cache, dclip))
        dmod = np.stack([self.gems[e.name].backward(gem_caches[i], dconcat[:, i * D:(i + 1) * D])
                         for i, e in enumerate(cfg.experts)])
        if not cfg.gating:
            return dmod
        dpsi = dmod * sig
        dt = dmod * psi * sig * (1 - sig)
        return dpsi + self.gating.backward(gate_cache, dt)

    def backward_clips(self, cache, dclip):
        batch, expert_caches, fuse_cache = cache
        dpsi = self.backward_fuse(fuse_cache, dclip)
        for i, expert in enumerate(self.config.experts):
            if expert_caches[i] is None:
                continue
            vlad_cache, proj_cache = expert_caches[i]
            mask = batch.present[expert.name]
            dagg = self.projection.backward(proj_cache, dpsi[i, mask], expert.name)
            if vlad_cache is not None:
                self.netvlad[expert.name].backward(vlad_cache, dagg)

    # -- trailers ----------------------------------------------------------

    def encode(self, batch):
        """Bottleneck embeddings (N, bottleneck_dim) plus the sequence embeddings."""
        cfg = self.config
        clip, clip_cache = self.encode_clips(batch)
        N = batch.gather.shape[0]
        gathered = clip[batch.gather.reshape(-1)]
        seq_in = gathered.reshape(N * cfg.n_sequences, cfg.n_clips * cfg.clip_dim)
        seq, seq_cache = self.sequence_mlp.forward(seq_in)
        emb, bott_cache = self.bottleneck.forward(seq.reshape(N, -1))
        cache = (clip.shape, clip_cache, batch.gather, seq_cache, bott_cache)
        return emb, seq.reshape(N, cfg.n_sequences, cfg.seq_dim), cache

    def backward_encode(self, cache, demb, dseq=None):
        if cache is None:
            raise StateError("backward called before forward")
        clip_shape, clip_cache, gather, seq_cache, bott_cache = cache
        cfg = self.config
        dseq_flat = self.bottleneck.backward(bott_cache, demb).reshape(-1, cfg.seq_dim)
        if dseq is not None:
            dseq_flat = dseq_flat + dseq.reshape(-1, cfg.seq_dim)
        dgathered = self.sequence_mlp.backward(seq_cache, dseq_flat).reshape(-1, cfg.clip_dim)
        dclip = np.zeros(clip_shape, dtype=dgathered.dtype)
        np.add.at(dclip, gather.reshape(-1), dgathered)
        self.backward_clips(clip_cache, dclip)

    # -- heads -------------------------------------------------------------

    def classify(self, emb):
        return self.classifier.forward(emb)

    def project(self, emb):
        hid, cm = self.head_m.forward(emb)
        z, cn = self.head_n.forward(hid)
        return z, (cm, cn)

    def backward_project(self, cache, dz):
        cm, cn = cache
        return self.head_m.backward(cm, self.head_n.backward(cn, dz))


def encode_clip(expert_embeddings, network):
    """Unit-norm clip embedding from one (E, D) stack of projected expert vectors.

    Rows of zeros stand in for missing experts.
    """
    psi = np.asarray(expert_embeddings, dtype=network.dtype)
    cfg = network.config
    if psi.ndim != 2 or psi.shape[0] == 0:
        raise DomainError("encode_clip needs at least one expert embedding")
    if psi.shape != (len(cfg.experts), cfg.common_dim):
        raise DimensionError(
            f"expected ({len(cfg.experts)}, {cfg.common_dim}) expert embeddings, got {psi.shape}")
    return network.fuse_experts(psi[:, None, :])[0][0]


def encode_sequence(clip_embeddings, network):
    """Sequence embedding of exactly ``n_clips`` clip embeddings."""
    cfg = network.config
    clips = np.asarray(clip_embeddings, dtype=network.dtype)
    if clips.ndim != 2 or clips.shape != (cfg.n_clips, cfg.clip_dim):
        raise DimensionError(
            f"expected ({cfg.n_clips}, {cfg.clip_dim}) clip embeddings, got {clips.shape}")
    return network.sequence_mlp.forward(clips.reshape(1, -1))[0][0]


def encode_trailer(sequence_embeddings, network):
    cfg = network.config
    seqs = np.asarray(sequence_embeddings, dtype=network.dtype)
    if seqs.shape != (cfg.n_sequences, cfg.seq_dim):
        raise DimensionError(
            f"expected ({cfg.n_sequences}, {cfg.seq_dim}) sequence embeddings, got {seqs.shape}")
    return network.bottleneck.forward(seqs.reshape(1, -1))[0][0]


def classify_logits(embedding, network):
    return network.classifier.forward(np.asarray(embedding, dtype=network.dtype))[0]


def project_contrastive(embedding, network):
    return network.project(np.asarray(embedding, dtype=network.dtype))[0]
