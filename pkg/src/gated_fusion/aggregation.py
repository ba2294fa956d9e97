"""Temporal aggregation of frame features and projection to the shared width."""

import numpy as np

from .exceptions import ConfigurationError, DimensionError, DomainError
from .numeric.layers import Dense, Module, ModuleDict, Parameter, glorot_uniform


def mean_pool(frames):
    """Element-wise mean over the frame axis of a (frames, dim) matrix."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DomainError(f"mean_pool needs at least one frame, got shape {frames.shape}")
    return frames.mean(axis=0)


def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _safe_normalize(x, axis):
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1)
    return np.where(norm > 0, x / safe, 0), norm


def _normalize_backward(y, norm, dy, axis):
    safe = np.where(norm > 0, norm, 1)
    dx = (dy - y * np.sum(y * dy, axis=axis, keepdims=True)) / safe
    return np.where(norm > 0, dx, 0)


class NetVLAD(Module):
    """Learnable VLAD pooling with soft assignment.

    For every segment (clip) the residuals of its frames to ``K`` learned
    centers are summed under a softmax assignment, normalized per cluster and
    then globally. Output width is ``K * dim``.
    """

    def __init__(self, dim, n_clusters=8, rng=None, dtype=np.float32):
        super().__init__()
        if n_clusters < 1:
            raise DomainError("NetVLAD needs at least one cluster")
        self.dim = int(dim)
        self.n_clusters = int(n_clusters)
        self.centers = Parameter((0.1 * rng.standard_normal((n_clusters, dim))).astype(dtype))
        self.assign_weight = Parameter(glorot_uniform(rng, dim, n_clusters, dtype))
        self.assign_bias = Parameter(np.zeros(n_clusters, dtype=dtype))

    @property
    def out_dim(self):
        return self.n_clusters * self.dim

    def init_centers(self, frames, rng):
        """Seed the centers with randomly chosen rows of ``frames``."""
        frames = np.asarray(frames)
        replace = frames.shape[0] < self.n_clusters
        rows = rng.choice(frames.shape[0], self.n_clusters, replace=replace)
        self.centers.value[...] = frames[np.sort(rows)]

    def forward(self, frames, offsets=None):
        """Pool ``frames`` (F, dim) into one vector per segment.

        ``offsets`` holds segment boundaries (length n_segments + 1); a single
        segment spanning all frames is assumed when omitted.
        """
        x = np.asarray(frames, dtype=self.centers.value.dtype)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"NetVLAD expects (frames, {self.dim}), got {x.shape}")
        single = offsets is None
        if single:
            offsets = np.array([0, x.shape[0]])
        offsets = np.asarray(offsets)
        counts = np.diff(offsets)
        if len(counts) == 0 or np.any(counts < 1):
            raise DomainError("NetVLAD needs at least one frame per segment")
        starts = offsets[:-1]
        seg = np.repeat(np.arange(len(counts)), counts)

        a = _softmax(x @ self.assign_weight.value.T + self.assign_bias.value)
        mass = np.add.reduceat(a, starts, axis=0)                          # (S, K)
        ax = np.add.reduceat(a[:, :, None] * x[:, None, :], starts, axis=0)  # (S, K, d)
        vlad = ax - mass[:, :, None] * self.centers.value[None]
        intra, intra_norm = _safe_normalize(vlad, axis=2)
        flat = intra.reshape(len(counts), -1)
        out, global_norm = _safe_normalize(flat, axis=1)
        cache = (x, seg, starts, a, mass, intra, intra_norm, out, global_norm)
        return (out[0] if single else out), cache

    def backward(self, cache, dout):
        x, seg, starts, a, mass, intra, intra_norm, out, global_norm = cache
        if dout.ndim == 1:
            dout = dout[None]
        n_seg = out.shape[0]
        dflat = _normalize_backward(out, global_norm, dout, axis=1)
        dintra = dflat.reshape(n_seg, self.n_clusters, self.dim)
        dvlad = _normalize_backward(intra, intra_norm, dintra, axis=2)
        c = self.centers.value
        self.centers.grad -= np.einsum("sk,skd->kd", mass, dvlad)
        dmass = -np.einsum("skd,kd->sk", dvlad, c)
        dv_f = dvlad[seg]                                   # (F, K, d)
        da = np.einsum("fkd,fd->fk", dv_f, x) + dmass[seg]
        dx = np.einsum("fk,fkd->fd", a, dv_f)
        dlogits = a * (da - np.sum(a * da, axis=1, keepdims=True))
        self.assign_weight.grad += dlogits.T @ x
        self.assign_bias.grad += dlogits.sum(axis=0)
        dx += dlogits @ self.assign_weight.value
        return dx


def netvlad(frames, params):
    """Aggregate one clip's frames with the NetVLAD module ``params``."""
    return params.forward(frames)[0]


class CommonProjection(Module):
    """One linear map per registered expert onto the shared embedding width."""

    def __init__(self, in_dims, common_dim, rng, dtype=np.float32, init="glorot"):
        super().__init__()
        self.common_dim = int(common_dim)
        self.experts = ModuleDict({
            name: Dense(d, common_dim, "identity", rng=rng, dtype=dtype, init=init)
            for name, d in in_dims.items()})

    @property
    def names(self):
        return list(self.experts.keys())

    def layer(self, expert):
        if expert not in self.experts:
            raise ConfigurationError(f"unknown expert {expert!r}; registered: {self.names}")
        return self.experts[expert]

    def forward(self, x, expert):
        return self.layer(expert).forward(x)

    def backward(self, cache, dout, expert):
        return self.layer(expert).backward(cache, dout)


def project_common(clip_vector, expert, projection):
    return projection.forward(clip_vector, expert)[0]
