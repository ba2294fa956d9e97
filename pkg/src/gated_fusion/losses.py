"""Weighted BCE-with-logits and the NT-Xent contrastive losses, with gradients."""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import DimensionError, DomainError, NumericError

DENOMINATOR_MODES = ("include-positive", "exclude-positive")
REDUCTIONS = ("mean", "sum")


class DegenerateSimilarityError(NumericError):
    """Cosine similarity requested for a zero vector."""


@dataclass
class BceConfig:
    """Per-class positive weights ``pos_weight`` (length G, all > 0), optional
    per-sample weights and the reduction over all (sample, class) terms."""

    pos_weight: np.ndarray = None
    sample_weight: np.ndarray = None
    reduction: str = "mean"

    def __post_init__(self):
        if self.pos_weight is not None:
            self.pos_weight = np.asarray(self.pos_weight, dtype=float)
            if np.any(self.pos_weight <= 0):
                raise DomainError("positive-class weights must be > 0")
        if self.reduction not in REDUCTIONS:
            raise DomainError(f"unknown reduction {self.reduction!r}")


def positive_weights(labels, clip=(1.0, 10.0)):
    """Negatives-to-positives ratio per class, clipped to ``clip``.

    Classes without positives get the upper clip value.
    """
    labels = np.asarray(labels)
    pos = labels.sum(axis=0).astype(float)
    neg = labels.shape[0] - pos
    ratio = np.divide(neg, pos, out=np.full_like(pos, clip[1]), where=pos > 0)
    return np.clip(ratio, clip[0], clip[1])


def bce_with_logits(logits, targets, cfg=None):
    """Weighted binary cross-entropy on raw logits.

    Per term: ``-w * (p * y * log sigmoid(u) + (1 - y) * log(1 - sigmoid(u)))``
    evaluated through softplus, so large ``|u|`` never overflows.

    Returns
    -------
    loss : float
    grad : ndarray shaped like ``logits``
    """
    cfg = cfg or BceConfig()
    u = np.asarray(logits)
    y = np.asarray(targets)
    if u.shape != y.shape:
        raise DimensionError(f"logits {u.shape} and targets {y.shape} differ in shape")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("targets must be 0 or 1")
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite logits")
    y = y.astype(u.dtype)
    p = np.ones(u.shape[-1], dtype=u.dtype) if cfg.pos_weight is None else \
        cfg.pos_weight.astype(u.dtype)
    if p.shape[0] != u.shape[-1]:
        raise DimensionError(f"pos_weight has {p.shape[0]} classes, logits {u.shape[-1]}")
    if cfg.sample_weight is None:
        w = 1.0
    else:
        w = np.asarray(cfg.sample_weight, dtype=u.dtype)
        if u.ndim == 2:
            w = w[:, None]
    # log sigmoid(u) = -softplus(-u); log(1 - sigmoid(u)) = -softplus(u)
    terms = w * (p * y * np.logaddexp(0, -u) + (1 - y) * np.logaddexp(0, u))
    sig = expit(u)
    grad = w * ((p * y + 1 - y) * sig - p * y)
    if cfg.reduction == "mean":
        return float(terms.mean()), grad / terms.size
    return float(terms.sum()), grad


@dataclass
class NtxentConfig:
    temperature: float = 0.5
    denominator: str = "include-positive"
    reduction: str = "mean"

    def __post_init__(self):
        if self.temperature <= 0:
            raise DomainError("temperature must be > 0")
        if self.denominator not in DENOMINATOR_MODES:
            raise DomainError(f"unknown denominator mode {self.denominator!r}")
        if self.reduction not in REDUCTIONS:
            raise DomainError(f"unknown reduction {self.reduction!r}")


def _unit(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateSimilarityError("cosine similarity of a zero vector is undefined")
    return x / norm, norm


def ntxent_pair_loss(anchor, positive, negatives=(), cfg=None):
    """Loss of one anchor against its positive and a set of negatives."""
    cfg = cfg or NtxentConfig()
    anchor = np.asarray(anchor, dtype=float)
    others = [np.asarray(positive, dtype=float)] + [np.asarray(n, dtype=float) for n in negatives]
    a, _ = _unit(anchor)
    c, _ = _unit(np.stack(others))
    sims = c @ a / cfg.temperature
    cand = sims if cfg.denominator == "include-positive" else sims[1:]
    if cand.size == 0:
        raise DomainError("exclude-positive mode needs at least one negative")
    return float(logsumexp(cand) - sims[0])


def batch_contrastive_loss(view_a, view_b, cfg=None):
    """NT-Xent over a batch of paired views.

    Row ``i`` of ``view_a`` and row ``i`` of ``view_b`` come from the same
    trailer. Each of the ``2B`` views is an anchor once, with its sibling as
    the positive and the other ``2B - 2`` views as negatives.

    Returns
    -------
    loss : float
    grad_a, grad_b : ndarrays shaped like the inputs
    """
    cfg = cfg or NtxentConfig()
    za, zb = np.asarray(view_a), np.asarray(view_b)
    if za.shape != zb.shape or za.ndim != 2:
        raise DimensionError(f"view shapes differ or are not 2-D: {za.shape}, {zb.shape}")
    B = za.shape[0]
    if B < 2:
        raise DomainError(f"contrastive batch needs at least 2 trailers, got {B}")
    z = np.concatenate([za, zb])
    n = 2 * B
    unit, norm = _unit(z)
    sims = unit @ unit.T / cfg.temperature
    idx = np.arange(n)
    pos = (idx + B) % n
    cand = ~np.eye(n, dtype=bool)
    if cfg.denominator == "exclude-positive":
        cand[idx, pos] = False
    masked = np.where(cand, sims, -np.inf)
    lse = logsumexp(masked, axis=1)
    per_anchor = lse - sims[idx, pos]
    scale = 1.0 / n if cfg.reduction == "mean" else 1.0
    loss = float(per_anchor.sum() * scale)

    dsims = np.where(cand, np.exp(masked - lse[:, None]), 0.0)
    dsims[idx, pos] -= 1.0
    dsims *= scale
    dunit = (dsims + dsims.T) @ unit / cfg.temperature
    dz = (dunit - unit * np.sum(unit * dunit, axis=1, keepdims=True)) / norm
    dz = dz.astype(za.dtype, copy=False)
    return loss, dz[:B], dz[B:]
