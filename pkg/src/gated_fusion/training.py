"""Supervised genre training, contrastive fine-tuning and the sequence readout."""

import csv
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .checkpoint import ModelState, load_parameters, state_dict
from .evaluation import silhouette, thresholded_prf
from .exceptions import DomainError, NumericError, StateError
from .fusion import build_clip_batch, pack_sequences, split_views
from .losses import (BceConfig, NtxentConfig, batch_contrastive_loss, bce_with_logits,
                     positive_weights)
from .numeric.optim import LrSchedule, OptimizerState, adam_step, lr_at
from .numeric.rng import restore_rng, rng_state, seeded_rng

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "phase", "lr", "loss", "f1_w", "silhouette")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 200
    lr: float = 3e-5
    finetune_epochs: int = 50
    finetune_lr: float = 1e-4
    warm_epochs: int = 10
    min_lr: float = 1e-6
    finetune_batch_size: int = 32
    temperature: float = 0.5
    denominator: str = "include-positive"
    threshold: float = 0.3
    pos_weight_clip: tuple = (1.0, 10.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    amsgrad: bool = True
    seq_head_epochs: int = 100
    seq_head_lr: float = 1e-3
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.pos_weight_clip = tuple(self.pos_weight_clip)
        for key in ("batch_size", "epochs", "finetune_epochs", "finetune_batch_size",
                    "seq_head_epochs"):
            if int(getattr(self, key)) < 1:
                raise DomainError(f"{key} must be positive")
        if self.finetune_batch_size < 2:
            raise DomainError("contrastive batches need at least 2 trailers")
        if self.warm_epochs > self.finetune_epochs:
            raise DomainError("warm_epochs cannot exceed finetune_epochs")
        NtxentConfig(self.temperature, self.denominator)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    final: ModelState
    best: ModelState = None
    history: list = field(default_factory=list)
    initial_loss: float = None
    silhouette_trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# forward helpers

def full_slots(trailer, config):
    return pack_sequences(trailer.windows(config.n_clips), config.n_sequences)


def _batch(network, trailers, slots):
    return build_clip_batch(trailers, slots, network.config, network.dtype)


def embed_trailers(network, trailers, batch_size=64):
    """Bottleneck embeddings with every trailer packed from its full clip list."""
    out = []
    for i in range(0, len(trailers), batch_size):
        chunk = trailers[i:i + batch_size]
        batch = _batch(network, chunk, [full_slots(t, network.config) for t in chunk])
        emb, _, _ = network.encode(batch)
        out.append(emb)
    if not out:
        return np.zeros((0, network.config.bottleneck_dim), dtype=network.dtype)
    return np.concatenate(out)


def predict_logits(network, trailers, batch_size=64):
    emb = embed_trailers(network, trailers, batch_size)
    return network.classify(emb)[0]


def sequence_embeddings(network, trailer):
    """Embedding of every full window in ``trailer`` (no wrap-padding)."""
    cfg = network.config
    windows = trailer.windows(cfg.n_clips)
    batch = _batch(network, [trailer], [windows])
    clip, _ = network.encode_clips(batch)
    seq_in = clip[batch.gather.reshape(-1)].reshape(len(windows), cfg.n_clips * cfg.clip_dim)
    return network.sequence_mlp.forward(seq_in)[0]


def _labels(trailers):
    return np.stack([t.labels for t in trailers]).astype(np.float64)


def _check_finite(value, what, epoch, step):
    if not np.isfinite(value):
        raise NumericError(f"{what} became non-finite at epoch {epoch}, batch {step}")


def _step(network, lr, optimizer, params=None):
    params = params if params is not None else network.parameters()
    grads = OrderedDict((n, p.grad) for n, p in params.items())
    values = OrderedDict((n, p.value) for n, p in params.items())
    adam_step(values, grads, optimizer, lr)


def make_optimizer(cfg):
    return OptimizerState(cfg.beta1, cfg.beta2, cfg.eps, cfg.amsgrad)


def make_state(network, optimizer, epoch, rng, phase, cfg, extras=None, aux=None):
    return ModelState(
        config={"fusion": network.config.to_dict(), "train": cfg.to_dict(), "phase": phase},
        params=state_dict(network),
        optimizer=_copy_optimizer(optimizer) if optimizer is not None else None,
        epoch=epoch, rng_state=rng_state(rng) if rng is not None else None,
        extras=dict(extras or {}), aux=OrderedDict(aux or {}))


def _copy_optimizer(opt):
    new = OptimizerState(opt.beta1, opt.beta2, opt.eps, opt.amsgrad, opt.step)
    for attr in ("m", "v", "v_max"):
        setattr(new, attr, OrderedDict((k, v.copy()) for k, v in getattr(opt, attr).items()))
    return new


def write_log(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in LOG_FIELDS})


# ---------------------------------------------------------------------------
# supervised phase

def _mean_bce(network, trailers, bce, batch_size=64):
    if not trailers:
        return None, None
    logits = predict_logits(network, trailers, batch_size)
    y = _labels(trailers)
    loss, _ = bce_with_logits(logits.astype(np.float64), y, bce)
    return loss, logits


def train_supervised(network, train, val=(), cfg=None, pos_weight=None, resume=None,
                     stop_epoch=None):
    """Minimize weighted BCE over trailer-level logits with Adam/AMSGrad.

    ``resume`` continues from a saved state; ``stop_epoch`` ends the run early
    (used to cut a run into resumable pieces). Returns the final state, the
    best-validation state and one log row per epoch and phase.
    """
    cfg = cfg or TrainConfig()
    train, val = list(train), list(val)
    if not train:
        raise DomainError("training split is empty")
    if pos_weight is None:
        pos_weight = positive_weights(_labels(train), cfg.pos_weight_clip)
    bce = BceConfig(pos_weight=pos_weight)
    schedule = LrSchedule(cfg.lr, cfg.epochs, cfg.epochs, cfg.lr)
    if resume is not None:
        load_parameters(network, resume.params)
        optimizer = _copy_optimizer(resume.optimizer)
        rng = restore_rng(resume.rng_state)
        start = resume.epoch
        best_loss = resume.extras.get("best_val_loss")
        initial = resume.extras.get("initial_loss")
        best = None
    else:
        optimizer = make_optimizer(cfg)
        rng = seeded_rng(cfg.seed)
        start = 0
        best_loss = None
        initial, _ = _mean_bce(network, train, bce)
        best = None
    params = network.parameters()
    y_all = np.stack([t.labels for t in train]).astype(network.dtype)
    history = []
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start, end):
        lr = lr_at(schedule, epoch)
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            chunk = [train[i] for i in idx]
            network.zero_grad()
            batch = _batch(network, chunk, [full_slots(t, network.config) for t in chunk])
            emb, _, enc_cache = network.encode(batch)
            logits, cls_cache = network.classify(emb)
            loss, dlogits = bce_with_logits(logits, y_all[idx], bce)
            _check_finite(loss, "training loss", epoch, step)
            demb = network.classifier.backward(cls_cache, dlogits.astype(network.dtype))
            network.backward_encode(enc_cache, demb)
            _step(network, lr, optimizer, params)
            total += loss * len(idx)
            seen += len(idx)
        train_loss = total / seen
        history.append({"epoch": epoch, "phase": "train", "lr": lr, "loss": train_loss,
                        "f1_w": None, "silhouette": None})
        if val:
            val_loss, val_logits = _mean_bce(network, val, bce)
            _check_finite(val_loss, "validation loss", epoch, -1)
            _, _, f1 = thresholded_prf(expit(val_logits.astype(np.float64)), _labels(val),
                                       cfg.threshold)
            history.append({"epoch": epoch, "phase": "val", "lr": lr, "loss": val_loss,
                            "f1_w": f1, "silhouette": None})
            if best_loss is None or val_loss < best_loss:
                best_loss = val_loss
                best = make_state(network, optimizer, epoch + 1, rng, "supervised", cfg,
                                  {"best_val_loss": best_loss, "initial_loss": initial},
                                  {"pos_weight": np.asarray(pos_weight, dtype=np.float64)})
        logger.info("epoch %d lr %.2e train %.5f", epoch, lr, train_loss)
    extras = {"best_val_loss": best_loss, "initial_loss": initial}
    final = make_state(network, optimizer, end, rng, "supervised", cfg, extras,
                       {"pos_weight": np.asarray(pos_weight, dtype=np.float64)})
    return TrainResult(final=final, best=best, history=history, initial_loss=initial)


# ---------------------------------------------------------------------------
# contrastive phase

def view_slots(trailer, config):
    """Slot arrays of the two half-trailer views, each wrap-padded to S sequences."""
    a, b = split_views(trailer.windows(config.n_clips))
    return pack_sequences(a, config.n_sequences), pack_sequences(b, config.n_sequences)


def contrastive_batches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def finetune_contrastive(network, train, cfg=None, checkpoint=None, eval_trailers=None,
                         cluster_ids=None):
    """Self-supervised NT-Xent fine-tuning of the whole network on half-trailer views.

    ``checkpoint`` must hold the supervised weights. When ``cluster_ids`` is
    given, the silhouette of the bottleneck embeddings of ``eval_trailers``
    (default: ``train``) is recorded before training and after every epoch.
    """
    if checkpoint is None:
        raise StateError("contrastive fine-tuning needs a supervised checkpoint")
    cfg = cfg or TrainConfig()
    load_parameters(network, checkpoint.params)
    usable = [t for t in train if len(t.windows(network.config.n_clips)) >= 2]
    if len(usable) < 2:
        raise DomainError("fewer than 2 trailers have enough sequences for view splitting")
    if len(usable) < len(train):
        logger.info("%d trailers too short for view splitting were skipped",
                    len(train) - len(usable))
    eval_trailers = list(train if eval_trailers is None else eval_trailers)
    ntx = NtxentConfig(cfg.temperature, cfg.denominator)
    schedule = LrSchedule(cfg.finetune_lr, cfg.warm_epochs, cfg.finetune_epochs, cfg.min_lr)
    optimizer = make_optimizer(cfg)
    rng = seeded_rng(cfg.seed + 1)
    params = network.parameters()
    slots = [view_slots(t, network.config) for t in usable]

    def trace_point():
        if cluster_ids is None:
            return None
        return silhouette(embed_trailers(network, eval_trailers).astype(np.float64), cluster_ids)

    trace = [trace_point()]
    history = [{"epoch": 0, "phase": "finetune-pre", "lr": None, "loss": None, "f1_w": None,
                "silhouette": trace[0]}]
    for epoch in range(cfg.finetune_epochs):
        lr = lr_at(schedule, epoch)
        total, count = 0.0, 0
        for step, idx in enumerate(contrastive_batches(len(usable), cfg.finetune_batch_size, rng)):
            chunk = [usable[i] for i in idx]
            network.zero_grad()
            views = [slots[i][0] for i in idx] + [slots[i][1] for i in idx]
            batch = _batch(network, chunk + chunk, views)
            emb, _, enc_cache = network.encode(batch)
            z, proj_cache = network.project(emb)
            B = len(idx)
            loss, dza, dzb = batch_contrastive_loss(z[:B], z[B:], ntx)
            _check_finite(loss, "contrastive loss", epoch, step)
            demb = network.backward_project(proj_cache, np.concatenate([dza, dzb]))
            network.backward_encode(enc_cache, demb)
            _step(network, lr, optimizer, params)
            total += loss
            count += 1
        trace.append(trace_point())
        history.append({"epoch": epoch + 1, "phase": "finetune", "lr": lr,
                        "loss": total / count, "f1_w": None, "silhouette": trace[-1]})
        logger.info("finetune epoch %d lr %.2e loss %.5f", epoch, lr, total / count)
    aux = OrderedDict((k, v) for k, v in checkpoint.aux.items())
    final = make_state(network, optimizer, cfg.finetune_epochs, rng, "finetune", cfg,
                       {"silhouette_trace": trace}, aux)
    return TrainResult(final=final, history=history, silhouette_trace=trace)


# ---------------------------------------------------------------------------
# sequence-level readout

def train_sequence_head(network, train, cfg=None, pos_weight=None):
    """Fit a sequence-embedding -> genre-logit readout with the trunk frozen.

    Every full window of a training trailer is a sample labelled with the
    trailer's genres. Returns per-epoch mean losses.
    """
    cfg = cfg or TrainConfig()
    rng = seeded_rng(cfg.seed + 2)
    head = network.add_sequence_head(rng)
    feats, targets = [], []
    for t in train:
        s = sequence_embeddings(network, t)
        feats.append(s)
        targets.append(np.repeat(t.labels[None].astype(network.dtype), len(s), axis=0))
    x = np.concatenate(feats)
    y = np.concatenate(targets)
    if pos_weight is None:
        pos_weight = positive_weights(y, cfg.pos_weight_clip)
    bce = BceConfig(pos_weight=pos_weight)
    optimizer = make_optimizer(cfg)
    params = head.parameters()
    losses = []
    for epoch in range(cfg.seq_head_epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            head.zero_grad()
            logits, c = head.forward(x[idx])
            loss, dlogits = bce_with_logits(logits, y[idx], bce)
            _check_finite(loss, "sequence-head loss", epoch, lo)
            head.backward(c, dlogits.astype(network.dtype))
            _step(network, cfg.seq_head_lr, optimizer, params)
            total += loss * len(idx)
        losses.append(total / len(x))
    return losses
