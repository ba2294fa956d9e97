"""scikit-learn style estimator around the fusion network."""

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_label_matrix, check_trailers, labels_of
from .checkpoint import load_checkpoint, load_parameters, save_checkpoint
from .evaluation import thresholded_prf
from .exceptions import ConfigurationError, StateError
from .fusion import ExpertConfig, FusionConfig, FusionNetwork, prepare_trailer
from .numeric.rng import seeded_rng
from .retrieval import augment_labels
from .training import (TrainConfig, embed_trailers, finetune_contrastive, make_state,
                       predict_logits, sequence_embeddings, train_sequence_head,
                       train_supervised)

_DTYPES = {"float32": np.float32, "float64": np.float64}


class GatedFusionClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Multi-label genre classifier over multi-expert trailer embeddings.

    ``fit`` trains the collaborative-gating network with weighted BCE;
    ``fine_tune`` continues with the contrastive objective on half-trailer
    views; ``transform`` returns the bottleneck embeddings used for retrieval
    and clustering.

    Parameters
    ----------
    common_dim, gate_hidden, clip_hidden, clip_dim, seq_hidden, seq_dim,
    bottleneck_hidden, bottleneck_dim, cls_hidden, proj_hidden, proj_dim : int
        Layer widths; defaults are the published network sizes.
    n_clips : int
        Clips per sequence window.
    n_sequences : int
        Sequences per trailer after wrap-padding.
    netvlad_clusters : int
        Clusters of the NetVLAD pooling used for ``netvlad_experts``.
    netvlad_experts : tuple of str
        Experts pooled with NetVLAD; all others are mean-pooled.
    gating : bool
        If False the collaborative gating is bypassed (naive concatenation).
    epochs, batch_size, learning_rate : supervised phase settings.
    finetune_epochs, finetune_lr, warm_epochs, min_lr, finetune_batch_size,
    temperature, denominator : contrastive phase settings.
    threshold : float
        Sigmoid threshold for ``predict`` and the reported F1.
    pos_weight : "balanced" or array-like
        Per-genre positive weights of the BCE loss; "balanced" uses the
        clipped negatives/positives ratio of the training labels.
    dtype : {"float32", "float64"}
    random_state : int
    deterministic : bool
        Recorded for provenance; training always runs single-threaded in a
        fixed reduction order.
    """

    def __init__(self, *, common_dim=768, gate_hidden=768, clip_hidden=512, clip_dim=128,
                 seq_hidden=512, seq_dim=256, bottleneck_hidden=4096, bottleneck_dim=2048,
                 cls_hidden=1024, proj_hidden=512, proj_dim=128, n_clips=9, n_sequences=4,
                 netvlad_clusters=8, netvlad_experts=("audio",), gating=True,
                 epochs=200, batch_size=32, learning_rate=3e-5,
                 finetune_epochs=50, finetune_lr=1e-4, warm_epochs=10, min_lr=1e-6,
                 finetune_batch_size=32, temperature=0.5, denominator="include-positive",
                 threshold=0.3, pos_weight="balanced", seq_head_epochs=100,
                 seq_head_lr=1e-3, dtype="float32", random_state=0, deterministic=True):
        self.common_dim = common_dim
        self.gate_hidden = gate_hidden
        self.clip_hidden = clip_hidden
        self.clip_dim = clip_dim
        self.seq_hidden = seq_hidden
        self.seq_dim = seq_dim
        self.bottleneck_hidden = bottleneck_hidden
        self.bottleneck_dim = bottleneck_dim
        self.cls_hidden = cls_hidden
        self.proj_hidden = proj_hidden
        self.proj_dim = proj_dim
        self.n_clips = n_clips
        self.n_sequences = n_sequences
        self.netvlad_clusters = netvlad_clusters
        self.netvlad_experts = netvlad_experts
        self.gating = gating
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.finetune_epochs = finetune_epochs
        self.finetune_lr = finetune_lr
        self.warm_epochs = warm_epochs
        self.min_lr = min_lr
        self.finetune_batch_size = finetune_batch_size
        self.temperature = temperature
        self.denominator = denominator
        self.threshold = threshold
        self.pos_weight = pos_weight
        self.seq_head_epochs = seq_head_epochs
        self.seq_head_lr = seq_head_lr
        self.dtype = dtype
        self.random_state = random_state
        self.deterministic = deterministic

    # -- configuration -----------------------------------------------------

    def _dtype(self):
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")
        return _DTYPES[self.dtype]

    def _fusion_config(self, records, n_genres):
        first = records[0]
        experts = []
        for name, track in first.tracks.items():
            pooling = "netvlad" if name in self.netvlad_experts else "mean"
            dim = track.native_dim
            if track.level == "clip" and pooling == "netvlad":
                dim //= self.netvlad_clusters
            experts.append(ExpertConfig(name, dim, pooling))
        return FusionConfig(
            experts=experts, n_genres=n_genres, common_dim=self.common_dim,
            gate_hidden=self.gate_hidden, clip_hidden=self.clip_hidden, clip_dim=self.clip_dim,
            seq_hidden=self.seq_hidden, seq_dim=self.seq_dim,
            bottleneck_hidden=self.bottleneck_hidden, bottleneck_dim=self.bottleneck_dim,
            cls_hidden=self.cls_hidden, proj_hidden=self.proj_hidden, proj_dim=self.proj_dim,
            n_clips=self.n_clips, n_sequences=self.n_sequences,
            netvlad_clusters=self.netvlad_clusters, gating=self.gating)

    def _train_config(self):
        return TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs, lr=self.learning_rate,
            finetune_epochs=self.finetune_epochs, finetune_lr=self.finetune_lr,
            warm_epochs=self.warm_epochs, min_lr=self.min_lr,
            finetune_batch_size=self.finetune_batch_size, temperature=self.temperature,
            denominator=self.denominator, threshold=self.threshold,
            seq_head_epochs=self.seq_head_epochs, seq_head_lr=self.seq_head_lr,
            seed=self.random_state, deterministic=self.deterministic)

    def _prepare(self, X, y=None):
        records = check_trailers(X)
        prepared = [prepare_trailer(r, self.fusion_config_, self._dtype()) for r in records]
        if y is not None:
            y = check_label_matrix(y, len(records), self.fusion_config_.n_genres)
            for p, row in zip(prepared, y):
                p.labels = row
        return prepared

    def _init_netvlad(self, records, rng):
        for name, module in self.network_.netvlad.items():
            frames = [c for r in records if name in r.tracks and r.tracks[name].level == "frame"
                      for c in r.tracks[name].clips]
            if frames:
                module.init_centers(np.concatenate(frames), rng)

    def _state(self, state):
        params = self.get_params()
        for key, value in params.items():
            if isinstance(value, (tuple, np.ndarray)):
                params[key] = list(np.asarray(value).tolist()) if isinstance(
                    value, np.ndarray) else list(value)
        state.config["estimator"] = params
        state.config["genres"] = list(self.genres_)
        return state

    # -- fitting -----------------------------------------------------------

    def fit(self, X, y=None, X_val=None, y_val=None, genres=None):
        """Supervised training on trailers ``X`` with label matrix ``y``.

        ``y`` defaults to the labels stored on the records.
        """
        records = check_trailers(X)
        y = labels_of(records) if y is None else check_label_matrix(y, len(records))
        if genres is None and hasattr(X, "genres"):
            genres = X.genres
        self.genres_ = list(genres) if genres is not None else [f"genre{g}" for g in range(y.shape[1])]
        self.classes_ = np.arange(y.shape[1])
        self.n_genres_ = y.shape[1]
        self.fusion_config_ = self._fusion_config(records, y.shape[1])
        self.train_config_ = self._train_config()
        rng = seeded_rng(self.random_state)
        self.network_ = FusionNetwork(self.fusion_config_, rng, self._dtype())
        self._init_netvlad(records, rng)
        train = self._prepare(records, y)
        val = []
        if X_val is not None:
            val_records = check_trailers(X_val, allow_empty=True)
            if val_records:
                y_val = labels_of(val_records) if y_val is None else y_val
                val = self._prepare(val_records, y_val)
        pos_weight = None if isinstance(self.pos_weight, str) and self.pos_weight == "balanced" \
            else np.asarray(self.pos_weight, dtype=float)
        result = train_supervised(self.network_, train, val, self.train_config_, pos_weight)
        self.history_ = list(result.history)
        self.initial_loss_ = result.initial_loss
        self.state_ = self._state(result.final)
        self.best_state_ = self._state(result.best) if result.best is not None else None
        self.pos_weight_ = result.final.aux["pos_weight"]
        return self

    def fine_tune(self, X, cluster_ids=None, X_eval=None):
        """Contrastive fine-tuning starting from the current supervised weights."""
        check_is_fitted(self, "network_")
        train = self._prepare(X)
        eval_trailers = None if X_eval is None else self._prepare(X_eval)
        result = finetune_contrastive(self.network_, train, self.train_config_,
                                      self._current_state(self.state_), eval_trailers,
                                      cluster_ids)
        self.finetune_history_ = list(result.history)
        self.silhouette_trace_ = list(result.silhouette_trace)
        self.history_ = self.history_ + result.history
        self.state_ = self._state(result.final)
        return self

    def fit_sequence_head(self, X, y=None):
        """Train the per-sequence genre readout with the rest of the network frozen."""
        check_is_fitted(self, "network_")
        records = check_trailers(X)
        train = self._prepare(records, y)
        self.sequence_head_history_ = train_sequence_head(
            self.network_, train, self.train_config_, self.pos_weight_)
        return self

    # -- inference ---------------------------------------------------------

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        return predict_logits(self.network_, self._prepare(X)).astype(np.float64)

    def predict_proba(self, X):
        return expit(self.decision_function(X))

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.int64)

    def transform(self, X):
        """Bottleneck embeddings, one row per trailer."""
        check_is_fitted(self, "network_")
        return embed_trailers(self.network_, self._prepare(X)).astype(np.float64)

    def score(self, X, y=None):
        """Support-weighted F1 at ``threshold``."""
        records = check_trailers(X)
        y = labels_of(records) if y is None else check_label_matrix(y, len(records))
        return thresholded_prf(self.predict_proba(records), y, self.threshold)[2]

    def augment(self, X, threshold=None):
        """Label set per trailer from the sigmoid threshold (never empty)."""
        thr = self.threshold if threshold is None else threshold
        return [augment_labels(row, thr) for row in self.decision_function(X)]

    def sequence_logits(self, X):
        check_is_fitted(self, "network_")
        head = self.network_.sequence_head
        if head is None:
            raise StateError("no sequence-level head; call fit_sequence_head first")
        return [head.forward(sequence_embeddings(self.network_, t))[0].astype(np.float64)
                for t in self._prepare(X)]

    def predict_sequences(self, X, threshold=None):
        """Per-trailer list of per-sequence label sets."""
        thr = self.threshold if threshold is None else threshold
        return [[augment_labels(row, thr) for row in logits] for logits in self.sequence_logits(X)]

    # -- persistence -------------------------------------------------------

    def save(self, path, which="final"):
        check_is_fitted(self, "network_")
        state = self.state_ if which == "final" else self.best_state_
        if state is None:
            raise StateError(f"no {which} state available")
        state = self._current_state(state) if which == "final" else state
        return save_checkpoint(state, path)

    def _current_state(self, state):
        """``state`` refreshed with live parameters (e.g. a trained sequence head)."""
        fresh = make_state(self.network_, state.optimizer, state.epoch, None,
                           state.config.get("phase", "supervised"), self.train_config_,
                           state.extras, state.aux)
        fresh.rng_state = state.rng_state
        fresh.config["has_sequence_head"] = self.network_.sequence_head is not None
        return self._state(fresh)

    @classmethod
    def from_checkpoint(cls, path_or_state):
        """Rebuild a fitted estimator from a checkpoint file or ``ModelState``."""
        state = path_or_state if hasattr(path_or_state, "params") else load_checkpoint(path_or_state)
        cfg = state.config
        if "estimator" not in cfg:
            raise ConfigurationError("checkpoint carries no estimator parameters")
        params = dict(cfg["estimator"])
        params["netvlad_experts"] = tuple(params.get("netvlad_experts", ()))
        est = cls(**params)
        est.fusion_config_ = FusionConfig.from_dict(cfg["fusion"])
        est.train_config_ = est._train_config()
        est.genres_ = list(cfg.get("genres", []))
        est.n_genres_ = est.fusion_config_.n_genres
        est.classes_ = np.arange(est.n_genres_)
        est.network_ = FusionNetwork(est.fusion_config_, seeded_rng(0), est._dtype())
        if cfg.get("has_sequence_head"):
            est.network_.add_sequence_head(seeded_rng(0))
        load_parameters(est.network_, state.params)
        est.state_ = state
        est.best_state_ = None
        est.history_ = []
        est.pos_weight_ = state.aux.get("pos_weight")
        return est
