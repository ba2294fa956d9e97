"""Multi-label evaluation: average precision, AU-PRC aggregates, thresholded
precision/recall/F1, silhouette scores and a random-score baseline.

The three area-under-PR aggregates are reported under unambiguous names:

``mean_ap``
    unweighted mean of per-genre AP over genres with at least one positive
    (written as the bar-over-AU(PRC) "micro" figure in the genre literature);
``pooled_ap``
    AP of all (sample, genre) pairs flattened into one ranking
    (the AU(bar-PRC) "macro" figure);
``weighted_ap``
    per-genre AP averaged with weights equal to each genre's positive count.
"""

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import precision_recall_fscore_support
from sklearn.metrics import silhouette_score as _sk_silhouette

from .exceptions import DimensionError, DomainError, UndefinedMetricError
from .numeric.rng import seeded_rng

DEFAULT_THRESHOLD = 0.3


def _check_binary(labels):
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise DomainError("labels must be binary")
    return labels.astype(bool)


def pr_points(scores, labels):
    """Precision/recall at every distinct score threshold, highest first.

    Tied scores form a single threshold. Returns ``(thresholds, precision,
    recall)``.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = _check_binary(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} differ")
    n_pos = labels.sum()
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of every run of equal scores
    ends = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = tp[ends].astype(float)
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return s[ends], precision, recall


def average_precision(scores, labels):
    """Step-interpolated AP: ``sum_k (R_k - R_{k-1}) * P_k``."""
    _, precision, recall = pr_points(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class PrCurve:
    genre: str
    support: int
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @classmethod
    def from_scores(cls, scores, labels, genre):
        t, p, r = pr_points(scores, labels)
        return cls(genre, int(np.sum(labels)), t, p, r)


def auprc_suite(scores, labels):
    """Per-genre AP plus the three aggregates (see module docstring)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise DimensionError(f"score {scores.shape} and label {labels.shape} matrices differ")
    labels = _check_binary(labels)
    support = labels.sum(axis=0)
    per_genre = np.full(scores.shape[1], np.nan)
    for g in np.flatnonzero(support > 0):
        per_genre[g] = average_precision(scores[:, g], labels[:, g])
    valid = support > 0
    if not valid.any():
        raise UndefinedMetricError("no genre has a positive label")
    return {
        "per_genre": per_genre,
        "support": support.astype(int),
        "mean_ap": float(per_genre[valid].mean()),
        "pooled_ap": average_precision(scores.ravel(), labels.ravel()),
        "weighted_ap": float(np.average(per_genre[valid], weights=support[valid])),
    }


def thresholded_prf(probabilities, labels, threshold=DEFAULT_THRESHOLD):
    """Support-weighted precision, recall and F1 after binarizing at ``threshold``.

    A genre with no predicted positives contributes precision 0.
    """
    if not 0 < threshold < 1:
        raise DomainError("threshold must lie in (0, 1)")
    probabilities = np.asarray(probabilities, dtype=float)
    labels = _check_binary(labels).astype(int)
    if probabilities.shape != labels.shape:
        raise DimensionError("probability and label matrices differ in shape")
    predicted = (probabilities >= threshold).astype(int)
    if labels.sum() == 0:
        return 0.0, 0.0, 0.0
    p, r, f, _ = precision_recall_fscore_support(
        labels, predicted, average="weighted", zero_division=0)
    return float(p), float(r), float(f)


def silhouette(embeddings, cluster_ids):
    """Mean silhouette coefficient under Euclidean distance.

    Members of singleton clusters contribute 0.
    """
    x = np.asarray(embeddings, dtype=float)
    ids = np.asarray(cluster_ids)
    if x.ndim != 2 or x.shape[0] != ids.shape[0]:
        raise DimensionError("one cluster id per embedding row is required")
    n_clusters = len(np.unique(ids))
    if n_clusters < 2:
        raise DomainError("silhouette needs at least two distinct clusters")
    if x.shape[0] < 3:
        raise DomainError("silhouette needs at least three samples")
    if n_clusters == x.shape[0]:
        return 0.0
    return float(_sk_silhouette(x, ids, metric="euclidean"))


@dataclass
class MetricsReport:
    genres: list
    per_genre_ap: dict
    support: dict
    mean_ap: float
    pooled_ap: float
    weighted_ap: float
    precision_w: float
    recall_w: float
    f1_w: float
    threshold: float = DEFAULT_THRESHOLD
    silhouette: float = None
    skipped: list = field(default_factory=list)
    curves: list = field(default_factory=list, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("curves")
        return d

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def evaluate(probabilities, labels, genres=None, threshold=DEFAULT_THRESHOLD,
             embeddings=None, cluster_ids=None, curves=True):
    """Full report for a (N, G) probability matrix against binary labels."""
    probabilities = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels)
    G = probabilities.shape[1]
    genres = list(genres) if genres is not None else [f"genre{g}" for g in range(G)]
    suite = auprc_suite(probabilities, labels)
    skipped = [genres[g] for g in range(G) if suite["support"][g] == 0]
    if skipped:
        warnings.warn(f"genres without positives skipped: {skipped}", stacklevel=2)
    p, r, f = thresholded_prf(probabilities, labels, threshold)
    sil = None
    if embeddings is not None:
        sil = silhouette(embeddings, cluster_ids)
    curve_list = []
    if curves:
        curve_list = [PrCurve.from_scores(probabilities[:, g], labels[:, g], genres[g])
                      for g in range(G) if suite["support"][g] > 0]
    return MetricsReport(
        genres=genres,
        per_genre_ap={genres[g]: (None if np.isnan(v) else float(v))
                      for g, v in enumerate(suite["per_genre"])},
        support={genres[g]: int(s) for g, s in enumerate(suite["support"])},
        mean_ap=suite["mean_ap"], pooled_ap=suite["pooled_ap"],
        weighted_ap=suite["weighted_ap"], precision_w=p, recall_w=r, f1_w=f,
        threshold=threshold, silhouette=sil, skipped=skipped, curves=curve_list)


def random_baseline(labels, trials=100, seed=0, threshold=DEFAULT_THRESHOLD, genres=None):
    """Metrics of uniform random scores, averaged over ``trials`` draws."""
    labels = np.asarray(labels)
    rng = seeded_rng(seed)
    keys = ("mean_ap", "pooled_ap", "weighted_ap", "precision_w", "recall_w", "f1_w")
    totals = dict.fromkeys(keys, 0.0)
    per_genre = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(trials):
            report = evaluate(rng.random(labels.shape), labels, genres, threshold, curves=False)
            for k in keys:
                totals[k] += getattr(report, k)
            aps = {g: (v or 0.0) for g, v in report.per_genre_ap.items()}
            per_genre = aps if per_genre is None else {g: per_genre[g] + aps[g] for g in aps}
    report.per_genre_ap = {g: (v / trials if report.support[g] else None)
                           for g, v in per_genre.items()}
    for k in keys:
        setattr(report, k, totals[k] / trials)
    return report


def _slug(name):
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def export_curves(report, path):
    """Write one ``threshold,precision,recall`` CSV per genre and ``summary.csv``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    for i, curve in enumerate(report.curves):
        target = path / f"curve_{i:02d}_{_slug(curve.genre)}.csv"
        with target.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
                w.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
        written.append(target)
    with (path / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in ("mean_ap", "pooled_ap", "weighted_ap", "precision_w", "recall_w", "f1_w"):
            w.writerow([key, repr(float(getattr(report, key)))])
        if report.silhouette is not None:
            w.writerow(["silhouette", repr(float(report.silhouette))])
        for genre, ap in report.per_genre_ap.items():
            if ap is None:
                w.writerow(["note", f"{genre}: no positive labels, curve omitted"])
            else:
                w.writerow([f"ap:{genre}", repr(float(ap))])
    return written


def read_curve_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["threshold"]) for r in rows]),
            np.array([float(r["precision"]) for r in rows]),
            np.array([float(r["recall"]) for r in rows]))
