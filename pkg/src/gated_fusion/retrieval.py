"""Exact cosine kNN over bottleneck embeddings, label augmentation and
per-sequence genre prediction."""

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import DomainError, StateError

DEFAULT_THRESHOLD = 0.30


@dataclass
class RetrievalResult:
    query: str
    ids: list
    scores: list

    def to_records(self):
        return [{"query": self.query, "rank": r + 1, "id": i, "score": float(s)}
                for r, (i, s) in enumerate(zip(self.ids, self.scores))]


class EmbeddingIndex:
    """Immutable id -> embedding table with precomputed L2 norms."""

    def __init__(self, ids, embeddings):
        ids = [str(i) for i in ids]
        emb = np.array(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(ids):
            raise DomainError("need one embedding row per id")
        if len(set(ids)) != len(ids):
            raise DomainError("index ids must be unique")
        if not np.all(np.isfinite(emb)):
            raise DomainError("index embeddings must be finite")
        emb.setflags(write=False)
        self.ids = ids
        self.embeddings = emb
        self.norms = np.linalg.norm(emb, axis=1)
        self._pos = {i: k for k, i in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def vector(self, trailer_id):
        try:
            return self.embeddings[self._pos[trailer_id]]
        except KeyError:
            raise KeyError(f"unknown trailer id {trailer_id!r}") from None

    def cosine(self, query):
        q = np.asarray(query, dtype=np.float64)
        qn = np.linalg.norm(q)
        denom = self.norms * qn
        dots = self.embeddings @ q
        return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)

    def save(self, path):
        np.savez(path, ids=np.array(self.ids), embeddings=self.embeddings)

    @classmethod
    def load(cls, path):
        data = np.load(path, allow_pickle=False)
        return cls(list(data["ids"]), data["embeddings"])


def build_index(estimator, records):
    """Embed ``records`` with a fitted estimator (full-clip packing)."""
    ids = [r.trailer_id for r in records]
    return EmbeddingIndex(ids, estimator.transform(records))


def query_knn(index, query, k=5):
    """Top-``k`` stored trailers by cosine similarity.

    ``query`` is a stored trailer id (excluded from its own results) or a
    raw embedding. Ties are broken by trailer id.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    if isinstance(query, str):
        vec = index.vector(query)
        qid, exclude = query, index._pos[query]
    else:
        vec, qid, exclude = np.asarray(query, dtype=np.float64), "<vector>", None
    scores = index.cosine(vec)
    candidates = [i for i in range(len(index)) if i != exclude]
    candidates.sort(key=lambda i: (-scores[i], index.ids[i]))
    top = candidates[:k]
    return RetrievalResult(qid, [index.ids[i] for i in top], [float(scores[i]) for i in top])


def write_results_jsonl(results, path):
    with open(path, "w") as fh:
        for res in results:
            for rec in res.to_records():
                fh.write(json.dumps(rec) + "\n")


def augment_labels(logits, threshold=DEFAULT_THRESHOLD):
    """Genres whose sigmoid probability reaches ``threshold``; the argmax genre
    if none does."""
    u = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise DomainError("logits must be finite")
    chosen = {int(g) for g in np.flatnonzero(expit(u) >= threshold)}
    return chosen or {int(np.argmax(u))}


def per_sequence_predict(estimator, record, threshold=DEFAULT_THRESHOLD):
    """Label set for every sequence window of ``record``."""
    if getattr(estimator, "network_", None) is None or estimator.network_.sequence_head is None:
        raise StateError("model has no sequence-level head")
    return estimator.predict_sequences([record], threshold)[0]


def retrieval_purity(index, fine_labels, k=5):
    """Mean fraction of each trailer's top-``k`` neighbours sharing its fine label."""
    lookup = dict(zip(index.ids, fine_labels))
    total = 0.0
    for tid in index.ids:
        res = query_knn(index, tid, k)
        total += np.mean([lookup[i] == lookup[tid] for i in res.ids])
    return total / len(index)
