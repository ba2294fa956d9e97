"""Input validation for the estimator API."""

import numpy as np
from sklearn.utils import check_array

from .corpus import Corpus, TrailerRecord
from .exceptions import DimensionError, DomainError


def check_trailers(X, allow_empty=False):
    """Return ``X`` as a list of :class:`TrailerRecord`."""
    if isinstance(X, Corpus):
        records = list(X.records)
    elif isinstance(X, TrailerRecord):
        records = [X]
    else:
        try:
            records = list(X)
        except TypeError:
            raise TypeError(f"expected a Corpus or a sequence of TrailerRecord, got {type(X)}") \
                from None
    bad = [type(r).__name__ for r in records if not isinstance(r, TrailerRecord)]
    if bad:
        raise TypeError(f"expected TrailerRecord items, got {sorted(set(bad))}")
    if not records and not allow_empty:
        raise DomainError("no trailers supplied")
    return records


def check_label_matrix(y, n_samples=None, n_classes=None):
    """Binary (n_samples, n_classes) integer matrix."""
    y = check_array(y, ensure_2d=True, dtype=None)
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("label matrix must be binary")
    if n_samples is not None and y.shape[0] != n_samples:
        raise DimensionError(f"{y.shape[0]} label rows for {n_samples} trailers")
    if n_classes is not None and y.shape[1] != n_classes:
        raise DimensionError(f"{y.shape[1]} label columns, expected {n_classes}")
    return y.astype(np.int64)


def labels_of(records):
    return np.stack([np.asarray(r.labels) for r in records]).astype(np.int64)
