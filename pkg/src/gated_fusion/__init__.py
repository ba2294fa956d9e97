"""Multi-expert video trailer genre classification with collaborative gating."""

from .config import RunConfig, load_config
from .corpus import (Corpus, ExpertSpec, ExpertTrack, SplitAssignment, SyntheticSpec,
                     TrailerRecord, generate_synthetic, load_store, split_dataset,
                     truncate_labels, write_store)
from .estimator import GatedFusionClassifier
from .evaluation import MetricsReport, average_precision, evaluate, random_baseline, silhouette
from .exceptions import ContractError, GatedFusionError, NumericError
from .retrieval import EmbeddingIndex, augment_labels, build_index, query_knn

__version__ = "0.1.0"

__all__ = [
    "ContractError", "Corpus", "EmbeddingIndex", "ExpertSpec", "ExpertTrack",
    "GatedFusionClassifier", "GatedFusionError", "MetricsReport", "NumericError", "RunConfig",
    "SplitAssignment", "SyntheticSpec", "TrailerRecord", "augment_labels", "average_precision",
    "build_index", "evaluate", "generate_synthetic", "load_config", "load_store",
    "query_knn", "random_baseline", "silhouette", "split_dataset", "truncate_labels",
    "write_store",
]
