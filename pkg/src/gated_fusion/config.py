"""Run configuration: a YAML file of nested sections with strict key checking."""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .corpus import SyntheticSpec
from .exceptions import ConfigurationError


@dataclass
class CorpusSection:
    path: str = None
    split: str = None
    ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    min_clips: int = 10


@dataclass
class ModelSection:
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
    netvlad_experts: list = field(default_factory=lambda: ["audio"])
    gating: bool = True
    dtype: str = "float32"


@dataclass
class TrainSection:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 3e-5
    threshold: float = 0.3


@dataclass
class FinetuneSection:
    epochs: int = 50
    learning_rate: float = 1e-4
    warm_epochs: int = 10
    min_lr: float = 1e-6
    batch_size: int = 32
    temperature: float = 0.5
    denominator: str = "include-positive"


@dataclass
class SequenceHeadSection:
    epochs: int = 100
    learning_rate: float = 1e-3


@dataclass
class EvalSection:
    threshold: float = 0.3
    random_trials: int = 100
    subset: str = "test"


@dataclass
class RetrievalSection:
    k: int = 5


@dataclass
class SweepSection:
    n_clips: list = field(default_factory=lambda: [1, 5, 9, 20])


@dataclass
class GradcheckSection:
    eps: float = 1e-5
    tolerance: float = 1e-4


_SECTIONS = {
    "corpus": CorpusSection, "synthetic": SyntheticSpec, "model": ModelSection,
    "train": TrainSection, "finetune": FinetuneSection,
    "sequence_head": SequenceHeadSection, "eval": EvalSection,
    "retrieval": RetrievalSection, "sweep": SweepSection, "gradcheck": GradcheckSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    out: str = "runs"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    sequence_head: SequenceHeadSection = field(default_factory=SequenceHeadSection)
    eval: EvalSection = field(default_factory=EvalSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_dict(self):
        return asdict(self)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(_plain(self.to_dict()), sort_keys=True))

    def estimator_params(self):
        """Keyword arguments for :class:`GatedFusionClassifier`."""
        m, t, f, s = self.model, self.train, self.finetune, self.sequence_head
        params = {k: getattr(m, k) for k in (
            "common_dim", "gate_hidden", "clip_hidden", "clip_dim", "seq_hidden", "seq_dim",
            "bottleneck_hidden", "bottleneck_dim", "cls_hidden", "proj_hidden", "proj_dim",
            "n_clips", "n_sequences", "netvlad_clusters", "gating", "dtype")}
        params.update(
            netvlad_experts=tuple(m.netvlad_experts), epochs=t.epochs,
            batch_size=t.batch_size, learning_rate=t.learning_rate, threshold=t.threshold,
            finetune_epochs=f.epochs, finetune_lr=f.learning_rate, warm_epochs=f.warm_epochs,
            min_lr=f.min_lr, finetune_batch_size=f.batch_size, temperature=f.temperature,
            denominator=f.denominator, seq_head_epochs=s.epochs, seq_head_lr=s.learning_rate,
            random_state=self.seed, deterministic=self.deterministic)
        return params


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {where!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid section {where!r}: {exc}") from None


def config_from_dict(data):
    data = dict(data or {})
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {k: v for k, v in data.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, data.get(name), name)
    return RunConfig(**kwargs)


def load_config(path=None):
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from None
    return config_from_dict(data)
