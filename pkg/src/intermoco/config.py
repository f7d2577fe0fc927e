"""Run configuration: YAML file -> validated, fully resolved dataclasses."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .analysis import CkaConfig, KsConfig
from .encoder import EncoderConfig
from .engine import TrainConfig
from .errors import ConfigError
from .evaluation import FineTuneConfig, FineTuneMode

OUTPUT_ROOT_ENV = "INTERMOCO_OUTPUT_ROOT"


@dataclass
class DatasetConfig:
    manifest: str | None = None
    root: str | None = None
    input_size: tuple[int, int] | None = None
    channels: int | None = None


@dataclass
class FineTuneSection:
    modes: list[str] = field(default_factory=lambda: ["LL", "E2E"])
    fractions: list[float] = field(default_factory=lambda: [0.01, 0.06, 1.0])
    epochs: int = 10
    learning_rate: float = 0.3
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    metric: str = "auroc"
    random_init: bool = False
    standardize: bool = True

    def __post_init__(self):
        for m in self.modes:
            FineTuneMode(m)
        for f in self.fractions:
            if not 0 < f <= 1:
                raise ConfigError(f"label fraction {f} outside (0, 1]")
        self.tune_config(0)

    def tune_config(self, seed: int) -> FineTuneConfig:
        return FineTuneConfig(self.epochs, self.learning_rate, self.sgd_momentum, self.weight_decay,
                              self.batch_size, self.metric, self.random_init, self.standardize, seed)


@dataclass
class ProbeSection:
    blocks: list[int] | None = None


@dataclass
class BootstrapSection:
    replicates: int = 1000
    method: str = "paper"

    def __post_init__(self):
        if self.replicates < 2:
            raise ConfigError("bootstrap.replicates must be >= 2")
        if self.method not in ("paper", "percentile"):
            raise ConfigError("bootstrap.method must be 'paper' or 'percentile'")


@dataclass
class AnalysisSection:
    # method name -> pretraining checkpoint; a null path means a randomly initialized encoder
    checkpoints: dict[str, str | None] = field(default_factory=dict)
    fractions: list[float] = field(default_factory=lambda: [0.06, 0.01])
    reference: str | None = None
    reference_fraction: float = 1.0
    include_supervised: bool = True

    def __post_init__(self):
        for f in [*self.fractions, self.reference_fraction]:
            if not 0 < f <= 1:
                raise ConfigError(f"label fraction {f} outside (0, 1]")
        if self.reference is not None and self.reference not in self.checkpoints:
            raise ConfigError(f"reference {self.reference!r} is not one of the checkpoints {sorted(self.checkpoints)}")


@dataclass
class ReportSection:
    runs: list[str] = field(default_factory=list)
    plots: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    checkpoint: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FineTuneSection = field(default_factory=FineTuneSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    bootstrap: BootstrapSection = field(default_factory=BootstrapSection)
    cka: CkaConfig = field(default_factory=CkaConfig)
    ks: KsConfig = field(default_factory=KsConfig)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    report: ReportSection = field(default_factory=ReportSection)
    # sections the user wrote explicitly; used for checkpoint compatibility checks
    explicit: frozenset = field(default_factory=frozenset, compare=False, repr=False)

    def resolved(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "explicit":
                continue
            value = getattr(self, f.name)
            if hasattr(value, "to_dict"):
                value = value.to_dict()
            elif hasattr(value, "__dataclass_fields__"):
                value = asdict(value)
            out[f.name] = value
        return json.loads(json.dumps(out, default=list))

    def config_hash(self, command: str, extra: dict | None = None) -> str:
        """Short digest of the command, resolved config and ``extra`` (e.g. input file digests)."""
        payload = json.dumps({"command": command, "config": self.resolved(), "extra": extra or {}},
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def output_root(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ROOT_ENV) or "runs")

    def run_dir(self, command: str, extra: dict | None = None) -> Path:
        return self.output_root() / f"{command}-{self.config_hash(command, extra)}"


_SECTIONS = {
    "dataset": DatasetConfig, "encoder": EncoderConfig, "train": TrainConfig, "finetune": FineTuneSection,
    "probe": ProbeSection, "bootstrap": BootstrapSection, "cka": CkaConfig, "ks": KsConfig,
    "analysis": AnalysisSection, "report": ReportSection,
}
_SCALARS = {"seed", "output_dir", "checkpoint"}


def _build(cls, values, where: str):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - _SCALARS - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    kwargs = {k: raw[k] for k in _SCALARS if k in raw}
    seed = int(raw.get("seed", 0))
    for name, cls in _SECTIONS.items():
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"{name}: expected a mapping, got {type(section).__name__}")
        section = dict(section)
        if name == "train":
            section.setdefault("seed", seed)
        kwargs[name] = _build(cls, section, name)
    return RunConfig(**kwargs, explicit=frozenset(k for k in raw if k in _SECTIONS))


def load_config(path) -> RunConfig:
    return config_from_dict(load_raw(path))


def load_raw(path) -> dict:
    """Parsed YAML mapping of a config file, before validation."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw or {}


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Set dotted keys (``"train.mode"``) in a raw config mapping."""
    raw = json.loads(json.dumps(raw or {}))
    for dotted, value in overrides.items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return raw


def encoder_config_diff(expected: EncoderConfig, actual: EncoderConfig, ignore=("bt_projectors",)) -> list[str]:
    a, b = expected.to_dict(), actual.to_dict()
    return [f"{k}: config={a[k]!r} checkpoint={b[k]!r}" for k in a if k not in ignore and a[k] != b[k]]
