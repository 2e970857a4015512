"""Experiment configuration: dataclasses, YAML loading and validation.

A config document has one flat section per subsystem::

    experiment: {seed, mode, total_clients, selection_rate, target_accuracy, max_rounds}
    adversary:  {malicious_rate, mix, params, explicit}
    model:      {layer_sizes, activation}
    training:   {learning_rate, epochs, batch_size}
    data:       {source, n_classes, n_features, center_scale, noise,
                 client_size_min, client_size_max, holdout_fraction, label_skew, csv_path}
    latency:    {t_fl, t_c_to_s, t_s_to_c, t_bg, t_bv, t_bs}
    reputation: {r_basic, r_quality, r_quantity, initial_reputation, swap_factor_pairing}
    ledger:     {difficulty, miners}
    monitor:    {accuracy_slack}

Every key is optional; missing keys take the defaults below.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .errors import ConfigError, InvalidInputError
from .fl_core import Activation
from .incentive import ReputationConfig
from .netsim import LatencyConfig

MODES = ("bfmeta", "fedavg")


@dataclass(frozen=True)
class ExperimentSection:
    seed: int = 0
    mode: str = "bfmeta"
    total_clients: int = 30
    selection_rate: float = 0.5
    target_accuracy: float = 0.8
    max_rounds: int = 60


@dataclass(frozen=True)
class AdversarySection:
    malicious_rate: float = 0.0
    mix: Mapping[str, float] = field(default_factory=lambda: {"lazy": 1.0})
    params: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    explicit: Mapping[int, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ModelSection:
    layer_sizes: tuple[int, ...] = (8, 20, 30, 50, 30, 20, 4)
    activation: str = "relu"


@dataclass(frozen=True)
class TrainingSection:
    learning_rate: float = 0.03
    epochs: int = 1
    batch_size: int = 16


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    n_classes: int = 4
    n_features: int = 8
    center_scale: float = 2.5
    noise: float = 1.0
    client_size_min: int = 40
    client_size_max: int = 120
    holdout_fraction: float = 0.2
    label_skew: float = 0.0
    csv_path: Optional[str] = None


@dataclass(frozen=True)
class LedgerSection:
    difficulty: int = 12
    miners: int = 1


@dataclass(frozen=True)
class MonitorSection:
    accuracy_slack: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = ExperimentSection()
    adversary: AdversarySection = AdversarySection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    data: DataSection = DataSection()
    latency: LatencyConfig = LatencyConfig()
    reputation: ReputationConfig = ReputationConfig()
    ledger: LedgerSection = LedgerSection()
    monitor: MonitorSection = MonitorSection()

    def __post_init__(self):
        validate(self)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    @property
    def mode(self) -> str:
        return self.experiment.mode

    def with_overrides(self, **sections: Mapping[str, Any]) -> "ExperimentConfig":
        """Return a copy with ``section={key: value}`` overrides applied."""
        doc = self.to_json()
        for name, values in sections.items():
            if values:
                doc.setdefault(name, {}).update(values)
        return config_from_mapping(doc)

    def to_json(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if isinstance(section, LatencyConfig):
                out[f.name] = section.to_json()
            else:
                out[f.name] = _plain(dataclasses.asdict(section))
        return out


def _plain(value):
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


_SECTION_TYPES = {
    "experiment": ExperimentSection,
    "adversary": AdversarySection,
    "model": ModelSection,
    "training": TrainingSection,
    "data": DataSection,
    "reputation": ReputationConfig,
    "ledger": LedgerSection,
    "monitor": MonitorSection,
}


def _coerce(section: str, cls, doc: Mapping[str, Any]):
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{section}: expected a mapping, got {type(doc).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = getattr(cls(), name) if name in known else None
        try:
            kwargs[name] = _convert(value, default)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{name}: {exc}") from None
    try:
        return cls(**kwargs)
    except InvalidInputError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _convert(value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or int(value) != value:
            raise TypeError(f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool):
            raise TypeError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        return tuple(int(v) for v in value)
    if isinstance(default, Mapping):
        if not isinstance(value, Mapping):
            raise TypeError(f"expected a mapping, got {value!r}")
        return dict(value)
    return value


def config_from_mapping(doc: Optional[Mapping[str, Any]]) -> ExperimentConfig:
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(_SECTION_TYPES) - {"latency"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name in doc and doc[name] is not None:
            kwargs[name] = _coerce(name, cls, doc[name])
    if doc.get("latency") is not None:
        try:
            kwargs["latency"] = LatencyConfig.from_mapping(doc["latency"])
        except InvalidInputError as exc:
            raise ConfigError(f"latency: {exc}") from None
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return config_from_mapping(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_json(), sort_keys=True)


def preset_names() -> list[str]:
    files = resources.files("chainfl").joinpath("presets").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".yaml"))


def load_preset(name: str) -> ExperimentConfig:
    res = resources.files("chainfl").joinpath("presets", f"{name}.yaml")
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return config_from_mapping(yaml.safe_load(res.read_text(encoding="utf-8")))


def validate(cfg: ExperimentConfig) -> None:
    """Raise ConfigError naming the first offending field."""
    e, a, m, t, d, lg, mon = cfg.experiment, cfg.adversary, cfg.model, cfg.training, cfg.data, cfg.ledger, cfg.monitor

    def need(ok: bool, where: str, msg: str):
        if not ok:
            raise ConfigError(f"{where}: {msg}")

    need(e.mode in MODES, "experiment.mode", f"must be one of {MODES}, got {e.mode!r}")
    need(e.seed >= 0, "experiment.seed", "must be non-negative")
    need(e.total_clients >= 1, "experiment.total_clients", "must be >= 1")
    need(0 < e.selection_rate <= 1, "experiment.selection_rate", "must lie in (0, 1]")
    need(0 < e.target_accuracy <= 1, "experiment.target_accuracy", "must lie in (0, 1]")
    need(e.max_rounds >= 1, "experiment.max_rounds", "must be >= 1")
    need(0 <= a.malicious_rate < 1, "adversary.malicious_rate", "must lie in [0, 1)")
    for kind in a.mix:
        need(kind in ("lazy", "falsifier", "sybil", "replayer"), "adversary.mix", f"unknown behaviour {kind!r}")
    need(len(m.layer_sizes) >= 2, "model.layer_sizes", "need at least input and output sizes")
    need(all(s >= 1 for s in m.layer_sizes), "model.layer_sizes", "sizes must be positive")
    need(m.layer_sizes[-1] >= 2, "model.layer_sizes", "output layer needs >= 2 classes")
    need(m.activation in {x.value for x in Activation}, "model.activation", "must be relu or sigmoid")
    need(t.learning_rate > 0, "training.learning_rate", "must be positive")
    need(t.epochs >= 1, "training.epochs", "must be >= 1")
    need(t.batch_size >= 1, "training.batch_size", "must be >= 1")
    need(d.source in ("synthetic", "csv"), "data.source", "must be synthetic or csv")
    need(d.source != "csv" or bool(d.csv_path), "data.csv_path", "required when data.source is csv")
    need(1 <= d.client_size_min <= d.client_size_max, "data.client_size_min", "need 1 <= min <= max")
    need(t.batch_size <= d.client_size_min, "training.batch_size", "must not exceed data.client_size_min")
    need(0 < d.holdout_fraction < 1, "data.holdout_fraction", "must lie in (0, 1)")
    need(0 <= d.label_skew <= 1, "data.label_skew", "must lie in [0, 1]")
    if d.source == "synthetic":
        need(d.n_classes >= 2, "data.n_classes", "must be >= 2")
        need(d.n_features >= d.n_classes, "data.n_features", "must be >= data.n_classes")
        need(m.layer_sizes[0] == d.n_features, "model.layer_sizes", "input size must equal data.n_features")
        need(m.layer_sizes[-1] == d.n_classes, "model.layer_sizes", "output size must equal data.n_classes")
        need(d.center_scale > 0 and d.noise > 0, "data.center_scale", "center_scale and noise must be positive")
    need(0 <= lg.difficulty <= 64, "ledger.difficulty", "must lie in [0, 64]")
    need(lg.miners >= 1, "ledger.miners", "must be >= 1")
    need(mon.accuracy_slack > 0, "monitor.accuracy_slack", "must be positive")
