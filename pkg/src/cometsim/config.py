"""Scenario and hyperparameter configuration, loaded from YAML scenario files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ConfigError(ValueError):
    """Invalid scenario file or hyperparameter value."""


@dataclass(frozen=True)
class ClassSplit:
    shared: int = 6
    source_private: int = 3
    target_private: int = 3

    def __post_init__(self):
        if min(self.shared, self.source_private, self.target_private) < 0:
            raise ConfigError(f"class split counts must be non-negative: {self}")
        if self.num_source < 2:
            raise ConfigError(f"at least 2 source classes are required, got {self.num_source}")
        if self.shared + self.target_private < 1:
            raise ConfigError("target label space is empty")

    @property
    def num_source(self) -> int:
        return self.shared + self.source_private

    @property
    def num_total(self) -> int:
        return self.shared + self.source_private + self.target_private

    @property
    def kind(self) -> str:
        if self.source_private > 0 and self.target_private > 0:
            return "OPDA"
        if self.source_private > 0:
            return "PDA"
        if self.target_private > 0:
            return "ODA"
        return "closed"

    # Global class ids follow an ordered class list: the first |Y_s| ids are
    # source classes and the last |Y_t| ids are target classes.
    @property
    def source_classes(self) -> list[int]:
        return list(range(self.num_source))

    @property
    def target_classes(self) -> list[int]:
        return list(range(self.source_private, self.num_total))


@dataclass(frozen=True)
class DomainTransform:
    """Target-domain shift applied to class-conditional samples.

    ``rotation_deg`` rotates every consecutive coordinate pair of a seeded
    random orthonormal basis; ``translation`` and ``noise`` are in units of
    the source intra-class sigma.
    """

    rotation_deg: float = 30.0
    translation: float = 1.0
    scale: float = 1.2
    noise: float = 1.0

    def __post_init__(self):
        if self.scale == 0:
            raise ConfigError("domain scale must be nonzero")
        if self.noise < 0:
            raise ConfigError("domain noise must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.translation == 0 and self.scale == 1 and self.noise == 0


@dataclass(frozen=True)
class DataConfig:
    input_dim: int = 16
    separation: float = 6.0
    sigma: float = 1.0
    source_per_class: int = 300
    val_fraction: float = 0.2
    geometry_seed: int = 0
    unknown_mix: int = 9
    augment_sigma: float | None = None

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.separation <= 0 or self.sigma <= 0:
            raise ConfigError("separation and sigma must be positive")
        if self.source_per_class < 1:
            raise ConfigError("source_per_class must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.unknown_mix < 0:
            raise ConfigError("unknown_mix must be >= 0")
        if self.augment_sigma is not None and self.augment_sigma < 0:
            raise ConfigError("augment_sigma must be >= 0")

    @property
    def effective_augment_sigma(self) -> float:
        return 0.1 * self.sigma if self.augment_sigma is None else self.augment_sigma


@dataclass(frozen=True)
class StreamConfig:
    num_samples: int = 12800

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigError("stream num_samples must be >= 1")


@dataclass(frozen=True)
class NetworkSection:
    feature_dim: int = 32
    projection_dim: int = 16
    g_hidden: tuple[int, ...] = (64,)
    proj_hidden: int = 32


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    patience: int = 8
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError(f"invalid pretraining settings: {self}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("pretraining learning_rate must be positive")


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.999
    delta_l: float = 0.25
    delta_u: float = 0.75
    delta: float = 0.5
    tau: float = 0.1
    lam: float = 0.1
    learning_rate: float = 5e-6
    sgd_momentum: float = 0.9
    batch_size: int = 128
    use_contrastive: bool = True
    use_entropy: bool = True
    running_prototype_source: str = "teacher"

    def __post_init__(self):
        for name in ("alpha", "delta_l", "delta_u", "delta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not self.delta_l < self.delta_u:
            raise ConfigError(f"delta_l must be < delta_u, got {self.delta_l} >= {self.delta_u}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ConfigError("sgd_momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.use_contrastive or self.use_entropy):
            raise ConfigError("at least one of use_contrastive/use_entropy must be enabled")
        if self.running_prototype_source not in ("teacher", "student"):
            raise ConfigError("running_prototype_source must be 'teacher' or 'student'")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    split: ClassSplit = field(default_factory=ClassSplit)
    data: DataConfig = field(default_factory=DataConfig)
    domain: DomainTransform = field(default_factory=DomainTransform)
    stream: StreamConfig = field(default_factory=StreamConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    hyper: HyperParams = field(default_factory=HyperParams)

    @property
    def num_batches(self) -> int:
        return -(-self.stream.num_samples // self.hyper.batch_size)

    def with_hyper(self, **overrides) -> "ScenarioConfig":
        try:
            return dataclasses.replace(self, hyper=dataclasses.replace(self.hyper, **overrides))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["network"]["g_hidden"] = list(self.network.g_hidden)
        return out


_SECTIONS = {
    "split": ClassSplit,
    "data": DataConfig,
    "domain": DomainTransform,
    "stream": StreamConfig,
    "network": NetworkSection,
    "pretrain": PretrainConfig,
    "hyper": HyperParams,
}


def _coerce(section: str, key: str, annotation: str, value):
    where = f"{section}.{key}"
    if annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if annotation == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if annotation.startswith("float"):
        if value is None and "None" in annotation:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if annotation.startswith("tuple"):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of integers, got {value!r}")
        return tuple(value)
    if annotation == "str" and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def _build_section(name: str, cls, raw: Any):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    values = dict(raw)
    types = {f.name: f.type for f in fields(cls)}
    for key, value in values.items():
        values[key] = _coerce(name, key, types[key], value)
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"section '{name}': {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


def scenario_from_dict(raw: dict[str, Any]) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigError("scenario document must be a mapping")
    allowed = {"name", "seed", *_SECTIONS}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {name: _build_section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    return ScenarioConfig(name=str(raw.get("name", "scenario")), seed=seed, **sections)


def resolve_scenario_path(ref: str | Path) -> Path:
    """Accept a file path or the name of a bundled scenario (e.g. ``ref_opda``)."""
    path = Path(ref)
    if path.exists():
        return path
    bundled = SCENARIO_DIR / f"{ref}.yaml"
    if bundled.exists():
        return bundled
    raise ConfigError(f"scenario not found: {ref}")


def load_scenario(ref: str | Path) -> ScenarioConfig:
    path = resolve_scenario_path(ref)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"{path}: parse error{where}: {exc}") from None
    try:
        return scenario_from_dict(raw or {})
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
