"""Experiment configuration: a YAML file mapped onto nested dataclasses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, List, Mapping, Tuple

import yaml

from ..artransformer import ArTrainConfig, TransformerConfig
from ..baselines import BrainAgeConfig
from ..errors import ConfigError
from ..synthcohort import CohortConfig, GeneratorConfig, config_hash
from ..vqvae import VqTrainConfig, VqVaeConfig


@dataclass(frozen=True)
class TransformerSettings:
    """Architecture knobs; vocabulary and length follow from the VQ-VAE."""
    layers: int = 4
    heads: int = 4
    width: int = 64
    ff_mult: int = 4
    dropout: float = 0.3


@dataclass(frozen=True)
class SweepSpec:
    mode: str
    strength: float


def default_sweeps() -> Tuple[SweepSpec, ...]:
    """Strength 0 and 0.25 texture cohorts plus a mean-shift cohort for region recovery."""
    return (SweepSpec("texture", 0.0), SweepSpec("texture", 0.25), SweepSpec("mean_shift", 2.0))


@dataclass(frozen=True)
class EvaluationConfig:
    top_k: int = 10
    alpha: float = 0.05
    # extra evaluation cohorts scored with the same trained models
    sweeps: Tuple[SweepSpec, ...] = field(default_factory=default_sweeps)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    precision: str = "f32"
    threads: int = 1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    vqvae: VqVaeConfig = field(default_factory=VqVaeConfig)
    vqvae_train: VqTrainConfig = field(default_factory=VqTrainConfig)
    transformer: TransformerSettings = field(default_factory=TransformerSettings)
    transformer_train: ArTrainConfig = field(default_factory=ArTrainConfig)
    brain_age: BrainAgeConfig = field(default_factory=BrainAgeConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        # the cohort always carries the top-level generator
        if self.cohort.generator != self.generator:
            object.__setattr__(self, "cohort", replace(self.cohort, generator=self.generator))
        self.validate()

    def validate(self) -> None:
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        bad = [e for e in self.generator.extents if e % self.vqvae.factor]
        if bad:
            raise ConfigError(f"volume extents {self.generator.extents} are not divisible by the "
                              f"VQ-VAE factor {self.vqvae.factor}")
        if self.cohort.anomaly_mode not in ("texture", "mean_shift"):
            raise ConfigError(f"unknown anomaly mode {self.cohort.anomaly_mode!r}")
        if self.cohort.n_affected_regions > self.generator.n_regions:
            raise ConfigError("n_affected_regions exceeds n_regions")
        if self.transformer.width % self.transformer.heads:
            raise ConfigError("transformer width must be divisible by heads")
        for s in self.evaluation.sweeps:
            if s.mode not in ("texture", "mean_shift") or s.strength < 0:
                raise ConfigError(f"invalid sweep {s}")

    @property
    def latent_extents(self) -> tuple:
        return self.vqvae.latent_extents(self.generator.extents)

    def transformer_config(self) -> TransformerConfig:
        """Vocabulary = K + 1 (BOS) and max length = cells + 1."""
        n = 1
        for e in self.latent_extents:
            n *= e
        t = self.transformer
        return TransformerConfig(vocab_size=self.vqvae.codebook_size + 1, max_len=n + 1, layers=t.layers,
                                 heads=t.heads, width=t.width, ff_mult=t.ff_mult, dropout=t.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cohort"].pop("generator")
        return _plain(d)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        return config_hash({n: d[n] for n in names} | {"seed": self.seed})

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "generator": GeneratorConfig, "cohort": CohortConfig, "vqvae": VqVaeConfig,
    "vqvae_train": VqTrainConfig, "transformer": TransformerSettings,
    "transformer_train": ArTrainConfig, "brain_age": BrainAgeConfig,
}


def _build(cls, values: Any, section: str):
    if values is None:
        return cls()
    if not isinstance(values, Mapping):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)} - ({"generator"} if cls is CohortConfig else set())
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {', '.join(unknown)}")
    kwargs = dict(values)
    if cls is BrainAgeConfig and "widths" in kwargs:
        kwargs["widths"] = tuple(kwargs["widths"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def config_from_dict(data: Mapping) -> ExperimentConfig:
    data = dict(data or {})
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    kwargs = {name: _build(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    ev = data.get("evaluation") or {}
    if not isinstance(ev, Mapping):
        raise ConfigError("section 'evaluation' must be a mapping")
    unknown = sorted(set(ev) - {"top_k", "alpha", "sweeps"})
    if unknown:
        raise ConfigError(f"unknown keys in 'evaluation': {', '.join(unknown)}")
    try:
        sweeps = tuple(SweepSpec(str(s["mode"]), float(s["strength"])) for s in ev["sweeps"] or ()) \
            if "sweeps" in ev else default_sweeps()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid evaluation sweeps: {exc}") from exc
    kwargs["evaluation"] = EvaluationConfig(int(ev.get("top_k", 10)), float(ev.get("alpha", 0.05)), sweeps)
    for key in ("seed", "threads"):
        if key in data:
            kwargs[key] = int(data[key])
    if "precision" in data:
        kwargs["precision"] = str(data["precision"])
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    """Parse a YAML experiment file; missing sections take defaults."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data or {})


__all__: List[str] = ["EvaluationConfig", "ExperimentConfig", "SweepSpec", "TransformerSettings",
                      "config_from_dict", "default_sweeps", "load_config"]
