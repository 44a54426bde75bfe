"""JSON experiment configuration with schema validation and defaults."""

import hashlib
import json
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import io
from .sde import BENCHMARKS


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(_Section):
    id: Literal["ou2d", "halfmoon", "doublewell", "caps3d"] = "ou2d"
    params: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _known_params(self):
        unknown = set(self.params) - set(BENCHMARKS[self.id][1])
        if unknown:
            raise ValueError(f"unknown parameters for {self.id}: {sorted(unknown)}")
        return self


class SimulateSection(_Section):
    steps: int = Field(30_000, gt=0)
    dt: Optional[float] = Field(None, gt=0)
    x0: Optional[List[float]] = None


class BiasSection(_Section):
    kind: Literal["raw_coordinate", "learned_cv"] = "raw_coordinate"
    k: float = Field(1.0, gt=0)
    target: float = 0.0
    cv_index: int = Field(0, ge=0)
    dmap_model_path: Optional[str] = None
    coord_index: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _needs_model(self):
        if self.kind == "learned_cv" and not self.dmap_model_path:
            raise ValueError("learned_cv bias needs dmap_model_path")
        return self


class UmbrellaSection(_Section):
    steps: int = Field(20_000, gt=0)
    warmup: Optional[int] = Field(None, ge=0)
    dt: Optional[float] = Field(None, gt=0)
    x0: Optional[List[float]] = None

    @model_validator(mode="after")
    def _default_warmup(self):
        if self.warmup is None:
            self.warmup = self.steps // 10
        if self.warmup >= self.steps:
            raise ValueError("warmup must be smaller than steps")
        return self


class GanSection(_Section):
    arch: Literal["pyramid", "wide", "small"] = "pyramid"
    noise_dim: int = Field(1, gt=0)
    epochs: int = Field(5000, gt=0)
    batch_size: int = Field(512, ge=2)
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.5, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    d_steps_per_g_step: int = Field(1, gt=0)
    kappa: Optional[float] = Field(None, gt=0)
    sigma: Optional[float] = Field(None, ge=0)
    label_column: int = Field(0, ge=0)


class CouplingSection(_Section):
    n_chains: int = Field(10, gt=0)
    steps_per_chain: int = Field(1000, gt=0)
    warmup: int = Field(0, ge=0)
    target_label: float = 0.0
    bins: int = Field(550, gt=0)
    hist_range: Optional[List[float]] = None

    @model_validator(mode="after")
    def _warmup_fits(self):
        if self.warmup >= self.steps_per_chain:
            raise ValueError("warmup must be smaller than steps_per_chain")
        if self.hist_range is not None and (len(self.hist_range) != 2
                                            or not self.hist_range[0] < self.hist_range[1]):
            raise ValueError("hist_range must be [lo, hi] with lo < hi")
        return self


class BenchmarkSection(_Section):
    h: float = Field(8.0, gt=0)
    budgets: List[int] = Field(default_factory=lambda: [1000, 10_000, 100_000])
    n_trials: int = Field(50, gt=0)
    n_chains: int = Field(500, gt=0)
    min_chain_steps: int = Field(200, gt=0)
    coupled_warmup: float = Field(0.25, ge=0, lt=1)
    k_spring: float = Field(1.0, gt=0)


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0)
    system: SystemSection = Field(default_factory=SystemSection)
    simulate: SimulateSection = Field(default_factory=SimulateSection)
    bias: BiasSection = Field(default_factory=BiasSection)
    umbrella: UmbrellaSection = Field(default_factory=UmbrellaSection)
    gan: GanSection = Field(default_factory=GanSection)
    coupling: CouplingSection = Field(default_factory=CouplingSection)
    benchmark: BenchmarkSection = Field(default_factory=BenchmarkSection)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def validate_config(obj: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(obj)
    except ValidationError as err:
        raise ConfigError(f"invalid config: {_describe(err)}") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"malformed JSON in {path}: {err}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    return validate_config(obj)


def save_config(cfg: ExperimentConfig, path):
    io.write_json(path, cfg.to_dict())
