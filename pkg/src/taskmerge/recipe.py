"""Merge recipes: algorithm choice plus every hyperparameter."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

from .errors import ConfigError
from .tensor import RankPolicy

DEFAULT_LAMBDA_GRID = (0.1, 0.3, 0.5, 0.7, 1.0, 1.5)


class Method(str, enum.Enum):
    WEIGHT_AVERAGE = "WeightAverage"
    TASK_ARITHMETIC = "TaskArithmetic"
    TIES = "Ties"
    TSV = "TsvMerge"
    ISO_C = "IsoC"
    WUDI = "Wudi"
    WUDI_V2_FULL = "WudiV2Full"
    WUDI_V2_LORA = "WudiV2Lora"

    @property
    def optimizes(self) -> bool:
        return self in (Method.WUDI, Method.WUDI_V2_FULL, Method.WUDI_V2_LORA)


class Optimizer(str, enum.Enum):
    SGD = "Sgd"
    ADAM = "Adam"


class Init(str, enum.Enum):
    ZERO = "Zero"
    MEAN = "MeanOfTaskVectors"


def _enum(cls, value):
    if isinstance(value, cls):
        return value
    for member in cls:
        if str(value).lower() in (member.value.lower(), member.name.lower()):
            return member
    raise ConfigError(f"unknown {cls.__name__} {value!r}; choose from {[m.value for m in cls]}")


@dataclass(frozen=True)
class MergeRecipe:
    method: Method = Method.TASK_ARITHMETIC
    lam: float = 1.0
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    dare_rate: float | None = None
    ties_density: float = 0.2
    rank_policy: RankPolicy = field(default_factory=RankPolicy)
    optimizer: Optimizer = Optimizer.ADAM
    learning_rate: float = 1e-5
    iterations: int = 300
    init: Init = Init.MEAN
    lora_centered: bool = False
    seed: int = 0

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "method", _enum(Method, self.method))
        set_(self, "optimizer", _enum(Optimizer, self.optimizer))
        set_(self, "init", _enum(Init, self.init))
        set_(self, "rank_policy", RankPolicy.parse(self.rank_policy))
        set_(self, "lambda_grid", tuple(float(x) for x in self.lambda_grid))
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not self.lambda_grid or any(x <= 0 for x in self.lambda_grid):
            raise ConfigError("lambda_grid must be a non-empty list of positive values")
        if self.dare_rate is not None and not 0.0 <= self.dare_rate < 1.0:
            raise ConfigError(f"DARE drop rate must lie in [0, 1), got {self.dare_rate}")
        if not 0.0 < self.ties_density <= 1.0:
            raise ConfigError(f"TIES density must lie in (0, 1], got {self.ties_density}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError(f"iterations must be a positive integer, got {self.iterations}")

    @classmethod
    def from_dict(cls, d: dict) -> "MergeRecipe":
        d = dict(d)
        preset = d.pop("preset", None)
        base = PRESETS[_preset_name(preset)] if preset else cls()
        names = {f.name for f in dataclasses.fields(cls)}
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown recipe key(s): {sorted(unknown)}")
        return dataclasses.replace(base, **d)

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "lambda": self.lam,
            "lambda_grid": list(self.lambda_grid),
            "dare_rate": self.dare_rate,
            "ties_density": self.ties_density,
            "rank_policy": str(self.rank_policy),
            "optimizer": self.optimizer.value,
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "init": self.init.value,
            "lora_centered": self.lora_centered,
            "seed": self.seed,
        }


def _preset_name(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return name


# Merging settings used for the two benchmark model families.
PRESETS = {
    "internvl-full": MergeRecipe(
        method=Method.WUDI_V2_FULL, optimizer=Optimizer.ADAM, learning_rate=1e-5, iterations=300
    ),
    "qwenvl-lora": MergeRecipe(
        method=Method.WUDI_V2_LORA, optimizer=Optimizer.SGD, learning_rate=1e-4, iterations=300
    ),
}
