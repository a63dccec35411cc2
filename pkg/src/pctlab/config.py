"""Strict experiment configuration documents (JSON)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cells import CellConfig
from .tasks import resolve_params
from .train import SWEEP_AXES, TrainConfig

# optimisation fields of TrainConfig that live under "train"
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name not in ("cell", "task", "task_params", "seed"))


class ConfigError(ValueError):
    pass


def _check_keys(where: str, got: dict, allowed) -> None:
    if not isinstance(got, dict):
        raise ConfigError(f"{where}: expected an object, got {type(got).__name__}")
    unknown = sorted(set(got) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(where + '.' + k for k in unknown)}")


@dataclass
class SweepSpec:
    axis: str
    values: list
    stuck_seed_protocol: bool = False

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis: expected one of {SWEEP_AXES}, got {self.axis!r}")
        if not self.values:
            raise ConfigError("sweep.values: must be non-empty")


@dataclass
class VerifySpec:
    cells: list = field(default_factory=list)
    dim: int = 16
    heads: int = 2
    n_tokens: int = 12
    gate_d: int = 128
    gate_n: int = 1021


@dataclass
class ExperimentConfig:
    cell: CellConfig = field(default_factory=lambda: CellConfig(dim=64, heads=4, dim_head=16))
    task: str = "copy"
    task_params: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sweep: SweepSpec | None = None
    verify: VerifySpec | None = None
    out_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        try:
            self.task_params = resolve_params(self.task, self.task_params)
        except ValueError as exc:
            raise ConfigError(f"task: {exc}") from None
        _check_keys("train", self.train, TRAIN_KEYS)
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds: need a non-empty list of integers")
        # resolve train defaults so the serialised form is complete
        tc = self.train_config(self.seeds[0])
        self.train = {k: v for k, v in tc.to_dict().items() if k in TRAIN_KEYS}
        self.cell = tc.cell

    def train_config(self, seed: int) -> TrainConfig:
        try:
            return TrainConfig.from_dict({**self.train, "cell": asdict(self.cell), "task": self.task,
                                          "task_params": dict(self.task_params), "seed": seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "cell": asdict(self.cell), "task": self.task, "task_params": dict(self.task_params),
            "train": dict(self.train),
            "sweep": asdict(self.sweep) if self.sweep else None,
            "verify": asdict(self.verify) if self.verify else None,
            "out_dir": self.out_dir, "seeds": list(self.seeds),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys("config", d, [f.name for f in fields(cls)])
        d = dict(d)
        if "cell" in d:
            _check_keys("cell", d["cell"], [f.name for f in fields(CellConfig)])
            try:
                d["cell"] = CellConfig(**d["cell"])
            except ValueError as exc:
                raise ConfigError(f"cell: {exc}") from None
        if d.get("sweep") is not None:
            _check_keys("sweep", d["sweep"], [f.name for f in fields(SweepSpec)])
            d["sweep"] = SweepSpec(**d["sweep"])
        if d.get("verify") is not None:
            _check_keys("verify", d["verify"], [f.name for f in fields(VerifySpec)])
            d["verify"] = VerifySpec(**d["verify"])
        return cls(**d)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())
