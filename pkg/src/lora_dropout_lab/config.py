"""Versioned JSON experiment configuration.

Every section is a dataclass; unknown keys anywhere are rejected so typos
in sweep grids fail loudly. Missing keys take the defaults below, which
describe the desk-scale default experiment: a 16-32-4 MLP pretrained on
2048 blobs, fine-tuned with rank-8 LoRA on 64 shifted samples, p = 0.5 and
N = 4.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .adapters import check_rate
from .data import KINDS, DatasetSpec
from .errors import ConfigError
from .training import TrainConfig

SCHEMA_VERSION = 1


def _strict(cls, d, section):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad section {section!r}: {exc}") from None


@dataclass
class ModelSpec:
    hidden: list = field(default_factory=lambda: [32])
    adapter: str = "lora"
    rank: int = 8
    scale: float = 1.0
    train_head: bool = False

    def validate(self):
        if self.adapter not in ("lora", "adalora"):
            raise ConfigError(f"adapter must be 'lora' or 'adalora', got {self.adapter!r}")
        if self.rank < 1:
            raise ConfigError("rank must be positive")
        if any(int(h) != h or h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive integers")


@dataclass
class DataSection:
    kind: str = "blobs"
    K: int = 4
    dim: int = 16
    noise: float = 1.0
    center_scale: float = 1.0
    shift_angle: float = 30.0
    shift_translation: float = 0.0
    n_pretrain: int = 2048
    n_train: int = 64
    n_test: int = 1024

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"dataset kind must be one of {KINDS}")
        if self.K < 2:
            raise ConfigError(f"class count K must be >= 2, got {self.K}")
        for name in ("n_pretrain", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def spec(self, split: str, seed: int) -> DatasetSpec:
        n = {"pretrain": self.n_pretrain, "finetune-train": self.n_train, "finetune-test": self.n_test}[split]
        return DatasetSpec(
            kind=self.kind,
            K=self.K,
            dim=self.dim,
            n=n,
            noise=self.noise,
            center_scale=self.center_scale,
            shift_angle=self.shift_angle,
            shift_translation=self.shift_translation,
            seed=seed,
            split=split,
        ).validate()


@dataclass
class PretrainSection:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    optimizer: str = "adam"


@dataclass
class EvalSection:
    ensemble: bool = True
    domain: str = "logits"
    bins: int = 10


@dataclass
class SweepSection:
    p_grid: list = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.5, 0.7, 0.9])
    seeds: int = 5
    C: float | None = None
    delta: float = 0.1
    lam: float = 1.0
    eta: float | None = None
    lambda_min: float | None = None

    def validate(self):
        for p in self.p_grid:
            check_rate(p)
            if p > 0.95:
                raise ConfigError(f"sweep rates must lie in [0, 0.95], got {p}")
        if self.seeds < 3:
            raise ConfigError("a sweep needs at least 3 seeds")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")


@dataclass
class ProbeSection:
    problem: str = "logistic"
    n: int = 50
    dim: int = 4
    K: int = 2
    noise: float = 1.0
    lam: list = field(default_factory=lambda: [0.1, 1.0, 10.0])
    p: float = 0.5
    tol: float = 1e-8


@dataclass
class JensenSection:
    widths: list = field(default_factory=lambda: [8, 16, 4])
    rank: int = 4
    p: float = 0.5
    N: int = 4
    trials: int = 200
    batch_size: int = 16
    domains: list = field(default_factory=lambda: ["logits", "probabilities"])


@dataclass
class McNormSection:
    delta: list = field(default_factory=lambda: [3.0, 4.0])
    p: float = 0.5
    draws: int = 1_000_000


_SECTIONS = {
    "model": ModelSpec,
    "data": DataSection,
    "pretrain": PretrainSection,
    "train": TrainConfig,
    "eval": EvalSection,
    "sweep": SweepSection,
    "probe": ProbeSection,
    "jensen": JensenSection,
    "mcnorm": McNormSection,
}


def _default_train():
    return TrainConfig(epochs=200, batch_size=16, p=0.5, N=4, lr=0.01, optimizer="adam")


@dataclass
class ExperimentConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainConfig = field(default_factory=_default_train)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    jensen: JensenSection = field(default_factory=JensenSection)
    mcnorm: McNormSection = field(default_factory=McNormSection)

    def validate(self) -> "ExperimentConfig":
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {self.version} (expected {SCHEMA_VERSION})")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")
        self.model.validate()
        self.data.validate()
        self.train.validate()
        self.sweep.validate()
        if self.eval.domain not in ("logits", "probabilities"):
            raise ConfigError(f"eval domain must be 'logits' or 'probabilities', got {self.eval.domain!r}")
        return self

    @property
    def widths(self) -> list[int]:
        return [self.data.dim, *self.model.hidden, self.data.K]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        top = {f.name for f in fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in d.items():
            if name in _SECTIONS:
                base = asdict(_default_train()) if name == "train" else {}
                base.update(value if isinstance(value, dict) else {})
                if not isinstance(value, dict):
                    raise ConfigError(f"section {name!r} must be a JSON object")
                kwargs[name] = _strict(_SECTIONS[name], base, name)
            else:
                kwargs[name] = value
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(d)


def child_seed(master: int, *key: int) -> int:
    """A 63-bit seed derived from ``master`` and ``key``."""
    state = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key)).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)
