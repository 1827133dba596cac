"""Synthetic classification tasks with a controllable pretrain -> fine-tune shift.

Class centres are drawn once per seed. Fine-tune splits rotate the centres
in the plane of the first two features by ``shift_angle`` degrees and then
translate them by ``shift_translation`` along the first feature; with both
set to zero the fine-tune distribution equals the pretraining one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import rng as rngmod
from .errors import ConfigError

SPLITS = ("pretrain", "finetune-train", "finetune-test")
KINDS = ("blobs", "moons")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    K: int = 4
    dim: int = 16
    n: int = 64
    noise: float = 1.0
    center_scale: float = 1.0
    shift_angle: float = 90.0
    shift_translation: float = 0.0
    seed: int = 0
    split: str = "finetune-train"

    def validate(self) -> "DatasetSpec":
        if self.kind not in KINDS:
            raise ConfigError(f"dataset kind must be one of {KINDS}, got {self.kind!r}")
        if self.K < 2:
            raise ConfigError(f"class count K must be >= 2, got {self.K}")
        if self.kind == "moons" and self.K != 2:
            raise ConfigError("two-moons data has exactly K = 2 classes")
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if self.n < 1:
            raise ConfigError(f"n must be positive, got {self.n}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d).validate()

    def with_split(self, split: str, n: int) -> "DatasetSpec":
        return replace(self, split=split, n=n)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str
    spec: DatasetSpec

    def __len__(self):
        return len(self.labels)

    @property
    def K(self) -> int:
        return self.spec.K


def _rotation(angle_deg: float, dim: int) -> np.ndarray:
    t = np.deg2rad(angle_deg)
    R = np.eye(dim)
    R[:2, :2] = [[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]
    return R


def _shift(points: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    if spec.split == "pretrain" or (spec.shift_angle == 0 and spec.shift_translation == 0):
        return points
    out = points @ _rotation(spec.shift_angle, spec.dim).T
    out[:, 0] += spec.shift_translation
    return out


def class_centers(spec: DatasetSpec) -> np.ndarray:
    """Class centres (``K x dim``) of the split described by ``spec``.

    The first two coordinates sit on a circle of radius ``2 * center_scale``
    with a seed-dependent phase; the remaining coordinates carry no class
    signal, only noise.
    """
    spec.validate()
    g = rngmod.derive(spec.seed, rngmod.DATA, 0)
    centers = np.zeros((spec.K, spec.dim))
    angles = 2 * np.pi * np.arange(spec.K) / spec.K + g.uniform(0, 2 * np.pi)
    centers[:, 0] = 2 * spec.center_scale * np.cos(angles)
    centers[:, 1] = 2 * spec.center_scale * np.sin(angles)
    return _shift(centers, spec)


def _moons(g, n, noise, dim):
    y = g.integers(0, 2, size=n)
    t = g.uniform(0, np.pi, size=n)
    x = np.zeros((n, dim))
    x[:, 0] = np.where(y == 0, np.cos(t), 1 - np.cos(t)) - 0.5
    x[:, 1] = np.where(y == 0, np.sin(t), 0.5 - np.sin(t)) - 0.25
    x += noise * g.normal(size=(n, dim))
    return x, y


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Sample a split; the result is a pure function of ``spec``."""
    spec.validate()
    split_id = SPLITS.index(spec.split) + 1
    g = rngmod.derive(spec.seed, rngmod.DATA, split_id)
    if spec.kind == "blobs":
        centers = class_centers(spec)
        y = g.integers(0, spec.K, size=spec.n)
        x = centers[y] + spec.noise * g.normal(size=(spec.n, spec.dim))
    else:
        x, y = _moons(g, spec.n, spec.noise, spec.dim)
        x = _shift(x, spec)
    return Dataset(np.ascontiguousarray(x), y.astype(np.int64), spec.split, spec)
