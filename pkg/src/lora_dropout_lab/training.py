"""Training objectives, optimizers and the fine-tuning loop.

Three modes are supported:

``dropout``
    Each iteration draws ``N`` mask sets (shared by the whole batch) and
    minimises the mean of the ``N`` masked losses.
``explicit-reg``
    Unmasked forward pass plus ``lam * (2p - p^2) * ||delta||^2`` over the
    merged adapter deltas, the closed form of the expected masked norm.
``plain``
    Unmasked forward pass, no regulariser.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import rng as rngmod
from .adapters import MaskSet, MaskStream, check_rate, entry_zero_probability
from .ensemble import evaluate
from .errors import ConfigError, ContractError, DivergenceError
from .tensor import Node, add, backward, constant, mean, scale, softmax_cross_entropy, sum_squares, zero_grad

MODES = ("dropout", "explicit-reg", "plain")
OPTIMIZERS = ("sgd", "adam")
DIVERGENCE_THRESHOLD = 1e6
RUN_COLUMNS = ("epoch", "train_loss", "test_loss", "train_acc", "test_acc", "ece", "wall_ms")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    p: float = 0.5
    N: int = 4
    lr: float = 0.01
    lam: float = 0.0
    seed: int = 0
    mode: str = "dropout"
    optimizer: str = "sgd"
    momentum: float = 0.0
    eval_N: int | None = None
    eval_domain: str = "logits"
    eval_ensemble: bool = True
    ece_bins: int = 10

    def validate(self) -> "TrainConfig":
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")
        check_rate(self.p)
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"instance count N must be a positive integer, got {self.N}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.eval_N is not None and self.eval_N < 1:
            raise ConfigError("eval_N must be positive")
        return self

    @property
    def test_instances(self) -> int:
        return self.N if self.eval_N is None else self.eval_N

    @property
    def eval_rate(self) -> float:
        # dropout is only active at test time when it was active in training
        return self.p if self.mode == "dropout" else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float
    ece: float
    wall_ms: float

    def as_tuple(self):
        return tuple(getattr(self, c) for c in RUN_COLUMNS)


@dataclass
class RunRecord:
    config: TrainConfig
    rows: list = field(default_factory=list)
    checkpoint: str | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def final(self) -> EpochRow:
        return self.rows[-1]

    def to_csv(self, timing: bool = False) -> str:
        """CSV text with a header row; ``wall_ms`` is 0 unless ``timing``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in self.rows:
            vals = list(r.as_tuple())
            vals[-1] = round(r.wall_ms, 3) if timing else 0
            w.writerow([repr(v) if isinstance(v, float) else v for v in vals])
        return buf.getvalue()


# ---------------------------------------------------------------- objectives


def multi_instance_loss(model, x, y, masks: list[MaskSet]) -> Node:
    """Mean of the masked cross-entropy losses over ``masks`` (reduced in order)."""
    if len(masks) == 0:
        raise ConfigError("multi-instance loss needs N >= 1 mask sets")
    xc = constant(x)
    return mean([softmax_cross_entropy(model.forward(xc, m), y) for m in masks])


def delta_penalty(model) -> Node:
    """``||delta theta||^2`` summed over all trainable deltas."""
    terms = [sum_squares(d) for d in model.delta_nodes()]
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def explicit_regularized_loss(model, x, y, lam: float, p: float) -> Node:
    """Task loss plus ``lam * (2p - p^2) * ||delta theta||^2``."""
    if lam < 0:
        raise ConfigError(f"lam must be non-negative, got {lam}")
    task = softmax_cross_entropy(model.forward(x), y)
    coeff = lam * entry_zero_probability(p)
    if coeff == 0.0:
        return task
    return add(task, scale(delta_penalty(model), coeff))


# ---------------------------------------------------------------- optimizers


def sgd_step(params, grads, lr: float) -> None:
    """In-place ``theta <- theta - lr * g`` for parameters that require grad."""
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    for p, g in zip(params, grads):
        if np.shape(g) != p.value.shape:
            raise ContractError(f"gradient shape {np.shape(g)} does not match parameter {p.value.shape}")
        if p.requires_grad:
            p.value -= lr * np.asarray(g)


class SGD:
    def __init__(self, params, lr, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        if self.momentum == 0.0:
            sgd_step(self.params, [p.grad for p in self.params], self.lr)
            return
        for p, v in zip(self.params, self._velocity):
            v *= self.momentum
            v += p.grad
        sgd_step(self.params, self._velocity, self.lr)


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if not p.requires_grad:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(params, config.lr)
    return SGD(params, config.lr, config.momentum)


# ---------------------------------------------------------------- loop


def batch_loss(model, x, y, config: TrainConfig, epoch: int, iteration: int) -> Node:
    if config.mode == "dropout":
        stream = MaskStream(config.seed, rngmod.TRAIN_MASK, epoch, iteration)
        masks = stream.mask_sets(model.layers, config.p, config.N)
        return multi_instance_loss(model, x, y, masks)
    if config.mode == "explicit-reg":
        return explicit_regularized_loss(model, constant(x), y, config.lam, config.p)
    return softmax_cross_entropy(model.forward(x), y)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = rngmod.derive(seed, rngmod.SHUFFLE, epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model, train_set, test_set, config: TrainConfig) -> RunRecord:
    """Fine-tune the trainable parameters of ``model`` in place.

    ``train_set`` and ``test_set`` expose ``features`` (n x d) and
    ``labels``. One row of metrics is recorded per epoch, measured with
    the test-time ensemble when the mode is ``dropout``.
    """
    config.validate()
    x_tr = np.asarray(train_set.features, dtype=np.float64)
    y_tr = np.asarray(train_set.labels)
    x_te = np.asarray(test_set.features, dtype=np.float64)
    y_te = np.asarray(test_set.labels)
    if len(x_tr) == 0 or len(x_te) == 0:
        raise ConfigError("training and test sets must be non-empty")
    params = model.parameters()
    opt = make_optimizer(params, config)
    record = RunRecord(config)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        for it, idx in enumerate(epoch_batches(len(x_tr), config.batch_size, config.seed, epoch)):
            zero_grad(params)
            loss = batch_loss(model, x_tr[idx], y_tr[idx], config, epoch, it)
            value = loss.item()
            if not np.isfinite(value) or value > DIVERGENCE_THRESHOLD:
                raise DivergenceError(epoch, it, value)
            backward(loss)
            opt.step()
        elapsed = (time.perf_counter() - t0) * 1000.0
        record.rows.append(_epoch_row(model, epoch, x_tr, y_tr, x_te, y_te, config, elapsed))
    zero_grad(params)
    return record


def _epoch_row(model, epoch, x_tr, y_tr, x_te, y_te, config, elapsed) -> EpochRow:
    common = dict(
        p=config.eval_rate,
        N=config.test_instances,
        seed=config.seed,
        epoch=epoch,
        domain=config.eval_domain,
        ensemble=config.eval_ensemble,
        bins=config.ece_bins,
    )
    tr = evaluate(model, x_tr, y_tr, slot=0, **common)
    te = evaluate(model, x_te, y_te, slot=1, **common)
    return EpochRow(epoch + 1, tr.loss, te.loss, tr.accuracy, te.accuracy, te.calibration.ece, elapsed)
