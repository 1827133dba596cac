"""Low-rank adapter layers and LoRA Dropout masks.

Activations use the batch layout: an input ``x`` of shape ``batch x n2``
maps to ``x W0^T + b0 + scale * x A_hat^T B_hat^T`` of shape ``batch x n1``.

Dropout acts on the input and output dimensions of the adapter, never on
the rank dimension: ``A_hat = A diag(m_in)`` zeroes columns of ``A`` and
``B_hat = diag(m_out) B`` zeroes rows of ``B``. For the quasi-SVD variant
``P_hat = diag(m_out) P`` and ``Q_hat = Q diag(m_in)``; the diagonal
``Lambda`` is never masked. Masks are raw 0/1 vectors with no ``1/(1-p)``
rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DimensionError
from .tensor import Node, add_bias, constant, hadamard, matmul, parameter, scale, transpose, add

__all__ = [
    "Dense",
    "LoraLayer",
    "AdaLoraLayer",
    "DropoutMask",
    "MaskSet",
    "MaskStream",
    "check_rate",
    "sample_mask",
    "sample_mask_batch",
    "apply_dropout_lora",
    "apply_dropout_adalora",
    "merged_delta",
    "entry_zero_probability",
]


def check_rate(p: float) -> float:
    p = float(p)
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    return p


def entry_zero_probability(p: float) -> float:
    """Probability that an entry of the masked product ``B_hat A_hat`` is zero."""
    p = check_rate(p)
    return 2.0 * p - p * p


@dataclass(frozen=True)
class DropoutMask:
    """0/1 keep-vectors for one adapter layer.

    ``m_in`` has length ``n2`` (columns of ``A`` or ``Q``) and ``m_out``
    length ``n1`` (rows of ``B`` or ``P``).
    """

    m_in: np.ndarray
    m_out: np.ndarray
    p: float
    layer_id: int

    @classmethod
    def ones(cls, n1: int, n2: int, layer_id: int = 0) -> "DropoutMask":
        return cls(np.ones(n2), np.ones(n1), 0.0, layer_id)

    @classmethod
    def zeros(cls, n1: int, n2: int, layer_id: int = 0) -> "DropoutMask":
        return cls(np.zeros(n2), np.zeros(n1), 0.0, layer_id)


def sample_mask_batch(n: int, p: float, rng: np.random.Generator, draws: int) -> np.ndarray:
    """``draws x n`` array of independent keep indicators, 1 with probability ``1-p``."""
    p = check_rate(p)
    return (rng.random((draws, n)) >= p).astype(np.float64)


def sample_mask(n1: int, n2: int, p: float, rng: np.random.Generator, layer_id: int = 0) -> DropoutMask:
    p = check_rate(p)
    m_in = sample_mask_batch(n2, p, rng, 1)[0]
    m_out = sample_mask_batch(n1, p, rng, 1)[0]
    return DropoutMask(m_in, m_out, p, layer_id)


@dataclass(frozen=True)
class MaskSet:
    """One dropout instance: a mask for every adapted layer of a model.

    ``masks`` is aligned with the model's layer list; non-adapter layers
    carry ``None``.
    """

    masks: tuple
    instance: int
    key: tuple = field(default=())

    def __getitem__(self, i):
        return self.masks[i]

    def __len__(self):
        return len(self.masks)


@dataclass(frozen=True)
class MaskStream:
    """Addresses the masks drawn at one point of a run.

    The mask for instance ``r`` of layer ``l`` is drawn from a generator
    derived from ``(seed, tag, slot, epoch, iteration, r, l)`` alone.
    ``slot`` separates otherwise identical keys, e.g. evaluation on the
    train split versus the test split.
    """

    seed: int
    tag: int = rngmod.TRAIN_MASK
    epoch: int = 0
    iteration: int = 0
    slot: int = 0

    def generator(self, instance: int, layer_id: int) -> np.random.Generator:
        return rngmod.derive(
            self.seed, self.tag, self.slot, self.epoch, self.iteration, instance, layer_id
        )

    def mask_set(self, layers, p: float, instance: int) -> MaskSet:
        masks = []
        for layer_id, layer in enumerate(layers):
            if getattr(layer, "adapted", False):
                g = self.generator(instance, layer_id)
                masks.append(sample_mask(layer.n1, layer.n2, p, g, layer_id))
            else:
                masks.append(None)
        key = (self.seed, self.tag, self.slot, self.epoch, self.iteration, instance)
        return MaskSet(tuple(masks), instance, key)

    def mask_sets(self, layers, p: float, n: int) -> list[MaskSet]:
        return [self.mask_set(layers, p, r) for r in range(n)]


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """Plain affine layer ``x W^T + b``, used for pretraining and as a head."""

    kind = "dense"
    adapted = False

    def __init__(self, W, b=None, trainable=True):
        W = np.array(W, dtype=np.float64)
        self.n1, self.n2 = W.shape
        b = np.zeros(self.n1) if b is None else np.asarray(b, dtype=np.float64)
        if b.reshape(-1).shape != (self.n1,):
            raise DimensionError(f"bias of length {b.size} does not fit weight {W.shape}")
        self.W = Node(W, requires_grad=trainable, name="W")
        self.b = Node(b.reshape(1, -1), requires_grad=trainable, name="b")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "Dense":
        return cls(_uniform(rng, (n_out, n_in), n_in), _uniform(rng, (n_out,), n_in))

    @property
    def trainable(self) -> bool:
        return self.W.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.W.requires_grad = self.b.requires_grad = bool(flag)

    def parameters(self) -> list[Node]:
        return [self.W, self.b] if self.trainable else []

    def frozen_parameters(self) -> list[Node]:
        return [] if self.trainable else [self.W, self.b]

    def forward(self, x: Node, mask=None) -> Node:
        if x.cols != self.n2:
            raise DimensionError(f"dense layer expects {self.n2} input features, got {x.shape}")
        return add_bias(matmul(x, transpose(self.W)), self.b)


class _Adapter:
    adapted = True

    def _init_base(self, W0, b0):
        W0 = np.array(W0, dtype=np.float64)
        if W0.ndim != 2:
            raise DimensionError(f"W0 must be 2-D, got shape {W0.shape}")
        self.n1, self.n2 = W0.shape
        b0 = np.zeros(self.n1) if b0 is None else np.asarray(b0, dtype=np.float64).reshape(-1)
        if b0.shape != (self.n1,):
            raise DimensionError(f"bias of length {b0.size} does not fit weight {W0.shape}")
        self.W0 = constant(W0, name="W0")
        self.b0 = constant(b0.reshape(1, -1), name="b0")

    def _check_rank(self, r):
        if r < 1 or r > min(self.n1, self.n2):
            raise ConfigError(f"rank {r} must lie in [1, min({self.n1}, {self.n2})]")

    def _check_mask(self, mask: DropoutMask):
        if mask.m_in.shape != (self.n2,) or mask.m_out.shape != (self.n1,):
            raise DimensionError(
                f"mask lengths (in={mask.m_in.shape[0]}, out={mask.m_out.shape[0]}) "
                f"do not match layer (n2={self.n2}, n1={self.n1})"
            )

    def frozen_parameters(self) -> list[Node]:
        return [self.W0, self.b0]

    def forward(self, x: Node, mask: DropoutMask | None = None) -> Node:
        if x.cols != self.n2:
            raise DimensionError(f"{self.kind} layer expects {self.n2} input features, got {x.shape}")
        base = add_bias(matmul(x, transpose(self.W0)), self.b0)
        delta = self._delta_path(x, mask)
        return add(base, delta)


class LoraLayer(_Adapter):
    """Frozen ``W0`` (``n1 x n2``) plus a trainable product ``B A``.

    ``A`` is ``r x n2`` and ``B`` is ``n1 x r``. ``B`` starts at zero so the
    adapted layer initially reproduces the frozen one.
    """

    kind = "lora"

    def __init__(self, W0, A, B, b0=None, scale=1.0):
        self._init_base(W0, b0)
        A = np.array(A, dtype=np.float64)
        B = np.array(B, dtype=np.float64)
        self.r = A.shape[0]
        self._check_rank(self.r)
        if A.shape != (self.r, self.n2) or B.shape != (self.n1, self.r):
            raise DimensionError(
                f"factor shapes A{A.shape}, B{B.shape} do not fit W0 ({self.n1}, {self.n2}) at rank {self.r}"
            )
        self.A = parameter(A, name="A")
        self.B = parameter(B, name="B")
        self.scale = float(scale)

    @classmethod
    def init(cls, W0, rank, rng, b0=None, scale=1.0) -> "LoraLayer":
        n1, n2 = np.shape(W0)
        A = _uniform(rng, (rank, n2), n2)
        return cls(W0, A, np.zeros((n1, rank)), b0=b0, scale=scale)

    def parameters(self) -> list[Node]:
        return [self.A, self.B]

    def masked_factors(self, mask: DropoutMask | None):
        return apply_dropout_lora(self, mask) if mask is not None else (self.A, self.B)

    def _delta_path(self, x, mask):
        A, B = self.masked_factors(mask)
        h = matmul(matmul(x, transpose(A)), transpose(B))
        return scale(h, self.scale) if self.scale != 1.0 else h

    def merged_delta(self, mask: DropoutMask | None = None) -> Node:
        A, B = self.masked_factors(mask)
        d = matmul(B, A)
        return scale(d, self.scale) if self.scale != 1.0 else d


class AdaLoraLayer(_Adapter):
    """Frozen ``W0`` plus ``P diag(Lambda) Q`` with ``Lambda`` initialised at zero."""

    kind = "adalora"

    def __init__(self, W0, P, Lambda, Q, b0=None, scale=1.0):
        self._init_base(W0, b0)
        P = np.array(P, dtype=np.float64)
        Q = np.array(Q, dtype=np.float64)
        lam = np.asarray(Lambda, dtype=np.float64).reshape(1, -1)
        self.r = lam.shape[1]
        self._check_rank(self.r)
        if P.shape != (self.n1, self.r) or Q.shape != (self.r, self.n2):
            raise DimensionError(
                f"factor shapes P{P.shape}, Q{Q.shape} do not fit W0 ({self.n1}, {self.n2}) at rank {self.r}"
            )
        self.P = parameter(P, name="P")
        self.Lambda = parameter(lam, name="Lambda")
        self.Q = parameter(Q, name="Q")
        self.scale = float(scale)

    @classmethod
    def init(cls, W0, rank, rng, b0=None, scale=1.0) -> "AdaLoraLayer":
        n1, n2 = np.shape(W0)
        P = _uniform(rng, (n1, rank), n2)
        Q = _uniform(rng, (rank, n2), n2)
        return cls(W0, P, np.zeros(rank), Q, b0=b0, scale=scale)

    def parameters(self) -> list[Node]:
        return [self.P, self.Lambda, self.Q]

    def masked_factors(self, mask: DropoutMask | None):
        return apply_dropout_adalora(self, mask) if mask is not None else (self.P, self.Q)

    def _scaled_Q(self, Q: Node) -> Node:
        # diag(Lambda) Q as a hadamard with Lambda broadcast along columns
        lam_cols = matmul(transpose(self.Lambda), constant(np.ones((1, self.n2))))
        return hadamard(lam_cols, Q)

    def _delta_path(self, x, mask):
        P, Q = self.masked_factors(mask)
        h = matmul(matmul(x, transpose(self._scaled_Q(Q))), transpose(P))
        return scale(h, self.scale) if self.scale != 1.0 else h

    def merged_delta(self, mask: DropoutMask | None = None) -> Node:
        P, Q = self.masked_factors(mask)
        d = matmul(P, self._scaled_Q(Q))
        return scale(d, self.scale) if self.scale != 1.0 else d


def _column_mask(m: np.ndarray, rows: int) -> Node:
    return constant(np.broadcast_to(m.reshape(1, -1), (rows, m.size)))


def _row_mask(m: np.ndarray, cols: int) -> Node:
    return constant(np.broadcast_to(m.reshape(-1, 1), (m.size, cols)))


def apply_dropout_lora(layer: LoraLayer, mask: DropoutMask) -> tuple[Node, Node]:
    """Return ``(A_hat, B_hat)``; the stored factors are left untouched."""
    layer._check_mask(mask)
    A_hat = hadamard(layer.A, _column_mask(mask.m_in, layer.r))
    B_hat = hadamard(layer.B, _row_mask(mask.m_out, layer.r))
    return A_hat, B_hat


def apply_dropout_adalora(layer: AdaLoraLayer, mask: DropoutMask) -> tuple[Node, Node]:
    """Return ``(P_hat, Q_hat)``; ``Lambda`` is not masked."""
    layer._check_mask(mask)
    P_hat = hadamard(layer.P, _row_mask(mask.m_out, layer.r))
    Q_hat = hadamard(layer.Q, _column_mask(mask.m_in, layer.r))
    return P_hat, Q_hat


def merged_delta(layer, mask: DropoutMask | None = None) -> np.ndarray:
    """Value of the (possibly masked) delta weight ``n1 x n2``."""
    return layer.merged_delta(mask).value.copy()
