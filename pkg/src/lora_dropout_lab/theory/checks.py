"""Monte Carlo and exhaustive checks of the sparsity identities and the ensemble inequality."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import rng as rngmod
from ..adapters import AdaLoraLayer, LoraLayer, MaskStream, check_rate, entry_zero_probability
from ..ensemble import DOMAINS, ensemble_from_masks
from ..errors import ConfigError
from ..model import Model

JENSEN_SLACK = 1e-10
_CHUNK = 8192
_TWO32 = 2.0**32


def _drop_threshold(q: float) -> np.uint64:
    # u < thr with u uniform on 32 bits has probability thr / 2^32, within 2^-33 of q
    return np.uint64(min(round(q * _TWO32), 2**32))


def _uniform_bits(g: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """``rows x cols`` uniform 32-bit integers, drawn as raw 64-bit words."""
    words = g.bit_generator.random_raw((rows * cols + 1) // 2)
    return words.view(np.uint32)[: rows * cols].reshape(rows, cols)


def _below(u: np.ndarray, thr: np.uint64) -> np.ndarray:
    # a threshold of 2^32 does not fit in uint32 and means always below
    if thr >= 2**32:
        return np.ones(u.shape, dtype=bool)
    return u < np.uint32(thr)


@dataclass
class MaskedNormReport:
    p: float
    draws: int
    dim: int
    mc_estimate: float
    closed_form: float
    rel_error: float
    std_error: float

    @property
    def z_score(self) -> float:
        diff = abs(self.mc_estimate - self.closed_form)
        if self.std_error == 0:
            return 0.0 if diff == 0 else math.inf
        return diff / self.std_error

    def within(self, k: float = 3.0) -> bool:
        return self.z_score <= k

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "draws": self.draws,
            "dim": self.dim,
            "mc_estimate": self.mc_estimate,
            "closed_form": self.closed_form,
            "rel_error": self.rel_error,
            "std_error": self.std_error,
            "z_score": self.z_score,
        }


def mc_masked_norm_check(delta, p: float, draws: int, seed: int = 0) -> MaskedNormReport:
    """Average ``||d * delta||^2`` over ``draws`` masks ``d ~ Bernoulli(2p - p^2)``.

    ``d = 1`` marks a dropped entry, so the expectation is
    ``(2p - p^2) ||delta||^2``. The reported standard error is the exact
    one for the estimator, ``sqrt(q (1 - q) sum(delta^4) / draws)``.
    """
    if draws < 1:
        raise ConfigError(f"draws must be >= 1, got {draws}")
    p = check_rate(p)
    w = np.asarray(delta, dtype=np.float64).reshape(-1) ** 2
    q = entry_zero_probability(p)
    closed = q * float(w.sum())
    g = rngmod.derive(seed, rngmod.CHECK, 0)
    thr = _drop_threshold(q)
    # per-entry drop counts suffice: sum over draws of d @ w is counts @ w
    counts = np.zeros(w.size, dtype=np.int64)
    done = 0
    while done < draws:
        rows = min(_CHUNK, draws - done)
        counts += np.count_nonzero(_below(_uniform_bits(g, rows, w.size), thr), axis=0)
        done += rows
    mc = float(counts @ w) / draws
    if closed == 0:
        rel = 0.0 if mc == 0 else math.inf
    else:
        rel = abs(mc - closed) / closed
    se = math.sqrt(q * (1.0 - q) * float((w * w).sum()) / draws)
    return MaskedNormReport(p, draws, w.size, mc, closed, rel, se)


@dataclass
class SparsityReport:
    p: float
    draws: int
    shape: tuple
    zero_fraction: float
    expected: float
    sigma: float

    @property
    def z_score(self) -> float:
        diff = abs(self.zero_fraction - self.expected)
        if self.sigma == 0:
            return 0.0 if diff == 0 else math.inf
        return diff / self.sigma

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "draws": self.draws,
            "shape": list(self.shape),
            "zero_fraction": self.zero_fraction,
            "expected": self.expected,
            "sigma": self.sigma,
            "z_score": self.z_score,
        }


def _product_count_variance(n1: int, n2: int, keep: float) -> float:
    """Variance of ``X * Y`` for independent ``X ~ Bin(n1, keep)`` and ``Y ~ Bin(n2, keep)``."""

    def moments(n):
        m1 = n * keep
        return m1, n * keep * (1 - keep) + m1 * m1

    a1, a2 = moments(n1)
    b1, b2 = moments(n2)
    return a2 * b2 - (a1 * b1) ** 2


def entry_sparsity_check(layer: LoraLayer, p: float, draws: int, seed: int = 0) -> SparsityReport:
    """Fraction of zero entries in the masked product over ``draws`` mask pairs.

    Masks are drawn with the same generator order as :func:`sample_mask`
    and applied to the merged ``B A``; entries that are zero regardless of
    the mask would bias the count, so ``B A`` must be dense.
    """
    if draws < 1:
        raise ConfigError(f"draws must be >= 1, got {draws}")
    p = check_rate(p)
    BA = layer.merged_delta().value
    if np.any(BA == 0):
        raise ConfigError("the merged adapter product has structural zeros")
    n1, n2 = layer.n1, layer.n2
    stream = MaskStream(seed, rngmod.CHECK)
    g = stream.generator(0, 0)
    zeros = 0
    done = 0
    while done < draws:
        rows = max(1, min(draws - done, _CHUNK * 32 // (n1 * n2)))
        m_in = (g.random((rows, n2)) >= p).astype(np.float64)
        m_out = (g.random((rows, n1)) >= p).astype(np.float64)
        prod = m_out[:, :, None] * BA[None, :, :] * m_in[:, None, :]
        zeros += int(np.count_nonzero(prod == 0))
        done += rows
    frac = zeros / (draws * n1 * n2)
    sigma = math.sqrt(_product_count_variance(n1, n2, 1.0 - p) / draws) / (n1 * n2)
    return SparsityReport(p, draws, (n1, n2), frac, entry_zero_probability(p), sigma)


# ---------------------------------------------------------------- Jensen


@dataclass
class JensenReport:
    """Per-batch ensemble loss (``lhs``) against the mean member loss (``rhs``)."""

    p: float
    N: int
    domain: str
    lhs: np.ndarray
    rhs: np.ndarray
    slack: float = JENSEN_SLACK
    meta: dict = field(default_factory=dict)

    @property
    def gap(self) -> np.ndarray:
        return self.rhs - self.lhs

    @property
    def violations(self) -> int:
        return int(np.count_nonzero(self.gap < -self.slack))

    @property
    def max_negative_gap(self) -> float:
        g = self.gap
        return float(min(g.min(), 0.0)) if g.size else 0.0

    def rows(self):
        return [(i, float(a), float(b), float(b - a)) for i, (a, b) in enumerate(zip(self.lhs, self.rhs))]

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "N": self.N,
            "domain": self.domain,
            "trials": int(self.lhs.size),
            "violations": self.violations,
            "max_negative_gap": self.max_negative_gap,
            "min_gap": float(self.gap.min()) if self.gap.size else 0.0,
            "mean_gap": float(self.gap.mean()) if self.gap.size else 0.0,
            "slack": self.slack,
            **self.meta,
        }


def _jensen_row(model, x, y, p, N, stream, domain):
    masks = stream.mask_sets(model.layers, p, N)
    out = ensemble_from_masks(model, x, masks, domain)
    return out.loss(y), float(np.mean(out.instance_losses(y)))


def jensen_check(
    model: Model,
    features,
    labels,
    p: float,
    N: int,
    trials: int,
    seed: int = 0,
    domain: str = "logits",
    batch_size: int = 16,
) -> JensenReport:
    """Compare ensemble loss with mean instance loss on ``trials`` random batches."""
    p = check_rate(p)
    if N < 1 or trials < 1:
        raise ConfigError("N and trials must be >= 1")
    if domain not in DOMAINS:
        raise ConfigError(f"aggregation domain must be one of {DOMAINS}, got {domain!r}")
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels)
    lhs, rhs = np.empty(trials), np.empty(trials)
    for t in range(trials):
        g = rngmod.derive(seed, rngmod.CHECK, 2, t)
        idx = g.choice(len(X), size=min(batch_size, len(X)), replace=False)
        stream = MaskStream(seed, rngmod.CHECK, 3, t)
        lhs[t], rhs[t] = _jensen_row(model, X[idx], Y[idx], p, N, stream, domain)
    return JensenReport(p, N, domain, lhs, rhs)


def random_lora_mlp(widths, rank: int, seed: int, kind: str = "lora", spread: float = 1.0) -> Model:
    """An adapter MLP with random frozen weights and random, non-zero adapter factors."""
    g = rngmod.derive(seed, rngmod.CHECK, 4)
    layers = []
    for n_in, n_out in zip(widths, widths[1:]):
        W0 = g.normal(0.0, spread / math.sqrt(n_in), size=(n_out, n_in))
        b0 = g.normal(0.0, 0.1, size=n_out)
        r = min(rank, n_in, n_out)
        if kind == "lora":
            A = g.normal(0.0, spread / math.sqrt(n_in), size=(r, n_in))
            B = g.normal(0.0, spread / math.sqrt(r), size=(n_out, r))
            layers.append(LoraLayer(W0, A, B, b0=b0))
        elif kind == "adalora":
            P = g.normal(0.0, spread / math.sqrt(r), size=(n_out, r))
            Lam = g.normal(0.0, 1.0, size=r)
            Q = g.normal(0.0, spread / math.sqrt(n_in), size=(r, n_in))
            layers.append(AdaLoraLayer(W0, P, Lam, Q, b0=b0))
        else:
            raise ConfigError(f"unknown adapter kind {kind!r}")
    return Model(layers)


def random_jensen_check(
    widths,
    rank: int,
    p: float,
    N: int,
    trials: int,
    seed: int = 0,
    domain: str = "logits",
    batch_size: int = 16,
    kind: str = "lora",
) -> JensenReport:
    """Jensen check where every trial draws a fresh random model and batch."""
    p = check_rate(p)
    if N < 1 or trials < 1:
        raise ConfigError("N and trials must be >= 1")
    if domain not in DOMAINS:
        raise ConfigError(f"aggregation domain must be one of {DOMAINS}, got {domain!r}")
    K = widths[-1]
    lhs, rhs = np.empty(trials), np.empty(trials)
    for t in range(trials):
        trial_seed = int(rngmod.derive(seed, rngmod.CHECK, 5, t).integers(0, 2**62))
        model = random_lora_mlp(widths, rank, trial_seed, kind, spread=2.0)
        g = rngmod.derive(trial_seed, rngmod.DATA, 0)
        x = g.normal(size=(batch_size, widths[0]))
        y = g.integers(0, K, size=batch_size)
        lhs[t], rhs[t] = _jensen_row(model, x, y, p, N, MaskStream(trial_seed, rngmod.EVAL_MASK), domain)
    return JensenReport(p, N, domain, lhs, rhs, meta={"widths": list(widths), "rank": rank, "kind": kind})
