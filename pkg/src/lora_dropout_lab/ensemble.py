"""Test-time dropout ensembles and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .adapters import MaskStream, check_rate
from .errors import ConfigError, ContractError, DimensionError
from .tensor import log_softmax, softmax

DOMAINS = ("logits", "probabilities")
_TINY = np.finfo(np.float64).tiny


@dataclass
class EnsembleOutput:
    """Mean model output over ``N`` dropout instances.

    ``mean`` is the average of ``instances`` in ``domain``; use
    :attr:`probabilities` for class probabilities regardless of domain.
    """

    mean: np.ndarray
    instances: list
    domain: str = "logits"

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.mean) if self.domain == "logits" else self.mean

    def loss(self, labels) -> float:
        """Cross-entropy of the aggregated prediction."""
        y = np.asarray(labels)
        rows = np.arange(len(y))
        if self.domain == "logits":
            return float(-log_softmax(self.mean)[rows, y].mean())
        return float(-np.log(np.maximum(self.mean[rows, y], _TINY)).mean())

    def instance_losses(self, labels) -> np.ndarray:
        """Cross-entropy of each member, averaged over the batch."""
        y = np.asarray(labels)
        rows = np.arange(len(y))
        out = []
        for o in self.instances:
            if self.domain == "logits":
                out.append(-log_softmax(o)[rows, y].mean())
            else:
                out.append(-np.log(np.maximum(o[rows, y], _TINY)).mean())
        return np.array(out)


def _check_domain(domain):
    if domain not in DOMAINS:
        raise ConfigError(f"aggregation domain must be one of {DOMAINS}, got {domain!r}")


def ensemble_from_masks(model, x, mask_sets, domain: str = "logits") -> EnsembleOutput:
    """Average the outputs of ``model`` under each mask set, in list order."""
    _check_domain(domain)
    if len(mask_sets) == 0:
        raise ConfigError("an ensemble needs at least one instance")
    outs = []
    for ms in mask_sets:
        z = model.forward(x, ms).value
        outs.append(z if domain == "logits" else softmax(z))
    acc = np.zeros_like(outs[0])
    for o in outs:
        acc = acc + o
    return EnsembleOutput(acc / len(outs), outs, domain)


def ensemble_predict(
    model,
    x,
    p: float,
    N: int,
    stream: MaskStream,
    domain: str = "logits",
) -> EnsembleOutput:
    """Draw ``N`` fresh mask sets from ``stream`` and average the masked outputs."""
    p = check_rate(p)
    if N < 1:
        raise ConfigError(f"instance count N must be >= 1, got {N}")
    masks = stream.mask_sets(model.layers, p, N)
    return ensemble_from_masks(model, x, masks, domain)


def single_predict(model, x, domain: str = "logits") -> EnsembleOutput:
    """Unmasked forward pass wrapped as a one-member ensemble."""
    _check_domain(domain)
    z = model.forward(x).value
    o = z if domain == "logits" else softmax(z)
    return EnsembleOutput(o, [o], domain)


def accuracy(outputs, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index)."""
    out = np.asarray(outputs)
    y = np.asarray(labels)
    if out.ndim != 2 or out.shape[0] != y.shape[0]:
        raise DimensionError(f"outputs {out.shape} do not match {y.shape[0]} labels")
    if y.size == 0:
        return 0.0
    return float(np.mean(np.argmax(out, axis=1) == y))


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    mean_confidence: float
    accuracy: float


@dataclass
class CalibrationReport:
    ece: float
    bins: int
    n: int
    rows: list = field(default_factory=list)

    def recompute(self) -> float:
        """ECE from the per-bin rows alone."""
        if self.n == 0:
            return 0.0
        return float(
            sum(r.count / self.n * abs(r.accuracy - r.mean_confidence) for r in self.rows)
        )

    def to_dict(self) -> dict:
        return {
            "ece": self.ece,
            "bins": self.bins,
            "n": self.n,
            "per_bin": [
                {
                    "lo": r.lo,
                    "hi": r.hi,
                    "count": r.count,
                    "mean_confidence": r.mean_confidence,
                    "accuracy": r.accuracy,
                }
                for r in self.rows
            ],
        }


def ece(probabilities, labels, M: int = 10) -> CalibrationReport:
    """Expected calibration error over ``M`` equal-width, right-closed bins on (0, 1].

    Parameters
    ----------
    probabilities : array_like, shape (n, K)
        Rows must sum to one within 1e-6.
    labels : array_like, shape (n,)
    M : int
        Number of bins.
    """
    prob = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if M < 1:
        raise ConfigError(f"bin count must be >= 1, got {M}")
    if prob.ndim != 2 or prob.shape[0] != y.shape[0]:
        raise DimensionError(f"probabilities {prob.shape} do not match {y.shape[0]} labels")
    if prob.size and np.max(np.abs(prob.sum(axis=1) - 1.0)) > 1e-6:
        raise ContractError("probability rows must sum to 1 within 1e-6")
    n = prob.shape[0]
    conf = prob.max(axis=1) if n else np.zeros(0)
    correct = (np.argmax(prob, axis=1) == y) if n else np.zeros(0, dtype=bool)
    edges = np.arange(M + 1) / M
    # first upper edge >= conf, so each bin is (lo, hi]
    idx = np.clip(np.searchsorted(edges[1:], conf, side="left"), 0, M - 1)
    rows = []
    total = 0.0
    for b in range(M):
        sel = idx == b
        count = int(sel.sum())
        if count:
            mc = float(conf[sel].mean())
            acc = float(correct[sel].mean())
            total += count / n * abs(acc - mc)
        else:
            mc = acc = 0.0
        rows.append(CalibrationBin(float(edges[b]), float(edges[b + 1]), count, mc, acc))
    return CalibrationReport(float(total), M, n, rows)


@dataclass
class Evaluation:
    loss: float
    accuracy: float
    calibration: CalibrationReport
    probabilities: np.ndarray

    def to_dict(self, **extra) -> dict:
        out = {
            "accuracy": self.accuracy,
            "ece": self.calibration.ece,
            "loss": self.loss,
            "n": self.calibration.n,
        }
        out.update(extra)
        out["per_bin"] = self.calibration.to_dict()["per_bin"]
        return out


def evaluate(
    model,
    features,
    labels,
    p: float,
    N: int,
    seed: int,
    slot: int = 0,
    epoch: int = 0,
    domain: str = "logits",
    ensemble: bool = True,
    bins: int = 10,
    batch_size: int = 256,
) -> Evaluation:
    """Loss, accuracy and ECE of ``model`` on a dataset.

    With ``ensemble`` and ``p > 0`` each batch gets ``N`` fresh mask sets
    keyed by ``(slot, epoch, batch index)``; otherwise the unmasked model
    is used.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    n = x.shape[0]
    probs = []
    loss_sum = 0.0
    use_masks = ensemble and p > 0
    for it, start in enumerate(range(0, n, batch_size)):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        if use_masks:
            stream = MaskStream(seed, rngmod.EVAL_MASK, epoch, it, slot)
            out = ensemble_predict(model, xb, p, N, stream, domain)
        else:
            out = single_predict(model, xb, domain)
        loss_sum += out.loss(yb) * len(yb)
        probs.append(out.probabilities)
    prob = np.concatenate(probs, axis=0)
    return Evaluation(loss_sum / n, accuracy(prob, y), ece(prob, y, bins), prob)
