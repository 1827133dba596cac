"""Closed-form stability and generalization bounds as functions of the dropout rate."""

from __future__ import annotations

import math

from ..adapters import entry_zero_probability


def effective_strength(lam: float, p: float) -> float:
    """Weight of the equivalent L2 penalty, ``lam * (2p - p^2)``."""
    return lam * entry_zero_probability(p)


def phs_bound(eta: float, lambda_min: float, lam: float, p: float, n: int) -> float:
    """Pointwise hypothesis stability bound ``2 eta^2 / ((lambda_min + 2 lam (2p - p^2)) n)``.

    Returns ``inf`` when the curvature term vanishes.
    """
    curvature = lambda_min + 2.0 * effective_strength(lam, p)
    if curvature <= 0:
        return math.inf
    return 2.0 * eta * eta / (curvature * n)


def generalization_bound(
    C: float, eta: float, lambda_min: float, lam: float, p: float, n: int, delta: float
) -> float:
    """Width of the high-probability gap between true and empirical risk.

    ``sqrt((C^2 + 24 C eta^2 / (lambda_min + 2 lam (2p - p^2))) / (2 n delta))``,
    i.e. the stability bound above plugged into ``sqrt((C^2 + 12 C n beta) / (2 n delta))``.
    """
    curvature = lambda_min + 2.0 * effective_strength(lam, p)
    if curvature <= 0:
        return math.inf
    return math.sqrt((C * C + 24.0 * C * eta * eta / curvature) / (2.0 * n * delta))
