"""Leave-one-out stability probe on small convex problems.

A probe trains ``theta(S)`` on the full sample and ``theta(S^i)`` for every
``i`` (warm-started from ``theta(S)``) on the sparsity-regularised objective

    L_lam(theta) = mean_i loss(x_i; theta) + lam (2p - p^2) ||theta - theta0||^2

and compares the measured per-sample perturbations with the stability bound
``2 eta^2 / ((Lambda_min + 2 lam (2p - p^2)) n)``.

``eta`` is estimated locally as the largest per-sample gradient norm of
``L_lam`` over all optima visited, and ``Lambda_min`` is the smallest
eigenvalue of the finite-difference Hessian of the unregularised loss at
``theta(S)``, clamped at zero. Both are surrogates for the global
quantities the bound is stated in.

Problems are parameterised directly by the delta ``theta - theta0`` so the
objective is convex; for the logistic problem this delta is the merged
adapter product, which is where the sparsity penalty acts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import rng as rngmod
from ..errors import ConfigError, ProbeError
from ..parallel import parallel_map
from ..tensor import (
    add_bias,
    backward,
    constant,
    matmul,
    parameter,
    scale,
    softmax_cross_entropy,
    sub,
    sum_squares,
    transpose,
    add,
)
from .bounds import effective_strength, phs_bound
from .linalg import fd_hessian, jacobi_eigenvalues

HESSIAN_STEP = 1e-4
ETA_NOTE = "eta is the max per-sample gradient norm of L_lam over visited optima (local surrogate)"


class QuadraticProblem:
    """One-dimensional ``loss(x; theta) = (theta - x)^2 / 2`` with ``theta0 = 0``."""

    kind = "quadratic"

    def __init__(self, x):
        self.x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        self.n = self.x.shape[0]
        self.dim = 1

    def loss_node(self, theta, idx):
        xs = constant(self.x[idx])
        spread = matmul(constant(np.ones((len(idx), 1))), theta)
        return scale(sum_squares(sub(spread, xs)), 0.5 / len(idx))

    def shape(self):
        return (1, 1)


class LogisticProblem:
    """Softmax regression on a frozen pretrained linear map plus a trainable delta.

    ``logits = x (W0 + D)^T + b0`` where ``D`` (``K x d``) is the merged
    adapter delta being optimised.
    """

    kind = "logistic"

    def __init__(self, features, labels, W0, b0=None):
        self.X = np.asarray(features, dtype=np.float64)
        self.y = np.asarray(labels, dtype=np.int64)
        self.W0 = np.asarray(W0, dtype=np.float64)
        self.K, d = self.W0.shape
        if self.X.shape[1] != d:
            raise ConfigError(f"features have {self.X.shape[1]} columns, W0 expects {d}")
        self.b0 = np.zeros(self.K) if b0 is None else np.asarray(b0, dtype=np.float64)
        self.n = self.X.shape[0]
        self.dim = self.K * d

    @classmethod
    def random(cls, n: int, d: int, K: int, seed: int, noise: float = 1.0):
        """Gaussian classes with a small random pretrained map."""
        g = rngmod.derive(seed, rngmod.PROBE, 0)
        centers = g.normal(0.0, 1.0, size=(K, d))
        y = g.integers(0, K, size=n)
        X = centers[y] + noise * g.normal(size=(n, d))
        W0 = g.normal(0.0, 0.1, size=(K, d))
        return cls(X, y, W0, g.normal(0.0, 0.1, size=K))

    def loss_node(self, theta, idx):
        W = add(constant(self.W0), theta)
        logits = add_bias(matmul(constant(self.X[idx]), transpose(W)), constant(self.b0.reshape(1, -1)))
        return softmax_cross_entropy(logits, self.y[idx])

    def shape(self):
        return self.W0.shape


def _value_and_grad(problem, delta, idx, strength):
    theta = parameter(delta.reshape(problem.shape()))
    loss = problem.loss_node(theta, idx)
    if strength:
        loss = add(loss, scale(sum_squares(theta), strength))
    backward(loss)
    return loss.item(), theta.grad.reshape(-1).copy()


def regularized_loss(problem, delta, idx, strength) -> float:
    return _value_and_grad(problem, np.asarray(delta, dtype=np.float64), idx, strength)[0]


def regularized_grad(problem, delta, idx, strength) -> np.ndarray:
    return _value_and_grad(problem, np.asarray(delta, dtype=np.float64), idx, strength)[1]


def minimize(problem, idx, strength, start, tol=1e-8, max_iter=60) -> np.ndarray:
    """Damped Newton on the regularised objective until ``||grad|| < tol``.

    The Hessian is taken by finite differences of the autodiff gradient.
    """
    delta = np.array(start, dtype=np.float64).reshape(-1)
    grad_fn = lambda d: regularized_grad(problem, d, idx, strength)
    f, g = _value_and_grad(problem, delta, idx, strength)
    for _ in range(max_iter):
        gnorm = np.linalg.norm(g)
        if gnorm < tol:
            return delta
        H = fd_hessian(grad_fn, delta, HESSIAN_STEP, sym_tol=np.inf)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while True:
            cand = delta - t * step
            f_new, g_new = _value_and_grad(problem, cand, idx, strength)
            if f_new <= f - 1e-4 * t * (g @ step) or np.linalg.norm(g_new) < gnorm or t < 1e-10:
                break
            t *= 0.5
        delta, f, g = cand, f_new, g_new
    if np.linalg.norm(g) < tol:
        return delta
    raise ProbeError(
        f"optimizer stopped at gradient norm {np.linalg.norm(g):.3e} >= {tol:.1e}; "
        "bound assumptions cannot be checked"
    )


@dataclass
class StabilityReport:
    n: int
    lam: float
    p: float
    eta: float
    lambda_min: float
    beta_bound: float
    perturbations: np.ndarray
    max_observed: float
    bound_satisfied: bool
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    note: str = ETA_NOTE

    def rows(self):
        return [(i, float(v)) for i, v in enumerate(self.perturbations)]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "lambda": self.lam,
            "p": self.p,
            "eta": self.eta,
            "lambda_min": self.lambda_min,
            "beta_bound": self.beta_bound,
            "max_observed": self.max_observed,
            "mean_observed": float(np.mean(self.perturbations)),
            "bound_satisfied": self.bound_satisfied,
            "note": self.note,
        }


def stability_probe(problem, lam: float, p: float, tol: float = 1e-8, threads=None) -> StabilityReport:
    """Measure leave-one-out loss perturbations and the stability bound they should obey."""
    if lam < 0:
        raise ConfigError(f"lam must be non-negative, got {lam}")
    n = problem.n
    if n < 2:
        raise ConfigError("the probe needs at least two samples")
    strength = effective_strength(lam, p)
    full = np.arange(n)
    theta_S = minimize(problem, full, strength, np.zeros(problem.dim), tol)

    def loo(i):
        return minimize(problem, np.delete(full, i), strength, theta_S, tol)

    theta_loo = parallel_map(loo, range(n), threads)

    def sample_objective(delta, i):
        return _value_and_grad(problem, delta, np.array([i]), strength)

    perturb = np.empty(n)
    eta = 0.0
    for i in range(n):
        base, _ = sample_objective(theta_S, i)
        moved, _ = sample_objective(theta_loo[i], i)
        perturb[i] = abs(moved - base)
    for optimum in [theta_S, *theta_loo]:
        for i in range(n):
            eta = max(eta, float(np.linalg.norm(sample_objective(optimum, i)[1])))

    H = fd_hessian(lambda d: regularized_grad(problem, d, full, 0.0), theta_S, HESSIAN_STEP)
    eig = jacobi_eigenvalues(H)
    lambda_min = max(float(eig[0]), 0.0)
    beta = phs_bound(eta, lambda_min, lam, p, n)
    worst = float(perturb.max())
    return StabilityReport(n, lam, p, eta, lambda_min, beta, perturb, worst, bool(worst <= beta), eig)
