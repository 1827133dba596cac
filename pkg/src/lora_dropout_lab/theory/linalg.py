"""Finite-difference Hessians and a cyclic Jacobi eigensolver."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, NumericalError


def fd_hessian(grad_fn, theta, step: float = 1e-4, sym_tol: float = 1e-6) -> np.ndarray:
    """Hessian by central differences of an analytic gradient.

    Column ``i`` is ``(g(theta + h e_i) - g(theta - h e_i)) / 2h``. The raw
    matrix must be symmetric within ``sym_tol`` (absolute, max entry); the
    symmetrised matrix is returned.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    m = theta.size
    H = np.empty((m, m))
    for i in range(m):
        e = np.zeros(m)
        e[i] = step
        H[:, i] = (np.asarray(grad_fn(theta + e)).reshape(-1) - np.asarray(grad_fn(theta - e)).reshape(-1)) / (2 * step)
    asym = float(np.max(np.abs(H - H.T))) if m else 0.0
    if asym > sym_tol:
        raise NumericalError(f"finite-difference Hessian asymmetric by {asym:.3e} > {sym_tol:.1e}")
    return 0.5 * (H + H.T)


def jacobi_eigenvalues(M, tol: float = 1e-13, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations.

    Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
    drops below ``tol`` times the matrix norm.
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ContractError("Jacobi eigensolver needs a symmetric matrix")
    n = A.shape[0]
    scale = np.linalg.norm(A)
    if n < 2 or scale == 0.0:
        return np.sort(np.diag(A))
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off <= tol * scale:
            return np.sort(np.diag(A))
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(apq) < 1e-150 * abs(diff):
                    t = apq / diff
                else:
                    theta = diff / (2.0 * apq)
                    t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
    raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
