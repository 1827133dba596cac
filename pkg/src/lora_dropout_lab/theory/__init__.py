"""Numerical checks of the sparsity, stability and ensemble results."""

from .bounds import effective_strength, generalization_bound, phs_bound
from .checks import (
    JensenReport,
    MaskedNormReport,
    SparsityReport,
    entry_sparsity_check,
    jensen_check,
    mc_masked_norm_check,
    random_jensen_check,
    random_lora_mlp,
)
from .linalg import fd_hessian, jacobi_eigenvalues
from .stability import LogisticProblem, QuadraticProblem, StabilityReport, minimize, stability_probe

__all__ = [
    "JensenReport",
    "LogisticProblem",
    "MaskedNormReport",
    "QuadraticProblem",
    "SparsityReport",
    "StabilityReport",
    "effective_strength",
    "entry_sparsity_check",
    "fd_hessian",
    "generalization_bound",
    "jacobi_eigenvalues",
    "jensen_check",
    "mc_masked_norm_check",
    "minimize",
    "phs_bound",
    "random_jensen_check",
    "random_lora_mlp",
    "stability_probe",
]
