import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lora_dropout_lab.adapters import LoraLayer
from lora_dropout_lab.errors import ConfigError, ContractError, NumericalError, ProbeError
from lora_dropout_lab.theory import (
    LogisticProblem,
    QuadraticProblem,
    effective_strength,
    entry_sparsity_check,
    fd_hessian,
    generalization_bound,
    jacobi_eigenvalues,
    jensen_check,
    mc_masked_norm_check,
    minimize,
    phs_bound,
    random_jensen_check,
    random_lora_mlp,
    stability_probe,
)

positive = st.floats(1e-3, 1e3)


class TestBounds:
    def test_effective_strength(self):
        assert effective_strength(2.0, 0.5) == 1.5

    def test_phs_formula(self):
        assert phs_bound(2.0, 1.0, 1.0, 0.5, 10) == pytest.approx(2 * 4 / ((1 + 1.5) * 10))

    def test_phs_halves_when_n_doubles(self):
        a = phs_bound(1.3, 0.2, 0.7, 0.4, 25)
        assert phs_bound(1.3, 0.2, 0.7, 0.4, 50) == pytest.approx(a / 2, rel=1e-15)

    def test_no_curvature_is_infinite(self):
        assert phs_bound(1.0, 0.0, 0.0, 0.5, 10) == math.inf
        assert generalization_bound(1.0, 1.0, 0.0, 1.0, 0.0, 10, 0.1) == math.inf

    def test_generalization_formula(self):
        C, eta, lmin, lam, p, n, d = 2.0, 1.5, 0.3, 1.0, 0.5, 64, 0.1
        expected = math.sqrt((C**2 + 24 * C * eta**2 / (lmin + 2 * lam * 0.75)) / (2 * n * d))
        assert generalization_bound(C, eta, lmin, lam, p, n, d) == pytest.approx(expected, rel=1e-15)

    def test_larger_at_zero_rate(self):
        args = dict(C=1.0, eta=1.0, lambda_min=0.1, lam=1.0, n=64, delta=0.1)
        assert generalization_bound(p=0.0, **args) > generalization_bound(p=0.5, **args)

    @given(positive, positive, positive, positive, st.integers(1, 10_000), st.floats(1e-3, 0.999))
    def test_monotone_in_rate(self, C, eta, lmin, lam, n, delta):
        grid = [i * 0.05 for i in range(19)]
        vals = [generalization_bound(C, eta, lmin, lam, p, n, delta) for p in grid]
        assert all(b <= a for a, b in zip(vals, vals[1:]))


class TestLinalg:
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=12))
    def test_jacobi_diagonal(self, diag):
        got = jacobi_eigenvalues(np.diag(diag))
        np.testing.assert_allclose(got, np.sort(diag), atol=1e-10)

    @given(st.integers(0, 10_000), st.integers(2, 10))
    def test_jacobi_matches_eigvalsh(self, seed, n):
        M = np.random.default_rng(seed).normal(size=(n, n))
        S = M + M.T
        np.testing.assert_allclose(jacobi_eigenvalues(S), np.linalg.eigvalsh(S), atol=1e-10)

    def test_jacobi_rejects_asymmetric(self):
        with pytest.raises(ContractError):
            jacobi_eigenvalues([[1.0, 2.0], [0.0, 1.0]])

    def test_fd_hessian_of_quadratic(self, rng):
        M = rng.normal(size=(4, 4))
        H = M @ M.T
        got = fd_hessian(lambda t: H @ t, rng.normal(size=4))
        np.testing.assert_allclose(got, H, atol=1e-8)
        assert np.array_equal(got, got.T)

    def test_fd_hessian_asymmetry(self):
        J = np.array([[1.0, 1.0], [0.0, 1.0]])
        with pytest.raises(NumericalError):
            fd_hessian(lambda t: J @ t, np.zeros(2))


def _quadratic_oracle(x, lam, p):
    """Closed-form optima of mean (theta - x)^2 / 2 + lam' theta^2 and their per-sample losses."""
    lp = lam * (2 * p - p * p)
    n = len(x)
    theta_S = x.sum() / (n * (1 + 2 * lp))
    theta_loo = (x.sum() - x) / ((n - 1) * (1 + 2 * lp))

    def per_sample(theta, xi):
        return 0.5 * (theta - xi) ** 2 + lp * theta**2

    return np.abs(per_sample(theta_loo, x) - per_sample(theta_S, x)), theta_S


class TestStabilityProbe:
    def test_quadratic_matches_closed_form(self, rng):
        x = rng.normal(size=30)
        for lam in (0.1, 1.0, 10.0):
            rep = stability_probe(QuadraticProblem(x), lam, 0.5)
            oracle, _ = _quadratic_oracle(x, lam, 0.5)
            np.testing.assert_allclose(rep.perturbations, oracle, atol=1e-8, rtol=0)
            assert rep.lambda_min == pytest.approx(1.0, abs=1e-6)
            assert rep.bound_satisfied

    def test_quadratic_optimum(self, rng):
        x = rng.normal(size=12)
        _, theta_S = _quadratic_oracle(x, 1.0, 0.3)
        got = minimize(QuadraticProblem(x), np.arange(12), effective_strength(1.0, 0.3), np.zeros(1))
        assert got[0] == pytest.approx(theta_S, abs=1e-10)

    def test_logistic_bound_holds_and_tightens(self):
        problem = LogisticProblem.random(n=20, d=3, K=2, seed=4)
        reports = [stability_probe(problem, lam, 0.5) for lam in (0.1, 1.0, 10.0)]
        for rep in reports:
            assert rep.bound_satisfied and math.isfinite(rep.beta_bound) and rep.beta_bound > 0
        assert reports[0].beta_bound > reports[1].beta_bound > reports[2].beta_bound
        assert reports[0].max_observed > reports[2].max_observed
        assert "surrogate" in reports[0].to_dict()["note"]

    def test_unreachable_tolerance(self):
        problem = LogisticProblem.random(n=10, d=2, K=2, seed=1)
        with pytest.raises(ProbeError):
            minimize(problem, np.arange(10), 0.1, np.zeros(problem.dim), tol=1e-30, max_iter=3)

    def test_rejects_bad_inputs(self, rng):
        with pytest.raises(ConfigError):
            stability_probe(QuadraticProblem(rng.normal(size=5)), -1.0, 0.5)
        with pytest.raises(ConfigError):
            stability_probe(QuadraticProblem([1.0]), 1.0, 0.5)

    def test_threads_do_not_change_result(self, rng):
        x = rng.normal(size=8)
        a = stability_probe(QuadraticProblem(x), 1.0, 0.5, threads=1)
        b = stability_probe(QuadraticProblem(x), 1.0, 0.5, threads=3)
        assert np.array_equal(a.perturbations, b.perturbations) and a.eta == b.eta


class TestMaskedNorm:
    def test_zero_delta(self):
        rep = mc_masked_norm_check([0.0, 0.0], 0.5, 1000)
        assert rep.mc_estimate == 0.0 and rep.closed_form == 0.0 and rep.rel_error == 0.0

    def test_zero_rate(self):
        rep = mc_masked_norm_check([3.0, 4.0], 0.0, 1000)
        assert rep.mc_estimate == 0.0 and rep.closed_form == 0.0

    def test_three_four(self):
        rep = mc_masked_norm_check([3.0, 4.0], 0.5, 1_000_000)
        assert rep.closed_form == 18.75
        assert rep.rel_error < 0.01 and rep.within(3.0)

    def test_draws_must_be_positive(self):
        with pytest.raises(ConfigError):
            mc_masked_norm_check([1.0], 0.5, 0)

    @pytest.mark.parametrize("draws", [100_000, 1_000_000])
    def test_within_three_standard_errors(self, rng, draws):
        rep = mc_masked_norm_check(rng.normal(size=16), 0.3, draws, seed=draws)
        assert rep.within(3.0)

    def test_error_shrinks_with_draws(self, rng):
        delta = rng.normal(size=8)
        small = mc_masked_norm_check(delta, 0.5, 1_000, seed=1)
        large = mc_masked_norm_check(delta, 0.5, 1_000_000, seed=1)
        assert large.std_error == pytest.approx(small.std_error / math.sqrt(1000))

    def test_deterministic(self):
        a = mc_masked_norm_check([1.0, 2.0, 3.0], 0.7, 5000, seed=4)
        b = mc_masked_norm_check([1.0, 2.0, 3.0], 0.7, 5000, seed=4)
        assert a == b


class TestEntrySparsity:
    @pytest.mark.parametrize("p", [0.3, 0.5])
    def test_zero_fraction(self, p):
        layer = random_lora_mlp([8, 6], 3, seed=2).layers[0]
        rep = entry_sparsity_check(layer, p, 100_000)
        assert rep.expected == pytest.approx(2 * p - p * p)
        assert rep.z_score < 3.0

    def test_structural_zeros_rejected(self):
        layer = LoraLayer.init(np.zeros((3, 3)), 2, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            entry_sparsity_check(layer, 0.5, 10)


class TestJensen:
    def test_single_instance_gap_is_zero(self):
        rep = random_jensen_check([4, 6, 3], 2, 0.5, 1, 20)
        assert np.all(rep.gap == 0.0)

    def test_zero_rate_gap_is_zero(self):
        for domain in ("logits", "probabilities"):
            rep = random_jensen_check([4, 6, 3], 2, 0.0, 4, 20, domain=domain)
            np.testing.assert_allclose(rep.gap, 0.0, atol=1e-12)

    @pytest.mark.parametrize("domain", ["logits", "probabilities"])
    @pytest.mark.parametrize("kind", ["lora", "adalora"])
    def test_no_violations(self, domain, kind):
        rep = random_jensen_check([5, 8, 3], 3, 0.5, 4, 100, seed=1, domain=domain, kind=kind)
        assert rep.violations == 0 and rep.max_negative_gap >= -1e-10
        assert rep.gap.mean() > 0

    def test_on_fixed_model(self, rng):
        model = random_lora_mlp([4, 6, 3], 2, seed=5)
        x, y = rng.normal(size=(40, 4)), rng.integers(0, 3, size=40)
        rep = jensen_check(model, x, y, 0.5, 4, 50, seed=2)
        assert rep.violations == 0
        assert rep.to_dict()["trials"] == 50

    def test_row_layout(self):
        rep = random_jensen_check([4, 6, 3], 2, 0.5, 2, 3)
        for i, lhs, rhs, gap in rep.rows():
            assert gap == rhs - lhs
