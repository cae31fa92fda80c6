import numpy as np
import pytest

from mfghom.models import (
    AssumptionReport,
    HamiltonianModel,
    LocalCoupling,
    NonlocalCoupling,
    check_convexity,
    check_lip_condition,
    check_monotonicity,
    monotonicity_integral,
    quadratic,
    quadratic_plus_potential,
    trig_polynomial,
    weighted_quadratic,
)
from mfghom.torus import ScalarField, TorusGrid, integrate

CATALOG = [
    quadratic(),
    quadratic_plus_potential(1.0),
    weighted_quadratic(1.0),
]


class TestHamiltonianEvaluators:
    @pytest.mark.parametrize("H", CATALOG, ids=lambda h: h.kind)
    def test_grad_p_matches_finite_differences(self, H):
        rng = np.random.default_rng(42)
        step = 1e-4
        for _ in range(100):
            p = rng.uniform(-3, 3, size=1)
            y = rng.uniform(0, 1, size=1)
            exact = float(H.grad_p(tuple(p), tuple(y))[0])
            fd = (H.value((p[0] + step,), tuple(y)) - H.value((p[0] - step,), tuple(y))) / (2 * step)
            denom = max(1.0, abs(exact))
            assert abs(exact - fd) / denom <= 1e-6

    @pytest.mark.parametrize("H", CATALOG, ids=lambda h: h.kind)
    def test_grad_y_matches_finite_differences(self, H):
        rng = np.random.default_rng(7)
        step = 1e-6
        for _ in range(50):
            p = rng.uniform(-3, 3, size=1)
            y = rng.uniform(0, 1, size=1)
            exact = float(H.grad_y(tuple(p), tuple(y))[0])
            fd = (H.value(tuple(p), (y[0] + step,)) - H.value(tuple(p), (y[0] - step,))) / (2 * step)
            assert abs(exact - fd) <= 1e-5 * max(1.0, abs(exact))

    @pytest.mark.parametrize("H", CATALOG, ids=lambda h: h.kind)
    def test_periodicity_in_y(self, H):
        p = (0.7,)
        vals0 = H.value(p, (np.array([0.3]),))
        vals1 = H.value(p, (np.array([1.3]),))
        assert np.allclose(vals0, vals1, atol=1e-12)

    @pytest.mark.parametrize("H", CATALOG, ids=lambda h: h.kind)
    def test_conjugate_duality_gap(self, H):
        # H(p) + H*(q) >= p q with equality at q = D_p H(p)
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = rng.uniform(-2, 2)
            y = (rng.uniform(),)
            q = float(H.grad_p((p,), y)[0])
            gap = H.value((p,), y) + H.conjugate((q,), y) - p * q
            assert abs(gap) <= 1e-12

    def test_vectorized_evaluation_2d(self):
        H = weighted_quadratic(0.5)
        grid = TorusGrid(2, 1, 8)
        y = grid.coordinates()
        p = (np.ones(grid.shape), 2 * np.ones(grid.shape))
        vals = H.value(p, y)
        assert vals.shape == grid.shape
        gp = H.grad_p(p, y)
        assert all(g.shape == grid.shape for g in gp)


class TestConvexityChecker:
    def test_flat_quadratic_constant_hessian(self):
        rep = check_convexity(quadratic(), p_box=2.0, samples=5)
        assert rep.passed
        assert rep.worst_value == pytest.approx(1.0, abs=1e-6)

    def test_weighted_quadratic_analytic_min(self):
        rep = check_convexity(weighted_quadratic(1.0), p_box=2.0, samples=5)
        assert rep.passed
        assert rep.worst_value == pytest.approx(0.5, abs=1e-6)

    def test_non_convex_stub_detected(self):
        rep = check_convexity(HamiltonianModel("negated-quadratic"), p_box=2.0, samples=5)
        assert not rep.passed
        assert rep.worst_value == pytest.approx(-1.0, abs=1e-6)

    @pytest.mark.parametrize("H", CATALOG, ids=lambda h: h.kind)
    def test_catalog_passes_on_radius_10(self, H):
        rep = check_convexity(H, p_box=10.0, samples=5)
        assert rep.passed
        assert rep.worst_value >= H.hessian_p_lower_bound() - 1e-6

    def test_witness_reproduces_worst_value(self):
        H = weighted_quadratic(1.0)
        rep = check_convexity(H, p_box=2.0, samples=5)
        p = np.array(rep.witness["p"])
        y = tuple(rep.witness["y"])
        step = 1e-4
        redo = (H.value((p[0] + step,), y) - 2 * H.value((p[0],), y) + H.value((p[0] - step,), y)) / step**2
        assert redo == pytest.approx(rep.worst_value, abs=1e-10)


class TestMonotonicityChecker:
    def test_linear_local_coupling_nonnegative(self):
        rep = check_monotonicity(LocalCoupling("linear", strength=1.0), trials=10, seed=1)
        assert rep.passed
        assert rep.worst_value >= 0.0

    def test_sign_flipped_coupling_fails_with_witness(self):
        rep = check_monotonicity(LocalCoupling("linear", strength=-1.0), trials=10, seed=1)
        assert not rep.passed
        assert rep.worst_value < 0.0
        # witness reproduces the value
        grid = TorusGrid(1, 1, 64)
        rng = np.random.default_rng(rep.witness["seed"])
        for k in range(rep.witness["trial"] + 1):
            f1 = trig_polynomial(grid, rng)
            f2 = trig_polynomial(grid, rng)
        val = monotonicity_integral(LocalCoupling("linear", strength=-1.0), f1, f2)
        assert val == pytest.approx(rep.worst_value, rel=1e-12)

    def test_local_integral_is_perfect_square(self):
        grid = TorusGrid(1, 1, 64)
        rng = np.random.default_rng(5)
        F = LocalCoupling("linear", strength=1.0)
        f1 = trig_polynomial(grid, rng)
        f2 = trig_polynomial(grid, rng)
        val = monotonicity_integral(F, f1, f2)
        expected = integrate((f1 - f2) * (f1 - f2))
        assert val == pytest.approx(expected, rel=1e-12)

    def test_weighted_local_coupling_monotone(self):
        rep = check_monotonicity(LocalCoupling("weighted-linear"), trials=15, seed=3)
        assert rep.passed

    def test_nonlocal_gaussian_positive_definite_vs_fourier_sum(self):
        grid = TorusGrid(1, 1, 64)
        F = NonlocalCoupling(sigma=0.15)
        rng = np.random.default_rng(9)
        f1 = trig_polynomial(grid, rng)
        f2 = trig_polynomial(grid, rng)
        val = monotonicity_integral(F, f1, f2)
        # independent oracle: discrete Parseval turns the pairing into
        # (h^2 / n) sum_k rho_hat_k |delta_hat_k|^2 over unscaled DFT modes
        delta = f1.values - f2.values
        rho = F.kernel(grid).values
        h = grid.spacing
        n = grid.size
        oracle = float(
            np.real(np.sum(np.fft.fft(rho) * np.abs(np.fft.fft(delta)) ** 2)) * h**2 / n
        )
        assert val >= 0.0
        assert val == pytest.approx(oracle, rel=1e-10)

    def test_nonlocal_all_trials_nonnegative(self):
        rep = check_monotonicity(NonlocalCoupling(sigma=0.2), trials=10, seed=2)
        assert rep.passed


class TestNonlocalKernel:
    def test_kernel_normalized_and_positive(self):
        grid = TorusGrid(1, 1, 128)
        rho = NonlocalCoupling(sigma=0.1).kernel(grid)
        assert integrate(rho) == pytest.approx(1.0, abs=1e-14)
        assert np.all(rho.values > 0)

    def test_apply_preserves_constants(self):
        grid = TorusGrid(1, 1, 64)
        F = NonlocalCoupling(sigma=0.3)
        out = F.apply(ScalarField.constant(grid, 2.5))
        assert np.allclose(out.values, 2.5, atol=1e-12)
        assert F.value_at_constant(2.5) == 2.5

    def test_positive_fourier_coefficients(self):
        # positive-definite up to roundoff: the analytic coefficients are all
        # positive but decay below double precision at high modes
        grid = TorusGrid(1, 1, 64)
        rho = NonlocalCoupling(sigma=0.12).kernel(grid).values
        coeffs = np.real(np.fft.fft(rho))
        assert np.all(coeffs > -1e-12 * coeffs.max())
        assert np.all(coeffs[:8] > 0) and np.all(coeffs[-8:] > 0)


class TestLipChecker:
    def test_flat_hamiltonian_analytic_value(self):
        theta, r = 0.5, 3.0
        rep = check_lip_condition(quadratic(), None, theta, r, eps=0.1)
        assert rep.passed
        assert rep.worst_value == pytest.approx(theta * (0.5 * r**2) ** 2, rel=1e-12)

    def test_oscillatory_hamiltonian_vs_dense_oracle(self):
        # theta H^2 ~ theta p^4 / 4 must dominate |D_y H . p| ~ 2 pi p, which
        # at theta = 0.5 requires |p| above ~3.7; use radius 5
        H = quadratic_plus_potential(1.0)
        theta, r, eps = 0.5, 5.0, 0.1
        rep = check_lip_condition(H, None, theta, r, eps, y_samples=256)
        dense = check_lip_condition(H, None, theta, r, eps, y_samples=2560)
        assert rep.passed
        assert abs(rep.worst_value - dense.worst_value) <= 5e-3 * max(1.0, abs(dense.worst_value))

    def test_small_theta_small_radius_fails(self):
        H = quadratic_plus_potential(1.0)
        rep = check_lip_condition(H, None, theta=0.01, p_radius=1.0, eps=0.0)
        assert not rep.passed
        assert rep.worst_value < 0.0

    def test_note_flags_pairing_interpretation(self):
        rep = check_lip_condition(quadratic(), None, 0.5, 2.0, 0.1)
        assert "inner product" in rep.note


class TestPrimitives:
    @pytest.mark.parametrize("F", [LocalCoupling("linear"), LocalCoupling("weighted-linear")])
    def test_primitive_derivative_matches_value(self, F):
        rng = np.random.default_rng(12)
        step = 1e-4
        for _ in range(50):
            y = (rng.uniform(),)
            m = rng.uniform(0.1, 2.0)
            fd = (F.primitive(y, m + step) - F.primitive(y, m - step)) / (2 * step)
            assert abs(fd - float(F.value(y, m))) <= 1e-6
