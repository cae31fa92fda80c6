import numpy as np
import pytest

from mfghom.torus import (
    ScalarField,
    TorusGrid,
    VectorField,
    advect,
    advect_transpose,
    advection_operator,
    centered_diff_operator,
    divergence,
    gradient,
    integrate,
    laplacian,
    laplacian_operator,
    upwind_divergence,
)


def random_field(grid, rng, degree=3):
    """Smooth periodic trig polynomial with seeded coefficients."""
    coords = grid.coordinates()
    vals = np.zeros(grid.shape)
    for _ in range(degree):
        k = rng.integers(1, degree + 1, size=grid.dim)
        a, b = rng.normal(size=2)
        phase = sum(2 * np.pi * ki * c for ki, c in zip(k, coords))
        vals += a * np.cos(phase) + b * np.sin(phase)
    return ScalarField(grid, vals)


class TestGradient:
    def test_constant_field_exact_zero(self):
        grid = TorusGrid(1, 1, 32)
        f = ScalarField.constant(grid, 3.7)
        g = gradient(f)
        assert np.all(g.components[0] == 0.0)

    def test_centered_taylor_bound_1d(self):
        grid = TorusGrid(1, 1, 64)
        (y,) = grid.coordinates()
        f = ScalarField(grid, np.sin(2 * np.pi * y))
        g = gradient(f)
        err = np.max(np.abs(g.components[0] - 2 * np.pi * np.cos(2 * np.pi * y)))
        h = grid.spacing
        assert err <= (2 * np.pi) ** 3 * h**2 / 6

    def test_upwind_requires_direction(self):
        grid = TorusGrid(1, 1, 16)
        f = ScalarField.constant(grid, 1.0)
        with pytest.raises(ValueError):
            gradient(f, scheme="upwind")

    @pytest.mark.parametrize("scheme, expected_order", [("centered", 2.0), ("upwind", 1.0)])
    def test_order_of_accuracy(self, scheme, expected_order):
        errs, hs = [], []
        for n in (32, 64, 128, 256):
            grid = TorusGrid(1, 1, n)
            (y,) = grid.coordinates()
            f = ScalarField(grid, np.sin(2 * np.pi * y))
            direction = VectorField.constant(grid, [1.0]) if scheme == "upwind" else None
            g = gradient(f, scheme=scheme, direction=direction)
            errs.append(np.max(np.abs(g.components[0] - 2 * np.pi * np.cos(2 * np.pi * y))))
            hs.append(grid.spacing)
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert abs(slope - expected_order) <= 0.1

    def test_2d_gradient_matches_analytic(self):
        grid = TorusGrid(2, 1, 64)
        x, y = grid.coordinates()
        f = ScalarField(grid, np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y))
        g = gradient(f)
        gx = 2 * np.pi * np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y)
        gy = -2 * np.pi * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
        h2 = grid.spacing**2
        assert np.max(np.abs(g.components[0] - gx)) <= (2 * np.pi) ** 3 * h2
        assert np.max(np.abs(g.components[1] - gy)) <= (2 * np.pi) ** 3 * h2


class TestLaplacian:
    def test_constant_exact_zero(self):
        grid = TorusGrid(2, 1, 16)
        f = ScalarField.constant(grid, -2.0)
        assert np.all(laplacian(f).values == 0.0)

    def test_taylor_bound(self):
        grid = TorusGrid(1, 1, 64)
        (y,) = grid.coordinates()
        f = ScalarField(grid, np.cos(2 * np.pi * y))
        lap = laplacian(f)
        err = np.max(np.abs(lap.values + (2 * np.pi) ** 2 * np.cos(2 * np.pi * y)))
        assert err <= (2 * np.pi) ** 4 * grid.spacing**2 / 12

    @pytest.mark.parametrize("dim", [1, 2])
    def test_grid_sum_zero(self, dim):
        rng = np.random.default_rng(7)
        grid = TorusGrid(dim, 1, 16)
        f = random_field(grid, rng)
        total = np.sum(laplacian(f).values) * grid.cell_volume
        assert abs(total) < 1e-12


class TestDivergence:
    def test_constant_vector_exact_zero(self):
        grid = TorusGrid(2, 1, 16)
        V = VectorField.constant(grid, [1.0, -2.0])
        assert np.all(divergence(V).values == 0.0)

    def test_matches_analytic_1d(self):
        grid = TorusGrid(1, 1, 128)
        (y,) = grid.coordinates()
        V = VectorField(grid, (np.sin(2 * np.pi * y),))
        d = divergence(V)
        err = np.max(np.abs(d.values - 2 * np.pi * np.cos(2 * np.pi * y)))
        assert err <= (2 * np.pi) ** 3 * grid.spacing**2 / 6

    @pytest.mark.parametrize("dim", [1, 2])
    def test_grid_sum_zero_both_schemes(self, dim):
        rng = np.random.default_rng(11)
        grid = TorusGrid(dim, 1, 16)
        V = VectorField(grid, tuple(random_field(grid, rng).values for _ in range(dim)))
        m = random_field(grid, rng)
        assert abs(np.sum(divergence(V).values)) < 1e-11 / grid.spacing
        assert abs(np.sum(upwind_divergence(V, m).values)) < 1e-11 / grid.spacing


class TestAdjointness:
    @pytest.mark.parametrize("dim", [1, 2])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_advect_pair_is_exact_transpose(self, dim, seed):
        rng = np.random.default_rng(seed)
        grid = TorusGrid(dim, 1, 16)
        b = VectorField(grid, tuple(random_field(grid, rng).values for _ in range(dim)))
        f = random_field(grid, rng)
        g = random_field(grid, rng)
        lhs = integrate(advect(b, f) * g)
        rhs = integrate(f * advect_transpose(b, g))
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_array_form_matches_sparse_operator(self):
        rng = np.random.default_rng(3)
        grid = TorusGrid(2, 1, 8)
        b = VectorField(grid, tuple(random_field(grid, rng).values for _ in range(2)))
        f = random_field(grid, rng)
        A = advection_operator(grid, b)
        assert np.allclose(A @ f.values.ravel(), advect(b, f).values.ravel(), atol=1e-13)
        assert np.allclose(
            A.T @ f.values.ravel(), advect_transpose(b, f).values.ravel(), atol=1e-13
        )

    def test_sparse_laplacian_and_diff_match_arrays(self):
        rng = np.random.default_rng(5)
        grid = TorusGrid(2, 1, 8)
        f = random_field(grid, rng)
        L = laplacian_operator(grid)
        assert np.allclose(L @ f.values.ravel(), laplacian(f).values.ravel(), atol=1e-12)
        for axis in range(2):
            D = centered_diff_operator(grid, axis)
            assert np.allclose(
                D @ f.values.ravel(),
                gradient(f).components[axis].ravel(),
                atol=1e-12,
            )


class TestIntegrate:
    def test_unit_constant(self):
        grid = TorusGrid(1, 1, 32)
        assert integrate(ScalarField.constant(grid, 1.0)) == 1.0

    def test_cosine_zero(self):
        grid = TorusGrid(1, 1, 4)
        (y,) = grid.coordinates()
        assert integrate(ScalarField(grid, np.cos(2 * np.pi * y))) == pytest.approx(0.0, abs=1e-15)

    def test_cosine_squared_half(self):
        grid = TorusGrid(1, 1, 8)
        (y,) = grid.coordinates()
        val = integrate(ScalarField(grid, np.cos(2 * np.pi * y) ** 2))
        assert val == pytest.approx(0.5, abs=1e-14)

    def test_macro_torus_volume(self):
        grid = TorusGrid(2, 3, 8)
        assert integrate(ScalarField.constant(grid, 1.0)) == pytest.approx(9.0, abs=1e-12)


class TestFieldInvariants:
    def test_fields_immutable(self):
        grid = TorusGrid(1, 1, 8)
        f = ScalarField.constant(grid, 1.0)
        with pytest.raises(ValueError):
            f.values[0] = 2.0

    def test_nonfinite_rejected(self):
        grid = TorusGrid(1, 1, 8)
        bad = np.ones(8)
        bad[3] = np.nan
        with pytest.raises(ValueError):
            ScalarField(grid, bad)

    def test_spacing_exact(self):
        grid = TorusGrid(1, 2, 64)
        assert grid.spacing == 1.0 / 64
        assert grid.size == 128
