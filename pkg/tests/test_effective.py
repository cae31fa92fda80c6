import numpy as np
import pytest

from mfghom.cell import linearized_corrector, solve_cell
from mfghom.effective import (
    build_table,
    effective_drift,
    interpolate,
    load_table,
    mfg_type_defect,
    save_table,
    separability_defect,
)
from mfghom.errors import GridTooCoarse, OutOfRange
from mfghom.models import (
    LocalCoupling,
    NonlocalCoupling,
    quadratic,
    quadratic_plus_potential,
    weighted_quadratic,
)
from mfghom.torus import ScalarField, TorusGrid


class TestEffectiveDrift:
    def test_flat_quadratic_drift_is_momentum(self):
        grid = TorusGrid(1, 1, 32)
        for p in (-1.0, 0.0, 0.7):
            cs = solve_cell(quadratic(), [p], ScalarField.constant(grid, 0.0))
            assert effective_drift(cs)[0] == pytest.approx(p, abs=1e-12)

    def test_matches_linearized_corrector_constant(self):
        grid = TorusGrid(1, 1, 64)
        cs = solve_cell(quadratic_plus_potential(0.6), [0.9], ScalarField.constant(grid, 0.0))
        lc = linearized_corrector(cs, 0)
        assert abs(effective_drift(cs)[0] - lc.h_bar_pi) <= 1e-8

    def test_fine_grid_self_oracle_weighted(self):
        coarse = solve_cell(
            weighted_quadratic(1.0), [1.0], ScalarField.constant(TorusGrid(1, 1, 64), 0.0)
        )
        fine = solve_cell(
            weighted_quadratic(1.0), [1.0], ScalarField.constant(TorusGrid(1, 1, 512), 0.0)
        )
        assert abs(effective_drift(coarse)[0] - effective_drift(fine)[0]) <= 1e-5


class TestBuildTable:
    def test_flat_quadratic_values(self):
        table = build_table(quadratic(), None, np.array([-1.0, 0.0, 1.0]), [1.0], cell_points=32)
        assert np.allclose(table.h_bar[:, 0], [0.5, 0.0, 0.5], atol=1e-12)
        assert np.allclose(table.b_bar[:, 0, 0], [-1.0, 0.0, 1.0], atol=1e-12)

    def test_nonlocal_table_additive_split(self):
        table = build_table(
            weighted_quadratic(1.0),
            NonlocalCoupling(sigma=0.2),
            np.linspace(-1, 1, 5),
            np.linspace(0.6, 1.4, 3),
            cell_points=32,
        )
        assert separability_defect(table) <= 1e-8
        inv = table.check_invariants()
        assert inv["nonlocal_split_ok"] and inv["midpoint_convexity_ok"]

    def test_worker_count_does_not_change_bits(self):
        args = (
            weighted_quadratic(1.0),
            NonlocalCoupling(sigma=0.2),
            np.linspace(-0.5, 0.5, 3),
            np.array([0.8, 1.2]),
        )
        t1 = build_table(*args, cell_points=32, workers=1)
        t2 = build_table(*args, cell_points=32, workers=3)
        assert np.array_equal(t1.h_bar, t2.h_bar)
        assert np.array_equal(t1.b_bar, t2.b_bar)

    def test_cache_round_trip_bitwise(self, tmp_path):
        args = dict(
            H=quadratic_plus_potential(0.5),
            F=None,
            p_grid=np.linspace(-1, 1, 4),
            m_grid=[1.0],
            cell_points=32,
        )
        t1 = build_table(cache_dir=tmp_path, **args)
        files = list(tmp_path.glob("*.mfgtab"))
        assert len(files) == 1
        t2 = build_table(cache_dir=tmp_path, **args)  # cache hit
        assert np.array_equal(t1.h_bar, t2.h_bar)
        assert np.array_equal(t1.b_bar, t2.b_bar)
        assert t1.model_hash == t2.model_hash

    def test_hash_changes_with_model(self):
        p, m = np.linspace(-1, 1, 3), [1.0]
        t1 = build_table(quadratic(), None, p, m, cell_points=32)
        t2 = build_table(quadratic_plus_potential(0.1), None, p, m, cell_points=32)
        assert t1.model_hash != t2.model_hash


@pytest.fixture(scope="module")
def nonlocal_table():
    return build_table(
        weighted_quadratic(1.0),
        NonlocalCoupling(sigma=0.2),
        np.linspace(-1, 1, 9),
        np.linspace(0.6, 1.4, 5),
        cell_points=64,
    )


@pytest.fixture(scope="module")
def flat_fine_table():
    return build_table(quadratic(), None, np.arange(-1.0, 1.01, 0.25), [1.0], cell_points=32)


class TestDefects:
    def test_nonlocal_defect_within_fd_bound(self, nonlocal_table):
        defect = np.nanmax(mfg_type_defect(nonlocal_table))
        dp = 0.25
        C = defect / dp**2
        assert defect <= 1e-3
        assert C <= 0.1  # reported curvature-scale constant stays modest

    def test_flat_table_defect_near_zero(self):
        table = build_table(quadratic(), None, np.linspace(-1, 1, 9), [1.0], cell_points=32)
        assert np.nanmax(mfg_type_defect(table)) <= 1e-10

    def test_local_defect_dominates_nonlocal_baseline(self):
        p_grid = np.linspace(-1, 1, 17)
        m_grid = np.linspace(0.6, 1.4, 5)
        H = weighted_quadratic(1.0)
        loc = build_table(H, LocalCoupling("weighted-linear", 2.0, 0.8), p_grid, m_grid, cell_points=32)
        nl = build_table(H, NonlocalCoupling(sigma=0.2), p_grid, m_grid, cell_points=32)
        d_loc = np.nanmax(mfg_type_defect(loc))
        d_nl = np.nanmax(mfg_type_defect(nl))
        assert d_loc > 10 * d_nl
        assert separability_defect(loc) > 1e-4

    def test_grid_too_coarse(self):
        table = build_table(quadratic(), None, np.array([-1.0, 1.0]), [1.0], cell_points=32)
        with pytest.raises(GridTooCoarse):
            mfg_type_defect(table)
        with pytest.raises(GridTooCoarse):
            separability_defect(table)


class TestInterpolate:
    def test_exact_on_nodes(self, flat_fine_table):
        table = flat_fine_table
        for i, p in enumerate(table.p_grid[0]):
            h, b = interpolate(table, [p], 1.0)
            assert h == table.h_bar[i, 0]
            assert b[0] == table.b_bar[i, 0, 0]

    def test_piecewise_linear_bound(self, flat_fine_table):
        # h(p) = p^2/2 sampled at dp = 0.25: interpolation error <= max h'' dp^2/8
        h, _ = interpolate(flat_fine_table, [0.1], 1.0)
        assert abs(h - 0.005) <= 1.0 * 0.25**2 / 8 + 1e-12

    def test_out_of_range(self, flat_fine_table):
        with pytest.raises(OutOfRange):
            interpolate(flat_fine_table, [1.5], 1.0)
        with pytest.raises(OutOfRange):
            interpolate(flat_fine_table, [0.0], 2.0)

    def test_bilinear_in_p_and_m(self):
        table = build_table(
            weighted_quadratic(0.5),
            NonlocalCoupling(sigma=0.25),
            np.linspace(-1, 1, 5),
            np.array([0.8, 1.0, 1.2]),
            cell_points=32,
        )
        h, b = interpolate(table, [0.3], 0.9)
        # between-node values bracketed by the corner values
        lo = table.h_bar.min()
        hi = table.h_bar.max()
        assert lo <= h <= hi


class TestPersistence:
    def test_save_load_bitwise(self, tmp_path):
        table = build_table(
            weighted_quadratic(1.0),
            NonlocalCoupling(sigma=0.2),
            np.linspace(-1, 1, 5),
            np.array([0.9, 1.1]),
            cell_points=32,
        )
        path = tmp_path / "t.mfgtab"
        save_table(path, table)
        loaded = load_table(path)
        assert np.array_equal(loaded.h_bar, table.h_bar)
        assert np.array_equal(loaded.b_bar, table.b_bar)
        assert loaded.model_hash == table.model_hash
        assert loaded.coupling_kind == table.coupling_kind
        assert [list(g) for g in loaded.p_grid] == [list(g) for g in table.p_grid]

    def test_identical_builds_identical_files(self, tmp_path):
        table = build_table(quadratic(), None, np.linspace(-1, 1, 3), [1.0], cell_points=32)
        save_table(tmp_path / "a.mfgtab", table)
        save_table(tmp_path / "b.mfgtab", table)
        assert (tmp_path / "a.mfgtab").read_bytes() == (tmp_path / "b.mfgtab").read_bytes()
