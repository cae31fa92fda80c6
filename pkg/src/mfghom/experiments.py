"""Desk-scale experiments verifying the homogenization claims.

The pieces fit together as follows.  A :class:`FieldBank` solves the cell
problem on a tensor (momentum, density) grid and keeps the corrector and
invariant-density *fields* (not just their averages), so macro-modulated cell
data v(x/eps; Du(x,t), m(x,t)) can be evaluated anywhere by multilinear
interpolation in the parameters.  The bank also exports the matching effective
table, which drives the limit solver; building both from the same solves keeps
the reference limit consistent with the oscillatory dynamics at the shared
per-cell resolution.

``run_well_prepared`` measures convergence of the eps-family to the limit with
corrector-seasoned data, ``run_nonlocal_convergence`` does the same for the
smoothing coupling with general data and a weak density metric,
``two_scale_diagnostic`` tests the joint (x, x/eps) limit against a fixed
catalog of two-variable test functions, ``run_ansatz_residuals`` assembles the
corrected ansatz and evaluates how well it satisfies the oscillatory system,
and ``potential_check`` verifies the variational characterization of the
time-reversed potential system.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .cell import nu_corrector, solve_cell, solve_cell_coupled
from .effective import EffectiveTable, interpolate_fields
from .errors import RateUnreliable
from .eps_solver import MFGSolution, PicardOptions, solve_mfg_eps, aligned_grid
from .limit_solver import LimitProblem, solve_limit
from .models import HamiltonianModel, LocalCoupling, NonlocalCoupling
from .torus import (
    ScalarField,
    TorusGrid,
    VectorField,
    centered_diff_operator,
    integrate,
    laplacian_operator,
)

__all__ = [
    "ConvergenceReport",
    "AnsatzResiduals",
    "FieldBank",
    "fit_rate",
    "run_well_prepared",
    "run_nonlocal_convergence",
    "two_scale_diagnostic",
    "run_ansatz_residuals",
    "potential_check",
    "default_test_functions",
]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceReport:
    """Per-epsilon errors and fitted log-log rates."""

    eps_list: tuple
    u_sup: tuple
    m_err: tuple
    fitted_rate_u: float
    fitted_rate_m: float
    m_metric: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_list)
        if any(e2 >= e1 for e1, e2 in zip(eps, eps[1:])):
            raise ValueError("eps_list must be strictly decreasing")
        if not all(np.isfinite(self.u_sup)) or not all(np.isfinite(self.m_err)):
            raise ValueError("errors must be finite")

    def to_dict(self) -> dict:
        return {
            "eps_list": list(self.eps_list),
            "errors": [
                {"eps": e, "u_sup": u, "m_err": m}
                for e, u, m in zip(self.eps_list, self.u_sup, self.m_err)
            ],
            "fitted_rate_u": self.fitted_rate_u,
            "fitted_rate_m": self.fitted_rate_m,
            "m_metric": self.m_metric,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        lines = ["eps,u_sup,m_err"]
        for e, u, m in zip(self.eps_list, self.u_sup, self.m_err):
            lines.append(f"{e!r},{u!r},{m!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class AnsatzResiduals:
    """Residual norms of the corrected ansatz in the oscillatory system."""

    eps: float
    hjb_residual_sup: float
    fp_residual_l1: float
    fredholm_defect: float

    def __post_init__(self):
        vals = (self.hjb_residual_sup, self.fp_residual_l1, self.fredholm_defect)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("residuals must be finite and nonnegative")

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "hjb_residual_sup": self.hjb_residual_sup,
            "fp_residual_l1": self.fp_residual_l1,
            "fredholm_defect": self.fredholm_defect,
        }


def fit_rate(eps_list, errors) -> float:
    """Least-squares slope of log(error) against log(eps), closed form.

    Deterministic and reproducible bit-for-bit from the stored errors.
    """
    eps_list = np.asarray(eps_list, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(eps_list) < 3:
        raise RateUnreliable("need at least three points for a rate")
    x = np.log(eps_list)
    y = np.log(np.maximum(errors, 1e-300))
    xbar = x.mean()
    ybar = y.mean()
    return float(np.sum((x - xbar) * (y - ybar)) / np.sum((x - xbar) ** 2))


# ---------------------------------------------------------------------------
# spectral helpers on periodic macro fields
# ---------------------------------------------------------------------------


def _trig_resample(values: np.ndarray, n_dst: int) -> np.ndarray:
    """Trigonometric interpolation of periodic samples onto n_dst nodes."""
    n_src = values.shape[-1]
    if n_dst == n_src:
        return values.copy()
    spec = np.fft.rfft(values, axis=-1)
    out_spec = np.zeros(values.shape[:-1] + (n_dst // 2 + 1,), dtype=complex)
    keep = min(spec.shape[-1], out_spec.shape[-1])
    out_spec[..., :keep] = spec[..., :keep]
    if n_src % 2 == 0 and keep == n_src // 2 + 1 and n_dst > n_src:
        out_spec[..., keep - 1] *= 1.0  # split Nyquist weight is negligible here
    return np.fft.irfft(out_spec, n=n_dst, axis=-1) * (n_dst / n_src)


def _spectral_dx(values: np.ndarray, length: float) -> np.ndarray:
    """Spectral x-derivative of periodic samples along the last axis."""
    n = values.shape[-1]
    freq = 2j * np.pi * np.fft.rfftfreq(n, d=length / n)
    return np.fft.irfft(np.fft.rfft(values, axis=-1) * freq, n=n, axis=-1)


def _time_interp(traj: np.ndarray, times: np.ndarray, t: float) -> np.ndarray:
    """Linear-in-time interpolation of a (K+1, ...) trajectory."""
    if t <= times[0]:
        return traj[0]
    if t >= times[-1]:
        return traj[-1]
    i = int(np.searchsorted(times, t, side="right") - 1)
    w = (t - times[i]) / (times[i + 1] - times[i])
    return (1 - w) * traj[i] + w * traj[i + 1]


# ---------------------------------------------------------------------------
# field bank: cell solutions over a parameter grid, fields retained
# ---------------------------------------------------------------------------


class FieldBank:
    """Cell correctors and invariant densities over a (p, m) parameter grid.

    One-dimensional cells; fields are stored per parameter node and queried by
    bilinear interpolation in (momentum, density).  ``to_table()`` exports the
    matching effective table built from the same solves.
    """

    def __init__(self, H: HamiltonianModel, F, p_nodes, m_nodes, cell_points: int = 16):
        self.H = H
        self.F = F
        self.p_nodes = np.asarray(p_nodes, dtype=float)
        self.m_nodes = np.atleast_1d(np.asarray(m_nodes, dtype=float))
        self.grid = TorusGrid(1, 1, cell_points)
        P, M, N = len(self.p_nodes), len(self.m_nodes), cell_points
        self.v = np.empty((P, M, N))
        self.mu = np.empty((P, M, N))
        self.h_bar = np.empty((P, M))
        self.b_bar = np.empty((P, M))
        for i, p in enumerate(self.p_nodes):
            for j, m in enumerate(self.m_nodes):
                cs = self._solve(p, m)
                self.v[i, j] = cs.v.values
                self.mu[i, j] = cs.mu.values
                self.h_bar[i, j] = cs.h_bar
                self.b_bar[i, j] = float(
                    integrate(ScalarField(self.grid, cs.drift_integrand()[0] * cs.mu.values))
                )

    def _solve(self, p: float, m: float):
        if self.F is None or getattr(self.F, "kind", None) == "nonlocal":
            const = 0.0 if self.F is None else self.F.value_at_constant(m)
            return solve_cell(self.H, [p], ScalarField.constant(self.grid, const))
        return solve_cell_coupled(self.H, self.F, [p], m_param=m, grid=self.grid)

    def exact_solution(self, p: float, m: float):
        """Fresh cell solve at exactly (p, m); no interpolation."""
        return self._solve(p, m)

    def _weights(self, q: np.ndarray, m: np.ndarray):
        def locate(axis, x):
            if len(axis) == 1:
                return np.zeros(len(x), dtype=int), np.zeros(len(x))
            i = np.clip(np.searchsorted(axis, x, side="right") - 1, 0, len(axis) - 2)
            return i, (x - axis[i]) / (axis[i + 1] - axis[i])

        if np.min(q) < self.p_nodes[0] - 1e-12 or np.max(q) > self.p_nodes[-1] + 1e-12:
            raise ValueError(
                f"momentum query [{np.min(q):.3g}, {np.max(q):.3g}] outside bank range"
            )
        if len(self.m_nodes) > 1 and (
            np.min(m) < self.m_nodes[0] - 1e-12 or np.max(m) > self.m_nodes[-1] + 1e-12
        ):
            raise ValueError(
                f"density query [{np.min(m):.3g}, {np.max(m):.3g}] outside bank range"
            )
        ip, tp = locate(self.p_nodes, q)
        im, tm = locate(self.m_nodes, m)
        return ip, tp, im, tm

    def _interp_stack(self, stack: np.ndarray, q: np.ndarray, m: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float).ravel()
        m = np.asarray(m, dtype=float).ravel()
        ip, tp, im, tm = self._weights(q, m)
        ip1 = np.minimum(ip + 1, len(self.p_nodes) - 1)
        im1 = np.minimum(im + 1, len(self.m_nodes) - 1)
        tp = tp[:, None]
        tm = tm[:, None]
        return (
            (1 - tp) * (1 - tm) * stack[ip, im]
            + tp * (1 - tm) * stack[ip1, im]
            + (1 - tp) * tm * stack[ip, im1]
            + tp * tm * stack[ip1, im1]
        )

    def v_fields(self, q, m) -> np.ndarray:
        """Correctors v(. ; q_k, m_k) for arrays of parameters, shape (n, N)."""
        return self._interp_stack(self.v, q, m)

    def mu_fields(self, q, m) -> np.ndarray:
        return self._interp_stack(self.mu, q, m)

    def to_table(self) -> EffectiveTable:
        return EffectiveTable(
            p_grid=(self.p_nodes,),
            m_grid=self.m_nodes,
            h_bar=self.h_bar,
            b_bar=self.b_bar[..., None],
            model_hash="fieldbank",
            coupling_kind="none" if self.F is None else self.F.kind,
            meta={
                "hamiltonian": self.H.describe(),
                "coupling": None if self.F is None else self.F.describe(),
                "cell_points": self.grid.points_per_cell,
            },
        )


def _modulated(bank_fields: np.ndarray, eps_grid: TorusGrid, cell_points: int) -> np.ndarray:
    """Evaluate x-modulated cell fields w(x/eps; x) on the oscillatory grid.

    ``bank_fields`` has one row per macro node of the oscillatory grid and one
    column per cell node; entry j of the result is row j's field at the cell
    coordinate of node j.
    """
    n = eps_grid.points_per_axis
    cell_index = np.arange(n) % cell_points
    return bank_fields[np.arange(n), cell_index]


# ---------------------------------------------------------------------------
# well-prepared convergence
# ---------------------------------------------------------------------------


def run_well_prepared(
    H: HamiltonianModel,
    F,
    p: float,
    eps_list,
    cell_points: int = 16,
    T: float = 0.5,
    m_bar_T: Optional[Callable] = None,
    bank: Optional[FieldBank] = None,
    macro_cells: int = 1,
    limit_points: int = 64,
    limit_steps: int = 256,
    subtract_correctors: bool = True,
    prepare_data: bool = True,
    opts: Optional[PicardOptions] = None,
    cfl_safety: float = 0.4,
    alpha_bound: float = 2.5,
) -> ConvergenceReport:
    """Convergence of the eps-family to the homogenized limit.

    Data are corrector-seasoned per the two-scale expansion: the initial value
    profile is p x + eps v(x/eps; p, m(x,0)) and the terminal density is
    m_T(x) mu(x/eps; Du(x,T), m_T(x)); ``m_bar_T`` is a callable macro profile
    (defaults to 1, the constant-data case, whose limit is exact and whose
    measured errors sit at the scheme floor).  The u-error is the sup norm
    against the limit solution after subtracting the eps-scale oscillation;
    the m-error is the largest-over-time L1 distance from the modulated limit
    density.  Rates are least-squares slopes on log-log axes.
    """
    eps_list = sorted([float(e) for e in eps_list], reverse=True)
    opts = opts or PicardOptions(averaging="fixed-damping", tol=1e-7)

    constant_mt = m_bar_T is None
    if bank is None:
        p_nodes = np.linspace(p - 0.75, p + 0.75, 9)
        m_nodes = np.array([1.0]) if constant_mt and (F is None) else np.linspace(0.2, 2.2, 9)
        bank = FieldBank(H, F, p_nodes, m_nodes, cell_points)
    table = bank.to_table()

    # reference limit solve on the fixed macro grid
    lim_grid = TorusGrid(1, macro_cells, limit_points)
    (x_lim,) = lim_grid.coordinates()
    mT_macro = np.ones(limit_points) if constant_mt else np.asarray(m_bar_T(x_lim), dtype=float)
    coupling = bank.F if getattr(bank.F, "kind", None) == "nonlocal" else None
    prob = LimitProblem(
        table,
        [p],
        ScalarField.constant(lim_grid, 0.0),
        ScalarField(lim_grid, mT_macro),
        T=T,
        n_steps=limit_steps,
        coupling=coupling,
    )
    limit_sol = solve_limit(prob, opts)

    u_errs, m_errs, solutions = [], [], []
    for eps in eps_list:
        grid = aligned_grid(1, macro_cells, cell_points, eps)
        n = grid.points_per_axis
        (x_eps,) = grid.coordinates()

        # macro fields resampled onto the oscillatory grid (both periodic)
        u_bar0 = _trig_resample(limit_sol.u_tilde[0], n)
        m_bar0 = _trig_resample(limit_sol.m[0], n)
        u_barT = _trig_resample(limit_sol.u_tilde[-1], n)
        m_barT_eps = np.ones(n) if constant_mt else np.asarray(m_bar_T(x_eps), dtype=float)

        q0 = p + _spectral_dx(u_bar0, float(grid.cells_per_dim))
        qT = p + _spectral_dx(u_barT, float(grid.cells_per_dim))

        if prepare_data:
            v0 = _modulated(bank.v_fields(q0, m_bar0), grid, cell_points)
            muT = _modulated(bank.mu_fields(qT, m_barT_eps), grid, cell_points)
            u0 = ScalarField(grid, u_bar0 + eps * v0)
            mT = ScalarField(grid, m_barT_eps * muT)
        else:
            u0 = ScalarField(grid, u_bar0)
            mT = ScalarField(grid, m_barT_eps)

        n_steps = int(np.ceil(T * alpha_bound / (cfl_safety * grid.spacing)))
        sol = solve_mfg_eps(H, F, [p], u0, mT, eps, T, n_steps, opts)
        solutions.append(sol)

        u_err = 0.0
        m_err = 0.0
        for idx, t in enumerate(sol.times):
            u_bar_t = _trig_resample(_time_interp(limit_sol.u_tilde, limit_sol.times, t), n)
            m_bar_t = _trig_resample(_time_interp(limit_sol.m, limit_sol.times, t), n)
            diff_u = sol.u_tilde[idx] - u_bar_t
            if subtract_correctors:
                q_t = p + _spectral_dx(u_bar_t, float(grid.cells_per_dim))
                v_t = _modulated(bank.v_fields(q_t, np.maximum(m_bar_t, bank.m_nodes[0])), grid, cell_points)
                diff_u = diff_u - eps * v_t
                mu_t = _modulated(bank.mu_fields(q_t, np.maximum(m_bar_t, bank.m_nodes[0])), grid, cell_points)
                ref_m = m_bar_t * mu_t
            else:
                ref_m = m_bar_t
            u_err = max(u_err, float(np.max(np.abs(diff_u))))
            m_err = max(m_err, float(np.sum(np.abs(sol.m[idx] - ref_m)) * grid.cell_volume))
        u_errs.append(u_err)
        m_errs.append(m_err)

    if sum(s.converged for s in solutions) < 3:
        raise RateUnreliable("fewer than three eps-solves converged")
    report = ConvergenceReport(
        eps_list=tuple(eps_list),
        u_sup=tuple(u_errs),
        m_err=tuple(m_errs),
        fitted_rate_u=fit_rate(eps_list, u_errs),
        fitted_rate_m=fit_rate(eps_list, m_errs),
        m_metric="l1",
        metadata={
            "hamiltonian": H.describe(),
            "coupling": None if F is None else F.describe(),
            "p": p,
            "T": T,
            "cell_points": cell_points,
            "constant_terminal_profile": constant_mt,
            "prepare_data": prepare_data,
            "subtract_correctors": subtract_correctors,
            "converged": [bool(s.converged) for s in solutions],
        },
    )
    return report


# ---------------------------------------------------------------------------
# nonlocal convergence with general data
# ---------------------------------------------------------------------------


def default_test_functions():
    """Fixed catalog of two-variable test functions phi(x, y).

    Products of low-degree macro and cell trig polynomials; the constant
    member makes the diagnostic reduce to the plain weak mass comparison.
    """

    def phi(fx, fy, name):
        return {"name": name, "x": fx, "y": fy}

    return [
        phi(lambda x: np.ones_like(x), lambda y: np.ones_like(y), "1"),
        phi(lambda x: np.cos(2 * np.pi * x), lambda y: np.ones_like(y), "cos2pix"),
        phi(lambda x: np.sin(2 * np.pi * x), lambda y: np.ones_like(y), "sin2pix"),
        phi(lambda x: np.ones_like(x), lambda y: np.cos(2 * np.pi * y), "cos2piy"),
        phi(lambda x: np.cos(2 * np.pi * x), lambda y: np.cos(2 * np.pi * y), "cos2pix_cos2piy"),
        phi(lambda x: np.sin(2 * np.pi * x), lambda y: np.sin(4 * np.pi * y), "sin2pix_sin4piy"),
    ]


def run_nonlocal_convergence(
    H: HamiltonianModel,
    F: NonlocalCoupling,
    p: float,
    u_tilde0_fn: Callable,
    m_T_fn: Callable,
    eps_list,
    cell_points: int = 16,
    T: float = 0.5,
    table: Optional[EffectiveTable] = None,
    table_points: int = 64,
    limit_points: int = 64,
    limit_steps: int = 256,
    opts: Optional[PicardOptions] = None,
    cfl_safety: float = 0.4,
    alpha_bound: float = 2.5,
) -> ConvergenceReport:
    """Eps-family versus limit for the smoothing coupling and general data.

    No corrector subtraction (correctors are first order in eps); the density
    error is weak: the largest pairing against the macro members of the test
    catalog, aggregated in L1 over time.
    """
    from .effective import build_table

    if F.kind != "nonlocal":
        raise ValueError("run_nonlocal_convergence needs the smoothing coupling")
    eps_list = sorted([float(e) for e in eps_list], reverse=True)
    opts = opts or PicardOptions(averaging="fixed-damping", tol=1e-7)

    if table is None:
        table = build_table(
            H, F, np.linspace(p - 1.0, p + 1.0, 9), [1.0], cell_points=table_points
        )

    lim_grid = TorusGrid(1, 1, limit_points)
    (x_lim,) = lim_grid.coordinates()
    prob = LimitProblem(
        table,
        [p],
        ScalarField(lim_grid, np.asarray(u_tilde0_fn(x_lim), dtype=float)),
        ScalarField(lim_grid, np.asarray(m_T_fn(x_lim), dtype=float)),
        T=T,
        n_steps=limit_steps,
        coupling=F,
    )
    limit_sol = solve_limit(prob, opts)

    macro_tests = [f for f in default_test_functions()]
    u_errs, m_errs, solutions = [], [], []
    for eps in eps_list:
        grid = aligned_grid(1, 1, cell_points, eps)
        n = grid.points_per_axis
        (x_eps,) = grid.coordinates()
        u0 = ScalarField(grid, np.asarray(u_tilde0_fn(x_eps), dtype=float))
        mT = ScalarField(grid, np.asarray(m_T_fn(x_eps), dtype=float))
        n_steps = int(np.ceil(T * alpha_bound / (cfl_safety * grid.spacing)))
        sol = solve_mfg_eps(H, F, [p], u0, mT, eps, T, n_steps, opts)
        solutions.append(sol)

        u_err = 0.0
        weak = 0.0
        dt = sol.dt
        for idx, t in enumerate(sol.times):
            u_bar_t = _trig_resample(_time_interp(limit_sol.u_tilde, limit_sol.times, t), n)
            m_bar_t = _trig_resample(_time_interp(limit_sol.m, limit_sol.times, t), n)
            u_err = max(u_err, float(np.max(np.abs(sol.u_tilde[idx] - u_bar_t))))
            worst_phi = max(
                abs(float(np.sum((sol.m[idx] - m_bar_t) * tf["x"](x_eps)) * grid.cell_volume))
                for tf in macro_tests
            )
            weight = dt if 0 < idx < len(sol.times) - 1 else 0.5 * dt
            weak += weight * worst_phi
        u_errs.append(u_err)
        m_errs.append(weak)

    if sum(s.converged for s in solutions) < 3:
        raise RateUnreliable("fewer than three eps-solves converged")
    return ConvergenceReport(
        eps_list=tuple(eps_list),
        u_sup=tuple(u_errs),
        m_err=tuple(m_errs),
        fitted_rate_u=fit_rate(eps_list, u_errs),
        fitted_rate_m=fit_rate(eps_list, m_errs),
        m_metric="weak-l1-in-time",
        metadata={
            "hamiltonian": H.describe(),
            "coupling": F.describe(),
            "p": p,
            "T": T,
            "cell_points": cell_points,
            "converged": [bool(s.converged) for s in solutions],
        },
    )


# ---------------------------------------------------------------------------
# two-scale diagnostic
# ---------------------------------------------------------------------------


def two_scale_diagnostic(
    sol: MFGSolution,
    bank: Optional[FieldBank],
    limit_sol: Optional[MFGSolution] = None,
    p: float = 0.0,
    test_functions=None,
) -> dict:
    """Discrepancy between m^eps paired with phi(x, x/eps) and the joint limit.

    The joint limit density is M(x, y, t) = m(x, t) mu(y; Du(x,t), m(x,t));
    with ``bank=None`` the flat profile mu = 1 is used.  Returns the absolute
    discrepancy per catalog test function.
    """
    tests = test_functions if test_functions is not None else default_test_functions()
    grid = sol.grid
    n = grid.points_per_axis
    (x,) = grid.coordinates()
    eps = sol.epsilon
    cell_points = int(round(eps * n / grid.cells_per_dim)) if eps > 0 else n
    y_fast = (np.arange(n) % cell_points) / cell_points if eps > 0 else np.zeros(n)
    cell_grid = bank.grid if bank is not None else TorusGrid(1, 1, cell_points)
    (y_cell,) = cell_grid.coordinates()

    dt = sol.dt
    out = {}
    for tf in tests:
        osc = 0.0
        lim = 0.0
        for idx, t in enumerate(sol.times):
            weight = dt if 0 < idx < len(sol.times) - 1 else 0.5 * dt
            osc += weight * float(
                np.sum(sol.m[idx] * tf["x"](x) * tf["y"](y_fast)) * grid.cell_volume
            )
            if limit_sol is not None:
                m_bar = _trig_resample(_time_interp(limit_sol.m, limit_sol.times, t), n)
                u_bar = _trig_resample(_time_interp(limit_sol.u_tilde, limit_sol.times, t), n)
            else:
                m_bar = np.ones(n)
                u_bar = np.zeros(n)
            if bank is not None:
                q = p + _spectral_dx(u_bar, float(grid.cells_per_dim))
                mu_fields = bank.mu_fields(q, np.clip(m_bar, bank.m_nodes[0], bank.m_nodes[-1]))
                cell_avg = mu_fields @ tf["y"](y_cell) * cell_grid.cell_volume
            else:
                cell_avg = np.full(n, float(np.mean(tf["y"](y_cell))))
            lim += weight * float(np.sum(m_bar * tf["x"](x) * cell_avg) * grid.cell_volume)
        out[tf["name"]] = abs(osc - lim)
    return out


# ---------------------------------------------------------------------------
# ansatz residuals (local coupling)
# ---------------------------------------------------------------------------


def run_ansatz_residuals(
    H: HamiltonianModel,
    F_local: LocalCoupling,
    limit_sol: MFGSolution,
    eps: float,
    p: float,
    cell_points: int = 16,
    sample_times: int = 3,
) -> AnsatzResiduals:
    """Assemble the corrected two-scale ansatz and measure its residuals.

    At sampled interior times and every macro node of the limit grid the cell
    system is solved exactly at (Du(x,t), m(x,t)); the first-order density
    corrector solves the modulation equation whose right-hand side collects
    the time derivative of the invariant density, the mixed second
    derivatives, and the macro divergence terms, with its cell mean (the
    Fredholm compatibility defect) recorded and projected out.  The assembled
    pair is then pushed through the oscillatory system's centered-difference
    operators; the leading cell-level terms cancel against the cell equations,
    leaving the first-order-in-eps remainder.
    """
    if limit_sol.grid.dim != 1:
        raise ValueError("ansatz assembly supports one space dimension")
    lim_grid = limit_sol.grid
    n_lim = lim_grid.points_per_axis
    L = float(lim_grid.cells_per_dim)
    cell_grid = TorusGrid(1, 1, cell_points)
    (y_cell,) = cell_grid.coordinates()
    h_y = cell_grid.spacing
    dt_lim = limit_sol.dt

    eps_grid = aligned_grid(1, 1, cell_points, eps)
    n_eps = eps_grid.points_per_axis
    h_x = eps_grid.spacing

    lap_y = laplacian_operator(cell_grid)
    dc_y = centered_diff_operator(cell_grid, 0)

    n_times = len(limit_sol.times)
    t_indices = [
        max(1, min(n_times - 2, int(round(frac * (n_times - 1)))))
        for frac in np.linspace(0.25, 0.75, sample_times)
    ]

    hjb_sup = 0.0
    fp_l1 = 0.0
    fredholm = 0.0

    for t_idx in t_indices:
        # cell solves at (q(x, t), m(x, t)) for the three neighboring levels
        levels = {}
        for off in (-1, 0, 1):
            k = t_idx + off
            u_bar = limit_sol.u_tilde[k]
            m_bar = limit_sol.m[k]
            q = p + _spectral_dx(u_bar, L)
            v_stack = np.empty((n_lim, cell_points))
            mu_stack = np.empty((n_lim, cell_points))
            for i in range(n_lim):
                cs = solve_cell_coupled(
                    H, F_local, [q[i]], m_param=float(m_bar[i]), grid=cell_grid
                )
                v_stack[i] = cs.v.values
                mu_stack[i] = cs.mu.values
            levels[off] = {
                "q": q,
                "m_bar": m_bar,
                "u_bar": u_bar,
                "v": v_stack,
                "mu": mu_stack,
            }

        cur = levels[0]
        q, m_bar, v_stack, mu_stack = cur["q"], cur["m_bar"], cur["v"], cur["mu"]

        # parameter-level x and t derivatives of the modulated cell fields
        dmu_dt = (levels[1]["mu"] - levels[-1]["mu"]) / (2 * dt_lim)
        dv_dx = _spectral_dx(v_stack.T, L).T
        dmu_dx = _spectral_dx(mu_stack.T, L).T
        dm_bar_dx = _spectral_dx(m_bar, L)
        dm_bar_dt = (levels[1]["m_bar"] - levels[-1]["m_bar"]) / (2 * dt_lim)

        # drift b(y; x) = D_p H(q + D_y v, y) per macro node, plus the macro
        # divergence of the drift-weighted density along the x-line
        b_fields = np.empty((n_lim, cell_points))
        kinetic = np.asarray(H.grad_p((np.ones(cell_points),), (y_cell,))[0], dtype=float)
        for i in range(n_lim):
            dv_dy = dc_y @ v_stack[i]
            b_fields[i] = np.asarray(H.grad_p((q[i] + dv_dy,), (y_cell,))[0], dtype=float)
        flux = b_fields * mu_stack * m_bar[:, None]
        div_x_flux = _spectral_dx(flux.T, L).T / m_bar[:, None]

        # first-order density corrector: solve the modulation equation nodewise,
        # recording and projecting the cell mean of the right-hand side
        nu_stack = np.empty((n_lim, cell_points))
        node_defects = np.empty(n_lim)
        for i in range(n_lim):
            mu_i = mu_stack[i]
            b1 = kinetic * dv_dx[i]  # D_p^2 H acting on the x-gradient of v
            rhs = -(
                dmu_dt[i]
                + 2.0 * (dc_y @ dmu_dx[i])
                + 2.0 * (dm_bar_dx[i] / m_bar[i]) * (dc_y @ mu_i)
                + (dm_bar_dt[i] / m_bar[i]) * mu_i
                + dc_y @ (b1 * mu_i)
                + div_x_flux[i]
            )
            mean = float(np.sum(rhs) * cell_grid.cell_volume)
            node_defects[i] = abs(mean)
            nu = nu_corrector(
                ScalarField(cell_grid, rhs - mean),
                VectorField(cell_grid, (b_fields[i],)),
                operator=sp.csr_matrix(lap_y + _div_c_operator(cell_grid, b_fields[i])),
            )
            nu_stack[i] = nu.values

        fredholm = max(fredholm, float(np.max(node_defects)))

        # assemble the ansatz fields on the oscillatory grid at three levels
        def assemble(level):
            u_bar = _trig_resample(level["u_bar"], n_eps)
            m_bar_l = _trig_resample(level["m_bar"], n_eps)
            v_mod = _modulated(_trig_resample(level["v"].T, n_eps).T, eps_grid, cell_points)
            mu_mod = _modulated(_trig_resample(level["mu"].T, n_eps).T, eps_grid, cell_points)
            return u_bar + eps * v_mod, m_bar_l * mu_mod

        u_hat_prev, m_hat_prev = assemble(levels[-1])
        u_hat, m_hat = assemble(levels[0])
        u_hat_next, m_hat_next = assemble(levels[1])
        nu_mod = _modulated(_trig_resample(nu_stack.T, n_eps).T, eps_grid, cell_points)
        m_bar_eps = _trig_resample(m_bar, n_eps)
        m_hat_prev = m_hat_prev + eps * _trig_resample(levels[-1]["m_bar"], n_eps) * nu_mod
        m_hat = m_hat + eps * m_bar_eps * nu_mod
        m_hat_next = m_hat_next + eps * _trig_resample(levels[1]["m_bar"], n_eps) * nu_mod

        # oscillatory-system residuals with centered operators
        y_fast = (np.arange(n_eps) % cell_points) / cell_points
        du = 0.5 * (np.roll(u_hat, -1) - np.roll(u_hat, 1)) / h_x
        lap_u = (np.roll(u_hat, -1) - 2 * u_hat + np.roll(u_hat, 1)) / h_x**2
        q_full = p + du
        ham = np.asarray(H.value((q_full,), (y_fast,)), dtype=float)
        coupling = np.asarray(F_local.value((y_fast,), m_hat), dtype=float)
        dudt = (u_hat_next - u_hat_prev) / (2 * dt_lim)
        r_u = dudt - eps * lap_u + ham - coupling
        hjb_sup = max(hjb_sup, float(np.max(np.abs(r_u))))

        b_full = np.asarray(H.grad_p((q_full,), (y_fast,))[0], dtype=float)
        lap_m = (np.roll(m_hat, -1) - 2 * m_hat + np.roll(m_hat, 1)) / h_x**2
        div_bm = 0.5 * (np.roll(b_full * m_hat, -1) - np.roll(b_full * m_hat, 1)) / h_x
        dmdt = (m_hat_next - m_hat_prev) / (2 * dt_lim)
        r_m = dmdt + eps * lap_m + div_bm
        fp_l1 = max(fp_l1, float(np.sum(np.abs(r_m)) * eps_grid.cell_volume))

    return AnsatzResiduals(
        eps=eps,
        hjb_residual_sup=hjb_sup,
        fp_residual_l1=fp_l1,
        fredholm_defect=fredholm,
    )


def _div_c_operator(grid: TorusGrid, drift_values: np.ndarray) -> sp.csr_matrix:
    """Centered conservative divergence matrix m -> D_c(drift m)."""
    D = centered_diff_operator(grid, 0)
    return sp.csr_matrix(D @ sp.diags(drift_values))


# ---------------------------------------------------------------------------
# potential structure check (time-reversed orientation)
# ---------------------------------------------------------------------------


def potential_check(
    H: HamiltonianModel,
    F: LocalCoupling,
    u_T_fn: Callable,
    m_0_fn: Callable,
    eps: float,
    cell_points: int = 32,
    T: float = 0.25,
    perturbations: int = 20,
    seed: int = 0,
    amplitude: float = 1e-2,
    opts: Optional[PicardOptions] = None,
    cfl_safety: float = 0.4,
    alpha_bound: float = 2.5,
    n_steps: Optional[int] = None,
) -> dict:
    """Variational check of the time-reversed potential system.

    Solves the reversed system (u terminal, m initial), evaluates the control
    cost at the PDE-derived feedback drift and at seeded perturbed drifts, each
    with its own forward-transported density, and reports the duality gap
    between the cost and its summation-by-parts value.
    """
    from .errors import PrimitiveMissing
    from .eps_solver import solve_mfg_reversed, _EpsStepper, _fast_coordinates

    if not getattr(F, "has_primitive", False):
        raise PrimitiveMissing("the variational check needs a declared convex primitive")
    opts = opts or PicardOptions(averaging="fixed-damping", tol=1e-8)
    grid = aligned_grid(1, 1, cell_points, eps)
    (x,) = grid.coordinates()
    u_T = ScalarField(grid, np.asarray(u_T_fn(x), dtype=float) + np.zeros(grid.shape))
    m_0 = ScalarField(grid, np.asarray(m_0_fn(x), dtype=float) + np.zeros(grid.shape))
    if n_steps is None:
        n_steps = int(np.ceil(T * alpha_bound / (cfl_safety * grid.spacing)))
    sol = solve_mfg_reversed(H, F, u_T, m_0, eps, T, n_steps, opts)

    y = _fast_coordinates(grid, eps)
    stepper = _EpsStepper(grid, H, F, eps, sol.dt, np.zeros(1), y)
    w = grid.cell_volume
    dt = sol.dt
    K = n_steps

    def control_fields(u_traj):
        return [stepper.drift(u_traj[n_]).components for n_ in range(K)]

    def forward_density(controls):
        m = np.empty((K + 1,) + grid.shape)
        m[0] = m_0.values
        for n_ in range(K):
            drift = VectorField(grid, controls[n_])
            m[n_ + 1] = stepper.transport_step_forward(m[n_], drift)
        return m

    def cost(controls, m_traj):
        total = 0.0
        for n_ in range(K):
            a = controls[n_]
            hstar = np.asarray(H.conjugate(a, y), dtype=float)
            prim = np.asarray(F.primitive(y, m_traj[n_]), dtype=float)
            total += dt * float(np.sum(hstar * m_traj[n_] + prim) * w)
        total += float(np.sum(u_T.values * m_traj[K]) * w)
        return total

    controls_opt = control_fields(sol.u_tilde)
    m_opt = forward_density(controls_opt)
    J_opt = cost(controls_opt, m_opt)

    rng = np.random.default_rng(seed)
    J_perturbed = []
    for _ in range(perturbations):
        coeffs = rng.normal(size=4)
        delta = amplitude * (
            coeffs[0] * np.cos(2 * np.pi * x)
            + coeffs[1] * np.sin(2 * np.pi * x)
            + coeffs[2] * np.cos(4 * np.pi * x)
            + coeffs[3] * np.sin(4 * np.pi * x)
        )
        controls = [(a[0] + delta,) for a in controls_opt]
        m_pert = forward_density(controls)
        J_perturbed.append(cost(controls, m_pert))

    # duality value by discrete summation by parts (see the package tests for
    # the small-grid confirmation): J = 2 <u_T, m(T)> - <u(0), m_0> + int(P - F m)
    running = 0.0
    for n_ in range(K):
        prim = np.asarray(F.primitive(y, m_opt[n_]), dtype=float)
        coup = np.asarray(F.value(y, m_opt[n_]), dtype=float)
        running += dt * float(np.sum(prim - coup * m_opt[n_]) * w)
    duality_value = (
        2.0 * float(np.sum(u_T.values * m_opt[K]) * w)
        - float(np.sum(sol.u_tilde[0] * m_0.values) * w)
        + running
    )
    return {
        "J_opt": J_opt,
        "J_perturbed": J_perturbed,
        "duality_defect": abs(J_opt - duality_value),
        "solution": sol,
    }
