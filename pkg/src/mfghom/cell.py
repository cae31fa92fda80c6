"""Ergodic cell problems on the unit torus.

Solves, for frozen momentum p (and frozen macro density in the coupled case),

* the Hamilton-Jacobi corrector equation  -lap v + H(p + Dv, y) - g = h_bar
  with the normalization  integral(v) = 0,
* the stationary Fokker-Planck equation for the invariant density mu,
* the coupled local-coupling cell system by damped fixed point,
* the p-differentiated corrector equation, and
* the nu-corrector equation  lap nu + div(b nu) = rhs.

Discretization.  The ergodic constant is an explicit unknown closed by a
mean-zero constraint row, and the system is solved by damped Newton.  For the
separable quadratic Hamiltonians (H = |q|^2/2 + V(y)) the Hamiltonian term is
discretized in Cole-Hopf form: with phi = exp(-v/2),

    -lap v + |p + Dv|^2 / 2  ->  (2 lap_h phi - 2 p . D_c phi) / phi + |p|^2/2,

which is second-order consistent, reproduces the flat case exactly, and is
*algebraically equivalent* to the principal-eigenvalue problem of the linear
operator 2 lap_h - 2 p . D_c + diag(V - g); for the weighted-quadratic kind
plain centered differences are used.  The invariant density attached to a cell
solution is the null vector of the exact transpose of the Newton Jacobian at
the solution.  With that pairing the discrete analogues of the paper-level
identities (effective drift = p-derivative of the ergodic constant, and the
mu-weighted average of the differentiated Hamiltonian) hold to solver
tolerance rather than to discretization order.

The standalone invariant-density solver uses an exponentially fitted
(Bernoulli-flux) conservative operator with spectrally integrated face drifts;
in one dimension its stationary solution coincides with the integrating-factor
closed form up to quadrature precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    CompatibilityViolated,
    CoupledCellUnsupported,
    FixedPointStalled,
    NewtonDiverged,
    NullspaceDegenerate,
    PositivityViolated,
)
from .models import HamiltonianModel, LocalCoupling
from .torus import (
    ScalarField,
    TorusGrid,
    VectorField,
    centered_diff_operator,
    integrate,
    laplacian_operator,
)

__all__ = [
    "CellSolution",
    "LinearizedCorrector",
    "solve_hj_ergodic",
    "solve_invariant_density",
    "solve_cell",
    "solve_cell_coupled",
    "linearized_corrector",
    "nu_corrector",
    "hj_residual",
    "fp_residual",
]

HJ_TOL = 1e-10
NEWTON_BUDGET = 50
FIXED_POINT_TOL = 1e-9
FIXED_POINT_BUDGET = 200


# ---------------------------------------------------------------------------
# discrete Hamiltonian schemes
# ---------------------------------------------------------------------------


class _ColeHopfScheme:
    """Cole-Hopf-exact discretization for H(q, y) = |q|^2/2 + V(y)."""

    def __init__(self, H: HamiltonianModel, grid: TorusGrid):
        self.H = H
        self.grid = grid
        y1 = grid.cell_coordinates()[0]
        self.potential = np.asarray(H.potential(y1), dtype=float).ravel()
        self.lap = laplacian_operator(grid)
        self.diffs = [centered_diff_operator(grid, k) for k in range(grid.dim)]
        self._linear_cache: dict = {}

    def _linear_operator(self, p) -> sp.csr_matrix:
        key = tuple(float(pk) for pk in p)
        op = self._linear_cache.get(key)
        if op is None:
            op = 2.0 * self.lap
            for pk, D in zip(key, self.diffs):
                op = op - 2.0 * pk * D
            op = sp.csr_matrix(op)
            self._linear_cache[key] = op
        return op

    def _phi(self, v: np.ndarray) -> np.ndarray:
        return np.exp(-0.5 * (v - v.mean()))

    def hamiltonian_term(self, v: np.ndarray, p) -> np.ndarray:
        """Discrete ``-lap v + H(p + Dv, y)`` evaluated through phi."""
        phi = self._phi(v)
        L = self._linear_operator(p)
        half_p2 = 0.5 * sum(float(pk) ** 2 for pk in p)
        return (L @ phi) / phi + half_p2 + self.potential

    def jacobian(self, v: np.ndarray, p) -> sp.csr_matrix:
        phi = self._phi(v)
        L = self._linear_operator(p)
        ratio = (L @ phi) / phi
        inv = sp.diags(1.0 / phi)
        scale = sp.diags(phi)
        return sp.csr_matrix(-0.5 * (inv @ L @ scale) + 0.5 * sp.diags(ratio))

    def dHdp(self, v: np.ndarray, p) -> list:
        """p-gradient of the discrete Hamiltonian term; the drift integrand."""
        phi = self._phi(v)
        out = []
        for pk, D in zip(p, self.diffs):
            out.append(float(pk) - 2.0 * (D @ phi) / phi)
        return out


class _CenteredScheme:
    """Centered-difference discretization for general catalog Hamiltonians."""

    def __init__(self, H: HamiltonianModel, grid: TorusGrid):
        self.H = H
        self.grid = grid
        self.y = tuple(c.ravel() for c in grid.cell_coordinates())
        self.lap = laplacian_operator(grid)
        self.diffs = [centered_diff_operator(grid, k) for k in range(grid.dim)]

    def _momentum(self, v: np.ndarray, p) -> tuple:
        return tuple(float(pk) + D @ v for pk, D in zip(p, self.diffs))

    def hamiltonian_term(self, v: np.ndarray, p) -> np.ndarray:
        q = self._momentum(v, p)
        return -(self.lap @ v) + np.asarray(self.H.value(q, self.y), dtype=float)

    def jacobian(self, v: np.ndarray, p) -> sp.csr_matrix:
        q = self._momentum(v, p)
        hp = self.H.grad_p(q, self.y)
        out = -self.lap
        for hk, D in zip(hp, self.diffs):
            out = out + sp.diags(np.asarray(hk, dtype=float)) @ D
        return sp.csr_matrix(out)

    def dHdp(self, v: np.ndarray, p) -> list:
        q = self._momentum(v, p)
        return [np.asarray(h, dtype=float) for h in self.H.grad_p(q, self.y)]


def _make_scheme(H: HamiltonianModel, grid: TorusGrid):
    if H.separable_quadratic:
        return _ColeHopfScheme(H, grid)
    return _CenteredScheme(H, grid)


# ---------------------------------------------------------------------------
# Newton solve of the augmented ergodic system
# ---------------------------------------------------------------------------


def _newton_ergodic(scheme, p, g: np.ndarray, v0: Optional[np.ndarray] = None):
    """Damped Newton on (v, h_bar) with the mean-zero constraint row."""
    grid = scheme.grid
    n = grid.size
    w = grid.cell_volume
    v = np.zeros(n) if v0 is None else v0.copy()
    v -= v.mean()
    h_bar = float(np.mean(scheme.hamiltonian_term(v, p) - g))

    def residual(v_, h_):
        return scheme.hamiltonian_term(v_, p) - g - h_

    res = residual(v, h_bar)
    norm = float(np.max(np.abs(res)))
    for _ in range(NEWTON_BUDGET):
        if norm <= HJ_TOL:
            break
        J = scheme.jacobian(v, p)
        aug = sp.bmat(
            [[J, -np.ones((n, 1))], [w * np.ones((1, n)), None]], format="csc"
        )
        rhs = np.concatenate([-res, [-w * v.sum()]])
        delta = spla.spsolve(aug, rhs)
        dv, dh = delta[:n], float(delta[n])
        step = 1.0
        for _ in range(10):
            trial_v = v + step * dv
            trial_h = h_bar + step * dh
            trial_res = residual(trial_v, trial_h)
            trial_norm = float(np.max(np.abs(trial_res)))
            if trial_norm < norm:
                v, h_bar, res, norm = trial_v, trial_h, trial_res, trial_norm
                break
            step *= 0.5
        else:
            raise NewtonDiverged("line search failed in the ergodic Newton solve", norm)
    else:
        raise NewtonDiverged("Newton budget exhausted in the ergodic solve", norm)
    v -= v.mean()
    return v, h_bar, norm


def solve_hj_ergodic(
    H: HamiltonianModel,
    p,
    g: ScalarField,
    v0: Optional[ScalarField] = None,
):
    """Corrector and ergodic constant of -lap v + H(p + Dv, y) - g = h_bar.

    Returns ``(v, h_bar)`` with ``integral(v) = 0`` and the nodewise residual
    below 1e-10 in the sup norm.  Raises :class:`NewtonDiverged` when the
    damped Newton iteration cannot reach that tolerance.
    """
    grid = g.grid
    p = _as_momentum(p, grid.dim)
    scheme = _make_scheme(H, grid)
    start = None if v0 is None else v0.values.ravel()
    v, h_bar, _ = _newton_ergodic(scheme, p, g.values.ravel(), start)
    return ScalarField(grid, v.reshape(grid.shape)), h_bar


def _as_momentum(p, dim: int) -> tuple:
    arr = np.atleast_1d(np.asarray(p, dtype=float))
    if arr.size != dim:
        raise ValueError(f"momentum needs {dim} components, got {arr.size}")
    return tuple(float(x) for x in arr)


# ---------------------------------------------------------------------------
# stationary densities: null vectors of conservative operators
# ---------------------------------------------------------------------------


def _null_vector(M: sp.spmatrix, tol: float = 1e-12, probe_degenerate: bool = True) -> np.ndarray:
    """Positive null vector of a zero-column-sum operator by shifted inverse iteration."""
    n = M.shape[0]
    scale = float(np.max(np.abs(M.diagonal()))) or 1.0
    shift = 1e-8 * scale
    lu = spla.splu(sp.csc_matrix(M - shift * sp.identity(n)))
    x = np.ones(n)
    for _ in range(25):
        x = lu.solve(x)
        x /= np.max(np.abs(x))
        if np.max(np.abs(M @ x)) <= tol * scale:
            break
    else:
        raise NullspaceDegenerate("inverse iteration failed to isolate a null vector")
    if probe_degenerate:
        # deflated inverse iteration estimates the next-smallest spectral point
        rng = np.random.default_rng(0)
        y = rng.normal(size=n)
        y -= (x @ y) / (x @ x) * x
        y /= np.linalg.norm(y)
        growth = 1.0
        for _ in range(3):
            y = lu.solve(y)
            y -= (x @ y) / (x @ x) * x
            growth = np.linalg.norm(y)
            y /= growth
        if growth > 0 and 1.0 / growth + shift < 1e-10 * scale:
            raise NullspaceDegenerate("second spectral point vanishes: invariant measure not unique")
    if x.sum() < 0:
        x = -x
    return x


def _normalize_density(raw: np.ndarray, grid: TorusGrid) -> np.ndarray:
    mu = raw / (grid.cell_volume * raw.sum())
    if np.min(mu) < -1e-12:
        raise PositivityViolated(
            f"invariant density reached {np.min(mu):.3e}; drift too strong for this grid"
        )
    return np.maximum(mu, 0.0)


def _bernoulli(z: np.ndarray) -> np.ndarray:
    """B(z) = z / (e^z - 1), evaluated stably through expm1."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    small = np.abs(z) < 1e-12
    zs = np.where(small, 1.0, z)
    out = np.where(small, 1.0 - 0.5 * z, zs / np.expm1(zs))
    return out


def _face_line_integrals(grid: TorusGrid, b: np.ndarray, axis: int) -> np.ndarray:
    """Spectral line integrals of the drift over each cell edge along ``axis``.

    Exact for band-limited drifts, superalgebraically accurate for analytic
    ones; entry i holds the integral over [y_i, y_{i+1}].
    """
    n = grid.points_per_axis
    h = grid.spacing
    spec = np.fft.fft(b, axis=axis)
    freq = np.fft.fftfreq(n, d=h)
    shape = [1] * grid.dim
    shape[axis] = n
    omega = (2j * np.pi * freq).reshape(shape)
    mask = np.zeros(n, dtype=bool)
    mask[0] = True
    mask_shaped = mask.reshape(shape)
    # antiderivative of the zero-mean part; the mean contributes mean * h
    anti_spec = np.where(mask_shaped, 0.0, spec / np.where(mask_shaped, 1.0, omega))
    anti = np.real(np.fft.ifft(anti_spec, axis=axis))
    mean_part = np.real(spec[(slice(None),) * axis + (0,)][..., None] if False else 0)
    mean_axis = np.take(spec, 0, axis=axis).real / n
    mean_axis = np.expand_dims(mean_axis, axis=axis)
    return (np.roll(anti, -1, axis=axis) - anti) + mean_axis * h


def fitted_fp_operator(grid: TorusGrid, drift: VectorField, diffusion: float = 1.0) -> sp.csr_matrix:
    """Exponentially fitted conservative operator for ``diffusion*lap m + div(drift m)``.

    Fluxes use the Bernoulli function of the face Peclet number, which keeps the
    matrix an M-matrix (positivity) for every drift strength and makes zero-flux
    stationary states exact up to the face-drift quadrature.
    """
    h = grid.spacing
    n = grid.size
    rows, cols, vals = [], [], []
    idx = np.arange(n).reshape(grid.shape)
    for axis in range(grid.dim):
        z = _face_line_integrals(grid, drift.components[axis], axis) / diffusion
        bp = _bernoulli(z) * diffusion
        bm = _bernoulli(-z) * diffusion
        up = np.roll(idx, -1, axis=axis)
        # flux_(i+1/2) = (bp_i m_i - bm_i m_{i+1}) / h ; operator = -d flux / dy
        rows.extend([idx.ravel(), idx.ravel(), up.ravel(), up.ravel()])
        cols.extend([idx.ravel(), up.ravel(), idx.ravel(), up.ravel()])
        vals.extend([-bp.ravel() / h**2, bm.ravel() / h**2, bp.ravel() / h**2, -bm.ravel() / h**2])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csr_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)))


def solve_invariant_density(drift: VectorField) -> ScalarField:
    """Positive, mass-one stationary density of ``lap mu + div(drift mu) = 0``.

    Computed as the null vector of the fitted conservative operator via shifted
    inverse iteration.  Raises :class:`PositivityViolated` when the null vector
    dips below -1e-12 and :class:`NullspaceDegenerate` when the null space is
    not numerically one-dimensional.
    """
    grid = drift.grid
    M = fitted_fp_operator(grid, drift)
    raw = _null_vector(M)
    mu = _normalize_density(raw, grid)
    return ScalarField(grid, mu.reshape(grid.shape))


# ---------------------------------------------------------------------------
# cell solutions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellSolution:
    """Corrector, invariant density and ergodic constant for one (p, m, x)."""

    p: tuple
    v: ScalarField
    mu: ScalarField
    h_bar: float
    residuals: dict
    m_param: Optional[float] = None
    x_param: Optional[tuple] = None
    coupling: str = "none"
    _scheme: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if abs(integrate(self.v)) > 1e-10:
            raise ValueError("corrector normalization lost: integral(v) != 0")
        if abs(integrate(self.mu) - 1.0) > 1e-12:
            raise ValueError("invariant density mass lost")
        if np.min(self.mu.values) <= 0.0:
            raise PositivityViolated("invariant density must be strictly positive")

    def drift_integrand(self) -> list:
        """p-gradient of the discrete Hamiltonian at the solution, per axis."""
        vals = self._scheme.dHdp(self.v.values.ravel(), self.p)
        return [v.reshape(self.v.grid.shape) for v in vals]

    def drift(self) -> VectorField:
        return VectorField(self.v.grid, tuple(self.drift_integrand()))


@dataclass(frozen=True)
class LinearizedCorrector:
    """Solution of the p_i-differentiated corrector equation."""

    direction: int
    w_pi: ScalarField
    h_bar_pi: float


def hj_residual(cs: CellSolution, g: ScalarField) -> float:
    """Sup-norm residual of the discrete corrector equation on stored fields."""
    term = cs._scheme.hamiltonian_term(cs.v.values.ravel(), cs.p)
    return float(np.max(np.abs(term - g.values.ravel() - cs.h_bar)))


def fp_residual(cs: CellSolution) -> float:
    """Sup-norm residual of the discrete stationary equation on stored fields."""
    J = cs._scheme.jacobian(cs.v.values.ravel(), cs.p)
    return float(np.max(np.abs(J.T @ cs.mu.values.ravel())))


def _assemble_cell(
    scheme,
    grid: TorusGrid,
    p: tuple,
    v: np.ndarray,
    h_bar: float,
    g: np.ndarray,
    iters: int = 0,
    m_param=None,
    x_param=None,
    coupling="none",
) -> CellSolution:
    J = scheme.jacobian(v, p)
    mu = _normalize_density(_null_vector(sp.csr_matrix(J.T)), grid)
    hj = float(np.max(np.abs(scheme.hamiltonian_term(v, p) - g - h_bar)))
    fp = float(np.max(np.abs(J.T @ mu)))
    return CellSolution(
        p=p,
        v=ScalarField(grid, v.reshape(grid.shape)),
        mu=ScalarField(grid, mu.reshape(grid.shape)),
        h_bar=h_bar,
        residuals={"hj": hj, "fp": fp, "fixed_point_iters": iters},
        m_param=m_param,
        x_param=x_param,
        coupling=coupling,
        _scheme=scheme,
    )


def solve_cell(
    H: HamiltonianModel,
    p,
    g: Optional[ScalarField] = None,
    grid: Optional[TorusGrid] = None,
    coupling: str = "none",
) -> CellSolution:
    """Decoupled cell solve: corrector plus the dual invariant density.

    ``g`` is the frozen source (for the nonlocal coupling it is the constant
    F(x, m), for no coupling it is zero).
    """
    if g is None:
        if grid is None:
            raise ValueError("provide either a source field or a grid")
        g = ScalarField.constant(grid, 0.0)
    grid = g.grid
    p = _as_momentum(p, grid.dim)
    scheme = _make_scheme(H, grid)
    v, h_bar, _ = _newton_ergodic(scheme, p, g.values.ravel())
    return _assemble_cell(scheme, grid, p, v, h_bar, g.values.ravel(), coupling=coupling)


def solve_cell_coupled(
    H: HamiltonianModel,
    F: LocalCoupling,
    p,
    m_param: float,
    x_param=None,
    grid: Optional[TorusGrid] = None,
    relaxation: float = 0.5,
    tol: float = FIXED_POINT_TOL,
    budget: int = FIXED_POINT_BUDGET,
) -> CellSolution:
    """Coupled local cell system by damped fixed point on the density.

    Freezes g = F(y, m_param * mu), solves the corrector equation, rebuilds the
    invariant density from the Jacobian transpose, and relaxes; stops when the
    L1 increment falls below ``tol``.
    """
    if m_param < 0:
        raise ValueError("m_param must be nonnegative")
    if grid is None:
        grid = TorusGrid(1, 1, 64)
    p = _as_momentum(p, grid.dim)
    scheme = _make_scheme(H, grid)
    y = tuple(c.ravel() for c in grid.cell_coordinates())
    w = grid.cell_volume

    mu = np.ones(grid.size)
    v = None
    h_bar = 0.0
    g = None
    increment = np.inf
    for it in range(1, budget + 1):
        g = np.asarray(F.value(y, m_param * mu), dtype=float)
        v, h_bar, _ = _newton_ergodic(scheme, p, g, v0=v)
        J = scheme.jacobian(v, p)
        mu_new = _normalize_density(_null_vector(sp.csr_matrix(J.T), probe_degenerate=False), grid)
        increment = w * float(np.sum(np.abs(mu_new - mu)))
        mu = (1.0 - relaxation) * mu + relaxation * mu_new
        if increment <= tol:
            break
    else:
        raise FixedPointStalled("coupled cell fixed point exhausted its budget", increment)

    # final pass so the stored fields satisfy both equations at the final g
    g = np.asarray(F.value(y, m_param * mu), dtype=float)
    v, h_bar, _ = _newton_ergodic(scheme, p, g, v0=v)
    cs = _assemble_cell(
        scheme, grid, p, v, h_bar, g, iters=it, m_param=float(m_param),
        x_param=None if x_param is None else tuple(np.atleast_1d(x_param).tolist()),
        coupling="local",
    )
    return cs


def linearized_corrector(cs: CellSolution, i: int = 0) -> LinearizedCorrector:
    """Differentiate the corrector equation with respect to p_i.

    Solves the linearized equation with the Jacobian frozen at the cell
    solution; the solvability constant is the p_i-derivative of the ergodic
    constant.  Only decoupled (no-coupling or nonlocal) solutions are
    supported: the differentiated local system is larger and out of scope.
    """
    if cs.coupling == "local":
        raise CoupledCellUnsupported(
            "linearized corrector is defined for decoupled cell solutions only"
        )
    grid = cs.v.grid
    n = grid.size
    w = grid.cell_volume
    scheme = cs._scheme
    v = cs.v.values.ravel()
    J = scheme.jacobian(v, cs.p)
    rhs_field = scheme.dHdp(v, cs.p)[i]
    aug = sp.bmat([[J, -np.ones((n, 1))], [w * np.ones((1, n)), None]], format="csc")
    sol = spla.spsolve(aug, np.concatenate([-np.asarray(rhs_field, dtype=float), [0.0]]))
    w_pi = sol[:n]
    w_pi -= w_pi.mean()
    return LinearizedCorrector(
        direction=i,
        w_pi=ScalarField(grid, w_pi.reshape(grid.shape)),
        h_bar_pi=float(sol[n]),
    )


def nu_corrector(
    rhs: ScalarField,
    drift: VectorField,
    operator: Optional[sp.spmatrix] = None,
) -> ScalarField:
    """Solve ``lap nu + div(drift nu) = rhs`` with ``integral(nu) = 0``.

    The right-hand side must satisfy the Fredholm compatibility condition
    |integral(rhs)| <= 1e-8; otherwise :class:`CompatibilityViolated` is
    raised.  ``operator`` overrides the default fitted operator when the
    caller needs the equation paired with a specific discrete structure.
    """
    grid = rhs.grid
    total = integrate(rhs)
    if abs(total) > 1e-8:
        raise CompatibilityViolated(
            f"integral of the right-hand side is {total:.3e}; ansatz assembly inconsistent"
        )
    M = fitted_fp_operator(grid, drift) if operator is None else operator
    n = grid.size
    w = grid.cell_volume
    aug = sp.bmat([[M, np.ones((n, 1))], [w * np.ones((1, n)), None]], format="csc")
    sol = spla.spsolve(aug, np.concatenate([rhs.values.ravel(), [0.0]]))
    nu = sol[:n]
    nu -= nu.mean()
    return ScalarField(grid, nu.reshape(grid.shape))
