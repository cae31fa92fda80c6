"""Closed catalog of Hamiltonians and couplings with analytic derivatives.

Three Hamiltonian kinds are supported (plus a deliberately non-convex stub used
to exercise the checkers):

* ``quadratic``              H(p, y) = |p|^2 / 2
* ``quadratic-plus-potential``   H(p, y) = |p|^2 / 2 + a cos(2 pi y_1)
* ``weighted-quadratic``     H(p, y) = (1 + (a/2) cos(2 pi y_1)) |p|^2 / 2
* ``negated-quadratic``      H(p, y) = -|p|^2 / 2   (convexity-violation stub)

Couplings are either local, F = F(y, m(y)) from a small closed-form list, or
nonlocal, F[m](x) = (rho * m)(x) with a wrapped-Gaussian kernel on the macro
torus.  The catalog is closed on purpose: analytic p- and y-derivatives stay
exact and the assumption checkers below stay meaningful.

Evaluators are vectorized: momenta and coordinates are passed as tuples of
broadcastable arrays, one entry per axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .torus import ScalarField, TorusGrid, integrate

__all__ = [
    "HamiltonianModel",
    "LocalCoupling",
    "NonlocalCoupling",
    "AssumptionReport",
    "quadratic",
    "quadratic_plus_potential",
    "weighted_quadratic",
    "check_convexity",
    "check_monotonicity",
    "check_lip_condition",
]

HAMILTONIAN_KINDS = (
    "quadratic",
    "quadratic-plus-potential",
    "weighted-quadratic",
    "negated-quadratic",
)


def _sum_sq(p):
    return sum(np.asarray(pk) ** 2 for pk in p)


@dataclass(frozen=True)
class HamiltonianModel:
    """Hamiltonian H(p, y), periodic in y on the unit torus.

    ``amplitude`` is the potential amplitude for ``quadratic-plus-potential``
    and the weight amplitude for ``weighted-quadratic`` (weight
    ``1 + (amplitude/2) cos(2 pi y_1)``, positive for amplitude < 2).
    """

    kind: str
    amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in HAMILTONIAN_KINDS:
            raise ValueError(f"unknown Hamiltonian kind {self.kind!r}")
        if self.kind == "weighted-quadratic" and not 0.0 <= self.amplitude < 2.0:
            raise ValueError("weighted-quadratic needs amplitude in [0, 2)")

    # -- scalar helpers -----------------------------------------------------
    def weight(self, y1):
        """Kinetic weight a(y); identically 1 except for weighted-quadratic."""
        if self.kind == "weighted-quadratic":
            return 1.0 + 0.5 * self.amplitude * np.cos(2 * np.pi * np.asarray(y1))
        return np.ones_like(np.asarray(y1, dtype=float))

    def potential(self, y1):
        """Additive potential V(y); zero except for quadratic-plus-potential."""
        if self.kind == "quadratic-plus-potential":
            return self.amplitude * np.cos(2 * np.pi * np.asarray(y1))
        return np.zeros_like(np.asarray(y1, dtype=float))

    @property
    def separable_quadratic(self) -> bool:
        """True when H(p, y) = |p|^2/2 + V(y)."""
        return self.kind in ("quadratic", "quadratic-plus-potential")

    # -- evaluators ---------------------------------------------------------
    def value(self, p, y):
        if self.kind == "negated-quadratic":
            return -0.5 * _sum_sq(p)
        if self.kind == "weighted-quadratic":
            return 0.5 * self.weight(y[0]) * _sum_sq(p)
        return 0.5 * _sum_sq(p) + self.potential(y[0])

    def grad_p(self, p, y):
        if self.kind == "negated-quadratic":
            return tuple(-np.asarray(pk, dtype=float) for pk in p)
        if self.kind == "weighted-quadratic":
            a = self.weight(y[0])
            return tuple(a * np.asarray(pk, dtype=float) for pk in p)
        return tuple(np.asarray(pk, dtype=float) + np.zeros_like(np.asarray(y[0], dtype=float)) for pk in p)

    def grad_y(self, p, y):
        out = [np.zeros(np.broadcast(np.asarray(p[0]), np.asarray(y[0])).shape) for _ in y]
        s = 2 * np.pi * np.sin(2 * np.pi * np.asarray(y[0]))
        if self.kind == "quadratic-plus-potential":
            out[0] = -self.amplitude * s + 0.0 * np.asarray(p[0])
        elif self.kind == "weighted-quadratic":
            out[0] = -0.25 * self.amplitude * s * _sum_sq(p)
        return tuple(out)

    def conjugate(self, q, y):
        """Convex conjugate H*(q, y) = sup_p (q . p - H(p, y))."""
        if self.kind == "quadratic":
            return 0.5 * _sum_sq(q)
        if self.kind == "quadratic-plus-potential":
            return 0.5 * _sum_sq(q) - self.potential(y[0])
        if self.kind == "weighted-quadratic":
            return 0.5 * _sum_sq(q) / self.weight(y[0])
        raise ValueError("conjugate undefined for the non-convex stub")

    def hessian_p_lower_bound(self) -> float:
        """Analytic lower bound on the p-Hessian's smallest eigenvalue."""
        if self.kind == "negated-quadratic":
            return -1.0
        if self.kind == "weighted-quadratic":
            return 1.0 - 0.5 * self.amplitude
        return 1.0

    def describe(self) -> dict:
        return {"kind": self.kind, "amplitude": self.amplitude}


def quadratic() -> HamiltonianModel:
    return HamiltonianModel("quadratic")


def quadratic_plus_potential(amplitude: float = 1.0) -> HamiltonianModel:
    return HamiltonianModel("quadratic-plus-potential", amplitude)


def weighted_quadratic(amplitude: float = 1.0) -> HamiltonianModel:
    return HamiltonianModel("weighted-quadratic", amplitude)


# ---------------------------------------------------------------------------
# couplings
# ---------------------------------------------------------------------------

LOCAL_COUPLING_FORMS = ("linear", "weighted-linear")


@dataclass(frozen=True)
class LocalCoupling:
    """Local coupling F(y, m) = c w(y) m from a closed list of weights.

    ``form="linear"`` has w = 1; ``form="weighted-linear"`` has
    w(y) = 1 + (weight_amplitude) cos(2 pi y_1).  Both declare the convex
    primitive  c w(y) m^2 / 2, whose m-derivative is F.  ``strength`` c < 0
    builds the monotonicity-violation stub used by the checker tests.
    """

    form: str = "linear"
    strength: float = 1.0
    weight_amplitude: float = 0.5

    kind = "local"

    def __post_init__(self):
        if self.form not in LOCAL_COUPLING_FORMS:
            raise ValueError(f"unknown local coupling form {self.form!r}")
        if self.form == "weighted-linear" and not 0.0 <= self.weight_amplitude < 1.0:
            raise ValueError("weighted-linear needs weight_amplitude in [0, 1)")

    def weight(self, y1):
        if self.form == "weighted-linear":
            return 1.0 + self.weight_amplitude * np.cos(2 * np.pi * np.asarray(y1))
        return np.ones_like(np.asarray(y1, dtype=float))

    def value(self, y, m):
        return self.strength * self.weight(y[0]) * np.asarray(m, dtype=float)

    def dm(self, y, m):
        return self.strength * self.weight(y[0]) + 0.0 * np.asarray(m, dtype=float)

    @property
    def has_primitive(self) -> bool:
        return True

    def primitive(self, y, m):
        """Convex primitive with dP/dm = value()."""
        return 0.5 * self.strength * self.weight(y[0]) * np.asarray(m, dtype=float) ** 2

    def describe(self) -> dict:
        return {
            "kind": "local",
            "form": self.form,
            "strength": self.strength,
            "weight_amplitude": self.weight_amplitude,
        }


@dataclass(frozen=True)
class NonlocalCoupling:
    """Smoothing coupling F[m](x) = (rho * m)(x), rho a wrapped Gaussian.

    The kernel is sampled on the macro grid and renormalized so that its torus
    integral is exactly one; its discrete Fourier coefficients stay positive
    (sums of positive Gaussian coefficients), so the coupling is monotone.
    """

    sigma: float = 0.2

    kind = "nonlocal"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("kernel width must be positive")

    def kernel(self, grid: TorusGrid) -> ScalarField:
        side = float(grid.cells_per_dim)
        coords = grid.coordinates()
        dens = np.ones(grid.shape)
        for c in coords:
            axis = np.zeros(grid.shape)
            # wrap enough images for double-precision tails
            images = int(np.ceil(6 * self.sigma / side)) + 1
            for k in range(-images, images + 1):
                axis += np.exp(-((c - k * side) ** 2) / (2 * self.sigma**2))
            dens = dens * axis
        f = ScalarField(grid, dens)
        return ScalarField(grid, dens / integrate(f))

    def apply(self, m: ScalarField) -> ScalarField:
        """Periodic convolution rho * m via FFT (exact circular convolution)."""
        rho = self.kernel(m.grid).values
        axes = tuple(range(m.grid.dim))
        prod = np.fft.rfftn(rho, axes=axes) * np.fft.rfftn(m.values, axes=axes)
        vals = np.fft.irfftn(prod, s=m.grid.shape, axes=axes) * m.grid.cell_volume
        return ScalarField(m.grid, vals)

    def apply_gradient(self, m: ScalarField) -> tuple:
        """Components of grad_x (rho * m) by spectral differentiation."""
        conv = self.apply(m)
        out = []
        n = m.grid.points_per_axis
        freq = 2j * np.pi * np.fft.fftfreq(n, d=m.grid.spacing)
        spec = np.fft.fftn(conv.values)
        for axis in range(m.grid.dim):
            shape = [1] * m.grid.dim
            shape[axis] = n
            out.append(np.real(np.fft.ifftn(spec * freq.reshape(shape))))
        return tuple(out)

    def value_at_constant(self, c: float) -> float:
        """F evaluated at the constant density c; equals c by normalization."""
        return float(c)

    def describe(self) -> dict:
        return {"kind": "nonlocal", "sigma": self.sigma}


# ---------------------------------------------------------------------------
# assumption checkers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionReport:
    """Outcome of one numerical assumption check.

    ``witness`` holds the sample (point or trial pair) where the extremum was
    attained, with enough data to reproduce ``worst_value``.  ``note`` records
    interpretation choices baked into the check.
    """

    name: str
    passed: bool
    worst_value: float
    witness: dict
    note: str = ""


def _fd_hessian(H: HamiltonianModel, p: np.ndarray, y: tuple, step: float = 1e-4) -> np.ndarray:
    d = len(p)
    hess = np.empty((d, d))
    ei = np.eye(d)

    def val(q):
        return float(H.value(tuple(q), y))

    f0 = val(p)
    for i in range(d):
        hess[i, i] = (val(p + step * ei[i]) - 2 * f0 + val(p - step * ei[i])) / step**2
        for j in range(i + 1, d):
            hess[i, j] = hess[j, i] = (
                val(p + step * (ei[i] + ei[j]))
                - val(p + step * (ei[i] - ei[j]))
                - val(p - step * (ei[i] - ei[j]))
                + val(p - step * (ei[i] + ei[j]))
            ) / (4 * step**2)
    return hess


def check_convexity(
    H: HamiltonianModel,
    p_box: float = 10.0,
    samples: int = 9,
    dim: int = 1,
    y_samples: int = 16,
) -> AssumptionReport:
    """Minimum eigenvalue of the finite-difference p-Hessian over a (p, y) lattice."""
    if samples < 1 or p_box <= 0:
        raise ValueError("need samples >= 1 and a positive p_box radius")
    p_axis = np.linspace(-p_box, p_box, samples)
    y_axis = np.arange(y_samples) / y_samples
    p_points = np.stack(np.meshgrid(*([p_axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    y_points = np.stack(np.meshgrid(*([y_axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)

    worst = np.inf
    witness = {}
    for y in y_points:
        y_t = tuple(y)
        for p in p_points:
            lam = float(np.linalg.eigvalsh(_fd_hessian(H, p, y_t)).min())
            if lam < worst:
                worst = lam
                witness = {"p": p.tolist(), "y": list(y_t)}
    return AssumptionReport("convexity", passed=worst > 0.0, worst_value=worst, witness=witness)


def trig_polynomial(grid: TorusGrid, rng: np.random.Generator, degree: int = 3) -> ScalarField:
    """Random smooth periodic trig polynomial with seeded coefficients."""
    coords = grid.coordinates()
    vals = np.zeros(grid.shape)
    ks = range(1, degree + 1)
    if grid.dim == 1:
        modes = [(k,) for k in ks]
    else:
        modes = [(k1, k2) for k1 in range(degree + 1) for k2 in range(degree + 1) if (k1, k2) != (0, 0)]
    for mode in modes:
        a, b = rng.normal(size=2)
        phase = sum(2 * np.pi * k * c for k, c in zip(mode, coords))
        vals += a * np.cos(phase) + b * np.sin(phase)
    return ScalarField(grid, vals)


def monotonicity_integral(F, f1: ScalarField, f2: ScalarField) -> float:
    """The pairing integral((F[f1] - F[f2]) (f1 - f2)) on the torus."""
    grid = f1.grid
    if F.kind == "local":
        y = grid.cell_coordinates()
        diff = (F.value(y, f1.values) - F.value(y, f2.values)) * (f1.values - f2.values)
        return integrate(ScalarField(grid, diff))
    delta = ScalarField(grid, f1.values - f2.values)
    smoothed = F.apply(delta)
    return integrate(smoothed * delta)


def check_monotonicity(
    F,
    trials: int = 20,
    seed: int = 0,
    grid: Optional[TorusGrid] = None,
) -> AssumptionReport:
    """Monotonicity of m -> F[m] on seeded random smooth trial pairs."""
    if trials < 1:
        raise ValueError("need trials >= 1")
    if grid is None:
        grid = TorusGrid(1, 1, 64)
    rng = np.random.default_rng(seed)
    worst = np.inf
    witness = {}
    for k in range(trials):
        f1 = trig_polynomial(grid, rng)
        f2 = trig_polynomial(grid, rng)
        val = monotonicity_integral(F, f1, f2)
        if val < worst:
            worst = val
            witness = {"trial": k, "seed": seed}
    return AssumptionReport(
        "monotonicity", passed=worst >= -1e-12, worst_value=worst, witness=witness
    )


def check_lip_condition(
    H: HamiltonianModel,
    F,
    theta: float,
    p_radius: float,
    eps: float,
    y_samples: int = 256,
    dim: int = 1,
) -> AssumptionReport:
    """Coercivity inf of theta H^2 + (D_y H, p) - eps (D_x F, p) on |p| = p_radius.

    The paper-level pairing is implemented as the Euclidean inner product; that
    interpretation is recorded in the report note.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    y_axis = np.arange(y_samples) / y_samples
    if dim == 1:
        y_points = y_axis.reshape(-1, 1)
        p_dirs = np.array([[1.0], [-1.0]])
    else:
        mesh = np.meshgrid(y_axis[::4], y_axis[::4], indexing="ij")
        y_points = np.stack(mesh, axis=-1).reshape(-1, 2)
        ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        p_dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    # nonlocal couplings feel x through the smoothed density; local catalog
    # couplings do not depend on x at all
    if F is not None and F.kind == "nonlocal":
        xgrid = TorusGrid(dim, 1, 64)
        coords = xgrid.coordinates()
        ref = ScalarField(xgrid, 1.0 + 0.5 * np.cos(2 * np.pi * coords[0]))
        dxF = np.stack([g.ravel() for g in F.apply_gradient(ref)], axis=-1)
        x_points = np.stack([c.ravel() for c in coords], axis=-1)
    else:
        dxF = np.zeros((1, dim))
        x_points = np.zeros((1, dim))

    worst = np.inf
    witness = {}
    for iy, y in enumerate(y_points):
        y_t = tuple(y)
        for pd in p_dirs:
            p = tuple(p_radius * pd)
            h_val = float(H.value(p, y_t))
            dy = np.array([float(g) for g in H.grad_y(p, y_t)])
            base = theta * h_val**2 + float(dy @ (p_radius * pd))
            vals = base - eps * dxF @ (p_radius * pd)
            ix = int(np.argmin(vals))
            if vals[ix] < worst:
                worst = float(vals[ix])
                witness = {
                    "p": (p_radius * pd).tolist(),
                    "y": list(y_t),
                    "x": x_points[min(ix, len(x_points) - 1)].tolist(),
                }
    return AssumptionReport(
        "lip-coercivity",
        passed=worst > 0.0,
        worst_value=worst,
        witness=witness,
        note="pairing d(.,.) implemented as the Euclidean inner product",
    )
