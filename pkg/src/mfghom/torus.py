"""Periodic uniform grids on the flat torus and the discrete operators built on them.

The unit cell is normalized to [0, 1)^d; a grid covers ``cells_per_dim`` macro
periods with ``points_per_cell`` nodes per period and axis, so the torus side is
``cells_per_dim`` and the spacing is exactly ``1 / points_per_cell``.  Fields are
immutable: every operation returns a new field.

Conventions used throughout the solvers:

* the centered first difference matrix is exactly antisymmetric, so the pair
  (centered gradient, centered divergence) is a discrete adjoint pair;
* upwind advection ``advect(b, f) ~ b . grad f`` sign-splits the drift per
  component, and ``advect_transpose`` is its exact matrix transpose, which makes
  ``-advect_transpose(b, m)`` a conservative discretization of ``div(b m)``;
* grid sums of ``laplacian`` and of any divergence telescope to zero exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

__all__ = [
    "TorusGrid",
    "ScalarField",
    "VectorField",
    "gradient",
    "laplacian",
    "divergence",
    "advect",
    "advect_transpose",
    "upwind_divergence",
    "integrate",
]


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on a flat torus of side ``cells_per_dim``.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    cells_per_dim : int
        Number of unit cells per axis (1 for the unit cell itself).
    points_per_cell : int
        Nodes per unit cell per axis; the spacing is ``1 / points_per_cell``.
    """

    dim: int
    cells_per_dim: int = 1
    points_per_cell: int = 64

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.cells_per_dim < 1:
            raise ValueError("cells_per_dim must be a positive integer")
        if self.points_per_cell < 1:
            raise ValueError("points_per_cell must be a positive integer")

    @property
    def spacing(self) -> float:
        return 1.0 / self.points_per_cell

    @property
    def points_per_axis(self) -> int:
        return self.cells_per_dim * self.points_per_cell

    @property
    def shape(self) -> tuple:
        return (self.points_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.points_per_axis**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    def axis_coordinates(self) -> np.ndarray:
        """Node coordinates along one axis, in [0, cells_per_dim)."""
        return np.arange(self.points_per_axis) * self.spacing

    def coordinates(self) -> tuple:
        """Meshgrid of node coordinates, one array of ``self.shape`` per axis."""
        axes = [self.axis_coordinates() for _ in range(self.dim)]
        if self.dim == 1:
            return (axes[0],)
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def cell_coordinates(self) -> tuple:
        """Coordinates wrapped to the unit cell (the fast variable)."""
        return tuple(c % 1.0 for c in self.coordinates())


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ScalarField:
    """Immutable scalar field sampled at the nodes of a :class:`TorusGrid`."""

    grid: TorusGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            vals = vals.reshape(self.grid.shape)
        if not np.all(np.isfinite(vals)):
            raise ValueError("ScalarField values must be finite")
        object.__setattr__(self, "values", _frozen(vals))

    @classmethod
    def constant(cls, grid: TorusGrid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid: TorusGrid, fn) -> "ScalarField":
        return cls(grid, fn(*grid.coordinates()))

    def __add__(self, other):
        other_vals = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values + other_vals)

    def __sub__(self, other):
        other_vals = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values - other_vals)

    def __mul__(self, other):
        other_vals = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values * other_vals)

    __rmul__ = __mul__


@dataclass(frozen=True)
class VectorField:
    """Immutable vector field; one component array per grid axis."""

    grid: TorusGrid
    components: tuple = field(repr=False)

    def __post_init__(self):
        comps = []
        if len(self.components) != self.grid.dim:
            raise ValueError("need one component per grid axis")
        for c in self.components:
            arr = np.asarray(c, dtype=float)
            if arr.shape != self.grid.shape:
                arr = arr.reshape(self.grid.shape)
            if not np.all(np.isfinite(arr)):
                raise ValueError("VectorField components must be finite")
            comps.append(_frozen(arr))
        object.__setattr__(self, "components", tuple(comps))

    @classmethod
    def constant(cls, grid: TorusGrid, vec) -> "VectorField":
        vec = np.atleast_1d(np.asarray(vec, dtype=float))
        return cls(grid, tuple(np.full(grid.shape, v) for v in vec))

    def max_norm(self) -> float:
        """Largest Euclidean norm over the grid."""
        sq = sum(c**2 for c in self.components)
        return float(np.sqrt(np.max(sq)))


# ---------------------------------------------------------------------------
# stencil applications (array based, periodic via np.roll)
# ---------------------------------------------------------------------------


def _centered(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2 * h)


def _forward(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (np.roll(values, -1, axis=axis) - values) / h


def _backward(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (values - np.roll(values, 1, axis=axis)) / h


def gradient(f: ScalarField, scheme: str = "centered", direction: VectorField | None = None) -> VectorField:
    """Periodic finite-difference gradient.

    ``scheme="centered"`` is second order.  ``scheme="upwind"`` sign-splits on
    the ``direction`` drift per component (backward difference where the drift
    is nonnegative, forward otherwise) and is first order.
    """
    g = f.grid
    h = g.spacing
    if scheme == "centered":
        comps = tuple(_centered(f.values, k, h) for k in range(g.dim))
    elif scheme == "upwind":
        if direction is None:
            raise ValueError("upwind gradient requires a direction VectorField")
        if direction.grid.shape != g.shape:
            raise ValueError("direction field shape does not match the grid")
        comps = []
        for k in range(g.dim):
            b = direction.components[k]
            comps.append(np.where(b >= 0.0, _backward(f.values, k, h), _forward(f.values, k, h)))
        comps = tuple(comps)
    else:
        raise ValueError(f"unknown gradient scheme {scheme!r}")
    return VectorField(g, comps)


def laplacian(f: ScalarField) -> ScalarField:
    """Standard (2 dim + 1)-point periodic Laplacian, second order."""
    g = f.grid
    h2 = g.spacing**2
    out = np.zeros(g.shape)
    for k in range(g.dim):
        out += (np.roll(f.values, -1, axis=k) - 2 * f.values + np.roll(f.values, 1, axis=k)) / h2
    return ScalarField(g, out)


def divergence(V: VectorField, scheme: str = "centered") -> ScalarField:
    """Periodic discrete divergence of a vector field (centered, second order).

    For the conservative upwind form used by the transport solvers, which needs
    the drift and the density separately, see :func:`upwind_divergence`.
    """
    if scheme != "centered":
        raise ValueError(
            "divergence supports scheme='centered'; the upwind-adjoint form is "
            "upwind_divergence(drift, density)"
        )
    g = V.grid
    h = g.spacing
    out = np.zeros(g.shape)
    for k in range(g.dim):
        out += _centered(V.components[k], k, h)
    return ScalarField(g, out)


def advect(drift: VectorField, f: ScalarField) -> ScalarField:
    """Upwind advection ``b . grad f`` with sign-split stencils, first order."""
    g = f.grid
    h = g.spacing
    out = np.zeros(g.shape)
    for k in range(g.dim):
        b = drift.components[k]
        bp = np.maximum(b, 0.0)
        bm = np.minimum(b, 0.0)
        out += bp * _backward(f.values, k, h) + bm * _forward(f.values, k, h)
    return ScalarField(g, out)


def advect_transpose(drift: VectorField, m: ScalarField) -> ScalarField:
    """Exact matrix transpose of :func:`advect` in its field argument.

    ``-advect_transpose(b, m)`` is a conservative upwind discretization of
    ``div(b m)``; its grid sum vanishes identically because ``advect`` kills
    constants.
    """
    g = m.grid
    h = g.spacing
    out = np.zeros(g.shape)
    for k in range(g.dim):
        b = drift.components[k]
        bp = np.maximum(b, 0.0)
        bm = np.minimum(b, 0.0)
        # transpose of  bp*(f_i - f_{i-1})/h + bm*(f_{i+1} - f_i)/h
        out += (bp - bm) * m.values / h
        out -= np.roll(bp * m.values, -1, axis=k) / h
        out += np.roll(bm * m.values, 1, axis=k) / h
    return ScalarField(g, out)


def upwind_divergence(drift: VectorField, m: ScalarField) -> ScalarField:
    """Conservative discretization of ``div(drift * m)`` dual to upwind advection."""
    return ScalarField(m.grid, -advect_transpose(drift, m).values)


def integrate(f: ScalarField) -> float:
    """Torus integral: ``h^dim`` times the grid sum (pairwise reduction).

    Exact for trigonometric polynomials below the Nyquist degree.
    """
    return float(f.grid.cell_volume * np.sum(f.values))


# ---------------------------------------------------------------------------
# sparse operator assembly (shared by the implicit solvers)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _shift_matrix(n: int, offset: int) -> sp.csr_matrix:
    """Periodic shift S with (S f)_i = f_{i+offset} on n nodes."""
    idx = (np.arange(n) + offset) % n
    return sp.csr_matrix((np.ones(n), (np.arange(n), idx)), shape=(n, n))


def _axis_operator(grid: TorusGrid, op1d: sp.spmatrix, axis: int) -> sp.csr_matrix:
    """Lift a one-dimensional circulant to the tensor grid along ``axis``."""
    n = grid.points_per_axis
    eye = sp.identity(n, format="csr")
    if grid.dim == 1:
        return sp.csr_matrix(op1d)
    mats = [eye, eye]
    mats[axis] = op1d
    return sp.csr_matrix(sp.kron(mats[0], mats[1], format="csr"))


def shift_operator(grid: TorusGrid, axis: int, offset: int) -> sp.csr_matrix:
    return _axis_operator(grid, _shift_matrix(grid.points_per_axis, offset), axis)


def laplacian_operator(grid: TorusGrid) -> sp.csr_matrix:
    """Sparse matrix of :func:`laplacian` acting on raveled (C-order) fields."""
    n = grid.points_per_axis
    h2 = grid.spacing**2
    one_d = (_shift_matrix(n, 1) - 2 * sp.identity(n, format="csr") + _shift_matrix(n, -1)) / h2
    out = None
    for k in range(grid.dim):
        term = _axis_operator(grid, one_d, k)
        out = term if out is None else out + term
    return sp.csr_matrix(out)


def centered_diff_operator(grid: TorusGrid, axis: int) -> sp.csr_matrix:
    """Sparse matrix of the centered first difference along ``axis``."""
    n = grid.points_per_axis
    one_d = (_shift_matrix(n, 1) - _shift_matrix(n, -1)) / (2 * grid.spacing)
    return _axis_operator(grid, one_d, axis)


def advection_operator(grid: TorusGrid, drift: VectorField) -> sp.csr_matrix:
    """Sparse matrix of sign-split upwind advection for a frozen drift."""
    h = grid.spacing
    out = None
    for k in range(grid.dim):
        b = drift.components[k].ravel()
        bp = sp.diags(np.maximum(b, 0.0))
        bm = sp.diags(np.minimum(b, 0.0))
        back = (sp.identity(grid.size, format="csr") - shift_operator(grid, k, -1)) / h
        fwd = (shift_operator(grid, k, 1) - sp.identity(grid.size, format="csr")) / h
        term = bp @ back + bm @ fwd
        out = term if out is None else out + term
    return sp.csr_matrix(out)
