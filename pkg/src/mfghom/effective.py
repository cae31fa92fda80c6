"""Effective Hamiltonian and drift tables over (momentum, density) grids.

One cell solve per table node: the decoupled path for nonlocal (or absent)
couplings, where the source is the constant F evaluated at a uniform density,
and the coupled fixed point for local couplings.  The stored drift is the
mu-weighted cell average of the scheme-consistent D_p H, which for decoupled
solves coincides with the p-derivative of the ergodic constant to solver
tolerance.

Tables persist to ``.mfgtab`` containers keyed by a content hash of the model
description, grids and tolerances, so a cache hit can never be stale.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cell import CellSolution, solve_cell, solve_cell_coupled
from .errors import GridTooCoarse, OutOfRange
from .io import read_container, write_container
from .models import HamiltonianModel, LocalCoupling, NonlocalCoupling
from .torus import ScalarField, TorusGrid, integrate

__all__ = [
    "EffectiveTable",
    "effective_drift",
    "build_table",
    "mfg_type_defect",
    "separability_defect",
    "interpolate",
    "save_table",
    "load_table",
]

CONVEXITY_SLACK = 1e-8
SEPARABILITY_TOL = 1e-8


def effective_drift(cs: CellSolution, H: Optional[HamiltonianModel] = None) -> np.ndarray:
    """Effective drift: mu-weighted cell average of D_p H at the corrector.

    The integrand is the p-gradient of the discrete Hamiltonian attached to
    the solution, so the average equals the p-derivative of the ergodic
    constant for decoupled solves.  ``H`` is accepted for signature symmetry
    but the solution already carries its model.
    """
    grid = cs.v.grid
    out = np.empty(grid.dim)
    for k, comp in enumerate(cs.drift_integrand()):
        out[k] = integrate(ScalarField(grid, comp * cs.mu.values))
    return out


@dataclass(frozen=True)
class EffectiveTable:
    """H_bar and b_bar sampled on a tensor (p, m) grid.

    ``p_grid`` holds one sorted momentum array per space axis; ``m_grid`` the
    sorted density parameters (a singleton for nonlocal couplings, whose m- and
    x-dependence is the exact additive split h(p) - F(x, m)).  ``h_bar`` has
    shape ``(*p_shape, M)`` and ``b_bar`` adds a trailing axis of length dim.
    """

    p_grid: tuple
    m_grid: np.ndarray
    h_bar: np.ndarray = field(repr=False)
    b_bar: np.ndarray = field(repr=False)
    model_hash: str
    coupling_kind: str
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        p_grid = tuple(np.asarray(g, dtype=float) for g in self.p_grid)
        object.__setattr__(self, "p_grid", p_grid)
        object.__setattr__(self, "m_grid", np.asarray(self.m_grid, dtype=float))
        object.__setattr__(self, "h_bar", np.asarray(self.h_bar, dtype=float))
        object.__setattr__(self, "b_bar", np.asarray(self.b_bar, dtype=float))
        expect = tuple(len(g) for g in p_grid) + (len(self.m_grid),)
        if self.h_bar.shape != expect:
            raise ValueError(f"h_bar shape {self.h_bar.shape} != grids {expect}")
        if self.b_bar.shape != expect + (len(p_grid),):
            raise ValueError("b_bar shape inconsistent with grids")
        if not (np.all(np.isfinite(self.h_bar)) and np.all(np.isfinite(self.b_bar))):
            raise ValueError("table entries must be finite")
        for g in p_grid + (self.m_grid,):
            if np.any(np.diff(g) <= 0):
                raise ValueError("grids must be strictly increasing")

    @property
    def dim(self) -> int:
        return len(self.p_grid)

    def check_invariants(self) -> dict:
        """Midpoint convexity along p lines and the nonlocal additive split."""
        report = {}
        worst = 0.0
        for axis in range(self.dim):
            h = np.moveaxis(self.h_bar, axis, 0)
            if h.shape[0] >= 3:
                gap = h[1:-1] - 0.5 * (h[:-2] + h[2:])
                worst = max(worst, float(np.max(gap)))
        report["midpoint_convexity_gap"] = worst
        report["midpoint_convexity_ok"] = worst <= CONVEXITY_SLACK
        if self.coupling_kind == "nonlocal" and len(self.m_grid) >= 2:
            cols = self.h_bar.reshape(-1, len(self.m_grid))
            diff = cols[:, :, None] - cols[:, None, :]
            spread = float(np.max(diff.max(axis=0) - diff.min(axis=0)))
            report["nonlocal_split_defect"] = spread
            report["nonlocal_split_ok"] = spread <= SEPARABILITY_TOL
        return report

    def p_lipschitz(self) -> float:
        """Bound on |D_p h_bar| from table finite differences."""
        worst = 0.0
        for axis in range(self.dim):
            g = self.p_grid[axis]
            h = np.moveaxis(self.h_bar, axis, 0)
            d = np.abs(np.diff(h, axis=0)) / np.diff(g).reshape((-1,) + (1,) * (h.ndim - 1))
            worst = max(worst, float(np.max(d)))
        return worst

    def hull(self) -> dict:
        return {
            "p": [(float(g[0]), float(g[-1])) for g in self.p_grid],
            "m": (float(self.m_grid[0]), float(self.m_grid[-1])),
        }


def _model_hash(H, F, p_grid, m_grid, cell_points: int, tolerances: dict) -> str:
    desc = {
        "hamiltonian": H.describe(),
        "coupling": None if F is None else F.describe(),
        "p_grid": [list(map(float, g)) for g in p_grid],
        "m_grid": list(map(float, m_grid)),
        "cell_points": cell_points,
        "tolerances": tolerances,
    }
    blob = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _solve_node(args):
    H, F, p, m, dim, cell_points, relaxation = args
    grid = TorusGrid(dim, 1, cell_points)
    if F is None or F.kind == "nonlocal":
        const = 0.0 if F is None else F.value_at_constant(m)
        cs = solve_cell(H, p, ScalarField.constant(grid, const),
                        coupling="none" if F is None else "nonlocal")
    else:
        cs = solve_cell_coupled(H, F, p, m_param=m, grid=grid, relaxation=relaxation)
    return cs.h_bar, effective_drift(cs), cs.residuals["hj"], cs.residuals["fp"]


def build_table(
    H: HamiltonianModel,
    F,
    p_grid,
    m_grid,
    cell_points: int = 64,
    workers: int = 1,
    cache_dir=None,
    relaxation: float = 0.5,
) -> EffectiveTable:
    """One cell solve per (p, m) node; deterministic in the worker count.

    Results land in preallocated slots indexed by node, so scheduling cannot
    reorder arithmetic.  With ``cache_dir`` set, a table whose content hash
    matches on disk is loaded instead of rebuilt.
    """
    if isinstance(p_grid, (list, tuple)) and len(p_grid) and np.ndim(p_grid[0]) > 0:
        p_axes = tuple(np.asarray(g, dtype=float) for g in p_grid)
    else:
        p_axes = (np.asarray(p_grid, dtype=float),)
    m_grid = np.atleast_1d(np.asarray(m_grid, dtype=float))
    dim = len(p_axes)
    if any(len(g) == 0 for g in p_axes) or len(m_grid) == 0:
        raise ValueError("grids must be nonempty")

    tolerances = {"fixed_point": 1e-9, "newton": 1e-10, "relaxation": relaxation}
    mhash = _model_hash(H, F, p_axes, m_grid, cell_points, tolerances)
    coupling_kind = "none" if F is None else F.kind

    if cache_dir is not None:
        cached = Path(cache_dir) / f"{mhash}.mfgtab"
        if cached.exists():
            table = load_table(cached)
            if table.model_hash == mhash:
                return table

    p_shape = tuple(len(g) for g in p_axes)
    h_bar = np.empty(p_shape + (len(m_grid),))
    b_bar = np.empty(p_shape + (len(m_grid), dim))

    nodes = []
    for p_idx in np.ndindex(*p_shape):
        p = [p_axes[a][p_idx[a]] for a in range(dim)]
        for j, m in enumerate(m_grid):
            nodes.append((p_idx + (j,), (H, F, p, float(m), dim, cell_points, relaxation)))

    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_solve_node, [args for _, args in nodes]))
    else:
        results = [_solve_node(args) for _, args in nodes]

    for (slot, _), (hb, bb, hj, fp) in zip(nodes, results):
        h_bar[slot] = hb
        b_bar[slot] = bb

    table = EffectiveTable(
        p_grid=p_axes,
        m_grid=m_grid,
        h_bar=h_bar,
        b_bar=b_bar,
        model_hash=mhash,
        coupling_kind=coupling_kind,
        meta={
            "hamiltonian": H.describe(),
            "coupling": None if F is None else F.describe(),
            "cell_points": cell_points,
            "tolerances": tolerances,
        },
    )
    if cache_dir is not None:
        save_table(Path(cache_dir) / f"{mhash}.mfgtab", table)
    return table


def mfg_type_defect(table: EffectiveTable) -> np.ndarray:
    """Nodewise gap between the stored drift and central differences of h_bar.

    Returns an array shaped like ``h_bar`` with NaN on the p-boundary (central
    differences need interior nodes); requires at least three p nodes per axis.
    """
    if any(len(g) < 3 for g in table.p_grid):
        raise GridTooCoarse("mfg-type defect needs >= 3 momentum nodes per axis")
    shape = table.h_bar.shape
    gap = np.zeros(shape)
    for axis in range(table.dim):
        g = table.p_grid[axis]
        h = np.moveaxis(table.h_bar, axis, 0)
        b = np.moveaxis(table.b_bar[..., axis], axis, 0)
        dp = (h[2:] - h[:-2]) / (g[2:] - g[:-2]).reshape((-1,) + (1,) * (h.ndim - 1))
        diff = np.full(h.shape, np.nan)
        diff[1:-1] = np.abs(b[1:-1] - dp)
        gap = np.fmax(gap, np.moveaxis(diff, 0, axis))
    interior = tuple(slice(1, -1) for _ in range(table.dim)) + (slice(None),)
    defect = np.full(shape, np.nan)
    defect[interior] = gap[interior]
    return defect


def separability_defect(table: EffectiveTable) -> float:
    """Largest rectangle defect |h(p,m) - h(p,m0) - h(p0,m) + h(p0,m0)|."""
    if len(table.m_grid) < 2 or any(len(g) < 2 for g in table.p_grid):
        raise GridTooCoarse("separability defect needs >= 2 nodes per grid")
    cols = table.h_bar.reshape(-1, len(table.m_grid))
    diff = cols[:, :, None] - cols[:, None, :]
    return float(np.max(diff.max(axis=0) - diff.min(axis=0)))


def _locate(grid: np.ndarray, x: float, name: str) -> tuple:
    if x < grid[0] or x > grid[-1]:
        raise OutOfRange(name, x, grid[0], grid[-1])
    i = int(np.searchsorted(grid, x, side="right") - 1)
    i = min(max(i, 0), len(grid) - 2) if len(grid) > 1 else 0
    if len(grid) == 1:
        return 0, 0.0
    t = (x - grid[i]) / (grid[i + 1] - grid[i])
    return i, float(t)


def interpolate(table: EffectiveTable, p, m: float):
    """Multilinear interpolation of (h_bar, b_bar); exact on table nodes."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if p.size != table.dim:
        raise ValueError(f"momentum needs {table.dim} components")
    locs = [_locate(table.p_grid[a], float(p[a]), f"p[{a}]") for a in range(table.dim)]
    locs.append(_locate(table.m_grid, float(m), "m"))

    h_val = 0.0
    b_val = np.zeros(table.dim)
    for corner in np.ndindex(*([2] * (table.dim + 1))):
        weight = 1.0
        idx = []
        for (i, t), c in zip(locs, corner):
            weight *= t if c else (1.0 - t)
            idx.append(i + c)
        if weight == 0.0:
            continue  # also skips out-of-bounds corners of singleton grids
        idx = tuple(idx)
        h_val += weight * table.h_bar[idx]
        b_val += weight * table.b_bar[idx]
    return float(h_val), b_val


def interpolate_fields(table: EffectiveTable, q_components, m_values):
    """Vectorized multilinear interpolation over arrays of query points.

    ``q_components`` holds ``dim`` arrays of momenta, ``m_values`` matching
    density arguments; returns ``(h_bar, [b_bar components])``.  Out-of-hull
    queries raise :class:`OutOfRange` naming the worst offender.
    """
    qs = [np.asarray(q, dtype=float).ravel() for q in q_components]
    ms = np.asarray(m_values, dtype=float).ravel()
    shape = np.asarray(q_components[0]).shape
    axes = list(table.p_grid) + [table.m_grid]
    queries = qs + [ms]

    idxs, ts = [], []
    for axis_vals, q, name in zip(axes, queries, [f"p[{a}]" for a in range(table.dim)] + ["m"]):
        lo, hi = axis_vals[0], axis_vals[-1]
        bad_lo = q.min() if len(q) else lo
        bad_hi = q.max() if len(q) else hi
        if bad_lo < lo:
            raise OutOfRange(name, float(bad_lo), float(lo), float(hi))
        if bad_hi > hi:
            raise OutOfRange(name, float(bad_hi), float(lo), float(hi))
        if len(axis_vals) == 1:
            idxs.append(np.zeros(len(q), dtype=int))
            ts.append(np.zeros(len(q)))
            continue
        i = np.clip(np.searchsorted(axis_vals, q, side="right") - 1, 0, len(axis_vals) - 2)
        idxs.append(i)
        ts.append((q - axis_vals[i]) / (axis_vals[i + 1] - axis_vals[i]))

    n = len(qs[0])
    h_out = np.zeros(n)
    b_out = np.zeros((table.dim, n))
    for corner in np.ndindex(*([2] * (table.dim + 1))):
        weight = np.ones(n)
        idx = []
        for axis_i, c in enumerate(corner):
            t = ts[axis_i]
            weight = weight * (t if c else (1.0 - t))
            # clamp: singleton-axis upper corners carry zero weight anyway
            idx.append(np.minimum(idxs[axis_i] + c, len(axes[axis_i]) - 1))
        sel = tuple(idx)
        h_out += weight * table.h_bar[sel]
        for k in range(table.dim):
            b_out[k] += weight * table.b_bar[sel + (k,)]
    return h_out.reshape(shape), [b.reshape(shape) for b in b_out]


def save_table(path, table: EffectiveTable) -> None:
    header = {
        "format": "mfgtab",
        "version": 1,
        "model_hash": table.model_hash,
        "coupling_kind": table.coupling_kind,
        "p_grid": [list(map(float, g)) for g in table.p_grid],
        "m_grid": list(map(float, table.m_grid)),
        "meta": table.meta,
    }
    write_container(path, header, {"h_bar": table.h_bar, "b_bar": table.b_bar})


def load_table(path) -> EffectiveTable:
    header, arrays = read_container(path)
    if header.get("format") != "mfgtab":
        raise ValueError(f"{path} is not an effective-table container")
    return EffectiveTable(
        p_grid=tuple(np.asarray(g) for g in header["p_grid"]),
        m_grid=np.asarray(header["m_grid"]),
        h_bar=arrays["h_bar"],
        b_bar=arrays["b_bar"],
        model_hash=header["model_hash"],
        coupling_kind=header["coupling_kind"],
        meta=header.get("meta", {}),
    )
