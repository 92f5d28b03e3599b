"""Tensor grids, field storage, discrete calculus, and weighted Sobolev norms.

Everything downstream (solvers, gradients, certificates) lives on a truncated
tensor-product grid of cell centers in dimension 1 or 2.  Quadrature is the
midpoint rule on cell centers throughout, so that the finite-volume state and
every integral functional share one discretization.

The weighted norms come in two families: for integer k >= 0 the weight is
``1 + |x|^k`` (with the convention that k = 0 means weight 1, the plain
Sobolev norm), and for k < 0 the weight is ``(1 + |x|)^k``, the polynomially
decaying scale used for adjoint states with quadratically growing data.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .errors import InvalidGrid, UnknownPreset, UnsupportedOrder, ZeroMass

__all__ = [
    "GridSpec",
    "TimeGrid",
    "ScalarField",
    "MomentState",
    "make_grid",
    "make_timegrid",
    "sample_function",
    "partial_derivative",
    "integrate",
    "weighted_sobolev_norm",
    "moments",
    "interpolate",
    "interpolate_flagged",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell-centered tensor grid on a box, d in {1, 2}.

    Cell centers sit at ``lo + (i + 1/2) h`` per axis; ``values`` arrays are
    row-major over axes (C order).
    """

    dim: int
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    n: tuple[int, ...]

    @property
    def h(self) -> tuple[float, ...]:
        return tuple((b - a) / m for a, b, m in zip(self.lo, self.hi, self.n))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def centers(self, axis: int) -> np.ndarray:
        """1D array of cell-center coordinates along one axis."""
        a, m = self.lo[axis], self.n[axis]
        h = self.h[axis]
        return a + (np.arange(m) + 0.5) * h

    def meshgrid(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays of shape ``self.shape``, one per axis."""
        return np.meshgrid(*(self.centers(ax) for ax in range(self.dim)), indexing="ij")

    def cell_centers(self) -> np.ndarray:
        """All cell centers as an (num_cells, dim) array, row-major."""
        mesh = self.meshgrid()
        return np.column_stack([m.ravel() for m in mesh])

    def radius(self) -> np.ndarray:
        """|x| at every cell center, shaped like a field."""
        mesh = self.meshgrid()
        return np.sqrt(sum(m * m for m in mesh))


def make_grid(dim, lo, hi, n) -> GridSpec:
    """Build a GridSpec, accepting scalars or per-axis sequences.

    Raises InvalidGrid unless bounds are finite with hi > lo and n >= 8
    per axis.
    """
    if dim not in (1, 2):
        raise InvalidGrid(f"dim must be 1 or 2, got {dim}")
    lo_t = tuple(float(v) for v in np.atleast_1d(lo))
    hi_t = tuple(float(v) for v in np.atleast_1d(hi))
    n_t = tuple(int(v) for v in np.atleast_1d(n))
    if len(lo_t) == 1 and dim == 2:
        lo_t = lo_t * 2
    if len(hi_t) == 1 and dim == 2:
        hi_t = hi_t * 2
    if len(n_t) == 1 and dim == 2:
        n_t = n_t * 2
    if not (len(lo_t) == len(hi_t) == len(n_t) == dim):
        raise InvalidGrid("lo, hi, n must have one entry per axis")
    for a, b, m in zip(lo_t, hi_t, n_t):
        if not (math.isfinite(a) and math.isfinite(b)):
            raise InvalidGrid("grid bounds must be finite")
        if not b > a:
            raise InvalidGrid(f"hi must exceed lo, got [{a}, {b}]")
        if m < 8:
            raise InvalidGrid(f"need at least 8 cells per axis, got {m}")
    return GridSpec(dim=dim, lo=lo_t, hi=hi_t, n=n_t)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on [0, T] with nt steps (nt + 1 nodes)."""

    T: float
    nt: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise InvalidGrid(f"final time must be positive, got {self.T}")
        if self.nt < 2:
            raise InvalidGrid(f"need at least 2 time steps, got {self.nt}")

    @property
    def dt(self) -> float:
        return self.T / self.nt

    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)


def make_timegrid(T: float, nt: int) -> TimeGrid:
    return TimeGrid(T=float(T), nt=int(nt))


@dataclass
class ScalarField:
    """Cell values on a grid; holds densities, adjoints, and potentials."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise InvalidGrid(
                f"field shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidGrid("field values must be finite")

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())


@dataclass(frozen=True)
class MomentState:
    """Mass, mean, and per-axis second central moment of a field."""

    mass: float
    mean: tuple[float, ...]
    variance: tuple[float, ...]


def _gaussian_values(grid: GridSpec, x0, v0: float) -> np.ndarray:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.size == 1 and grid.dim == 2:
        x0 = np.repeat(x0, 2)
    if v0 <= 0:
        raise UnknownPreset(f"gaussian preset needs v0 > 0, got {v0}")
    mesh = grid.meshgrid()
    sq = sum((m - c) ** 2 for m, c in zip(mesh, x0))
    return (2.0 * np.pi * v0) ** (-grid.dim / 2.0) * np.exp(-sq / (2.0 * v0))


def sample_function(grid: GridSpec, preset: str, params: dict | None = None) -> ScalarField:
    """Evaluate a named preset at the cell centers.

    Presets: ``gaussian(x0, v0)`` (normalized density), ``bimodal-gaussian``
    (equal-weight mixture unless ``wa``/``wb`` given), ``constant(c)``,
    ``zero``.
    """
    params = dict(params or {})
    if preset == "zero":
        vals = np.zeros(grid.shape)
    elif preset == "constant":
        vals = np.full(grid.shape, float(params.get("c", 1.0)))
    elif preset == "gaussian":
        vals = _gaussian_values(grid, params.get("x0", 0.0), float(params.get("v0", 1.0)))
    elif preset == "bimodal-gaussian":
        wa = float(params.get("wa", 0.5))
        wb = float(params.get("wb", 0.5))
        vals = wa * _gaussian_values(
            grid, params.get("x0a", -2.0), float(params.get("v0a", 0.5))
        ) + wb * _gaussian_values(grid, params.get("x0b", 2.0), float(params.get("v0b", 0.5)))
    else:
        raise UnknownPreset(f"unknown field preset {preset!r}")
    return ScalarField(grid, vals)


def partial_derivative(field: ScalarField, axis: int) -> ScalarField:
    """Second-order difference along one axis.

    Central in the interior, one-sided three-point at the two boundary
    layers; both stencils are exact on quadratics.
    """
    v = field.values
    h = field.grid.h[axis]
    d = np.empty_like(v)
    vm = np.moveaxis(v, axis, 0)
    dm = np.moveaxis(d, axis, 0)
    dm[1:-1] = (vm[2:] - vm[:-2]) / (2.0 * h)
    dm[0] = (-3.0 * vm[0] + 4.0 * vm[1] - vm[2]) / (2.0 * h)
    dm[-1] = (3.0 * vm[-1] - 4.0 * vm[-2] + vm[-3]) / (2.0 * h)
    return ScalarField(field.grid, d)


def integrate(field: ScalarField) -> float:
    """Midpoint quadrature: sum of cell values times the cell volume."""
    return float(field.values.sum() * field.grid.cell_volume)


def _weight_values(grid: GridSpec, k: int) -> np.ndarray:
    r = grid.radius()
    if k == 0:
        return np.ones(grid.shape)
    if k > 0:
        return 1.0 + r**k
    return (1.0 + r) ** float(k)


def _derivative_multiindices(dim: int, m: int) -> list[tuple[int, ...]]:
    # derivative orders per axis, all |alpha| <= m
    out = []
    if dim == 1:
        for a in range(m + 1):
            out.append((a,))
    else:
        for a in range(m + 1):
            for b in range(m + 1 - a):
                out.append((a, b))
    return out


def _apply_derivative(field: ScalarField, alpha: tuple[int, ...]) -> ScalarField:
    out = field
    for axis, order in enumerate(alpha):
        for _ in range(order):
            out = partial_derivative(out, axis)
    return out


def weighted_sobolev_norm(field: ScalarField, m: int, k: int) -> float:
    """Discrete H^m_k norm: sum over |alpha| <= m of the weighted L2 norms
    of the difference-quotient derivatives.
    """
    if m < 0 or m > 2:
        raise UnsupportedOrder(f"supported derivative orders are 0..2, got {m}")
    w = _weight_values(field.grid, int(k))
    vol = field.grid.cell_volume
    total = 0.0
    for alpha in _derivative_multiindices(field.grid.dim, m):
        df = _apply_derivative(field, alpha)
        total += math.sqrt(float(((w * df.values) ** 2).sum() * vol))
    return total


def moments(field: ScalarField) -> MomentState:
    """Mass, mean, and per-axis variance by midpoint quadrature.

    Raises ZeroMass when the field mass is not positive.
    """
    vol = field.grid.cell_volume
    mass = float(field.values.sum() * vol)
    if mass <= 0.0:
        raise ZeroMass(f"cannot normalize moments, mass = {mass}")
    mesh = field.grid.meshgrid()
    mean = []
    var = []
    for x in mesh:
        mr = float((x * field.values).sum() * vol) / mass
        vr = float((((x - mr) ** 2) * field.values).sum() * vol) / mass
        mean.append(mr)
        var.append(vr)
    return MomentState(mass=mass, mean=tuple(mean), variance=tuple(var))


def _axis_stencil(grid: GridSpec, axis: int, coords: np.ndarray):
    """Per-axis interpolation stencil: (indices (N,4), weights (N,4)).

    Cubic Lagrange on the four surrounding centers in the interior, linear
    within one cell of the boundary; query coordinates are clamped to the
    span of the cell centers.
    """
    n = grid.n[axis]
    h = grid.h[axis]
    c0 = grid.lo[axis] + 0.5 * h
    s = np.clip((coords - c0) / h, 0.0, float(n - 1))
    i = np.minimum(s.astype(int), n - 2)
    t = s - i
    idx = np.empty((coords.size, 4), dtype=int)
    wts = np.zeros((coords.size, 4))
    interior = (i >= 1) & (i <= n - 3)
    # cubic weights at offset t for nodes (-1, 0, 1, 2) around cell i
    ti = t[interior]
    idx[interior, 0] = i[interior] - 1
    idx[interior, 1] = i[interior]
    idx[interior, 2] = i[interior] + 1
    idx[interior, 3] = i[interior] + 2
    wts[interior, 0] = -ti * (ti - 1.0) * (ti - 2.0) / 6.0
    wts[interior, 1] = (ti * ti - 1.0) * (ti - 2.0) / 2.0
    wts[interior, 2] = -ti * (ti + 1.0) * (ti - 2.0) / 2.0
    wts[interior, 3] = ti * (ti * ti - 1.0) / 6.0
    edge = ~interior
    te = t[edge]
    ie = i[edge]
    idx[edge, 0] = ie
    idx[edge, 1] = ie + 1
    idx[edge, 2] = ie
    idx[edge, 3] = ie + 1
    wts[edge, 0] = 1.0 - te
    wts[edge, 1] = te
    return idx, wts


def interpolate_flagged(field: ScalarField, points: np.ndarray, clip: bool = False):
    """Interpolate at arbitrary points; also report which points fell
    outside the domain box (their value is the boundary-clamped one).

    With ``clip=True`` the result is limited to the range of the gathered
    stencil values, which suppresses cubic overshoot near extrema.
    """
    grid = field.grid
    pts = np.asarray(points, dtype=float)
    if grid.dim == 1 and pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[1] != grid.dim:
        raise InvalidGrid(f"points must be (N, {grid.dim})")
    out_mask = np.zeros(pts.shape[0], dtype=bool)
    for ax in range(grid.dim):
        out_mask |= (pts[:, ax] < grid.lo[ax]) | (pts[:, ax] > grid.hi[ax])
    stencils = [_axis_stencil(grid, ax, pts[:, ax]) for ax in range(grid.dim)]
    v = field.values
    if grid.dim == 1:
        idx, wts = stencils[0]
        gathered = v[idx]
        vals = (wts * gathered).sum(axis=1)
    else:
        ix, wx = stencils[0]
        iy, wy = stencils[1]
        gathered = v[ix[:, :, None], iy[:, None, :]]
        vals = (wx[:, :, None] * wy[:, None, :] * gathered).sum(axis=(1, 2))
        gathered = gathered.reshape(pts.shape[0], -1)
    if clip:
        vals = np.clip(vals, gathered.min(axis=1), gathered.max(axis=1))
    return vals, out_mask


def interpolate(field: ScalarField, points: np.ndarray, clip: bool = False) -> np.ndarray:
    """Piecewise-cubic tensor interpolation (see interpolate_flagged)."""
    return interpolate_flagged(field, points, clip=clip)[0]
