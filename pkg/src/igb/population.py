"""Population-limit diagnostics: the corner measure of random trees, ANOVA
projections, lattice rectangle families for critical-point and uniform-law
checks, and the linear operator the uniform-selection sampler induces.

Everything here assumes covariates uniform on the unit cube, which makes the
ANOVA truncation an exact orthogonal projection and lets the linear operator
be assembled in the grid-cell indicator basis from leaf volumes alone.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .domain import (
    EmpiricalDistribution,
    Region,
    TreeParams,
    as_predictor,
    scheme_leaf_boxes,
    write_csv,
)
from .errors import ConfigError, DataError
from .losses import loss_grad, loss_hess
from .trees import derive_rng, sample_base_schemes

LATTICE_DENOM = 16

# Schemes per accumulation slab when assembling the cell-basis operator.
# A code constant: the reduction order must not depend on environment.
_SCHEME_CHUNK = 64


def lattice_points(dim: int, resolution: int) -> np.ndarray:
    """Cell centers of the regular grid, shape (resolution^dim, dim).

    Row-major order: the last coordinate varies fastest, matching a reshape
    of a (resolution,)*dim value array.
    """
    centers = (np.arange(resolution) + 0.5) / resolution
    mesh = np.meshgrid(*([centers] * dim), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


@dataclass
class GridFunction:
    """Function on [0,1]^p represented by its values at grid-cell centers.

    values has shape (resolution,)*dim.  Norms and inner products are taken
    against the uniform measure, so they are plain means over cells.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim < 1:
            raise ConfigError("grid function needs at least one axis")
        q = self.values.shape[0]
        if any(s != q for s in self.values.shape):
            raise ConfigError(f"grid must be square, got shape {self.values.shape}")

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_callable(cls, f, dim: int, resolution: int) -> "GridFunction":
        pts = lattice_points(dim, resolution)
        vals = as_predictor(f, dim)(pts)
        return cls(np.asarray(vals, dtype=np.float64).reshape((resolution,) * dim))

    def points(self) -> np.ndarray:
        return lattice_points(self.dim, self.resolution)

    def inner(self, other: "GridFunction") -> float:
        self._check_same(other)
        return float(np.mean(self.values * other.values))

    def l2_norm(self) -> float:
        return float(np.sqrt(np.mean(self.values ** 2)))

    def l2_distance(self, other: "GridFunction") -> float:
        self._check_same(other)
        return float(np.sqrt(np.mean((self.values - other.values) ** 2)))

    def sup_distance(self, other: "GridFunction") -> float:
        self._check_same(other)
        return float(np.max(np.abs(self.values - other.values)))

    def _check_same(self, other: "GridFunction") -> None:
        if self.values.shape != other.values.shape:
            raise ConfigError(f"grid shapes differ: {self.values.shape} vs {other.values.shape}")

    def to_csv(self, path) -> None:
        cols = [f"x{k + 1}" for k in range(self.dim)] + ["value"]
        write_csv(path, cols, np.column_stack([self.points(), self.values.reshape(-1)]))


def anova_projection(target: GridFunction, order: int) -> GridFunction:
    """Truncation of the ANOVA decomposition to interactions of at most
    `order` coordinates.

    For the uniform product measure this is the orthogonal projection onto
    functions that are sums of at-most-`order`-variate terms.  Each
    interaction effect is built by inclusion-exclusion over iterated axis
    averages, so order >= dim returns the function unchanged.
    """
    if order < 0:
        raise ConfigError(f"projection order must be >= 0, got {order}")
    p = target.dim
    if order >= p:
        return GridFunction(target.values.copy())
    v = target.values
    means = {}
    for size in range(order + 1):
        for kept in itertools.combinations(range(p), size):
            dropped = tuple(j for j in range(p) if j not in kept)
            means[kept] = v.mean(axis=dropped, keepdims=True)
    out = np.zeros_like(v)
    for size in range(order + 1):
        for J in itertools.combinations(range(p), size):
            for r in range(size + 1):
                for I in itertools.combinations(J, r):
                    out += (-1.0) ** (size - r) * means[I]
    return GridFunction(out)


# ---------------------------------------------------------------------------
# Rectangle families on the endpoint lattice


class RectangleFamily:
    """Closed axis-aligned rectangles restricting at most max_active axes.

    Lattice mode (the default) enumerates every rectangle whose restricted
    axes carry an interval [a/denom, b/denom] with 0 <= a < b <= denom,
    excluding the full interval (the unrestricted cube is listed once, as
    the member with no active axis).  An explicit list of Region objects can
    be supplied instead for hand-built families.

    Moment queries against a sample are exact for the closed-interval
    semantics: a point on a lattice endpoint belongs to every rectangle
    whose boundary it touches.
    """

    def __init__(self, dim: int = None, max_active: int = None,
                 denom: int = LATTICE_DENOM, regions=None):
        if regions is not None:
            self._regions = list(regions)
            self.dim = self._regions[0].dim if self._regions else (dim or 0)
            self.max_active = max_active
            self.denom = None
            self._subsets = None
            return
        if dim is None or max_active is None:
            raise ConfigError("lattice family needs dim and max_active")
        if not 0 <= max_active <= dim:
            raise ConfigError(f"max_active must be in [0, {dim}], got {max_active}")
        if denom < 2:
            raise ConfigError(f"lattice denominator must be >= 2, got {denom}")
        self._regions = None
        self.dim = dim
        self.max_active = max_active
        self.denom = denom
        self._pairs = [(a, b) for a in range(denom + 1) for b in range(a + 1, denom + 1)
                       if (a, b) != (0, denom)]
        self._subsets = [J for size in range(max_active + 1)
                         for J in itertools.combinations(range(dim), size)]

    def __len__(self) -> int:
        if self._regions is not None:
            return len(self._regions)
        return sum(len(self._pairs) ** len(J) for J in self._subsets)

    def regions(self):
        """Member rectangles, in the fixed enumeration order of moments()."""
        if self._regions is not None:
            yield from self._regions
            return
        for J in self._subsets:
            for combo in itertools.product(self._pairs, repeat=len(J)):
                lower = np.zeros(self.dim)
                upper = np.ones(self.dim)
                for axis, (a, b) in zip(J, combo):
                    lower[axis] = a / self.denom
                    upper[axis] = b / self.denom
                yield Region(lower, upper)

    def moments(self, X, values) -> np.ndarray:
        """Normalized moments (1/n)·sum of values over each member, flat.

        Order matches regions().  The lattice mode aggregates the sample
        into boundary-aware bins once per active subset, so the whole family
        is answered in a few array passes.
        """
        X = np.asarray(X, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if X.ndim != 2 or values.shape != (X.shape[0],):
            raise DataError(f"incompatible shapes {X.shape} / {values.shape}")
        if self._regions is None and X.shape[1] != self.dim:
            raise DataError(f"points have dimension {X.shape[1]}, family has {self.dim}")
        n = X.shape[0]
        if self._regions is not None:
            out = np.empty(len(self._regions))
            for i, reg in enumerate(self._regions):
                out[i] = values[reg.contains(X)].sum() / n
            return out
        return np.concatenate([
            self._subset_moments(X, values, J) for J in self._subsets
        ]) / n

    def _subset_moments(self, X, values, J) -> np.ndarray:
        if len(J) == 0:
            return np.array([values.sum()])
        # Refined bins: even index 2k is the single point k/denom, odd index
        # 2k+1 the open gap (k/denom, (k+1)/denom).  denom*x is exact for a
        # power-of-two denominator, so endpoint membership is exact.
        nb = 2 * self.denom + 1
        key = None
        for axis in J:
            r = self.denom * X[:, axis]
            f = np.floor(r)
            bins = (2 * f + (r != f)).astype(np.int64)
            key = bins if key is None else key * nb + bins
        k = len(J)
        hist = np.bincount(key, weights=values, minlength=nb ** k).reshape((nb,) * k)
        cum = hist
        for ax in range(k):
            cum = np.cumsum(cum, axis=ax)
        P = np.zeros(tuple(s + 1 for s in cum.shape))
        P[(slice(1, None),) * k] = cum
        los = np.array([2 * a for a, _ in self._pairs])
        his = np.array([2 * b + 1 for _, b in self._pairs])
        total = np.zeros((len(self._pairs),) * k)
        for corner in itertools.product((0, 1), repeat=k):
            idx = [his if bit else los for bit in corner]
            sign = (-1.0) ** (k - sum(corner))
            total += sign * P[np.ix_(*idx)]
        return total.reshape(-1)


def critical_point_residual(dist: EmpiricalDistribution, kind: str, F,
                            family: RectangleFamily) -> float:
    """max over the family of |mean[dL(y, F(x)) restricted to the member]|.

    Zero for an empty family.
    """
    if len(family) == 0:
        return 0.0
    g = loss_grad(kind, dist.y, as_predictor(F, dist.p)(dist.X))
    return float(np.max(np.abs(family.moments(dist.X, g))))


def gc_sup_discrepancy(dist_n: EmpiricalDistribution, dist_ref: EmpiricalDistribution,
                       kind: str, predictors, family: RectangleFamily) -> float:
    """Largest restricted-moment gap between a sample and a reference.

    The maximum runs over the predictor set, the rectangle family, and both
    loss derivative orders.
    """
    predictors = list(predictors)
    if not predictors:
        raise ConfigError("predictor set is empty")
    if len(family) == 0:
        return 0.0
    worst = 0.0
    for F in predictors:
        zn = as_predictor(F, dist_n.p)(dist_n.X)
        zr = as_predictor(F, dist_ref.p)(dist_ref.X)
        for deriv in (loss_grad, loss_hess):
            mn = family.moments(dist_n.X, deriv(kind, dist_n.y, zn))
            mr = family.moments(dist_ref.X, deriv(kind, dist_ref.y, zr))
            worst = max(worst, float(np.max(np.abs(mn - mr))))
    return worst


# ---------------------------------------------------------------------------
# Corner measure of completely random trees


@dataclass
class CornerMeasureEstimate:
    """Normalized point cloud of leaf corners falling in [0,1)^p.

    Corners are collected leaf by leaf, so a cut point shared by adjacent
    leaves carries the multiplicity the construction gives it.
    """

    points: np.ndarray
    weights: np.ndarray
    schemes: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.points.ndim != 2 or self.weights.shape != (self.points.shape[0],):
            raise ConfigError("corner cloud shapes are inconsistent")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def atom_mass(self, x) -> float:
        """Total weight sitting exactly at the point x."""
        x = np.asarray(x, dtype=np.float64)
        return float(self.weights[np.all(self.points == x, axis=1)].sum())

    def slice_mass(self, j: int, a: float, b: float) -> float:
        """Weight of the slab a < x_j <= b."""
        xj = self.points[:, j]
        return float(self.weights[(xj > a) & (xj <= b)].sum())

    def to_csv(self, path) -> None:
        cols = [f"x{k + 1}" for k in range(self.dim)] + ["weight"]
        write_csv(path, cols, np.column_stack([self.points, self.weights]))


def estimate_pi0(params: TreeParams, schemes: int, seed: int) -> CornerMeasureEstimate:
    """Corner measure of completely random schemes of the given depth.

    Samples `schemes` schemes from the uniform base law (only depth and dim
    of params matter), materializes every leaf rectangle, and keeps each
    leaf's corner vertices that lie in the half-open cube [0,1)^p, one unit
    of weight per (leaf, corner) incidence, normalized at the end.
    """
    if schemes < 1:
        raise ConfigError(f"schemes must be >= 1, got {schemes}")
    rng = derive_rng(seed)
    coords, positions = sample_base_schemes(params.depth, params.dim, schemes, rng)
    lo, hi = scheme_leaf_boxes(params.depth, coords, positions, dim=params.dim)
    p = params.dim
    clouds = []
    for bits in itertools.product((0, 1), repeat=p):
        corner = np.stack(
            [hi[..., j] if bits[j] else lo[..., j] for j in range(p)], axis=-1
        ).reshape(-1, p)
        clouds.append(corner)
    pts = np.concatenate(clouds, axis=0)
    pts = pts[np.all(pts < 1.0, axis=1)]
    if pts.shape[0] == 0:
        raise ConfigError("no corners landed in [0,1)^p")
    weights = np.full(pts.shape[0], 1.0 / pts.shape[0])
    return CornerMeasureEstimate(points=pts, weights=weights, schemes=schemes)


def uniform_product_tail(d: int, eps: float) -> float:
    """P(U_1 ... U_d <= eps) for independent uniforms: the closed form
    eps * sum_{k<d} (-log eps)^k / k!.
    """
    if d < 1:
        raise ConfigError(f"d must be >= 1, got {d}")
    if not 0.0 < eps <= 1.0:
        raise ConfigError(f"eps must lie in (0,1], got {eps}")
    ell = -np.log(eps)
    total = 1.0
    term = 1.0
    for k in range(1, d):
        term *= ell / k
        total += term
    return float(eps * total)


def envelope(width: float, depth: int) -> float:
    """The slice-mass envelope shape w * (1 - log w)^(depth-1)."""
    if not 0.0 < width <= 1.0:
        raise ConfigError(f"width must lie in (0,1], got {width}")
    return float(width * (1.0 - np.log(width)) ** (depth - 1))


def pi0_envelope_fit(estimate: CornerMeasureEstimate, depth: int, widths,
                     j: int = 0, starts: int = 64) -> dict:
    """Fit of worst-case slice masses to the envelope across widths.

    For each width the slab start ranges over a uniform grid and the
    largest mass is kept.  Ratios mass/envelope across widths measure how
    well a single constant explains all of them; the returned
    max_log_residual is the largest |log| deviation of a ratio from the
    geometric mean ratio.
    """
    widths = [float(w) for w in widths]
    if not widths:
        raise ConfigError("widths is empty")
    masses, ratios = [], []
    for w in widths:
        grid = np.linspace(0.0, 1.0 - w, starts)
        mass = max(estimate.slice_mass(j, a, a + w) for a in grid)
        masses.append(mass)
        ratios.append(mass / envelope(w, depth))
    ratios = np.asarray(ratios)
    if np.any(ratios <= 0):
        raise ConfigError("a slice had zero mass; increase the scheme count")
    logr = np.log(ratios)
    center = float(np.mean(logr))
    return {
        "widths": widths,
        "masses": masses,
        "ratios": ratios.tolist(),
        "constant": float(np.exp(center)),
        "max_log_residual": float(np.max(np.abs(logr - center))),
    }


# ---------------------------------------------------------------------------
# The uniform-selection operator in the grid-cell basis


@dataclass
class Beta0OperatorMatrix:
    """Monte Carlo estimate of the averaging operator on grid cells.

    matrix[c, c'] is the coefficient of input cell c' in the output on cell
    c; the assembly is a sum of symmetric outer products, so the matrix is
    exactly symmetric positive semi-definite and rows sum to one up to
    rounding.  stderr is the largest elementwise Monte Carlo standard error.
    """

    matrix: np.ndarray
    stderr: float
    resolution: int
    dim: int
    schemes: int

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def semigroup_values(self, g0_cells, t: float) -> np.ndarray:
        """exp(-t * matrix) applied to cell values g0."""
        g0 = np.asarray(g0_cells, dtype=np.float64).reshape(-1)
        if g0.shape[0] != self.matrix.shape[0]:
            raise ConfigError("cell vector length does not match the matrix")
        return scipy.linalg.expm(-t * self.matrix) @ g0

    def to_csv(self, path) -> None:
        cols = [f"c{i}" for i in range(self.matrix.shape[0])]
        write_csv(path, cols, self.matrix)


def beta0_operator_matrix(params: TreeParams, resolution: int, schemes: int,
                          seed: int) -> Beta0OperatorMatrix:
    """Assemble the expected leaf-averaging operator over random schemes.

    A scheme with leaves A_v sends f to sum_v (mean of f on A_v) * 1_{A_v};
    under uniform covariates its matrix in the cell-indicator basis depends
    only on the leaf/cell overlap volumes.  Cells are indexed in the
    row-major order of lattice_points.
    """
    if schemes < 1:
        raise ConfigError(f"schemes must be >= 1, got {schemes}")
    if resolution < 1:
        raise ConfigError(f"resolution must be >= 1, got {resolution}")
    p = params.dim
    if p > 2:
        raise ConfigError("cell-basis assembly is limited to dim <= 2")
    q = resolution
    n_cells = q ** p
    vol_cell = (1.0 / q) ** p
    rng = derive_rng(seed)
    coords, positions = sample_base_schemes(params.depth, p, schemes, rng)
    lo, hi = scheme_leaf_boxes(params.depth, coords, positions, dim=p)
    edges = np.arange(q + 1) / q

    acc = np.zeros((n_cells, n_cells))
    acc_sq = np.zeros((n_cells, n_cells))
    for s0 in range(0, schemes, _SCHEME_CHUNK):
        lo_c = lo[s0:s0 + _SCHEME_CHUNK]
        hi_c = hi[s0:s0 + _SCHEME_CHUNK]
        overlaps = [
            np.clip(
                np.minimum(hi_c[..., j, None], edges[None, None, 1:])
                - np.maximum(lo_c[..., j, None], edges[None, None, :-1]),
                0.0, None,
            )
            for j in range(p)
        ]
        if p == 1:
            W = overlaps[0]
        else:
            W = (overlaps[0][..., :, None] * overlaps[1][..., None, :])
            W = W.reshape(W.shape[0], W.shape[1], n_cells)
        inv_vol = 1.0 / np.prod(hi_c - lo_c, axis=2)
        per_scheme = np.einsum("slc,sld,sl->scd", W, W, inv_vol) / vol_cell
        acc += per_scheme.sum(axis=0)
        acc_sq += (per_scheme * per_scheme).sum(axis=0)
    mean = acc / schemes
    if schemes > 1:
        var = np.maximum((acc_sq - acc * acc / schemes) / (schemes - 1), 0.0)
        stderr = float(np.sqrt(var.max() / schemes))
    else:
        stderr = float("inf")
    return Beta0OperatorMatrix(
        matrix=mean, stderr=stderr, resolution=q, dim=p, schemes=schemes
    )
