"""Core value types: samples, rectangular regions, splitting schemes, trees.

All data lives on the unit cube [0,1]^p.  A splitting scheme is a complete
binary tree of (coordinate, relative position) pairs; materialising it against
a root region produces an exact partition of that region into 2^depth
rectangular leaves.

Closure convention.  A split of A at threshold c on coordinate j produces
A0 = A ∩ {x_j <= c} and A1 = A ∩ {x_j > c}.  Upper faces are therefore always
closed, and a lower face is open exactly when it was created by a split
(faces inherited from the root region, which includes its own boundary, stay
closed).  Under this rule every point of the root region belongs to exactly
one leaf.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

# Internal nodes are stored in breadth-first heap order: the node at depth
# level l whose left/right descent path encodes the integer b sits at index
# 2^l - 1 + b.  Leaves are indexed by the integer value of their full path.


def node_index(address: str) -> int:
    level = len(address)
    b = int(address, 2) if address else 0
    return (1 << level) - 1 + b


def node_address(index: int) -> str:
    level = 0
    while (1 << (level + 1)) - 1 <= index:
        level += 1
    b = index - ((1 << level) - 1)
    return format(b, f"0{level}b") if level else ""


@dataclass(frozen=True)
class TreeParams:
    """Parameters of the randomized tree sampler.

    depth: number of split levels (every leaf sits at this depth).
    proposals: candidate splits drawn per internal node.
    temperature: softmax inverse temperature applied to proposal scores;
        zero means uniform selection among proposals.
    dim: ambient dimension p of the covariate cube.
    """

    depth: int
    proposals: int
    temperature: float
    dim: int

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.proposals < 1:
            raise ConfigError(f"proposals must be >= 1, got {self.proposals}")
        if not np.isfinite(self.temperature) or self.temperature < 0:
            raise ConfigError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")

    @property
    def n_internal(self) -> int:
        return (1 << self.depth) - 1

    @property
    def n_leaves(self) -> int:
        return 1 << self.depth


class Region:
    """Axis-aligned rectangle with per-coordinate lower-face closure flags.

    The upper face is always closed.  `lower_closed[j]` is False when the
    lower face at coordinate j was created by a split, so membership there
    is the strict inequality x_j > lower[j].
    """

    __slots__ = ("lower", "upper", "lower_closed")

    def __init__(self, lower, upper, lower_closed=None):
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ConfigError("region bounds must be 1-d arrays of equal length")
        if np.any(lower > upper):
            raise ConfigError("region has lower > upper")
        if lower_closed is None:
            lower_closed = np.ones(lower.shape, dtype=bool)
        else:
            lower_closed = np.asarray(lower_closed, dtype=bool)
        for a in (lower, upper, lower_closed):
            a.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "lower_closed", lower_closed)

    def __setattr__(self, name, value):
        raise AttributeError("Region is immutable")

    @classmethod
    def unit_cube(cls, p: int) -> "Region":
        return cls(np.zeros(p), np.ones(p))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def contains(self, X) -> np.ndarray:
        """Vectorized membership test for points X of shape (n, p) or (p,)."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        above = (X > self.lower) | (self.lower_closed & (X == self.lower))
        below = X <= self.upper
        mask = np.all(above & below, axis=1)
        return bool(mask[0]) if single else mask

    def corners(self) -> np.ndarray:
        """Distinct vertices of the closed hull [lower, upper], shape (m, p)."""
        axes = []
        for j in range(self.dim):
            a, b = self.lower[j], self.upper[j]
            axes.append((a,) if a == b else (a, b))
        return np.array(list(itertools.product(*axes)), dtype=np.float64)

    def __repr__(self):
        parts = []
        for j in range(self.dim):
            left = "[" if self.lower_closed[j] else "("
            parts.append(f"{left}{self.lower[j]:g},{self.upper[j]:g}]")
        return "Region(" + "x".join(parts) + ")"


def split_threshold(region: Region, j: int, u: float) -> float:
    a, b = region.lower[j], region.upper[j]
    return a + u * (b - a)


def region_split(region: Region, j: int, u: float) -> tuple[Region, Region]:
    """Split `region` at relative position u along coordinate j.

    Returns (A0, A1) with A0 = region ∩ {x_j <= c}, A1 = region ∩ {x_j > c}
    where c interpolates the region's extent: c = (1-u)·lower_j + u·upper_j.
    A degenerate coordinate (lower_j == upper_j) yields A0 == region and an
    empty A1.
    """
    if not 0 <= j < region.dim:
        raise ConfigError(f"split coordinate {j} out of range for dim {region.dim}")
    if not 0.0 < u < 1.0:
        raise ConfigError(f"relative split position must lie in (0,1), got {u}")
    c = split_threshold(region, j, u)
    up0 = region.upper.copy()
    up0[j] = c
    lo1 = region.lower.copy()
    lo1[j] = c
    closed1 = region.lower_closed.copy()
    closed1[j] = False
    a0 = Region(region.lower, up0, region.lower_closed)
    a1 = Region(lo1, region.upper, closed1)
    return a0, a1


@dataclass(frozen=True)
class SplittingScheme:
    """Complete binary tree of splits, keyed by node address.

    Addresses are strings over {'0','1'} ('' for the root); each maps to a
    pair (j, u) with j a 0-based coordinate and u the relative position of
    the cut inside the node's rectangle, strictly between 0 and 1.
    """

    depth: int
    nodes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"scheme depth must be >= 1, got {self.depth}")
        expected = {format(b, f"0{l}b") if l else "" for l in range(self.depth) for b in range(1 << l)}
        if set(self.nodes) != expected:
            raise ConfigError("scheme nodes do not form a complete binary tree")
        for addr, (j, u) in self.nodes.items():
            if not 0.0 < u < 1.0:
                raise ConfigError(f"node {addr!r}: relative position {u} outside (0,1)")
            if j < 0:
                raise ConfigError(f"node {addr!r}: negative coordinate {j}")

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Heap-ordered (coords, positions) arrays of length 2^depth - 1."""
        n = (1 << self.depth) - 1
        coords = np.zeros(n, dtype=np.int32)
        pos = np.zeros(n, dtype=np.float64)
        for addr, (j, u) in self.nodes.items():
            k = node_index(addr)
            coords[k] = j
            pos[k] = u
        return coords, pos

    @classmethod
    def from_arrays(cls, depth: int, coords, pos) -> "SplittingScheme":
        nodes = {}
        for k in range((1 << depth) - 1):
            nodes[node_address(k)] = (int(coords[k]), float(pos[k]))
        return cls(depth=depth, nodes=nodes)


def scheme_to_partition(scheme: SplittingScheme, root: Region) -> list[Region]:
    """Materialize the scheme's leaves against `root`, in leaf-address order.

    The returned 2^depth regions partition `root` exactly: every point of
    the root region belongs to exactly one leaf.
    """
    regions = [root]
    for level in range(scheme.depth):
        nxt = []
        for b, reg in enumerate(regions):
            addr = format(b, f"0{level}b") if level else ""
            j, u = scheme.nodes[addr]
            if j >= root.dim:
                raise ConfigError(f"node {addr!r}: coordinate {j} out of range for dim {root.dim}")
            a0, a1 = region_split(reg, j, u)
            nxt.extend((a0, a1))
        regions = nxt
    return regions


class TreeBatch:
    """A block of trees sharing depth and dimension, stored as flat arrays.

    coords[m, k] and positions[m, k] give the split of tree m at heap node k;
    cuts[m, k] is the materialized threshold in data coordinates against the
    unit cube; leaf_values[m, b] is the value on leaf b.  Evaluation returns
    the average over trees, which is how ensembles consume a sampled block.
    """

    __slots__ = ("depth", "dim", "coords", "positions", "cuts", "leaf_values")

    # Chunking bound for intermediate (points x trees) work arrays.  A code
    # constant, not tunable: summation order must not depend on environment.
    _CHUNK_ELEMS = 1 << 23

    def __init__(self, depth, dim, coords, positions, cuts, leaf_values):
        self.depth = int(depth)
        self.dim = int(dim)
        self.coords = np.ascontiguousarray(coords, dtype=np.int32)
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        self.cuts = np.ascontiguousarray(cuts, dtype=np.float64)
        self.leaf_values = np.ascontiguousarray(leaf_values, dtype=np.float64)
        m = self.coords.shape[0]
        n_int = (1 << self.depth) - 1
        if self.coords.shape != (m, n_int) or self.cuts.shape != (m, n_int):
            raise ConfigError("tree batch arrays have inconsistent shapes")
        if self.positions.shape != (m, n_int) or self.leaf_values.shape != (m, 1 << self.depth):
            raise ConfigError("tree batch arrays have inconsistent shapes")

    @property
    def n_trees(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def from_scheme(cls, scheme: SplittingScheme, leaf_values, dim: int) -> "TreeBatch":
        coords, pos = scheme.to_arrays()
        cuts = materialize_cuts(scheme.depth, coords[None, :], pos[None, :])
        vals = np.asarray(leaf_values, dtype=np.float64)[None, :]
        return cls(scheme.depth, dim, coords[None, :], pos[None, :], cuts, vals)

    def leaf_indices_at(self, X) -> np.ndarray:
        """Leaf index of every point in every tree, shape (n, m)."""
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        m = self.n_trees
        rows = np.arange(m)[None, :]
        b = np.zeros((n, m), dtype=np.int32)
        for level in range(self.depth):
            node = ((1 << level) - 1) + b
            j = self.coords[rows, node]
            c = self.cuts[rows, node]
            xj = X[:, 0][:, None] if self.dim == 1 else X[np.arange(n)[:, None], j]
            b = 2 * b + (xj > c)
        return b

    def values_at(self, X) -> np.ndarray:
        """Per-tree values, shape (n, m).  Intended for modest n*m."""
        b = self.leaf_indices_at(X)
        return self.leaf_values[np.arange(self.n_trees)[None, :], b]

    def mean_at(self, X) -> np.ndarray:
        """Average tree value at each point, shape (n,).

        Depth-1 batches use a sorted-cut prefix representation, which turns
        the (points x trees) product into two array passes; deeper batches
        chunk the product over trees.  Either path visits trees in index
        order, so results are reproducible bit for bit.
        """
        X = np.asarray(X, dtype=np.float64)
        if self.depth == 1:
            return self._mean_at_depth1(X)
        n = max(X.shape[0], 1)
        step = max(1, self._CHUNK_ELEMS // n)
        total = np.zeros(X.shape[0], dtype=np.float64)
        for start in range(0, self.n_trees, step):
            sub = self._slice(start, start + step)
            total += sub.values_at(X).sum(axis=1)
        return total / self.n_trees

    def _mean_at_depth1(self, X) -> np.ndarray:
        out = np.zeros(X.shape[0], dtype=np.float64)
        j_star = self.coords[:, 0]
        c = self.cuts[:, 0]
        left = self.leaf_values[:, 0]
        right = self.leaf_values[:, 1]
        for j in np.unique(j_star):
            mask = j_star == j
            order = np.argsort(c[mask], kind="stable")
            cs = c[mask][order]
            jump = np.concatenate(([0.0], np.cumsum((right[mask] - left[mask])[order])))
            base = float(left[mask].sum())
            pos = np.searchsorted(cs, X[:, int(j)], side="left")
            out += base + jump[pos]
        return out / self.n_trees

    def sum_stats_at(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Per-point sum and sum of squares of tree values, chunked."""
        X = np.asarray(X, dtype=np.float64)
        n = max(X.shape[0], 1)
        step = max(1, self._CHUNK_ELEMS // n)
        s1 = np.zeros(X.shape[0], dtype=np.float64)
        s2 = np.zeros(X.shape[0], dtype=np.float64)
        for start in range(0, self.n_trees, step):
            v = self._slice(start, start + step).values_at(X)
            s1 += v.sum(axis=1)
            s2 += (v * v).sum(axis=1)
        return s1, s2

    def _slice(self, start: int, stop: int) -> "TreeBatch":
        return TreeBatch(
            self.depth, self.dim,
            self.coords[start:stop], self.positions[start:stop],
            self.cuts[start:stop], self.leaf_values[start:stop],
        )

    def tree(self, m: int) -> "TreeFunction":
        scheme = SplittingScheme.from_arrays(self.depth, self.coords[m], self.positions[m])
        return TreeFunction(scheme, self.leaf_values[m].copy(), dim=self.dim)


def scheme_leaf_boxes(depth: int, coords: np.ndarray, positions: np.ndarray,
                      dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Leaf rectangles of heap-ordered schemes materialized on [0,1]^p.

    coords, positions: shape (m, 2^depth - 1).  Returns (lo, hi) arrays of
    shape (m, 2^depth, p) with leaves in address order.  Closure flags are
    dropped; callers needing exact membership should use scheme_to_partition.
    """
    m, _ = coords.shape
    p = int(coords.max(initial=0)) + 1 if dim is None else int(dim)
    lo = np.zeros((m, 1, p))
    hi = np.ones((m, 1, p))
    rows = np.arange(m)
    for level in range(depth):
        idx = ((1 << level) - 1) + np.arange(1 << level)
        j = coords[:, idx]
        u = positions[:, idx]
        nodes = np.arange(1 << level)[None, :]
        a = lo[rows[:, None], nodes, j]
        b = hi[rows[:, None], nodes, j]
        c = a + u * (b - a)
        nlo = np.repeat(lo, 2, axis=1)
        nhi = np.repeat(hi, 2, axis=1)
        nhi[rows[:, None], 2 * nodes, j] = c
        nlo[rows[:, None], 2 * nodes + 1, j] = c
        lo, hi = nlo, nhi
    return lo, hi


def materialize_cuts(depth: int, coords: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Thresholds in data coordinates for heap-ordered splits on [0,1]^p.

    coords, positions: shape (m, 2^depth - 1).  Tracks each node's rectangle
    top-down, so cuts depend only on the scheme, never on data.
    """
    m, n_int = coords.shape
    p = int(coords.max(initial=0)) + 1
    cuts = np.zeros((m, n_int), dtype=np.float64)
    lo = np.zeros((m, 1, p))
    hi = np.ones((m, 1, p))
    rows = np.arange(m)
    for level in range(depth):
        base = (1 << level) - 1
        idx = base + np.arange(1 << level)
        j = coords[:, idx]
        u = positions[:, idx]
        nodes = np.arange(1 << level)[None, :]
        a = lo[rows[:, None], nodes, j]
        b = hi[rows[:, None], nodes, j]
        c = a + u * (b - a)
        cuts[:, idx] = c
        if level + 1 < depth:
            nlo = np.repeat(lo, 2, axis=1)
            nhi = np.repeat(hi, 2, axis=1)
            left = 2 * nodes
            right = left + 1
            nhi[rows[:, None], left, j] = c
            nlo[rows[:, None], right, j] = c
            lo, hi = nlo, nhi
    return cuts


class TreeFunction:
    """Piecewise-constant function defined by a scheme and one value per leaf."""

    __slots__ = ("scheme", "leaf_values", "dim", "_batch")

    def __init__(self, scheme: SplittingScheme, leaf_values, dim: int):
        self.scheme = scheme
        self.leaf_values = np.asarray(leaf_values, dtype=np.float64)
        if self.leaf_values.shape != (1 << scheme.depth,):
            raise ConfigError("leaf value count does not match scheme depth")
        self.dim = dim
        self._batch = TreeBatch.from_scheme(scheme, self.leaf_values, dim)

    def leaves(self) -> list[tuple[Region, float]]:
        regions = scheme_to_partition(self.scheme, Region.unit_cube(self.dim))
        return list(zip(regions, self.leaf_values.tolist()))

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        out = self._batch.values_at(X)[:, 0]
        return float(out[0]) if single else out


class EnsembleModel:
    """Constant base plus an ordered list of weighted tree-batch increments.

    Evaluation is base + sum over increments of step * (average tree value).
    A single classical boosting step is an increment whose batch holds one
    tree; a flow step holds the full Monte Carlo block for that step.
    """

    def __init__(self, base: float, dim: int, increments=None):
        self.base = float(base)
        self.dim = int(dim)
        self.increments: list[tuple[float, TreeBatch]] = list(increments or [])

    def add_increment(self, step: float, trees: TreeBatch) -> None:
        if trees.dim != self.dim:
            raise ConfigError("increment dimension does not match model")
        self.increments.append((float(step), trees))

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise DataError(f"expected points of dimension {self.dim}, got shape {X.shape}")
        out = np.full(X.shape[0], self.base, dtype=np.float64)
        for step, trees in self.increments:
            out += step * trees.mean_at(X)
        return float(out[0]) if single else out

    def to_json(self) -> str:
        payload = {
            "format": "igb-model",
            "version": 1,
            "dim": self.dim,
            "base": self.base,
            "increments": [
                {
                    "step": step,
                    "depth": trees.depth,
                    "coords": trees.coords.tolist(),
                    "positions": trees.positions.tolist(),
                    "leaf_values": trees.leaf_values.tolist(),
                }
                for step, trees in self.increments
            ],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "EnsembleModel":
        payload = json.loads(text)
        if payload.get("format") != "igb-model":
            raise DataError("not a model dump")
        model = cls(payload["base"], payload["dim"])
        for inc in payload["increments"]:
            coords = np.asarray(inc["coords"], dtype=np.int32)
            pos = np.asarray(inc["positions"], dtype=np.float64)
            cuts = materialize_cuts(inc["depth"], coords, pos)
            batch = TreeBatch(inc["depth"], model.dim, coords, pos, cuts, inc["leaf_values"])
            model.add_increment(inc["step"], batch)
        return model


def evaluate_model(model: EnsembleModel, X) -> np.ndarray:
    """Exact evaluation of an ensemble at points X."""
    return model(X)


def as_predictor(f, dim: int | None = None):
    """Normalize a model / callable / constant into a batch predictor.

    The result maps (n, p) arrays to (n,) float arrays.  dim is accepted for
    call-site clarity; models carry their own dimension.
    """
    if isinstance(f, EnsembleModel):
        return f
    if np.isscalar(f):
        c = float(f)
        return lambda X: np.full(np.asarray(X).shape[0], c, dtype=np.float64)
    if callable(f):
        return lambda X: np.asarray(f(np.asarray(X, dtype=np.float64)), dtype=np.float64).reshape(-1)
    raise ConfigError(f"cannot interpret {type(f).__name__} as a predictor")


class EmpiricalDistribution:
    """Immutable weighted sample on the unit cube with normalized moments.

    Moments are averages (1/n)·sum, so split scores computed against this
    object converge to their population counterparts as n grows.
    """

    def __init__(self, X, y):
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"incompatible sample shapes {X.shape} / {y.shape}")
        if X.shape[0] == 0:
            raise DataError("empty sample")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("sample contains non-finite values")
        if X.min() < 0.0 or X.max() > 1.0:
            raise DataError("covariates must lie in [0,1]^p")
        X.setflags(write=False)
        y.setflags(write=False)
        self.X = X
        self.y = y
        self._orders: dict[int, np.ndarray] = {}

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def order(self, j: int) -> np.ndarray:
        """Cached argsort of coordinate j (stable, so deterministic)."""
        if j not in self._orders:
            o = np.argsort(self.X[:, j], kind="stable")
            o.setflags(write=False)
            self._orders[j] = o
        return self._orders[j]

    def moment(self, values) -> float:
        return float(np.mean(values))

    def restricted_moment(self, g, region: Region) -> float:
        """Normalized moment (1/n) sum of g over samples falling in `region`.

        g may be a callable g(X, y) -> per-sample values or a precomputed
        array of per-sample values.
        """
        vals = g(self.X, self.y) if callable(g) else np.asarray(g, dtype=np.float64)
        if vals.shape != (self.n,):
            raise DataError(f"per-sample values have shape {vals.shape}, expected {(self.n,)}")
        mask = region.contains(self.X)
        return float(np.sum(vals[mask])) / self.n

    @classmethod
    def from_csv(cls, path) -> "EmpiricalDistribution":
        """Read a dataset written as x1,...,xp,y with a header row."""
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
        if len(header) < 2 or header[-1] != "y":
            raise DataError(f"expected header x1,...,xp,y in {path}")
        expected = [f"x{k + 1}" for k in range(len(header) - 1)]
        if header[:-1] != expected:
            raise DataError(f"expected covariate columns {expected} in {path}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] != len(header):
            raise DataError(f"column count mismatch in {path}")
        return cls(data[:, :-1], data[:, -1])

    def to_csv(self, path) -> None:
        cols = [f"x{k + 1}" for k in range(self.p)] + ["y"]
        write_csv(path, cols, np.column_stack([self.X, self.y]))


def write_csv(path, columns: list[str], rows: np.ndarray) -> None:
    """Write floats with repr-exact formatting so reruns compare bitwise."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def restricted_moment(dist: EmpiricalDistribution, g, region: Region) -> float:
    return dist.restricted_moment(g, region)
