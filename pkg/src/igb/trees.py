"""Scored softmax splitting and sampling of gradient trees.

Two implementations of the same sampling law live here.  The per-tree path
(`sample_gradient_tree`) follows the recursive description directly and is
the readable reference.  The batch path (`sample_tree_batch`) samples a whole
Monte Carlo block level-synchronously with vectorized moment queries; it is
what the operator estimator and the flow integrator call.  Both consume the
same canonical per-tree variate layout (all proposal coordinates, then all
relative cuts, then all selection uniforms, in breadth-first node order), so
a tree with a given seed has the same law on either path.

Split scores are computed against the normalized sample measure: the score
of cutting region A into (A0, A1) is mean[g·1_A0]^2/mass(A0) +
mean[g·1_A1]^2/mass(A1), each term zero when its mass is zero.  The omitted
parent term is constant across proposals and cannot change the softmax.
"""

from __future__ import annotations

import numpy as np

from .domain import (
    EmpiricalDistribution,
    Region,
    SplittingScheme,
    TreeBatch,
    TreeFunction,
    TreeParams,
    as_predictor,
    region_split,
    split_threshold,
)
from .errors import ConfigError
from .losses import loss_grad, loss_hess

# Softmax energies are capped here before exponentiation; together with
# max-subtraction this keeps exp() finite for any finite scores.
SCORE_CAP = 700.0


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic child generator for (master seed, index path)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def tree_variates(params: TreeParams, rng: np.random.Generator):
    """Canonical randomness block for one tree.

    Returns proposal coordinates J (nodes, K), relative cuts U (nodes, K)
    remapped away from the measure-zero draw 0.0 so cuts stay inside (0,1),
    and selection uniforms S (nodes,), all in breadth-first node order.
    """
    n_int = params.n_internal
    J = rng.integers(0, params.dim, size=(n_int, params.proposals))
    U = rng.random((n_int, params.proposals))
    U[U == 0.0] = 0.5
    S = rng.random(n_int)
    return J, U, S


def softmax_probabilities(temperature: float, scores) -> np.ndarray:
    """Selection probabilities proportional to exp(temperature * score).

    The max is subtracted before exponentiation, so arbitrarily large
    score gaps stay exact; the cap on the centered exponent only guards
    pathological non-finite scores.
    """
    z = np.asarray(scores, dtype=np.float64) * temperature
    z = np.minimum(z - z.max(axis=-1, keepdims=True), SCORE_CAP)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def select_proposal(temperature: float, scores, s: float) -> int:
    """Index drawn from the softmax over scores using the uniform s."""
    z = np.asarray(scores, dtype=np.float64) * temperature
    z = np.minimum(z - z.max(), SCORE_CAP)
    w = np.exp(z)
    cum = np.cumsum(w)
    k = int(np.searchsorted(cum, s * cum[-1], side="right"))
    return min(k, len(cum) - 1)


def _two_term(s0, n0, s1, n1, n):
    """Normalized split score from raw side sums and counts."""
    s0 = np.asarray(s0, dtype=np.float64)
    s1 = np.asarray(s1, dtype=np.float64)
    n0 = np.asarray(n0, dtype=np.float64)
    n1 = np.asarray(n1, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = np.where(n0 > 0, s0 * s0 / n0, 0.0)
        t1 = np.where(n1 > 0, s1 * s1 / n1, 0.0)
    return (t0 + t1) / n


def _leaf_values_from_sums(sg, sh):
    """leaf value -sum(g)/sum(h) with empty leaves mapped to 0.

    A nonempty leaf whose hessian mass underflowed to zero while the
    gradient mass did not produces an infinite value; flows detect it and
    raise a blow-up error rather than silently truncating.
    """
    sg = np.asarray(sg, dtype=np.float64)
    sh = np.asarray(sh, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = -sg / sh
    degenerate = np.where(sg == 0.0, 0.0, np.where(sg > 0, -np.inf, np.inf))
    return np.where(sh != 0.0, vals, degenerate)


def _residuals(dist: EmpiricalDistribution, kind: str, F):
    z = as_predictor(F)(dist.X)
    return loss_grad(kind, dist.y, z), loss_hess(kind, dist.y, z)


def _masked_score(X, g, mask, region: Region, j: int, u: float, n: int) -> float:
    c = split_threshold(region, j, u)
    left = mask & (X[:, j] <= c)
    right = mask & (X[:, j] > c)
    return float(
        _two_term(g[left].sum(), left.sum(), g[right].sum(), right.sum(), n)
    )


def split_score(dist: EmpiricalDistribution, kind: str, F, region: Region, j: int, u: float) -> float:
    """Two-term score of the proposed split of `region` at (j, u)."""
    g, _ = _residuals(dist, kind, F)
    mask = region.contains(dist.X)
    return _masked_score(dist.X, g, mask, region, j, u, dist.n)


def leaf_value(dist: EmpiricalDistribution, kind: str, F, region: Region) -> float:
    """Newton-step value -mean[g·1_A]/mean[h·1_A], zero on empty leaves."""
    g, h = _residuals(dist, kind, F)
    mask = region.contains(dist.X)
    return float(_leaf_values_from_sums(g[mask].sum(), h[mask].sum()))


def softmax_split(dist: EmpiricalDistribution, kind: str, F, region: Region,
                  params: TreeParams, rng: np.random.Generator):
    """Draw K uniform proposals, score them, select one by softmax.

    Returns (j, u, A0, A1) for the selected proposal.
    """
    g, _ = _residuals(dist, kind, F)
    js = rng.integers(0, params.dim, size=params.proposals)
    us = rng.random(params.proposals)
    us[us == 0.0] = 0.5
    s = float(rng.random())
    mask = region.contains(dist.X)
    if params.temperature > 0:
        scores = np.array([
            _masked_score(dist.X, g, mask, region, int(js[k]), float(us[k]), dist.n)
            for k in range(params.proposals)
        ])
    else:
        scores = np.zeros(params.proposals)
    k = select_proposal(params.temperature, scores, s)
    j, u = int(js[k]), float(us[k])
    a0, a1 = region_split(region, j, u)
    return j, u, a0, a1


def sample_gradient_tree(dist: EmpiricalDistribution, kind: str, F,
                         params: TreeParams, rng: np.random.Generator,
                         return_trace: bool = False):
    """Sample one gradient tree for predictor F (reference implementation).

    Splits recursively from the unit cube; every internal node scores K
    proposals on the samples it contains and keeps one with probability
    proportional to exp(temperature * score); leaves get Newton values.
    Returns (TreeFunction, SplittingScheme), plus a per-node trace when
    requested.
    """
    if params.dim != dist.p:
        raise ConfigError(f"params.dim={params.dim} does not match sample dim {dist.p}")
    g, h = _residuals(dist, kind, F)
    X = dist.X
    J, U, S = tree_variates(params, rng)

    regions = [Region.unit_cube(dist.p)]
    masks = [np.ones(dist.n, dtype=bool)]
    nodes = {}
    trace = [] if return_trace else None
    for level in range(params.depth):
        next_regions, next_masks = [], []
        for b in range(1 << level):
            k = ((1 << level) - 1) + b
            region, mask = regions[b], masks[b]
            if params.temperature > 0:
                scores = np.array([
                    _masked_score(X, g, mask, region, int(J[k, i]), float(U[k, i]), dist.n)
                    for i in range(params.proposals)
                ])
            else:
                scores = np.zeros(params.proposals)
            sel = select_proposal(params.temperature, scores, float(S[k]))
            j, u = int(J[k, sel]), float(U[k, sel])
            addr = format(b, f"0{level}b") if level else ""
            nodes[addr] = (j, u)
            if trace is not None:
                trace.append({
                    "node": addr,
                    "proposals": [[int(J[k, i]), float(U[k, i])] for i in range(params.proposals)],
                    "scores": scores.tolist(),
                    "probabilities": softmax_probabilities(params.temperature, scores).tolist(),
                    "selected": sel,
                })
            c = split_threshold(region, j, u)
            a0, a1 = region_split(region, j, u)
            next_regions.extend((a0, a1))
            next_masks.extend((mask & (X[:, j] <= c), mask & (X[:, j] > c)))
        regions, masks = next_regions, next_masks

    values = np.array([
        float(_leaf_values_from_sums(g[m].sum(), h[m].sum())) for m in masks
    ])
    scheme = SplittingScheme(depth=params.depth, nodes=nodes)
    tree = TreeFunction(scheme, values, dim=dist.p)
    if return_trace:
        return tree, scheme, trace
    return tree, scheme


def rn_weight(dist: EmpiricalDistribution, kind: str, F, scheme: SplittingScheme,
              params: TreeParams, rng: np.random.Generator, mc: int) -> float:
    """Monte Carlo estimate of the scheme's sampling density against the
    completely random base law.

    Each replicate draws K-1 competitor proposals per node and multiplies,
    over internal nodes, K times the softmax probability of the node's own
    split against those competitors, evaluated on the node's own region.
    Every factor is at most K, so the estimate never exceeds
    K^(2^depth - 1); it is identically 1 when temperature is 0 or K is 1.
    """
    if mc < 1:
        raise ConfigError(f"mc must be >= 1, got {mc}")
    g, _ = _residuals(dist, kind, F)
    X = dist.X
    K = params.proposals

    # Materialize region, sample mask and own-split score of every internal
    # node once, in breadth-first order.
    internal = []
    frontier = [("", Region.unit_cube(dist.p))]
    for level in range(params.depth):
        nxt = []
        for addr, region in frontier:
            j, u = scheme.nodes[addr]
            mask = region.contains(X)
            own = _masked_score(X, g, mask, region, j, u, dist.n)
            internal.append((region, mask, own))
            a0, a1 = region_split(region, j, u)
            nxt.extend(((addr + "0", a0), (addr + "1", a1)))
        frontier = nxt

    total = 0.0
    for _ in range(mc):
        factor = 1.0
        for region, mask, own in internal:
            scores = np.empty(K)
            scores[0] = own
            if K > 1:
                comp_j = rng.integers(0, params.dim, size=K - 1)
                comp_u = rng.random(K - 1)
                comp_u[comp_u == 0.0] = 0.5
                if params.temperature > 0:
                    for i in range(K - 1):
                        scores[i + 1] = _masked_score(
                            X, g, mask, region, int(comp_j[i]), float(comp_u[i]), dist.n
                        )
                else:
                    scores[1:] = 0.0
            z = scores * params.temperature
            z = np.minimum(z - z.max(), SCORE_CAP)
            w = np.exp(z)
            factor *= (K * w[0]) / w.sum()
        total += factor
    return total / mc


def sample_base_schemes(depth: int, dim: int, count: int, rng: np.random.Generator):
    """Completely random schemes: (coords, positions) arrays in heap order."""
    n_int = (1 << depth) - 1
    coords = rng.integers(0, dim, size=(count, n_int)).astype(np.int32)
    positions = rng.random((count, n_int))
    positions[positions == 0.0] = 0.5
    return coords, positions


# ---------------------------------------------------------------------------
# Vectorized block sampler


def sample_tree_batch(dist: EmpiricalDistribution, g, h, params: TreeParams,
                      seed: int, key: tuple = (), count: int = 1) -> TreeBatch:
    """Sample `count` trees at frozen residuals (g, h), level-synchronously.

    Tree m uses the generator derived from (seed, *key, m), consuming the
    same variate block as the per-tree reference path, so the two paths
    realize the same trees.  Depth-1 blocks never materialize per-sample
    work arrays: scoring and leaf sums go through per-coordinate prefix
    sums, keeping the cost O(n + count·proposals) per block.
    """
    if params.dim != dist.p:
        raise ConfigError(f"params.dim={params.dim} does not match sample dim {dist.p}")
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    X = dist.X
    n, p = dist.n, dist.p
    d, K, beta = params.depth, params.proposals, params.temperature
    n_int = params.n_internal
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)

    J = np.empty((count, n_int, K), dtype=np.int64)
    U = np.empty((count, n_int, K), dtype=np.float64)
    S = np.empty((count, n_int), dtype=np.float64)
    for m in range(count):
        Jm, Um, Sm = tree_variates(params, derive_rng(seed, *key, m))
        J[m] = Jm
        U[m] = Um
        S[m] = Sm

    out_coords = np.empty((count, n_int), dtype=np.int32)
    out_pos = np.empty((count, n_int), dtype=np.float64)
    out_cuts = np.empty((count, n_int), dtype=np.float64)

    lo = np.zeros((count, 1, p))
    hi = np.ones((count, 1, p))
    labels = np.zeros((n, count), dtype=np.int32) if d > 1 else None
    tree_ix = np.arange(count)
    cols = tree_ix[None, :]
    rows_n = np.arange(n)[:, None]

    for level in range(d):
        nodes = 1 << level
        base = nodes - 1
        Jl = J[:, base:base + nodes, :]
        Ul = U[:, base:base + nodes, :]
        Sl = S[:, base:base + nodes]
        a = np.take_along_axis(lo, Jl, axis=2)
        b = np.take_along_axis(hi, Jl, axis=2)
        C = a + Ul * (b - a)

        if beta == 0.0:
            scores = np.zeros((count, nodes, K))
        elif level == 0:
            scores = _root_scores(dist, g, Jl[:, 0, :], C[:, 0, :])[:, None, :]
        else:
            scores = _node_scores(X, g, labels, Jl, C, nodes)

        sel = _batch_select(beta, scores, Sl)
        j_star = np.take_along_axis(Jl, sel[..., None], axis=2)[..., 0]
        u_star = np.take_along_axis(Ul, sel[..., None], axis=2)[..., 0]
        c_star = np.take_along_axis(C, sel[..., None], axis=2)[..., 0]
        out_coords[:, base:base + nodes] = j_star
        out_pos[:, base:base + nodes] = u_star
        out_cuts[:, base:base + nodes] = c_star

        if labels is not None:
            jmap = j_star[cols, labels]
            cmap = c_star[cols, labels]
            xim = X[:, 0][:, None] if p == 1 else X[rows_n, jmap]
            labels = 2 * labels + (xim > cmap)

        if level + 1 < d:
            node_ix = np.arange(nodes)[None, :]
            nlo = np.repeat(lo, 2, axis=1)
            nhi = np.repeat(hi, 2, axis=1)
            nhi[tree_ix[:, None], 2 * node_ix, j_star] = c_star
            nlo[tree_ix[:, None], 2 * node_ix + 1, j_star] = c_star
            lo, hi = nlo, nhi

    if d == 1:
        sg, sh = _leaf_sums_depth1(dist, g, h, out_coords[:, 0], out_cuts[:, 0])
    else:
        n_leaf = 1 << d
        keys = (cols * n_leaf + labels).ravel()
        gb = np.broadcast_to(g[:, None], labels.shape).ravel()
        hb = np.broadcast_to(h[:, None], labels.shape).ravel()
        sg = np.bincount(keys, weights=gb, minlength=count * n_leaf).reshape(count, n_leaf)
        sh = np.bincount(keys, weights=hb, minlength=count * n_leaf).reshape(count, n_leaf)
    values = _leaf_values_from_sums(sg, sh)

    return TreeBatch(d, p, out_coords, out_pos, out_cuts, values)


def _batch_select(temperature, scores, uniforms):
    z = scores * temperature
    z = np.minimum(z - z.max(axis=-1, keepdims=True), SCORE_CAP)
    w = np.exp(z)
    cum = np.cumsum(w, axis=-1)
    target = uniforms * cum[..., -1]
    sel = np.sum(cum <= target[..., None], axis=-1)
    return np.minimum(sel, scores.shape[-1] - 1)


def _root_scores(dist: EmpiricalDistribution, g, j_props, c_props):
    """Scores of root-level proposals via per-coordinate prefix sums."""
    n = dist.n
    scores = np.empty(j_props.shape)
    for j in np.unique(j_props):
        mask = j_props == j
        order = dist.order(int(j))
        xs = dist.X[order, int(j)]
        cg = np.cumsum(g[order])
        total = float(cg[-1])
        pos = np.searchsorted(xs, c_props[mask], side="right")
        s0 = np.where(pos > 0, cg[pos - 1], 0.0)
        scores[mask] = _two_term(s0, pos, total - s0, n - pos, n)
    return scores


def _node_scores(X, g, labels, Jl, C, nodes):
    """Scores for all proposals at one level via keyed accumulation.

    For each proposal slot, every sample contributes its gradient to the
    bucket (tree, node, side-of-cut); bucket sums and counts give the
    two-term score.
    """
    n, count = labels.shape
    K = Jl.shape[2]
    p = X.shape[1]
    cols = np.arange(count)[None, :]
    rows_n = np.arange(n)[:, None]
    gb = np.broadcast_to(g[:, None], labels.shape).ravel()
    base_key = (cols * nodes + labels) * 2
    scores = np.empty((count, nodes, K))
    size = count * nodes * 2
    for k in range(K):
        jk = Jl[:, :, k]
        ck = C[:, :, k]
        jmap = jk[cols, labels]
        cmap = ck[cols, labels]
        xim = X[:, 0][:, None] if p == 1 else X[rows_n, jmap]
        keys = (base_key + (xim > cmap)).ravel()
        sums = np.bincount(keys, weights=gb, minlength=size).reshape(count, nodes, 2)
        counts = np.bincount(keys, minlength=size).reshape(count, nodes, 2)
        scores[:, :, k] = _two_term(
            sums[..., 0], counts[..., 0], sums[..., 1], counts[..., 1], n
        )
    return scores


def _leaf_sums_depth1(dist: EmpiricalDistribution, g, h, j_star, c_star):
    """Left/right gradient and hessian sums for a block of depth-1 trees."""
    count = j_star.shape[0]
    sg = np.empty((count, 2))
    sh = np.empty((count, 2))
    for j in np.unique(j_star):
        mask = j_star == j
        order = dist.order(int(j))
        xs = dist.X[order, int(j)]
        cg = np.cumsum(g[order])
        ch = np.cumsum(h[order])
        pos = np.searchsorted(xs, c_star[mask], side="right")
        g0 = np.where(pos > 0, cg[pos - 1], 0.0)
        h0 = np.where(pos > 0, ch[pos - 1], 0.0)
        sg[mask, 0] = g0
        sg[mask, 1] = cg[-1] - g0
        sh[mask, 0] = h0
        sh[mask, 1] = ch[-1] - h0
    return sg, sh


def sample_forest(dist: EmpiricalDistribution, kind: str, F, params: TreeParams,
                  seed: int, count: int, key: tuple = ()) -> TreeBatch:
    """Residual computation plus batch sampling in one call."""
    g, h = _residuals(dist, kind, F)
    return sample_tree_batch(dist, g, h, params, seed, key=key, count=count)
