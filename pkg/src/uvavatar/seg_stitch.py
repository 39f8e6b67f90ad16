"""Multi-view segmentation fusion by Potts MRF minimisation.

Unaries come from visibility-weighted label votes; the pairwise term is a Potts penalty on
the texel adjacency graph (4-neighbourhood plus seam links).  Expansion moves are solved
exactly with a Dinic max-flow.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .maps import DEFAULT_PALETTE, SegmentationMap
from .uv_atlas import TexelTable


@dataclass(frozen=True)
class FlowNetwork:
    num_nodes: int
    tails: np.ndarray
    heads: np.ndarray
    capacities: np.ndarray
    source: int
    sink: int

    def __post_init__(self):
        tails = np.asarray(self.tails, dtype=np.int64).ravel()
        heads = np.asarray(self.heads, dtype=np.int64).ravel()
        caps = np.asarray(self.capacities, dtype=np.float64).ravel()
        if not (len(tails) == len(heads) == len(caps)):
            raise ValueError("tails, heads and capacities must have equal length")
        if len(caps) and (not np.isfinite(caps).all() or caps.min() < 0):
            raise ValueError("capacities must be finite and non-negative")
        n = int(self.num_nodes)
        for arr in (tails, heads):
            if len(arr) and (arr.min() < 0 or arr.max() >= n):
                raise ValueError("arc endpoint outside node range")
        if not (0 <= self.source < n and 0 <= self.sink < n) or self.source == self.sink:
            raise ValueError("source and sink must be distinct nodes")
        object.__setattr__(self, "tails", tails)
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "capacities", caps)


@numba.njit(cache=True)
def _bfs(first, adj_head, res, s, t, level, queue, eps):
    level[:] = -1
    level[s] = 0
    queue[0] = s
    lo, hi = 0, 1
    while lo < hi:
        u = queue[lo]
        lo += 1
        for a in range(first[u], first[u + 1]):
            v = adj_head[a]
            if level[v] < 0 and res[a] > eps:
                level[v] = level[u] + 1
                queue[hi] = v
                hi += 1
    return level[t] >= 0


@numba.njit(cache=True)
def _dinic(n, first, adj_head, adj_rev, res, s, t, eps):
    level = np.empty(n, np.int64)
    queue = np.empty(n, np.int64)
    it = np.empty(n, np.int64)
    path = np.empty(n, np.int64)  # arc indices along the current path
    total = 0.0
    while _bfs(first, adj_head, res, s, t, level, queue, eps):
        it[:] = first[:n]
        depth = 0
        u = s
        while True:
            if u == t:
                push = np.inf
                for d in range(depth):
                    if res[path[d]] < push:
                        push = res[path[d]]
                cut = depth
                for d in range(depth):
                    a = path[d]
                    res[a] -= push
                    res[adj_rev[a]] += push
                    if cut == depth and res[a] <= eps:
                        cut = d
                total += push
                depth = cut
                u = s if depth == 0 else adj_head[path[depth - 1]]
                continue
            advanced = False
            while it[u] < first[u + 1]:
                a = it[u]
                v = adj_head[a]
                if res[a] > eps and level[v] == level[u] + 1:
                    path[depth] = a
                    depth += 1
                    u = v
                    advanced = True
                    break
                it[u] += 1
            if not advanced:
                if u == s:
                    break
                level[u] = -1
                depth -= 1
                a = path[depth]
                it[adj_head[adj_rev[a]]] += 1
                u = adj_head[adj_rev[a]]
    # source side of the min cut
    _bfs(first, adj_head, res, s, t, level, queue, eps)
    return total, level >= 0


def max_flow(network: FlowNetwork) -> tuple[float, np.ndarray]:
    """Maximum s-t flow and the source side of a minimum cut (boolean per node)."""
    n = int(network.num_nodes)
    m = len(network.tails)
    tails = np.concatenate([network.tails, network.heads])
    heads = np.concatenate([network.heads, network.tails])
    caps = np.concatenate([network.capacities, np.zeros(m)])
    rev = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
    order = np.argsort(tails, kind="stable")
    pos = np.empty(2 * m, np.int64)
    pos[order] = np.arange(2 * m)
    first = np.zeros(n + 1, np.int64)
    np.add.at(first, tails + 1, 1)
    first = np.cumsum(first)
    scale = float(caps.max()) if m else 0.0
    eps = 1e-12 * max(scale, 1.0)
    value, side = _dinic(n, first, heads[order].astype(np.int64), pos[rev[order]].astype(np.int64),
                         caps[order].copy(), int(network.source), int(network.sink), eps)
    return float(value), side


@dataclass(frozen=True)
class MrfProblem:
    """Potts MRF over nodes 0..N-1 with (N, L) unaries and undirected edges."""

    unary: np.ndarray
    edges: np.ndarray
    smoothness: float = 1.0
    texels: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        unary = np.asarray(self.unary, dtype=np.float64)
        if unary.ndim != 2:
            raise ValueError("unary must be (nodes, labels)")
        if unary.shape[1] == 0:
            raise ValueError("label count must be positive")
        if not np.isfinite(unary).all() or (unary.size and unary.min() < 0):
            raise ValueError("unary costs must be finite and non-negative")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges) and (edges.min() < 0 or edges.max() >= len(unary)):
            raise ValueError("edge endpoint outside node range")
        if self.smoothness < 0:
            raise ValueError("smoothness weight must be non-negative")
        edges = edges[edges[:, 0] != edges[:, 1]]
        # one undirected edge per pair keeps the adjacency symmetric by construction
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        object.__setattr__(self, "unary", unary)
        object.__setattr__(self, "edges", edges)

    @property
    def num_labels(self) -> int:
        return self.unary.shape[1]

    def energy(self, labels: np.ndarray) -> float:
        labels = np.asarray(labels)
        data = self.unary[np.arange(len(labels)), labels].sum()
        e = self.edges
        return float(data + self.smoothness * np.count_nonzero(labels[e[:, 0]] != labels[e[:, 1]]))


def build_unary(observations, num_labels: int) -> np.ndarray:
    """Vote unaries (R, R, L) from (SegmentationMap, weight map) pairs.

    unary(t, l) = W(t) - sum of view weights voting l at t; unobserved texels are all zero.
    """
    if not observations:
        raise ValueError("at least one observation is required")
    res = observations[0][0].resolution
    votes = np.zeros((res, res, num_labels))
    for seg, weight in observations:
        if seg.resolution != res:
            raise ValueError(f"resolution mismatch: {seg.resolution} vs {res}")
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), (res, res))
        if w.shape != (res, res):
            raise ValueError("weight map must match the map resolution")
        if (w < 0).any():
            raise ValueError("weights must be non-negative")
        if seg.labels.max(initial=0) >= num_labels:
            raise ValueError("label index exceeds label count")
        obs = seg.mask & (w > 0)
        r, c = np.nonzero(obs)
        np.add.at(votes, (r, c, seg.labels[obs]), w[obs])
    total = votes.sum(2, keepdims=True)
    return np.maximum(total - votes, 0.0)


def _expansion_network(problem: MrfProblem, labels: np.ndarray, alpha: int) -> FlowNetwork:
    """Two-terminal graph for one alpha-expansion: sink side = switch to alpha."""
    n = len(labels)
    u = problem.unary
    idx = np.arange(n)
    cost0 = u[idx, labels].copy()
    cost1 = u[:, alpha].copy()
    lam = problem.smoothness
    p, q = problem.edges[:, 0], problem.edges[:, 1]
    fp, fq = labels[p], labels[q]
    a = lam * (fp != fq)
    b = lam * (fp != alpha)
    c = lam * (alpha != fq)
    # E(x_p, x_q) = A + (C-A) x_p + (D-C) x_q + (B+C-A-D)(1-x_p) x_q, with D = 0
    np.add.at(cost0, p, a)
    np.add.at(cost1, p, c)
    np.add.at(cost1, q, -c)
    pair = b + c - a
    shift = np.minimum(cost0, cost1)
    cost0 -= shift
    cost1 -= shift
    s, t = n, n + 1
    keep = pair > 0
    tails = np.concatenate([np.full(n, s), idx, p[keep]])
    heads = np.concatenate([idx, np.full(n, t), q[keep]])
    caps = np.concatenate([cost1, cost0, pair[keep]])
    return FlowNetwork(n + 2, tails, heads, caps, s, t)


def alpha_expansion(problem: MrfProblem, init: np.ndarray | None = None, max_cycles: int = 20) -> np.ndarray:
    """Expansion-move minimisation; each move accepted only on a strict energy decrease."""
    n, L = problem.unary.shape
    if L == 0:
        raise ValueError("label count must be positive")
    labels = np.argmin(problem.unary, axis=1) if init is None else np.asarray(init, dtype=np.int64).copy()
    if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= L)):
        raise ValueError("initial labeling invalid")
    energy = problem.energy(labels)
    for _ in range(max_cycles):
        improved = False
        for alpha in range(L):
            net = _expansion_network(problem, labels, alpha)
            _, source_side = max_flow(net)
            cand = np.where(source_side[:n], labels, alpha)
            e = problem.energy(cand)
            if e < energy - 1e-12 * max(1.0, abs(energy)):
                labels, energy = cand, e
                improved = True
        if not improved:
            break
    return labels


def discretize(scores: np.ndarray, mask: np.ndarray | None = None, palette=DEFAULT_PALETTE) -> SegmentationMap:
    """Per-texel argmax of (R, R, L) scores; ties go to the lowest label."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    labels = np.argmax(scores, axis=2)
    if mask is None:
        mask = np.ones(labels.shape, bool)
    return SegmentationMap(labels, mask, palette)


def stitch(observations, table: TexelTable, smoothness: float = 1.0, max_cycles: int = 20,
           palette=DEFAULT_PALETTE) -> SegmentationMap:
    """Fuse partial segmentation maps into a complete labeling of all valid texels."""
    L = len(palette)
    unary = build_unary(observations, L)
    if unary.shape[0] != table.resolution:
        raise ValueError("observations do not match the texel table resolution")
    valid = table.valid.ravel()
    texels = np.nonzero(valid)[0]
    node_of = np.full(valid.size, -1, np.int64)
    node_of[texels] = np.arange(len(texels))
    edges = node_of[table.adjacency_edges()]
    edges = edges[(edges >= 0).all(1)]
    problem = MrfProblem(unary.reshape(-1, L)[texels], edges, smoothness, texels)
    labels = alpha_expansion(problem, max_cycles=max_cycles)
    out = np.zeros(valid.size, np.int64)
    out[texels] = labels
    r = table.resolution
    return SegmentationMap(out.reshape(r, r), table.valid.copy(), palette)
