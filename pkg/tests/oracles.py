"""Brute-force reference implementations shared by the unit and acceptance tests."""
import itertools
from collections import deque

import numpy as np


def grid_edges(h, w):
    idx = np.arange(h * w).reshape(h, w)
    return np.concatenate([np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], 1),
                           np.stack([idx[:-1].ravel(), idx[1:].ravel()], 1)])


def exhaustive_potts(problem):
    n, L = problem.unary.shape
    labels = np.array(list(itertools.product(range(L), repeat=n)))
    e = problem.unary[np.arange(n), labels].sum(1)
    p, q = problem.edges.T
    e = e + problem.smoothness * (labels[:, p] != labels[:, q]).sum(1)
    return float(e.min())


def row_dp_potts(unary, h, w, lam):
    """Exact Potts minimum on an h x w grid by dynamic programming over whole rows."""
    L = unary.shape[1]
    states = np.array(list(itertools.product(range(L), repeat=w)))
    horiz = lam * (states[:, 1:] != states[:, :-1]).sum(1)
    best = None
    for r in range(h):
        row_cost = unary[r * w:(r + 1) * w][np.arange(w), states].sum(1) + horiz
        if best is None:
            best = row_cost
            continue
        # min over previous rows of best + lam * hamming distance, one column at a time
        t = best.reshape((L,) * w)
        for ax in range(w):
            t = np.minimum(t, t.min(axis=ax, keepdims=True) + lam)
        best = t.ravel() + row_cost
    return float(best.min())


def icm_energy(problem, iters=50):
    n, L = problem.unary.shape
    labels = problem.unary.argmin(1)
    nbrs = [[] for _ in range(n)]
    for p, q in problem.edges:
        nbrs[p].append(q)
        nbrs[q].append(p)
    for _ in range(iters):
        changed = False
        for i in range(n):
            cost = problem.unary[i] + problem.smoothness * np.array(
                [sum(labels[j] != l for j in nbrs[i]) for l in range(L)])
            best = int(cost.argmin())
            if cost[best] < cost[labels[i]]:
                labels[i] = best
                changed = True
        if not changed:
            break
    return problem.energy(labels)


def edmonds_karp(n, tails, heads, caps, s, t):
    cap = np.zeros((n, n))
    np.add.at(cap, (tails, heads), caps)
    flow = 0.0
    while True:
        parent = [-1] * n
        parent[s] = s
        dq = deque([s])
        while dq and parent[t] < 0:
            u = dq.popleft()
            for v in range(n):
                if parent[v] < 0 and cap[u, v] > 1e-12:
                    parent[v] = u
                    dq.append(v)
        if parent[t] < 0:
            return flow
        aug, v = np.inf, t
        while v != s:
            aug = min(aug, cap[parent[v], v])
            v = parent[v]
        v = t
        while v != s:
            cap[parent[v], v] -= aug
            cap[v, parent[v]] += aug
            v = parent[v]
        flow += aug


def dense_laplace(values, mask):
    """Harmonic fill on the 4-neighbour grid by a dense linear solve."""
    h, w = mask.shape
    n = h * w
    lap = np.zeros((n, n))
    for p, q in grid_edges(h, w):
        lap[p, p] += 1
        lap[q, q] += 1
        lap[p, q] -= 1
        lap[q, p] -= 1
    known = mask.ravel()
    unk = ~known
    rhs = -lap[np.ix_(unk, known)] @ values.ravel()[known]
    out = values.ravel().copy()
    out[unk] = np.linalg.solve(lap[np.ix_(unk, unk)], rhs)
    return out.reshape(h, w)


def reference_msssim(x, y):
    from scipy.signal import convolve2d

    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5**2))
    win = np.outer(g, g) / g.sum() ** 2
    c1, c2 = 0.01**2, 0.03**2
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
    weights = weights / weights.sum()
    vals = []
    for level in range(5):
        mx, my = convolve2d(x, win, "valid"), convolve2d(y, win, "valid")
        vx = convolve2d(x * x, win, "valid") - mx**2
        vy = convolve2d(y * y, win, "valid") - my**2
        cxy = convolve2d(x * y, win, "valid") - mx * my
        cs_map = (2 * cxy + c2) / (vx + vy + c2)
        if level == 4:
            vals.append((((2 * mx * my + c1) / (mx**2 + my**2 + c1)) * cs_map).mean())
        else:
            vals.append(cs_map.mean())
            h, w = x.shape
            x = x[: h // 2 * 2, : w // 2 * 2].reshape(h // 2, 2, w // 2, 2).mean((1, 3))
            y = y[: h // 2 * 2, : w // 2 * 2].reshape(h // 2, 2, w // 2, 2).mean((1, 3))
    return float(np.prod(np.maximum(vals, 0) ** weights))
