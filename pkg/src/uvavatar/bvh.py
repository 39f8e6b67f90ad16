"""Bounding-volume hierarchy over triangles: exact closest-point queries and ray casting."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAF_SIZE = 4


@dataclass(frozen=True, eq=False)
class Bvh:
    triangles: np.ndarray  # (M, 3, 3)
    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray  # -1 marks a leaf
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray  # primitive indices in leaf order


def build_bvh(vertices: np.ndarray, faces: np.ndarray) -> Bvh:
    tris = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64)[np.asarray(faces)])
    if len(tris) == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    centroids = tris.mean(axis=1)
    tmin = tris.min(axis=1)
    tmax = tris.max(axis=1)

    bmin, bmax, left, right, start, count = [], [], [], [], [], []
    order = np.arange(len(tris))

    def node(lo, hi):
        idx = len(bmin)
        prims = order[lo:hi]
        bmin.append(tmin[prims].min(0))
        bmax.append(tmax[prims].max(0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        return idx

    root = node(0, len(tris))
    stack = [(root, 0, len(tris))]
    while stack:
        idx, lo, hi = stack.pop()
        if hi - lo <= LEAF_SIZE:
            continue
        prims = order[lo:hi]
        c = centroids[prims]
        axis = int(np.argmax(c.max(0) - c.min(0)))
        # stable sort keeps the build deterministic for coincident centroids
        order[lo:hi] = prims[np.argsort(c[:, axis], kind="stable")]
        mid = (lo + hi) // 2
        a = node(lo, mid)
        b = node(mid, hi)
        left[idx], right[idx] = a, b
        count[idx] = 0
        stack.append((a, lo, mid))
        stack.append((b, mid, hi))

    return Bvh(
        triangles=tris,
        bmin=np.array(bmin),
        bmax=np.array(bmax),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        order=order.astype(np.int64),
    )


@numba.njit(cache=True)
def _refit(tris, left, right, start, count, order, bmin, bmax):
    # children always have larger indices than their parent
    for n in range(left.shape[0] - 1, -1, -1):
        if left[n] < 0:
            for c in range(3):
                lo = np.inf
                hi = -np.inf
                for k in range(start[n], start[n] + count[n]):
                    for v in range(3):
                        x = tris[order[k], v, c]
                        lo = min(lo, x)
                        hi = max(hi, x)
                bmin[n, c] = lo
                bmax[n, c] = hi
        else:
            for c in range(3):
                bmin[n, c] = min(bmin[left[n], c], bmin[right[n], c])
                bmax[n, c] = max(bmax[left[n], c], bmax[right[n], c])


def refit_bvh(bvh: Bvh, vertices: np.ndarray, faces: np.ndarray) -> Bvh:
    """Same hierarchy over moved vertices (same faces); cheaper than a rebuild for small motions."""
    tris = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64)[np.asarray(faces)])
    if tris.shape != bvh.triangles.shape:
        raise ValueError("refit needs the same face set the hierarchy was built on")
    bmin = np.empty_like(bvh.bmin)
    bmax = np.empty_like(bvh.bmax)
    _refit(tris, bvh.left, bvh.right, bvh.start, bvh.count, bvh.order, bmin, bmax)
    return Bvh(tris, bmin, bmax, bvh.left, bvh.right, bvh.start, bvh.count, bvh.order)


@numba.njit(cache=True, error_model="numpy")
def _closest_on_triangle(p, a, b, c):
    """Closest point on triangle abc to p; returns barycentrics (wa, wb, wc)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3) if d1 != d3 else 0.0
        return 1.0 - v, v, 0.0
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6) if d2 != d6 else 0.0
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        den = (d4 - d3) + (d5 - d6)
        w = (d4 - d3) / den if den != 0.0 else 0.0
        return 0.0, 1.0 - w, w
    if va + vb + vc == 0.0:
        return 1.0, 0.0, 0.0
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@numba.njit(cache=True, error_model="numpy")
def _point_tri_sqdist(p, tri):
    wa, wb, wc = _closest_on_triangle(p, tri[0], tri[1], tri[2])
    q = wa * tri[0] + wb * tri[1] + wc * tri[2]
    d = p - q
    return d @ d, wa, wb, wc


@numba.njit(cache=True, error_model="numpy")
def _closest_brute(tris, points, out_d2, out_face, out_bary):
    for i in range(points.shape[0]):
        p = points[i]
        best = np.inf
        bf = -1
        for f in range(tris.shape[0]):
            d2, wa, wb, wc = _point_tri_sqdist(p, tris[f])
            if d2 < best:
                best = d2
                bf = f
                out_bary[i, 0] = wa
                out_bary[i, 1] = wb
                out_bary[i, 2] = wc
        out_d2[i] = best
        out_face[i] = bf


@numba.njit(cache=True, error_model="numpy")
def _box_sqdist(p, lo, hi):
    s = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            s += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            s += (p[k] - hi[k]) ** 2
    return s


@numba.njit(cache=True, error_model="numpy")
def _closest_bvh(tris, bmin, bmax, left, right, start, count, order, points, out_d2, out_face, out_bary):
    stack = np.empty(128, dtype=np.int64)
    for i in range(points.shape[0]):
        p = points[i]
        best = np.inf
        bf = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            n = stack[sp]
            # slack keeps equal-distance faces reachable despite rounding in the box test
            if _box_sqdist(p, bmin[n], bmax[n]) > best * (1.0 + 1e-9):
                continue
            if left[n] < 0:
                for k in range(start[n], start[n] + count[n]):
                    f = order[k]
                    d2, wa, wb, wc = _point_tri_sqdist(p, tris[f])
                    # lowest face index wins ties, matching the exhaustive scan
                    if d2 < best or (d2 == best and f < bf):
                        best = d2
                        bf = f
                        out_bary[i, 0] = wa
                        out_bary[i, 1] = wb
                        out_bary[i, 2] = wc
            else:
                a = left[n]
                b = right[n]
                da = _box_sqdist(p, bmin[a], bmax[a])
                db = _box_sqdist(p, bmin[b], bmax[b])
                if da < db:
                    stack[sp] = b
                    stack[sp + 1] = a
                else:
                    stack[sp] = a
                    stack[sp + 1] = b
                sp += 2
        out_d2[i] = best
        out_face[i] = bf


@numba.njit(cache=True, error_model="numpy")
def _ray_triangle(o, d, a, b, c):
    e1 = b - a
    e2 = c - a
    pv = np.cross(d, e2)
    det = e1 @ pv
    if abs(det) < 1e-14:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tv = o - a
    u = (tv @ pv) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qv = np.cross(tv, e1)
    v = (d @ qv) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2 @ qv) * inv
    return t, u, v


@numba.njit(cache=True, error_model="numpy")
def _ray_box(o, inv_d, lo, hi, tmax):
    t0 = 0.0
    t1 = tmax
    for k in range(3):
        ta = (lo[k] - o[k]) * inv_d[k]
        tb = (hi[k] - o[k]) * inv_d[k]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True, error_model="numpy")
def _cast(tris, bmin, bmax, left, right, start, count, order, origins, dirs, tmin, out_t, out_face, out_bary):
    stack = np.empty(128, dtype=np.int64)
    for i in range(origins.shape[0]):
        o = origins[i]
        d = dirs[i]
        inv_d = np.empty(3)
        for k in range(3):
            inv_d[k] = 1.0 / d[k] if d[k] != 0.0 else 1e300
        best = np.inf
        bf = -1
        bu = 0.0
        bv = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            n = stack[sp]
            if not _ray_box(o, inv_d, bmin[n], bmax[n], best):
                continue
            if left[n] < 0:
                for k in range(start[n], start[n] + count[n]):
                    f = order[k]
                    t, u, v = _ray_triangle(o, d, tris[f, 0], tris[f, 1], tris[f, 2])
                    if t > tmin and (t < best or (t == best and f < bf)):
                        best = t
                        bf = f
                        bu = u
                        bv = v
            else:
                stack[sp] = left[n]
                stack[sp + 1] = right[n]
                sp += 2
        out_t[i] = best
        out_face[i] = bf
        out_bary[i, 0] = 1.0 - bu - bv
        out_bary[i, 1] = bu
        out_bary[i, 2] = bv


def closest_points(bvh: Bvh, points: np.ndarray):
    """Exact nearest surface point for each query.

    Returns (distance, closest point, face index, barycentrics).
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    d2 = np.empty(len(pts))
    face = np.empty(len(pts), dtype=np.int64)
    bary = np.empty((len(pts), 3))
    _closest_bvh(bvh.triangles, bvh.bmin, bvh.bmax, bvh.left, bvh.right, bvh.start, bvh.count, bvh.order, pts, d2, face, bary)
    closest = np.einsum("pk,pkc->pc", bary, bvh.triangles[face])
    return np.sqrt(d2), closest, face, bary


def closest_points_brute(vertices: np.ndarray, faces: np.ndarray, points: np.ndarray):
    """Exhaustive per-triangle minimum; same return convention as :func:`closest_points`."""
    tris = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64)[np.asarray(faces)])
    if len(tris) == 0:
        raise ValueError("empty mesh")
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    d2 = np.empty(len(pts))
    face = np.empty(len(pts), dtype=np.int64)
    bary = np.empty((len(pts), 3))
    _closest_brute(tris, pts, d2, face, bary)
    closest = np.einsum("pk,pkc->pc", bary, tris[face])
    return np.sqrt(d2), closest, face, bary


def cast_rays(bvh: Bvh, origins: np.ndarray, directions: np.ndarray, tmin: float = 1e-9):
    """Nearest hit along each ray; misses report t = inf and face -1."""
    o = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(directions)).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    t = np.empty(len(d))
    face = np.empty(len(d), dtype=np.int64)
    bary = np.empty((len(d), 3))
    _cast(bvh.triangles, bvh.bmin, bvh.bmax, bvh.left, bvh.right, bvh.start, bvh.count, bvh.order, o, d, tmin, t, face, bary)
    return t, face, bary
