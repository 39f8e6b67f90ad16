"""The bridge between the body surface and UV map images."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .body_model import DEFAULT_OFFSET_CAP, BodyTemplate, Mesh
from .bvh import build_bvh, cast_rays
from .camera import Camera
from .maps import DEFAULT_PALETTE, DisplacementMap, IuvImage, SegmentationMap, TextureMap


@dataclass(frozen=True)
class Chart:
    """One UV chart; local IUV coordinates map to the atlas as ``offset + local * scale``.

    Scales may be negative (mirrored charts).
    """

    name: str
    joint: int
    offset: tuple[float, float]
    scale: tuple[float, float]

    def to_global(self, local: np.ndarray) -> np.ndarray:
        return np.asarray(self.offset) + np.asarray(local) * np.asarray(self.scale)

    def to_local(self, uv: np.ndarray) -> np.ndarray:
        return (np.asarray(uv) - np.asarray(self.offset)) / np.asarray(self.scale)


@dataclass(frozen=True, eq=False)
class UvAtlas:
    uv: np.ndarray  # (M, 3, 2) per-face, per-corner coordinates in [0, 1]^2
    face_chart: np.ndarray  # (M,)
    charts: tuple[Chart, ...]

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 3, 2)
        if uv.size and (uv.min() < 0 or uv.max() > 1):
            raise ValueError("UV coordinates must lie in [0, 1]^2")
        object.__setattr__(self, "uv", uv)
        fc = np.asarray(self.face_chart, dtype=np.int64).reshape(-1)
        if len(fc) != len(uv):
            raise ValueError("face_chart must have one entry per face")
        if fc.size and (fc.min() < 0 or fc.max() >= len(self.charts)):
            raise ValueError("face_chart references an unknown chart")
        object.__setattr__(self, "face_chart", fc)
        object.__setattr__(self, "charts", tuple(self.charts))

    @property
    def num_charts(self) -> int:
        return len(self.charts)

    @property
    def num_faces(self) -> int:
        return len(self.uv)


def _edge_value(p, q, x, y):
    """Edge function of the canonically ordered segment, evaluated at (x, y).

    Shared edges are evaluated identically by both adjacent faces, so ties and signs
    agree exactly; the caller flips the sign to its own orientation.
    """
    return (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0])


def rasterize(uv: np.ndarray, resolution: int):
    """Assign texel centers to UV triangles with a half-open (top-left) rule.

    Texel (row, col) has center ((col + 0.5) / R, (row + 0.5) / R); rows follow v downward.
    Returns (face index map, barycentric map); raises on overlapping faces.
    """
    r = resolution
    face_map = np.full((r, r), -1, dtype=np.int64)
    bary_map = np.zeros((r, r, 3))
    collisions = []
    pts = np.asarray(uv, dtype=np.float64) * r  # power-of-two scaling is exact
    for f, tri in enumerate(pts):
        lo = np.floor(tri.min(0) - 0.5).astype(int)
        hi = np.ceil(tri.max(0) - 0.5).astype(int)
        c0, r0 = max(lo[0], 0), max(lo[1], 0)
        c1, r1 = min(hi[0], r - 1), min(hi[1], r - 1)
        if c1 < c0 or r1 < r0:
            continue
        xs = np.arange(c0, c1 + 1) + 0.5
        ys = np.arange(r0, r1 + 1) + 0.5
        x, y = np.meshgrid(xs, ys)
        a, b, c = (tuple(v) for v in tri)
        edges = [(b, c), (c, a), (a, b)]  # opposite corners 0, 1, 2
        ws = []
        area_sign = 0.0
        for p, q in edges:
            if p > q:
                w = -_edge_value(q, p, x, y)
            else:
                w = _edge_value(p, q, x, y)
            ws.append(w)
        area = _edge_value(a, b, c[0], c[1])
        if area == 0:
            continue
        area_sign = 1.0 if area > 0 else -1.0
        inside = np.ones_like(x, dtype=bool)
        for (p, q), w in zip(edges, ws):
            # orient every edge so the interior is positive
            w *= area_sign
            if area_sign > 0:
                dx, dy = q[0] - p[0], q[1] - p[1]
            else:
                dx, dy = p[0] - q[0], p[1] - q[1]
            top_left = dy < 0 or (dy == 0 and dx > 0)
            inside &= (w > 0) | ((w == 0) & top_left)
        if not inside.any():
            continue
        rows, cols = np.nonzero(inside)
        rows = rows + r0
        cols = cols + c0
        taken = face_map[rows, cols]
        if (taken >= 0).any():
            for other in np.unique(taken[taken >= 0]):
                collisions.append((int(other), f))
            continue
        wsum = ws[0] + ws[1] + ws[2]
        bary = np.stack([w / wsum for w in ws], axis=-1)[inside]
        face_map[rows, cols] = f
        bary_map[rows, cols] = bary
    if collisions:
        shown = ", ".join(f"{a}/{b}" for a, b in collisions[:20])
        raise ValueError(f"overlapping UV charts: faces {shown}" + (" ..." if len(collisions) > 20 else ""))
    return face_map, bary_map


@dataclass(frozen=True, eq=False)
class TexelTable:
    """Per-texel surface lookup at a fixed resolution.

    ``face`` is -1 for texels outside every chart. ``symmetry`` holds the flat index of the
    mirrored texel or -1. ``seam_links`` are undirected (E, 2) flat-index pairs joining texels
    that are surface neighbours across a chart cut.
    """

    resolution: int
    face: np.ndarray
    bary: np.ndarray
    points: np.ndarray  # rest-pose surface position per texel
    chart: np.ndarray
    symmetry: np.ndarray
    seam_links: np.ndarray
    num_vertices: int
    faces: np.ndarray  # template faces, kept for surface evaluation

    @property
    def valid(self) -> np.ndarray:
        return self.face >= 0

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())

    def surface_points(self, vertices: np.ndarray) -> np.ndarray:
        """Surface position of every valid texel for a (posed) vertex array; zeros elsewhere."""
        out = np.zeros((self.resolution, self.resolution, 3))
        v = self.valid
        tri = np.asarray(vertices)[self.faces[self.face[v]]]
        out[v] = np.einsum("tk,tkc->tc", self.bary[v], tri)
        return out

    def grid_edges(self) -> np.ndarray:
        """4-neighbour pairs of valid texels as flat indices."""
        r = self.resolution
        v = self.valid
        idx = np.arange(r * r).reshape(r, r)
        horiz = v[:, :-1] & v[:, 1:]
        vert = v[:-1, :] & v[1:, :]
        e1 = np.stack([idx[:, :-1][horiz], idx[:, 1:][horiz]], 1)
        e2 = np.stack([idx[:-1, :][vert], idx[1:, :][vert]], 1)
        return np.concatenate([e1, e2])

    def adjacency_edges(self) -> np.ndarray:
        return np.concatenate([self.grid_edges(), self.seam_links.reshape(-1, 2)])

    @cached_property
    def vertex_owner(self) -> np.ndarray:
        """Flat texel index owning each vertex (largest barycentric weight), -1 if none."""
        v = self.valid.ravel()
        tex = np.nonzero(v)[0]
        corners = self.faces[self.face.ravel()[tex]]  # (T, 3)
        w = self.bary.reshape(-1, 3)[tex]
        vert = corners.ravel()
        weight = w.ravel()
        texel = np.repeat(tex, 3)
        order = np.lexsort((texel, -weight, vert))
        vert_sorted = vert[order]
        first = np.ones(len(order), bool)
        first[1:] = vert_sorted[1:] != vert_sorted[:-1]
        owner = np.full(self.num_vertices, -1, dtype=np.int64)
        owner[vert_sorted[first]] = texel[order][first]
        return owner


def _mirror_faces(faces: np.ndarray, symmetry: np.ndarray):
    """Mirror face index and corner permutation per face, or -1 where none exists."""
    lookup = {tuple(sorted(f)): i for i, f in enumerate(faces.tolist())}
    mirror = np.full(len(faces), -1, dtype=np.int64)
    corner = np.zeros((len(faces), 3), dtype=np.int64)
    for i, f in enumerate(faces.tolist()):
        mf = [int(symmetry[v]) for v in f]
        j = lookup.get(tuple(sorted(mf)))
        if j is None:
            continue
        target = faces[j].tolist()
        try:
            corner[i] = [target.index(v) for v in mf]
        except ValueError:
            continue
        mirror[i] = j
    return mirror, corner


def _texel_symmetry(atlas, faces, symmetry, face_map, bary_map):
    r = face_map.shape[0]
    sym = np.full(r * r, -1, dtype=np.int64)
    if symmetry is None:
        return sym
    mirror, corner = _mirror_faces(faces, symmetry)
    flat_face = face_map.ravel()
    tex = np.nonzero(flat_face >= 0)[0]
    f = flat_face[tex]
    mf = mirror[f]
    ok = mf >= 0
    tex, f, mf = tex[ok], f[ok], mf[ok]
    b = bary_map.reshape(-1, 3)[tex]
    # corner k of f maps to corner corner[f, k] of the mirror face
    uv_m = atlas.uv[mf[:, None], corner[f]]  # (T, 3, 2)
    uv = np.einsum("tk,tkc->tc", b, uv_m)
    col = np.clip(np.floor(uv[:, 0] * r).astype(np.int64), 0, r - 1)
    row = np.clip(np.floor(uv[:, 1] * r).astype(np.int64), 0, r - 1)
    target = row * r + col
    target[flat_face[target] < 0] = -1
    sym[tex] = target
    # keep only pairs that map back onto themselves
    valid = sym >= 0
    back = np.full_like(sym, -1)
    back[valid] = sym[sym[valid]]
    sym[back != np.arange(r * r)] = -1
    return sym


def _seam_links(face_map, points, chart, chart_joint):
    r = face_map.shape[0]
    valid = face_map >= 0
    padded = np.pad(valid, 1)
    boundary = valid & ~(padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    # world-space footprint: distance to the farthest valid 4-neighbour
    foot = np.zeros((r, r))
    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb_valid = np.zeros_like(valid)
        shifted = np.zeros_like(points)
        src_r = slice(max(dr, 0), r + min(dr, 0))
        dst_r = slice(max(-dr, 0), r + min(-dr, 0))
        src_c = slice(max(dc, 0), r + min(dc, 0))
        dst_c = slice(max(-dc, 0), r + min(-dc, 0))
        nb_valid[dst_r, dst_c] = valid[src_r, src_c]
        shifted[dst_r, dst_c] = points[src_r, src_c]
        d = np.linalg.norm(points - shifted, axis=-1)
        foot = np.where(valid & nb_valid, np.maximum(foot, d), foot)

    bidx = np.nonzero(boundary.ravel())[0]
    if len(bidx) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    bpts = points.reshape(-1, 3)[bidx]
    bfoot = foot.ravel()[bidx]
    bjoint = chart_joint[chart.ravel()[bidx]]
    brow, bcol = np.divmod(bidx, r)
    tree = cKDTree(bpts)
    radius = 1.5 * bfoot.max()
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    i, j = pairs[:, 0], pairs[:, 1]
    d = np.linalg.norm(bpts[i] - bpts[j], axis=1)
    uvdist = np.hypot(brow[i] - brow[j], bcol[i] - bcol[j])
    keep = (bjoint[i] == bjoint[j]) & (uvdist > 2.0) & (d <= 1.5 * np.maximum(bfoot[i], bfoot[j]))
    i, j, d = i[keep], j[keep], d[keep]
    # nearest partner per boundary texel, then symmetrize
    best = np.full(len(bidx), np.inf)
    partner = np.full(len(bidx), -1)
    for a, b in ((i, j), (j, i)):
        order = np.lexsort((b, d, a))
        a_s, b_s, d_s = a[order], b[order], d[order]
        first = np.ones(len(a_s), bool)
        first[1:] = a_s[1:] != a_s[:-1]
        upd = d_s[first] < best[a_s[first]]
        best[a_s[first][upd]] = d_s[first][upd]
        partner[a_s[first][upd]] = b_s[first][upd]
    has = np.nonzero(partner >= 0)[0]
    links = np.stack([bidx[has], bidx[partner[has]]], 1)
    links = np.sort(links, axis=1)
    return np.unique(links, axis=0)


def build_texel_table(atlas: UvAtlas, template: BodyTemplate, resolution: int) -> TexelTable:
    if resolution < 8:
        raise ValueError("texel table resolution must be at least 8")
    if atlas.num_faces != len(template.faces):
        raise ValueError("atlas and template disagree on the face count")
    r = resolution
    face_map, bary_map = rasterize(atlas.uv, r)
    valid = face_map >= 0
    points = np.zeros((r, r, 3))
    tri = template.vertices[template.faces[face_map[valid]]]
    points[valid] = np.einsum("tk,tkc->tc", bary_map[valid], tri)
    chart = np.full((r, r), -1, dtype=np.int64)
    chart[valid] = atlas.face_chart[face_map[valid]]
    sym = _texel_symmetry(atlas, template.faces, template.symmetry, face_map, bary_map)
    joints = np.array([c.joint for c in atlas.charts], dtype=np.int64) if atlas.charts else np.zeros(0, np.int64)
    links = _seam_links(face_map, points, chart, joints) if valid.any() else np.zeros((0, 2), np.int64)
    return TexelTable(
        resolution=r,
        face=face_map,
        bary=bary_map,
        points=points,
        chart=chart,
        symmetry=sym.reshape(r, r),
        seam_links=links,
        num_vertices=template.num_vertices,
        faces=template.faces,
    )


def bake_displacement(offsets: np.ndarray, table: TexelTable, cap: float = DEFAULT_OFFSET_CAP) -> DisplacementMap:
    """Store per-vertex offsets as a displacement map by barycentric interpolation."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (table.num_vertices, 3):
        raise ValueError(f"offsets must be ({table.num_vertices}, 3), got {offsets.shape}")
    norms = np.linalg.norm(offsets, axis=1)
    if (norms > cap).any():
        raise ValueError(f"{int((norms > cap).sum())} vertex offsets exceed the cap of {cap} m")
    scale = max(float(np.abs(offsets).max(initial=0.0)), cap)
    values = table.surface_points(offsets)
    return DisplacementMap.encode(values, table.valid.copy(), scale)


def apply_displacement(dmap: DisplacementMap, table: TexelTable):
    """Per-vertex offsets read at each vertex's owning texel.

    Returns (offsets (N, 3), coverage ratio). Vertices without a covered texel get zero.
    """
    if dmap.resolution != table.resolution:
        raise ValueError("displacement map resolution does not match the texel table")
    owner = table.vertex_owner
    decoded = dmap.decode().reshape(-1, 3)
    covered = owner >= 0
    covered[covered] &= dmap.mask.ravel()[owner[covered]]
    offsets = np.zeros((table.num_vertices, 3))
    offsets[covered] = decoded[owner[covered]]
    return offsets, float(covered.mean()) if len(covered) else 0.0


def _nearest_valid(valid: np.ndarray):
    """Flat index of the nearest valid texel and the distance to it, per texel."""
    r = valid.shape[0]
    dist, (ri, ci) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return ri * r + ci, dist


def _splat_targets(iuv: IuvImage, atlas: UvAtlas, resolution: int, table: TexelTable | None):
    part = iuv.part.astype(np.int64)
    if part.max(initial=0) > atlas.num_charts:
        bad = sorted(set(np.unique(part[part > atlas.num_charts]).tolist()))
        raise ValueError(f"unknown IUV part index {bad} (atlas has {atlas.num_charts} charts)")
    pix = np.nonzero(part.ravel() > 0)[0]
    chart_idx = part.ravel()[pix] - 1
    local = iuv.uv.reshape(-1, 2)[pix]
    offset = np.array([c.offset for c in atlas.charts]).reshape(-1, 2)
    scale = np.array([c.scale for c in atlas.charts]).reshape(-1, 2)
    glob = offset[chart_idx] + local * scale[chart_idx]
    r = resolution
    col = np.clip(np.floor(glob[:, 0] * r).astype(np.int64), 0, r - 1)
    row = np.clip(np.floor(glob[:, 1] * r).astype(np.int64), 0, r - 1)
    target = row * r + col
    if table is not None:
        if table.resolution != r:
            raise ValueError("texel table resolution does not match the requested map resolution")
        nearest, dist = _nearest_valid(table.valid)
        # off-surface texels snap to a surface texel at most two texels away
        target_dist = dist.ravel()[target]
        keep = target_dist <= 2.0
        pix, target = pix[keep], nearest.ravel()[target[keep]]
    return pix, target


def extract_partial_texture(image, iuv: IuvImage, atlas: UvAtlas, resolution: int = 256, table: TexelTable | None = None) -> TextureMap:
    """Remap image pixels into UV space; texels hit by several pixels average their colors."""
    image = np.asarray(image)
    if image.shape[:2] != iuv.shape:
        raise ValueError(f"image {image.shape[:2]} and IUV {iuv.shape} sizes differ")
    pix, target = _splat_targets(iuv, atlas, resolution, table)
    r = resolution
    colors = image.reshape(-1, image.shape[-1])[pix, :3].astype(np.float64)
    sums = np.zeros((r * r, 3))
    counts = np.zeros(r * r)
    np.add.at(sums, target, colors)
    np.add.at(counts, target, 1.0)
    mask = counts > 0
    rgb = np.zeros((r * r, 3), np.uint8)
    rgb[mask] = np.clip(np.rint(sums[mask] / counts[mask, None]), 0, 255).astype(np.uint8)
    return TextureMap(rgb.reshape(r, r, 3), mask.reshape(r, r))


def extract_partial_segmentation(
    seg_image, iuv: IuvImage, atlas: UvAtlas, resolution: int = 256, palette=DEFAULT_PALETTE, table: TexelTable | None = None
) -> SegmentationMap:
    """Majority vote of pixel labels per texel; ties go to the lowest label index."""
    seg_image = np.asarray(seg_image)
    if seg_image.shape[:2] != iuv.shape:
        raise ValueError(f"segmentation {seg_image.shape[:2]} and IUV {iuv.shape} sizes differ")
    pix, target = _splat_targets(iuv, atlas, resolution, table)
    labels = seg_image.ravel()[pix].astype(np.int64)
    n_labels = len(palette)
    if labels.size and (labels.min() < 0 or labels.max() >= n_labels):
        raise ValueError(f"segmentation label outside palette of size {n_labels}")
    r = resolution
    votes = np.zeros((r * r, n_labels), dtype=np.int64)
    np.add.at(votes, (target, labels), 1)
    mask = votes.sum(1) > 0
    winner = np.argmax(votes, axis=1)  # first maximum = lowest label
    winner[~mask] = 0
    return SegmentationMap(winner.reshape(r, r), mask.reshape(r, r), palette)


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = np.asarray(vertices)[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def backproject_view_to_uv(mesh: Mesh, camera: Camera, label_image, table: TexelTable, palette=DEFAULT_PALETTE, bvh=None):
    """Project one labelled view back into UV space.

    Returns the partial segmentation and a per-texel weight (cosine between the surface
    normal and the direction to the camera, clamped at zero).
    """
    label_image = np.asarray(label_image)
    h, w = label_image.shape[:2]
    r = table.resolution
    bvh = build_bvh(mesh.vertices, mesh.faces) if bvh is None else bvh
    valid = table.valid
    pts = table.surface_points(mesh.vertices)[valid]
    normals = face_normals(mesh.vertices, mesh.faces)[table.face[valid]]
    center = camera.center
    to_cam = center - pts
    dist = np.linalg.norm(to_cam, axis=1)
    cos = np.einsum("tc,tc->t", normals, to_cam) / np.where(dist > 0, dist, 1.0)

    t_hit, f_hit, _ = cast_rays(bvh, center, -to_cam / dist[:, None], tmin=0.0)
    own_face = table.face[valid]
    # visible unless something lies strictly in front; a miss (ray grazing a shared edge) has no occluder
    visible = (f_hit == own_face) | (t_hit >= dist - (1e-6 + 1e-9 * dist))

    px, in_front = camera.project(pts)
    col = np.rint(px[:, 0]).astype(np.int64)
    row = np.rint(px[:, 1]).astype(np.int64)
    inside = in_front & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    ok = visible & inside & (cos > 0)

    labels = np.zeros(len(pts), dtype=np.int64)
    labels[ok] = label_image[row[ok], col[ok]]
    if labels.size and labels.max() >= len(palette):
        raise ValueError("label image contains indices outside the palette")
    mask = np.zeros((r, r), bool)
    mask[valid] = ok
    lab = np.zeros((r, r), np.int64)
    lab[valid] = labels
    weight = np.zeros((r, r))
    weight[valid] = np.where(ok, np.clip(cos, 0.0, None), 0.0)
    return SegmentationMap(lab, mask, palette), weight


def sample_texture(texture: TextureMap, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup restricted to valid texels (weights renormalized over valid taps).

    Points with no valid tap fall back to the nearest valid texel. Returns float colors.
    """
    r = texture.resolution
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    x = uv[:, 0] * r - 0.5
    y = uv[:, 1] * r - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    rgb = texture.rgb.astype(np.float64)
    acc = np.zeros((len(uv), 3))
    wsum = np.zeros(len(uv))
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yy = y0 + dy
        xx = x0 + dx
        inb = (yy >= 0) & (yy < r) & (xx >= 0) & (xx < r)
        yy_c = np.clip(yy, 0, r - 1)
        xx_c = np.clip(xx, 0, r - 1)
        ok = inb & texture.mask[yy_c, xx_c]
        wt = np.where(ok, wt, 0.0)
        acc += wt[:, None] * rgb[yy_c, xx_c]
        wsum += wt
    out = np.zeros((len(uv), 3))
    has = wsum > 1e-12
    out[has] = acc[has] / wsum[has, None]
    if (~has).any() and texture.mask.any():
        nearest, _ = _nearest_valid(texture.mask)
        col = np.clip(np.floor(uv[~has, 0] * r).astype(np.int64), 0, r - 1)
        row = np.clip(np.floor(uv[~has, 1] * r).astype(np.int64), 0, r - 1)
        out[~has] = rgb.reshape(-1, 3)[nearest[row, col]]
    return out
