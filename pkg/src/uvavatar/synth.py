"""Procedural humanoids, textures, scans and a ray-cast renderer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_model import DEFAULT_OFFSET_CAP, BodyTemplate, Mesh
from .bvh import build_bvh, cast_rays
from .camera import Camera
from .maps import DEFAULT_PALETTE, DisplacementMap, IuvImage, SegmentationMap, TextureMap
from .registration import Scan
from .uv_atlas import Chart, TexelTable, UvAtlas, sample_texture

# layout grid: vertex UVs sit on texel centers of this resolution
ATLAS_GRID = 512
_EPS = 1e-9

JOINT_NAMES_16 = (
    "pelvis", "spine", "chest", "head",
    "l_upperarm", "l_forearm", "l_hand",
    "r_upperarm", "r_forearm", "r_hand",
    "l_thigh", "l_shin", "l_foot",
    "r_thigh", "r_shin", "r_foot",
)
PARENTS_16 = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)
LIMB_CHAINS = {
    "l_arm": ("l_upperarm", "l_forearm", "l_hand"),
    "r_arm": ("r_upperarm", "r_forearm", "r_hand"),
    "l_leg": ("l_thigh", "l_shin", "l_foot"),
    "r_leg": ("r_thigh", "r_shin", "r_foot"),
}


@dataclass(frozen=True)
class PartSpec:
    """One capsule: axis from ``start`` to ``end``; radii along the two frame axes.

    The joint sits at the centroid of the ring through ``start``.
    """

    joint: str
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radii: tuple[float, float]
    center: bool  # lies on the sagittal plane and is split into left/right charts


def _default_parts():
    # adjacent parts differ in radius so overlapping surfaces stay centimeters apart
    return (
        PartSpec("pelvis", (0, 0.84, 0), (0, 1.02, 0), (0.10, 0.15), True),
        PartSpec("spine", (0, 1.02, 0), (0, 1.22, 0), (0.075, 0.11), True),
        PartSpec("chest", (0, 1.22, 0), (0, 1.46, 0), (0.10, 0.16), True),
        PartSpec("head", (0, 1.50, 0), (0, 1.64, 0), (0.095, 0.085), True),
        PartSpec("l_upperarm", (0.20, 1.40, 0), (0.45, 1.40, 0), (0.05, 0.05), False),
        PartSpec("l_forearm", (0.45, 1.40, 0), (0.68, 1.40, 0), (0.035, 0.035), False),
        PartSpec("l_hand", (0.70, 1.40, 0), (0.80, 1.40, 0), (0.042, 0.018), False),
        PartSpec("l_thigh", (0.09, 0.84, 0), (0.09, 0.48, 0), (0.07, 0.07), False),
        PartSpec("l_shin", (0.09, 0.48, 0), (0.09, 0.09, 0), (0.048, 0.048), False),
        PartSpec("l_foot", (0.09, 0.06, -0.02), (0.09, 0.045, 0.16), (0.035, 0.045), False),
    )


def _chain_parts():
    return (
        PartSpec("root", (0, 0.0, 0), (0, 0.5, 0), (0.08, 0.10), True),
        PartSpec("link", (0, 0.5, 0), (0, 1.0, 0), (0.07, 0.09), True),
    )


@dataclass(frozen=True)
class HumanoidSpec:
    """Procedural humanoid parameters.

    ``joint_count`` is 16 (full body) or 2 (a vertical two-bone chain for hand-checkable rigs).
    ``texels_per_step`` is the UV spacing between neighbouring vertices on the 512 grid; it
    must be even so pole fans land on texel centers.
    """

    joint_count: int = 16
    around: int = 16
    ring_spacing: float = 0.04
    cap_rings: int = 2
    cap_ratio: float = 0.5  # cap length as a fraction of the smaller radius
    texels_per_step: int = 4
    gutter: int = 4
    scale: float = 1.0
    pose_blendshapes: bool = False
    seed: int = 0
    parts: tuple[PartSpec, ...] | None = None

    def resolved_parts(self) -> tuple[PartSpec, ...]:
        if self.parts is not None:
            return self.parts
        if self.joint_count == 16:
            return _default_parts()
        if self.joint_count == 2:
            return _chain_parts()
        raise ValueError("joint_count must be 16 or 2 unless explicit parts are given")

    def joint_layout(self):
        if self.parts is None and self.joint_count == 16:
            return JOINT_NAMES_16, PARENTS_16
        if self.parts is None and self.joint_count == 2:
            return ("root", "link"), (-1, 0)
        names = tuple(p.joint for p in self.parts)
        return names, tuple([-1] + list(range(len(names) - 1)))


def _mirror_name(name: str) -> str:
    if name.startswith("l_"):
        return "r_" + name[2:]
    return name


def _frame(d):
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ d) * d
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return e1, e2


class _Builder:
    def __init__(self):
        self.vertices: list[np.ndarray] = []
        self.vertex_part: list[int] = []
        self.axial: list[float] = []
        self.faces: list[tuple[int, int, int]] = []
        self.face_uv: list[np.ndarray] = []
        self.face_chart: list[int] = []
        self.fixed: list[bool] = []

    def add_vertex(self, p, part, axial, fixed):
        self.vertices.append(np.asarray(p, dtype=np.float64))
        self.vertex_part.append(part)
        self.axial.append(axial)
        self.fixed.append(fixed)
        return len(self.vertices) - 1


def _build_piece(b: _Builder, part: PartSpec, part_idx: int, hs: HumanoidSpec, chart: int):
    """Left-side piece of a part: full tube for limbs, the x >= 0 half for center parts.

    Returns the grid description needed for UV layout: per-face (col, row) grid coordinates.
    """
    a = np.asarray(part.start, dtype=np.float64) * hs.scale
    e = np.asarray(part.end, dtype=np.float64) * hs.scale
    length = np.linalg.norm(e - a)
    if length <= 0 or min(part.radii) <= 0:
        raise ValueError(f"degenerate proportions for part {part.joint}")
    d = (e - a) / length
    if part.center:
        e1, e2 = np.array([0.0, 0.0, 1.0]), np.cross(d, [0.0, 0.0, 1.0])
        if abs(d[0]) > 1e-12 or e2[0] <= 0:
            raise ValueError(f"center part {part.joint} must run along +y")
    else:
        e1, e2 = _frame(d)
    r1, r2 = (r * hs.scale for r in part.radii)
    cap = hs.cap_ratio * min(r1, r2)

    n_body = max(2, int(np.ceil(length / (hs.ring_spacing * hs.scale))) + 1)
    # rows: (axial position, radius factor); pole rows have factor 0
    rows = [(-cap, 0.0)]
    for k in range(hs.cap_rings, 0, -1):
        phi = np.pi / 2 * k / (hs.cap_rings + 1)
        rows.append((-cap * np.sin(phi), np.cos(phi)))
    pivot_row = len(rows)
    for t in np.linspace(0.0, length, n_body):
        rows.append((t, 1.0))
    for k in range(1, hs.cap_rings + 1):
        phi = np.pi / 2 * k / (hs.cap_rings + 1)
        rows.append((length + cap * np.sin(phi), np.cos(phi)))
    rows.append((length + cap, 0.0))

    n_seg = hs.around // 2 if part.center else hs.around
    span = np.pi if part.center else 2 * np.pi
    ids = np.empty((len(rows), n_seg + 1), dtype=np.int64)
    for r, (t, factor) in enumerate(rows):
        c = a + t * d
        if factor == 0.0:
            v = b.add_vertex(c, part_idx, t, part.center)
            ids[r, :] = v
            continue
        for i in range(n_seg + 1):
            if not part.center and i == n_seg:
                ids[r, i] = ids[r, 0]
                continue
            psi = span * i / n_seg
            on_plane = part.center and i in (0, n_seg)
            s = 0.0 if on_plane else np.sin(psi)
            p = c + factor * (r1 * np.cos(psi) * e1 + r2 * s * e2)
            if on_plane:
                p[0] = 0.0
            ids[r, i] = b.add_vertex(p, part_idx, t, on_plane)

    grid_faces = []
    last = len(rows) - 1
    for r in range(last):
        for i in range(n_seg):
            va, vb = ids[r, i], ids[r, i + 1]
            vc, vd = ids[r + 1, i + 1], ids[r + 1, i]
            ga, gb, gc, gd = (i, r), (i + 1, r), (i + 1, r + 1), (i, r + 1)
            if r == 0:
                grid_faces.append(((va, vc, vd), ((i + 0.5, 0), gc, gd)))
            elif r + 1 == last:
                grid_faces.append(((va, vb, vc), (ga, gb, (i + 0.5, last))))
            else:
                grid_faces.append(((va, vb, vc), (ga, gb, gc)))
                grid_faces.append(((va, vc, vd), (ga, gc, gd)))
    pivot_ring = np.unique(ids[pivot_row])
    return grid_faces, (n_seg, last), pivot_ring, (a, d, length, e1, e2, r1, r2)


def _grid_uv(g, grid_size, origin, k):
    """Grid coordinate to atlas UV on texel centers, with boundary points pushed outward."""
    col, row = g
    n_seg, last = grid_size
    x = origin[0] + col * k + 0.5
    y = origin[1] + row * k + 0.5
    u = x / ATLAS_GRID
    v = y / ATLAS_GRID
    if col == 0:
        u -= _EPS
    elif col == n_seg:
        u += _EPS
    if row <= 1:
        v -= _EPS  # pole row and the notch tips between pole fans
    elif row >= last - 1:
        v += _EPS
    return u, v


def _pack(sizes, gutter, half_width, height):
    """Shelf packing of (w, h) boxes into [gutter, half_width - gutter) x [gutter, height - gutter)."""
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i][1], i))
    origins = [None] * len(sizes)
    x = y = gutter
    shelf = 0
    for i in order:
        w, h = sizes[i]
        if x + w > half_width - gutter:
            x = gutter
            y += shelf + gutter
            shelf = 0
        if x + w > half_width - gutter or y + h > height - gutter:
            raise ValueError("UV layout does not fit; reduce ring density or texels_per_step")
        origins[i] = (x, y)
        x += w + gutter
        shelf = max(shelf, h)
    return origins


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def make_humanoid(hs: HumanoidSpec | None = None) -> tuple[BodyTemplate, UvAtlas]:
    """Capsule-limb humanoid with skinning, shape basis, symmetry and a non-overlapping UV atlas."""
    hs = hs or HumanoidSpec()
    if hs.texels_per_step % 2 or hs.texels_per_step < 2:
        raise ValueError("texels_per_step must be an even number >= 2")
    if hs.around % 2 or hs.around < 4:
        raise ValueError("around must be an even number >= 4")
    if hs.scale <= 0:
        raise ValueError("scale must be positive")
    parts = hs.resolved_parts()
    names, parents = hs.joint_layout()
    k = hs.texels_per_step

    b = _Builder()
    pieces = []
    for pi, part in enumerate(parts):
        faces, size, ring, geom = _build_piece(b, part, pi, hs, chart=len(pieces))
        pieces.append((part, faces, size, ring, geom))

    sizes = [(size[0] * k + 1, size[1] * k + 1) for _, _, size, _, _ in pieces]
    origins = _pack(sizes, hs.gutter, ATLAS_GRID // 2, ATLAS_GRID)

    n_left = len(b.vertices)
    left_vertices = np.array(b.vertices)
    fixed = np.array(b.fixed)
    mirror_of = np.empty(n_left, dtype=np.int64)
    extra = []
    for v in range(n_left):
        if fixed[v]:
            mirror_of[v] = v
        else:
            mirror_of[v] = n_left + len(extra)
            extra.append(v)
    extra = np.array(extra, dtype=np.int64)
    mirrored = left_vertices[extra] * np.array([-1.0, 1.0, 1.0])
    vertices = np.concatenate([left_vertices, mirrored])
    n = len(vertices)
    symmetry = np.empty(n, dtype=np.int64)
    symmetry[:n_left] = mirror_of
    symmetry[n_left:] = extra
    vertex_part = np.array(b.vertex_part)
    vertex_part = np.concatenate([vertex_part, vertex_part[extra]])
    vertex_side = np.concatenate([np.zeros(n_left, bool), np.ones(len(extra), bool)])

    joint_of = {name: j for j, name in enumerate(names)}
    faces, uvs, face_chart, charts = [], [], [], []
    left_charts = []
    for ci, (part, pfaces, size, _, _) in enumerate(pieces):
        origin = origins[ci]
        tag = "_l" if part.center else ""
        chart_faces = [f for f, _ in pfaces]
        chart_uv = [np.array([_grid_uv(g, size, origin, k) for g in gs]) for _, gs in pfaces]
        left_charts.append((part, chart_faces, chart_uv))
        faces += chart_faces
        uvs += chart_uv
        face_chart += [len(charts)] * len(chart_faces)
        allu = np.concatenate(chart_uv)
        lo, hi = allu.min(0), allu.max(0)
        charts.append(Chart(part.joint + tag, joint_of[part.joint], (float(lo[0]), float(lo[1])), (float(hi[0] - lo[0]), float(hi[1] - lo[1]))))
    for part, chart_faces, chart_uv in left_charts:
        tag = "_r" if part.center else ""
        mname = _mirror_name(part.joint)
        for f, uv in zip(chart_faces, chart_uv):
            fm = (mirror_of[f[0]], mirror_of[f[2]], mirror_of[f[1]])
            um = uv[[0, 2, 1]].copy()
            um[:, 0] = 1.0 - um[:, 0]
            faces.append(fm)
            uvs.append(um)
            face_chart.append(len(charts))
        left = next(c for c in charts if c.name == part.joint + ("_l" if part.center else ""))
        charts.append(Chart(mname + tag, joint_of[mname], (1.0 - left.offset[0], left.offset[1]), (-left.scale[0], left.scale[1])))
    faces = np.array(faces, dtype=np.int64)
    uvs = np.clip(np.array(uvs), 0.0, 1.0)

    # part index per vertex on the full body (right limbs map to their own joint)
    vjoint = np.empty(n, dtype=np.int64)
    for v in range(n):
        pname = parts[vertex_part[v]].joint
        vjoint[v] = joint_of[_mirror_name(pname) if vertex_side[v] else pname]

    # joint regressor: uniform over each part's pivot ring (mirrored for right parts)
    kj = len(names)
    regressor = np.zeros((kj, n))
    for part, _, _, ring, _ in pieces:
        regressor[joint_of[part.joint], ring] = 1.0 / len(ring)
        if not part.center:
            mring = mirror_of[ring]
            regressor[joint_of[_mirror_name(part.joint)], mring] = 1.0 / len(mring)

    # bone segments per joint, for distance-based skinning
    seg = {}
    for part, _, _, _, (a, d, length, *_r) in pieces:
        seg[part.joint] = (a, a + d * length)
        if not part.center:
            m = np.array([-1.0, 1.0, 1.0])
            seg[_mirror_name(part.joint)] = (a * m, (a + d * length) * m)
    parents_arr = np.array(parents, dtype=np.int64)
    children = {j: [c for c in range(kj) if parents_arr[c] == j] for j in range(kj)}
    weights = np.zeros((n, kj))
    falloff = 0.04 * hs.scale
    for j in range(kj):
        verts_j = np.nonzero(vjoint == j)[0]
        if not len(verts_j):
            continue
        cand = [j] + ([parents_arr[j]] if parents_arr[j] >= 0 else []) + children[j]
        p = vertices[verts_j]
        own = _segment_distance(p, *seg[names[j]])
        for c in cand:
            dist = _segment_distance(p, *seg[names[c]])
            weights[verts_j, c] = np.exp(-0.5 * ((dist - own) / falloff) ** 2) * (1.0 if c == j else 0.5)
    weights[weights < 1e-4] = 0.0
    weights /= weights.sum(1, keepdims=True)

    shape_basis = _shape_basis(vertices, vjoint, names, seg, hs)
    pose_basis = None
    if hs.pose_blendshapes:
        rng = np.random.default_rng(hs.seed)
        raw = rng.normal(scale=0.002 * hs.scale, size=(9 * (kj - 1), n, 3))
        # symmetrize so the mirrored template stays a fixed point of the basis
        pose_basis = 0.5 * (raw + raw[:, symmetry] * np.array([-1.0, 1.0, 1.0]))

    template = BodyTemplate(
        vertices=vertices,
        faces=faces,
        skin_weights=weights,
        joint_regressor=regressor,
        parents=parents_arr,
        shape_basis=shape_basis,
        pose_basis=pose_basis,
        symmetry=symmetry,
        joint_names=tuple(names),
    )
    atlas = UvAtlas(uvs, np.array(face_chart), tuple(charts))
    return template, atlas


def _shape_basis(vertices, vjoint, names, seg, hs):
    """Height, girth, arm length and leg length; each mirror symmetric."""
    n = len(vertices)
    basis = np.zeros((4, n, 3))
    basis[0, :, 1] = 0.1 * vertices[:, 1]
    for j, name in enumerate(names):
        sel = vjoint == j
        a, e = seg[name]
        ab = e - a
        t = np.clip(((vertices[sel] - a) @ ab) / (ab @ ab), 0.0, 1.0)
        basis[1, sel] = 0.1 * (vertices[sel] - (a + t[:, None] * ab))
    arm = np.isin(vjoint, [j for j, nm in enumerate(names) if nm[2:] in ("upperarm", "forearm", "hand")])
    leg = np.isin(vjoint, [j for j, nm in enumerate(names) if nm[2:] in ("thigh", "shin", "foot")])
    if arm.any():
        shoulder = abs(seg["l_upperarm"][0][0])
        x = vertices[arm, 0]
        basis[2, arm, 0] = 0.1 * (x - np.sign(x) * shoulder)
    if leg.any():
        hip = seg["l_thigh"][0][1]
        basis[3, leg, 1] = 0.1 * (vertices[leg, 1] - hip)
    return basis


def limb_joint_ids(template: BodyTemplate) -> dict[str, tuple[int, ...]]:
    """Joint indices of each limb chain present in the template."""
    out = {}
    for limb, chain in LIMB_CHAINS.items():
        if all(c in template.joint_names for c in chain):
            out[limb] = tuple(template.joint_index(c) for c in chain)
    return out


def limb_coordinates(table: TexelTable, template: BodyTemplate, atlas: UvAtlas):
    """Normalized rest-pose position of arm/leg texels along their limb.

    0 at the shoulder/hip, 1 at the wrist/ankle. Returns (coordinate, limb id) with NaN and -1
    outside the upper/lower limb segments (hands and feet are not limb texels).
    """
    r = table.resolution
    coord = np.full((r, r), np.nan)
    limb = np.full((r, r), -1, dtype=np.int64)
    rest_joints = template.joint_regressor @ template.vertices
    chart_joint = np.array([c.joint for c in atlas.charts], dtype=np.int64)
    valid = table.valid
    tex_joint = np.full((r, r), -1, dtype=np.int64)
    tex_joint[valid] = chart_joint[table.chart[valid]]
    for li, (_, (upper, middle, end)) in enumerate(sorted(limb_joint_ids(template).items())):
        a, b = rest_joints[upper], rest_joints[end]
        sel = (tex_joint == upper) | (tex_joint == middle)
        ab = b - a
        t = ((table.points[sel] - a) @ ab) / (ab @ ab)
        coord[sel] = np.clip(t, 0.0, 1.0)
        limb[sel] = li
    return coord, limb


def reference_segmentation(
    table: TexelTable, template: BodyTemplate, atlas: UvAtlas, sleeve: float = 0.45, pants: float = 1.0, palette=DEFAULT_PALETTE
) -> SegmentationMap:
    """Garment labels keyed to body parts: hair on top of the head, short sleeves, long pants, shoes."""
    r = table.resolution
    lab = np.zeros((r, r), dtype=np.int64)
    valid = table.valid
    names = template.joint_names
    chart_joint = np.array([c.joint for c in atlas.charts], dtype=np.int64)
    tj = np.full((r, r), -1, dtype=np.int64)
    tj[valid] = chart_joint[table.chart[valid]]
    label = {name: palette.index(name) for name in palette}
    coord, limb = limb_coordinates(table, template, atlas)

    def joint_mask(*js):
        ids = [names.index(j) for j in js if j in names]
        return np.isin(tj, ids) & valid

    lab[valid] = label["skin"]
    lab[joint_mask("chest", "spine", "root", "link")] = label["upper_garment"]
    lab[joint_mask("pelvis")] = label["lower_garment"]
    head = joint_mask("head")
    if head.any():
        top = table.points[..., 1] > np.quantile(table.points[head][:, 1], 0.55)
        lab[head & top] = label["hair"]
    lab[joint_mask("l_foot", "r_foot")] = label["shoes"]
    arms = joint_mask("l_upperarm", "l_forearm", "r_upperarm", "r_forearm")
    legs = joint_mask("l_thigh", "l_shin", "r_thigh", "r_shin")
    lab[arms & (coord <= sleeve)] = label["upper_garment"]
    lab[legs & (coord <= pants)] = label["lower_garment"]
    return SegmentationMap(lab, valid.copy(), palette)


_BASE_COLORS = {
    "background": (0, 0, 0),
    "skin": (224, 172, 140),
    "hair": (70, 45, 30),
    "upper_garment": (40, 90, 170),
    "lower_garment": (60, 60, 70),
    "shoes": (150, 40, 40),
}


def procedural_texture(
    table: TexelTable, segmentation: SegmentationMap | None = None, style: str = "regions", seed: int = 0, stripe_period: int = 4
) -> TextureMap:
    """Deterministic albedo texture; every style is mirror symmetric.

    ``regions``: seed-jittered flat color per segmentation label.
    ``stripes``: regions with garment texels darkened on alternate bands of ``stripe_period`` rows.
    ``smooth``: slowly varying color field of the rest surface position (a fraction of a level per texel).
    """
    r = table.resolution
    valid = table.valid
    rgb = np.zeros((r, r, 3))
    rng = np.random.default_rng(seed)
    if style in ("regions", "stripes"):
        if segmentation is None:
            raise ValueError(f"style {style!r} needs a segmentation")
        pal = segmentation.palette
        jitter = rng.integers(-30, 31, size=(len(pal), 3))
        for li, name in enumerate(pal):
            base = np.array(_BASE_COLORS.get(name, (128, 128, 128))) + (jitter[li] if name != "background" else 0)
            rgb[(segmentation.labels == li) & valid] = np.clip(base, 0, 255)
        if style == "stripes":
            rows = np.arange(r)[:, None] * np.ones((1, r), dtype=np.int64)
            band = (rows // stripe_period) % 2 == 1
            garment = np.isin(segmentation.labels, [pal.index(g) for g in ("upper_garment", "lower_garment") if g in pal])
            rgb[band & garment & valid] = rgb[band & garment & valid] * 0.5 + 110
    elif style == "smooth":
        p = table.points
        mix = rng.uniform(-1, 1, size=(3, 3))
        feats = np.stack([np.abs(p[..., 0]), p[..., 1] - 0.9, p[..., 2]], -1)
        rgb = 128.0 + 20.0 * feats @ mix.T
    else:
        raise ValueError(f"unknown texture style {style!r}")
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    rgb[~valid] = 0
    sym = table.symmetry.ravel()
    flat = rgb.reshape(-1, 3)
    src = np.nonzero((sym >= 0) & (sym < np.arange(r * r)))[0]
    flat[src] = flat[sym[src]]
    return TextureMap(flat.reshape(r, r, 3), valid.copy())


def synth_scan(template: BodyTemplate, pose=None, shape=None, offsets=None, n_points: int = 5000, noise: float = 0.0, seed: int = 0) -> Scan:
    """Area-weighted surface samples of the posed body plus isotropic Gaussian noise."""
    from .body_model import skin

    mesh = skin(template, pose, shape, offsets)
    rng = np.random.default_rng(seed)
    tri = mesh.vertices[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    face = rng.choice(len(tri), size=n_points, p=area / area.sum())
    r1 = np.sqrt(rng.random(n_points))
    r2 = rng.random(n_points)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], 1)
    pts = np.einsum("pk,pkc->pc", bary, tri[face])
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return Scan(pts)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    normals = np.zeros_like(vertices, dtype=np.float64)
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    length = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(length > 0, length, 1.0)


GARMENT_THICKNESS = {"skin": 0.0, "hair": 0.012, "upper_garment": 0.010, "lower_garment": 0.014, "shoes": 0.006}


def garment_displacement(table: TexelTable, template: BodyTemplate, seg: SegmentationMap, thickness=None,
                         cap: float = DEFAULT_OFFSET_CAP) -> DisplacementMap:
    """Rest-pose offsets along the surface normal, with a per-label thickness."""
    thick = dict(GARMENT_THICKNESS if thickness is None else thickness)
    per_label = np.array([thick.get(name, 0.0) for name in seg.palette])
    n = table.surface_points(vertex_normals(template.vertices, template.faces))
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    mask = seg.mask & table.valid
    values = np.where(mask[..., None], per_label[seg.labels][..., None] * n, 0.0)
    return DisplacementMap.encode(values, mask, cap)


def displacement_training_pairs(table: TexelTable, template: BodyTemplate, atlas: UvAtlas,
                                sleeves=(0.0, 0.45, 1.0), pants=(0.4, 1.0), palette=DEFAULT_PALETTE):
    """(segmentation, displacement) examples over a small grid of garment lengths."""
    pairs = []
    for sl in sleeves:
        for pl in pants:
            seg = reference_segmentation(table, template, atlas, sleeve=sl, pants=pl, palette=palette)
            pairs.append((seg, garment_displacement(table, template, seg)))
    return pairs


def part_clearance(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Distance from each vertex to the nearest surface of a different connected piece."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    from .bvh import closest_points

    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces)
    n = len(vertices)
    adj = coo_matrix((np.ones(faces.size), (faces.ravel(), np.roll(faces, 1, 1).ravel())), shape=(n, n))
    count, comp = connected_components(adj, directed=False)
    out = np.full(n, np.inf)
    for c in range(count):
        others = faces[comp[faces[:, 0]] != c]
        own = np.nonzero(comp == c)[0]
        if len(others):
            out[own] = closest_points(build_bvh(vertices, others), vertices[own])[0]
    return out


def synthetic_offsets(
    template: BodyTemplate,
    pose=None,
    shape=None,
    amplitude: float = 0.006,
    ripple: float = 0.004,
    margin: float = 0.01,
    ramp: float = 0.02,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Rest-pose offsets that a registration can recover from a scan of the displaced body.

    Offsets are normal displacements of the posed body (a smooth field of mean ``amplitude``).
    They fade to zero within ``margin``..``margin + ramp`` of another body piece, so displaced
    surfaces never collide, and they are made orthogonal (under the coupling weights) to the
    normal motion produced by pose and shape changes, so the model cannot absorb them.
    """
    from .body_model import skin_with_jacobian, unpose_offsets

    pose = np.zeros(3 * template.num_joints) if pose is None else np.asarray(pose, dtype=np.float64)
    shape = np.zeros(template.num_shapes) if shape is None else np.asarray(shape, dtype=np.float64)
    verts, _, jac, _ = skin_with_jacobian(template, pose, shape)
    faces = template.faces
    normals = vertex_normals(verts, faces)
    rest = template.vertices
    height = amplitude + ripple * np.sin(7 * rest[:, 1]) * np.cos(5 * rest[:, 0])
    taper = np.clip((part_clearance(verts, faces) - margin) / ramp, 0.0, 1.0)
    sw = np.sqrt(np.ones(len(rest)) if weights is None else np.asarray(weights, dtype=np.float64))
    basis = np.einsum("vc,vcn->vn", normals, jac) * (sw * taper)[:, None]
    g = height * sw
    g = g - basis @ np.linalg.lstsq(basis, g, rcond=None)[0]
    return unpose_offsets(template, pose, (taper * g / sw)[:, None] * normals)


@dataclass(frozen=True, eq=False)
class RenderOutput:
    color: np.ndarray  # (H, W, 3) uint8
    iuv: IuvImage
    depth: np.ndarray  # camera z, inf on background
    segmentation: np.ndarray  # (H, W) palette indices, 0 on background
    camera: Camera
    face: np.ndarray = field(repr=False, default=None)  # hit face per pixel, -1 on background


def render(mesh: Mesh, atlas: UvAtlas, texture: TextureMap, seg: SegmentationMap | None, camera: Camera, width: int, height: int, bvh=None) -> RenderOutput:
    """Albedo-only ray-cast render with exact IUV correspondences."""
    bvh = build_bvh(mesh.vertices, mesh.faces) if bvh is None else bvh
    dirs = camera.pixel_rays(width, height).reshape(-1, 3)
    t, face, bary = cast_rays(bvh, camera.center, dirs)
    hit = face >= 0
    uv = np.einsum("pk,pkc->pc", bary[hit], atlas.uv[face[hit]])
    color = np.zeros((height * width, 3), np.uint8)
    color[hit] = np.clip(np.rint(sample_texture(texture, uv)), 0, 255).astype(np.uint8)

    chart = atlas.face_chart[face[hit]]
    offset = np.array([c.offset for c in atlas.charts])
    scale = np.array([c.scale for c in atlas.charts])
    local = np.clip((uv - offset[chart]) / scale[chart], 0.0, 1.0)
    part = np.zeros(height * width, np.int64)
    part[hit] = chart + 1
    lu = np.zeros(height * width)
    lv = np.zeros(height * width)
    lu[hit], lv[hit] = local[:, 0], local[:, 1]
    iuv = IuvImage.from_parts(part.reshape(height, width), lu.reshape(height, width), lv.reshape(height, width))

    depth = np.full(height * width, np.inf)
    pts = camera.center + t[hit, None] * dirs[hit]
    depth[hit] = camera.to_camera(pts)[:, 2]

    labels = np.zeros(height * width, np.int64)
    if seg is not None:
        r = seg.resolution
        col = np.clip(np.floor(uv[:, 0] * r).astype(np.int64), 0, r - 1)
        row = np.clip(np.floor(uv[:, 1] * r).astype(np.int64), 0, r - 1)
        from scipy import ndimage

        _, (ri, ci) = ndimage.distance_transform_edt(~seg.mask, return_indices=True)
        labels[hit] = seg.labels[ri[row, col], ci[row, col]]
    return RenderOutput(
        color=color.reshape(height, width, 3),
        iuv=iuv,
        depth=depth.reshape(height, width),
        segmentation=labels.reshape(height, width),
        camera=camera,
        face=np.where(hit, face, -1).reshape(height, width),
    )


def camera_ring(
    n: int,
    radius: float = 3.0,
    height: float = 0.9,
    yaw_range: tuple[float, float] | None = None,
    *,
    target=(0.0, 0.9, 0.0),
    focal: float = 500.0,
    width: int = 384,
    image_height: int = 384,
) -> list[Camera]:
    """Cameras evenly spaced in yaw around the vertical axis, looking at ``target``.

    Yaw 0 is the frontal view (camera on +z). Without ``yaw_range`` the ring covers the full circle.
    """
    if n < 1:
        raise ValueError("need at least one camera")
    if yaw_range is None:
        yaws = 2 * np.pi * np.arange(n) / n
    elif n == 1:
        yaws = np.array([0.5 * (yaw_range[0] + yaw_range[1])])
    else:
        yaws = np.linspace(yaw_range[0], yaw_range[1], n)
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for yaw in yaws:
        eye = np.array([radius * np.sin(yaw), height, radius * np.cos(yaw)])
        cams.append(Camera.look_at(eye, target, focal=focal, width=width, height=image_height))
    return cams
