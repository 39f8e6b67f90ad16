"""File formats.

* Model descriptor (``model.v1``): a header line followed by one ``name <json>`` line per
  section. Floats are written with Python's shortest round-trip repr, so save/load is exact.
* Texture and segmentation maps: 8-bit RGBA PNG, alpha = validity. Segmentation labels sit
  in the red channel.
* Displacement maps: 16-bit RGBA PNG holding the raw codes (alpha = validity) plus a JSON
  sidecar ``{scale, offset, resolution}``.
* IUV images: 8-bit RGB PNG (part, u, v).
* Scans: ASCII ``x y z [nx ny nz]`` lines or ASCII PLY with a vertex element.
* Cameras and 2D joints: JSON documents.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .body_model import BodyTemplate, Mesh
from .camera import Camera
from .maps import DEFAULT_PALETTE, DisplacementMap, IuvImage, SegmentationMap, TextureMap
from .registration import Scan
from .uv_atlas import Chart, UvAtlas

SCHEMA = "model.v1"


class FormatError(ValueError):
    """Malformed or inconsistent input file."""


# ---------------------------------------------------------------------------
# model descriptor


@dataclass(frozen=True, eq=False)
class ModelDescriptor:
    template: BodyTemplate
    atlas: UvAtlas
    palette: tuple[str, ...] = DEFAULT_PALETTE

    @property
    def iuv_parts(self) -> dict[int, str]:
        """IUV part index -> chart name; part 0 is background."""
        return {i + 1: c.name for i, c in enumerate(self.atlas.charts)}

    def equals(self, other: "ModelDescriptor") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            a, b = np.asarray(a), np.asarray(b)
            return a.shape == b.shape and a.dtype.kind == b.dtype.kind and np.array_equal(a, b)

        t, u = self.template, other.template
        return (
            all(same(getattr(t, f), getattr(u, f)) for f in
                ("vertices", "faces", "skin_weights", "joint_regressor", "parents", "shape_basis", "pose_basis", "symmetry"))
            and t.joint_names == u.joint_names
            and same(self.atlas.uv, other.atlas.uv)
            and same(self.atlas.face_chart, other.atlas.face_chart)
            and self.atlas.charts == other.atlas.charts
            and self.palette == other.palette
        )


def _dense(a) -> dict:
    a = np.asarray(a)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _sparse(a) -> dict:
    a = np.asarray(a)
    r, c = np.nonzero(a)
    return {"shape": list(a.shape), "rows": r.tolist(), "cols": c.tolist(), "values": a[r, c].tolist()}


def _from_dense(d, dtype) -> np.ndarray:
    return np.asarray(d["data"], dtype=dtype).reshape(d["shape"])


def _from_sparse(d) -> np.ndarray:
    out = np.zeros(d["shape"])
    out[np.asarray(d["rows"], dtype=np.int64), np.asarray(d["cols"], dtype=np.int64)] = d["values"]
    return out


def save_model(path, desc: ModelDescriptor) -> None:
    t, a = desc.template, desc.atlas
    sections = [
        ("vertices", _dense(t.vertices)),
        ("faces", _dense(t.faces)),
        ("skin_weights", _sparse(t.skin_weights)),
        ("joint_regressor", _sparse(t.joint_regressor)),
        ("parents", _dense(t.parents)),
        ("joint_names", list(t.joint_names)),
        ("shape_basis", _dense(t.shape_basis)),
        ("pose_basis", None if t.pose_basis is None else _dense(t.pose_basis)),
        ("symmetry", None if t.symmetry is None else _dense(t.symmetry)),
        ("atlas_uv", _dense(a.uv)),
        ("atlas_face_chart", _dense(a.face_chart)),
        ("atlas_charts", [{"name": c.name, "joint": int(c.joint), "offset": list(map(float, c.offset)),
                           "scale": list(map(float, c.scale))} for c in a.charts]),
        ("iuv_parts", [[p, n] for p, n in desc.iuv_parts.items()]),
        ("palette", list(desc.palette)),
    ]
    lines = [f"schema {SCHEMA}"]
    lines += [f"{name} {json.dumps(value, separators=(',', ':'), allow_nan=False)}" for name, value in sections]
    Path(path).write_text("\n".join(lines) + "\nend\n", encoding="utf-8")


_REQUIRED = ("vertices", "faces", "skin_weights", "joint_regressor", "parents", "joint_names", "shape_basis",
             "pose_basis", "symmetry", "atlas_uv", "atlas_face_chart", "atlas_charts", "iuv_parts", "palette")


def load_model(path) -> ModelDescriptor:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or lines[0].strip() != f"schema {SCHEMA}":
        raise FormatError(f"{path}: missing schema tag {SCHEMA!r} on line 1")
    sec: dict = {}
    ended = False
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.strip() == "end":
            ended = True
            break
        name, _, body = line.partition(" ")
        try:
            sec[name] = json.loads(body)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: section {name!r} on line {no} is malformed or truncated ({exc.msg})") from None
    missing = [s for s in _REQUIRED if s not in sec]
    if missing:
        raise FormatError(f"{path}: missing section {missing[0]!r} (file truncated?)")
    if not ended:
        raise FormatError(f"{path}: no end marker after section {list(sec)[-1]!r} (file truncated?)")
    try:
        template = BodyTemplate(
            vertices=_from_dense(sec["vertices"], np.float64),
            faces=_from_dense(sec["faces"], np.int64),
            skin_weights=_from_sparse(sec["skin_weights"]),
            joint_regressor=_from_sparse(sec["joint_regressor"]),
            parents=_from_dense(sec["parents"], np.int64),
            shape_basis=_from_dense(sec["shape_basis"], np.float64),
            pose_basis=None if sec["pose_basis"] is None else _from_dense(sec["pose_basis"], np.float64),
            symmetry=None if sec["symmetry"] is None else _from_dense(sec["symmetry"], np.int64),
            joint_names=tuple(sec["joint_names"]),
        )
        charts = tuple(Chart(c["name"], int(c["joint"]), tuple(c["offset"]), tuple(c["scale"])) for c in sec["atlas_charts"])
        atlas = UvAtlas(_from_dense(sec["atlas_uv"], np.float64), _from_dense(sec["atlas_face_chart"], np.int64), charts)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: inconsistent model data: {exc}") from None
    if len(atlas.uv) != len(template.faces):
        raise FormatError(f"{path}: atlas has {len(atlas.uv)} faces, mesh has {len(template.faces)}")
    parts = {int(p): n for p, n in sec["iuv_parts"]}
    if parts != {i + 1: c.name for i, c in enumerate(charts)}:
        raise FormatError(f"{path}: iuv_parts table does not match the chart list")
    return ModelDescriptor(template, atlas, tuple(sec["palette"]))


# ---------------------------------------------------------------------------
# map images


def _write_png(path, img) -> None:
    path = Path(path)
    if img.ndim == 3:
        code = cv2.COLOR_RGBA2BGRA if img.shape[2] == 4 else cv2.COLOR_RGB2BGR
        img = cv2.cvtColor(img, code)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"cannot write image {path}")


def _read_png(path, channels: int, dtype) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot read image {path}")
    if img.dtype != dtype:
        raise FormatError(f"{path}: expected {np.dtype(dtype).name} samples, found {img.dtype.name}")
    if img.ndim != 3 or img.shape[2] != channels:
        raise FormatError(f"{path}: expected {channels} channels")
    code = cv2.COLOR_BGRA2RGBA if channels == 4 else cv2.COLOR_BGR2RGB
    return cv2.cvtColor(img, code)


def _alpha(mask, dtype):
    return np.where(mask, np.iinfo(dtype).max, 0).astype(dtype)


def _mask_from_alpha(alpha, path):
    top = np.iinfo(alpha.dtype).max
    if not np.isin(alpha, (0, top)).all():
        raise FormatError(f"{path}: alpha must be 0 or {top}")
    return alpha == top


def write_texture(path, tex: TextureMap) -> None:
    _write_png(path, np.dstack([tex.rgb, _alpha(tex.mask, np.uint8)]))


def read_texture(path) -> TextureMap:
    img = _read_png(path, 4, np.uint8)
    return TextureMap(np.ascontiguousarray(img[..., :3]), _mask_from_alpha(img[..., 3], path))


def write_segmentation(path, seg: SegmentationMap) -> None:
    if len(seg.palette) > 256:
        raise ValueError("palettes above 256 labels do not fit 8-bit images")
    lab = seg.labels.astype(np.uint8)
    zero = np.zeros_like(lab)
    _write_png(path, np.dstack([lab, zero, zero, _alpha(seg.mask, np.uint8)]))


def read_segmentation(path, palette=DEFAULT_PALETTE) -> SegmentationMap:
    img = _read_png(path, 4, np.uint8)
    labels = img[..., 0].astype(np.int64)
    if labels.max(initial=0) >= len(palette):
        raise FormatError(f"{path}: label {labels.max()} outside palette of size {len(palette)}")
    return SegmentationMap(labels, _mask_from_alpha(img[..., 3], path), palette)


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_displacement(path, disp: DisplacementMap) -> None:
    _write_png(path, np.dstack([disp.codes, _alpha(disp.mask, np.uint16)]))
    meta = {"scale": disp.scale, "offset": disp.offset.tolist(), "resolution": disp.resolution}
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def read_displacement(path) -> DisplacementMap:
    img = _read_png(path, 4, np.uint16)
    side = _sidecar(path)
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"{path}: missing sidecar {side.name}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: line {exc.lineno}: {exc.msg}") from None
    for key in ("scale", "offset", "resolution"):
        if key not in meta:
            raise FormatError(f"{side}: missing field {key!r}")
    scale = float(meta["scale"])
    if not (math.isfinite(scale) and scale > 0):
        raise FormatError(f"{side}: scale must be positive, got {meta['scale']}")
    if int(meta["resolution"]) != img.shape[0] or img.shape[0] != img.shape[1]:
        raise FormatError(f"{side}: resolution {meta['resolution']} does not match image {img.shape[:2]}")
    return DisplacementMap(np.ascontiguousarray(img[..., :3]), _mask_from_alpha(img[..., 3], path), scale,
                           np.asarray(meta["offset"], dtype=np.float64))


def write_iuv(path, iuv: IuvImage) -> None:
    _write_png(path, iuv.data)


def read_iuv(path) -> IuvImage:
    return IuvImage(np.ascontiguousarray(_read_png(path, 3, np.uint8)))


# ---------------------------------------------------------------------------
# scans, cameras, joints


def _parse_floats(tokens, where, count):
    if len(tokens) != count:
        raise FormatError(f"{where}: expected {count} values, found {len(tokens)}")
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise FormatError(f"{where}: non-numeric value") from None
    if not all(math.isfinite(v) for v in vals):
        raise FormatError(f"{where}: non-finite coordinate")
    return vals


def _read_ply(path, lines) -> Scan:
    if len(lines) < 2 or lines[1].split()[:2] != ["format", "ascii"]:
        raise FormatError(f"{path}: line 2: only ASCII PLY is supported")
    count, props, in_vertex, header_end = None, [], False, None
    for no, line in enumerate(lines[2:], start=3):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            header_end = no
            break
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                if count is not None:
                    raise FormatError(f"{path}: line {no}: duplicate vertex element")
                count = int(tok[2])
            elif count is None:
                raise FormatError(f"{path}: line {no}: vertex element must come first")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise FormatError(f"{path}: line {no}: list properties on vertices are not supported")
            props.append(tok[-1])
    if header_end is None:
        raise FormatError(f"{path}: missing end_header")
    if count is None or not {"x", "y", "z"} <= set(props):
        raise FormatError(f"{path}: vertex element with x, y, z properties required")
    body = lines[header_end:header_end + count]
    if len(body) < count:
        raise FormatError(f"{path}: line {header_end + len(body) + 1}: expected {count} vertices, file ends early")
    data = np.array([_parse_floats(l.split(), f"{path}: line {header_end + i + 1}", len(props)) for i, l in enumerate(body)])
    col = {p: i for i, p in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = data[:, [col["nx"], col["ny"], col["nz"]]] if {"nx", "ny", "nz"} <= set(props) else None
    return Scan(pts, normals)


def read_scan(path) -> Scan:
    """ASCII point list (3 or 6 columns, '#' comments) or ASCII PLY."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if lines and lines[0].strip() == "ply":
        return _read_ply(path, lines)
    rows, width = [], None
    for no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if width is None:
            if len(tok) not in (3, 6):
                raise FormatError(f"{path}: line {no}: expected 3 or 6 columns, found {len(tok)}")
            width = len(tok)
        rows.append(_parse_floats(tok, f"{path}: line {no}", width))
    if not rows:
        raise FormatError(f"{path}: no points")
    data = np.array(rows)
    return Scan(data[:, :3], data[:, 3:] if width == 6 else None)


def write_scan(path, scan: Scan) -> None:
    cols = scan.points if scan.normals is None else np.hstack([scan.points, scan.normals])
    Path(path).write_text("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in cols), encoding="utf-8")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None


def read_cameras(path) -> dict[str, Camera]:
    """``{"cameras": [{"id", "fx", "fy", "cx", "cy", "rotation", "translation"}, ...]}``."""
    doc = _load_json(path)
    out = {}
    for i, c in enumerate(doc.get("cameras", [])):
        try:
            cid = str(c["id"])
            out[cid] = Camera.from_dict(c)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: camera entry {i}: {exc}") from None
    if not out:
        raise FormatError(f"{path}: no cameras")
    return out


def write_cameras(path, cameras) -> None:
    items = cameras.items() if isinstance(cameras, dict) else enumerate(cameras)
    doc = {"cameras": [{"id": str(k), **c.to_dict()} for k, c in items]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_joints2d(path, camera_ids=None) -> tuple[list[str], np.ndarray]:
    """``{"views": [{"camera": id, "joints": [[x, y, conf], ...]}]}`` -> (ids, (C, K, 3))."""
    doc = _load_json(path)
    views = doc.get("views", [])
    if not views:
        raise FormatError(f"{path}: no views")
    ids, arrs = [], []
    for i, v in enumerate(views):
        try:
            a = np.asarray(v["joints"], dtype=np.float64)
            ids.append(str(v["camera"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: view {i}: {exc}") from None
        if a.ndim != 2 or a.shape[1] != 3:
            raise FormatError(f"{path}: view {i}: joints must be rows of (x, y, confidence)")
        if not np.isfinite(a).all():
            raise FormatError(f"{path}: view {i}: non-finite value")
        arrs.append(a)
    if len({len(a) for a in arrs}) != 1:
        raise FormatError(f"{path}: views disagree on the joint count")
    joints = np.stack(arrs)
    if camera_ids is not None:
        order = {c: i for i, c in enumerate(ids)}
        missing = [c for c in camera_ids if c not in order]
        if missing:
            raise FormatError(f"{path}: no detections for camera {missing[0]!r}")
        ids = list(camera_ids)
        joints = joints[[order[c] for c in ids]]
    return ids, joints


def write_joints2d(path, camera_ids, joints) -> None:
    doc = {"views": [{"camera": str(c), "joints": np.asarray(j).tolist()} for c, j in zip(camera_ids, joints)]}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# mesh export


def export_obj(mesh: Mesh, atlas: UvAtlas, texture_path, out_path) -> None:
    """Wavefront OBJ with per-corner UVs and an MTL file referencing ``texture_path``."""
    out_path = Path(out_path)
    mtl_path = out_path.with_suffix(".mtl")
    uv = atlas.uv.reshape(-1, 2)
    if len(atlas.uv) != len(mesh.faces):
        raise ValueError("atlas and mesh face counts differ")
    uniq, inv = np.unique(uv, axis=0, return_inverse=True)
    inv = inv.reshape(-1, 3)
    fmt = lambda a: " ".join(f"{x:.9g}" for x in a)
    lines = [f"mtllib {mtl_path.name}", "usemtl avatar"]
    lines += [f"v {fmt(v)}" for v in mesh.vertices]
    # OBJ texture space has v pointing up; atlas rows grow downward
    lines += [f"vt {t[0]:.9g} {1.0 - t[1]:.9g}" for t in uniq]
    lines += ["f " + " ".join(f"{a + 1}/{b + 1}" for a, b in zip(f, t)) for f, t in zip(mesh.faces, inv)]
    tex = Path(texture_path)
    try:
        out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        mtl_path.write_text(f"newmtl avatar\nKa 1 1 1\nKd 1 1 1\nmap_Kd {tex.as_posix()}\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {out_path}: {exc}") from None


def read_obj(path):
    """Minimal OBJ reader: (positions, uvs, face vertex idx, face uv idx), 0-based."""
    v, vt, fv, ft = [], [], [], []
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            v.append(_parse_floats(tok[1:4], f"{path}: line {no}", 3))
        elif tok[0] == "vt":
            vt.append(_parse_floats(tok[1:3], f"{path}: line {no}", 2))
        elif tok[0] == "f":
            if len(tok) != 4:
                raise FormatError(f"{path}: line {no}: only triangles are supported")
            corners = [t.split("/") for t in tok[1:]]
            fv.append([int(c[0]) - 1 for c in corners])
            ft.append([int(c[1]) - 1 if len(c) > 1 and c[1] else -1 for c in corners])
    return np.array(v).reshape(-1, 3), np.array(vt).reshape(-1, 2), np.array(fv, dtype=np.int64).reshape(-1, 3), np.array(ft, dtype=np.int64).reshape(-1, 3)
