"""Command line pipeline: ``uvavatar <command> [options]``.

Exit codes: 0 success, 1 internal error, 2 bad input.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import cv2
import numpy as np

from . import completion, metrics, seg_stitch, synth
from .body_model import posed_joints, skin
from .io_formats import (
    FormatError,
    ModelDescriptor,
    export_obj,
    load_model,
    read_cameras,
    read_displacement,
    read_iuv,
    read_joints2d,
    read_scan,
    read_segmentation,
    read_texture,
    save_model,
    write_cameras,
    write_displacement,
    write_iuv,
    write_joints2d,
    write_scan,
    write_segmentation,
    write_texture,
)
from .maps import SegmentationMap
from .registration import RegistrationConfig, fit_pose_shape, register
from .uv_atlas import apply_displacement, build_texel_table, extract_partial_segmentation, extract_partial_texture

BUNDLE_SCHEMA = "bundle.v1"
DEFAULTS = {"resolution": 256, "seed": 0, "smoothness": 1.0, "max_cycles": 20, "views": 4,
            "image_size": 384, "preview_size": 256, "scan_points": 5000, "scan_noise": 0.0, "pose_scale": 0.0}


class InputError(Exception):
    """Bad or missing user input (exit code 2)."""


# ---------------------------------------------------------------------------
# shared helpers


def _settings(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(cfg, dict):
            raise InputError(f"{args.config}: top level must be an object")
    out = {**DEFAULTS, **cfg}
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    r = int(out["resolution"])
    if r < 64 or r & (r - 1):
        raise InputError(f"resolution must be a power of two >= 64, got {r}")
    return out


def _model(path) -> ModelDescriptor:
    if path is None:
        return ModelDescriptor(*synth.make_humanoid())
    if not Path(path).exists():
        raise InputError(f"model file not found: {path}")
    return load_model(path)


def _need(path, what):
    if path is None or not Path(path).exists():
        raise InputError(f"{what} not found: {path}")
    return Path(path)


def _read_rgb(path) -> np.ndarray:
    img = cv2.imread(str(_need(path, "image")), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise InputError(f"cannot decode image {path}")
    if img.dtype != np.uint8:
        raise InputError(f"{path}: expected an 8-bit image")
    if img.ndim == 2:
        return np.repeat(img[..., None], 3, axis=2)
    return cv2.cvtColor(img[..., :3], cv2.COLOR_BGR2RGB)


def _read_labels(path) -> np.ndarray:
    img = cv2.imread(str(_need(path, "segmentation image")), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise InputError(f"cannot decode image {path}")
    return (img if img.ndim == 2 else img[..., 2]).astype(np.int64)  # red channel in BGR order


def _write_rgb(path, rgb) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(np.ascontiguousarray(rgb), cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write {path}")


def _dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _prior(desc: ModelDescriptor, table):
    pairs = synth.displacement_training_pairs(table, desc.template, desc.atlas, palette=desc.palette)
    return completion.fit_displacement_prior(pairs)


def _write_bundle(out: Path, desc, tex, seg, disp, shape, settings) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.txt", desc)
    write_texture(out / "texture.png", tex)
    write_segmentation(out / "segmentation.png", seg)
    write_displacement(out / "displacement.png", disp)
    table = build_texel_table(desc.atlas, desc.template, tex.resolution)
    offsets, _ = apply_displacement(disp, table)
    mesh = skin(desc.template, None, shape, offsets)
    export_obj(mesh, desc.atlas, "texture.png", out / "mesh.obj")
    size = int(settings["preview_size"])
    previews = []
    for i, cam in enumerate(synth.camera_ring(4, width=size, image_height=size)):
        shot = synth.render(mesh, desc.atlas, tex, None, cam, size, size)
        _write_rgb(out / f"preview_{i}.png", shot.color)
        previews.append(f"preview_{i}.png")
    _dump_json(out / "bundle.json", {
        "schema": BUNDLE_SCHEMA, "model": "model.txt", "resolution": tex.resolution,
        "shape": [float(x) for x in shape], "texture": "texture.png", "segmentation": "segmentation.png",
        "displacement": "displacement.png", "mesh": "mesh.obj", "previews": previews,
    })


def _read_bundle(path):
    root = _need(path, "bundle directory")
    try:
        meta = json.loads((root / "bundle.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"{root}: missing bundle.json") from None
    if meta.get("schema") != BUNDLE_SCHEMA:
        raise InputError(f"{root}: not a {BUNDLE_SCHEMA} bundle")
    desc = load_model(root / meta["model"])
    tex = read_texture(root / meta["texture"])
    seg = read_segmentation(root / meta["segmentation"], desc.palette)
    disp = read_displacement(root / meta["displacement"])
    return desc, tex, seg, disp, np.asarray(meta["shape"], dtype=np.float64)


def _shape_arg(path, desc) -> np.ndarray:
    if path is None:
        return np.zeros(desc.template.num_shapes)
    doc = json.loads(_need(path, "shape file").read_text(encoding="utf-8"))
    shape = np.asarray(doc["shape"] if isinstance(doc, dict) else doc, dtype=np.float64)
    if shape.shape != (desc.template.num_shapes,):
        raise InputError(f"shape must have {desc.template.num_shapes} coefficients")
    return shape


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    s = _settings(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    desc = _model(args.model)
    tpl, atlas = desc.template, desc.atlas
    rng = np.random.default_rng(int(s["seed"]))
    table = build_texel_table(atlas, tpl, int(s["resolution"]))
    seg = synth.reference_segmentation(table, tpl, atlas, palette=desc.palette)
    tex = synth.procedural_texture(table, seg, seed=int(s["seed"]))
    disp = synth.garment_displacement(table, tpl, seg)
    offsets, _ = apply_displacement(disp, table)
    pose = rng.normal(scale=float(s["pose_scale"]), size=3 * tpl.num_joints)
    shape = np.zeros(tpl.num_shapes)
    mesh = skin(tpl, pose, shape, offsets)
    save_model(out / "model.txt", desc)
    size = int(s["image_size"])
    cams = synth.camera_ring(int(s["views"]), width=size, image_height=size)
    joints3d = posed_joints(tpl, pose, shape)
    dets = []
    for i, cam in enumerate(cams):
        shot = synth.render(mesh, atlas, tex, seg, cam, size, size)
        _write_rgb(out / f"view_{i}_image.png", shot.color)
        write_iuv(out / f"view_{i}_iuv.png", shot.iuv)
        person = shot.iuv.part > 0
        write_segmentation(out / f"view_{i}_seg.png", SegmentationMap(np.where(person, shot.segmentation, 0), person, desc.palette))
        uv, ok = cam.project(joints3d)
        dets.append(np.column_stack([uv, ok.astype(np.float64)]))
    write_cameras(out / "cameras.json", {str(i): c for i, c in enumerate(cams)})
    write_joints2d(out / "joints2d.json", [str(i) for i in range(len(cams))], dets)
    write_scan(out / "scan.xyz", synth.synth_scan(tpl, pose, shape, offsets, int(s["scan_points"]),
                                                  float(s["scan_noise"]), seed=int(s["seed"])))
    write_texture(out / "texture_truth.png", tex)
    write_segmentation(out / "segmentation_truth.png", seg)
    _dump_json(out / "truth.json", {"pose": pose.tolist(), "shape": shape.tolist(), "resolution": table.resolution})
    return 0


def cmd_reconstruct(args) -> int:
    s = _settings(args)
    desc = _model(args.model)
    image = _read_rgb(args.image)
    iuv = read_iuv(_need(args.iuv, "IUV image"))
    labels = _read_labels(args.seg)
    if image.shape[:2] != iuv.shape or labels.shape != iuv.shape:
        raise InputError("image, IUV and segmentation sizes differ")
    if not (iuv.part > 0).any():
        raise InputError("no correspondences: the IUV image has no person pixels")
    r = int(s["resolution"])
    table = build_texel_table(desc.atlas, desc.template, r)
    try:
        ptex = extract_partial_texture(image, iuv, desc.atlas, r, table)
        pseg = extract_partial_segmentation(labels, iuv, desc.atlas, r, desc.palette, table)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if not ptex.mask.any():
        raise InputError("no correspondences land on the body surface")
    tex = completion.complete_texture(ptex, table)
    seg = completion.complete_segmentation(pseg, table)
    disp = completion.predict_displacement(seg, _prior(desc, table), table)
    _write_bundle(Path(args.out), desc, tex, seg, disp, _shape_arg(args.shape, desc), s)
    return 0


def cmd_repose(args) -> int:
    desc, tex, seg, disp, shape = _read_bundle(args.bundle)
    doc = json.loads(_need(args.pose, "pose file").read_text(encoding="utf-8"))
    pose = np.asarray(doc["pose"] if isinstance(doc, dict) else doc, dtype=np.float64)
    if pose.shape != (3 * desc.template.num_joints,):
        raise InputError(f"pose must have {3 * desc.template.num_joints} values")
    if isinstance(doc, dict) and "shape" in doc:
        shape = np.asarray(doc["shape"], dtype=np.float64)
    table = build_texel_table(desc.atlas, desc.template, disp.resolution)
    offsets, _ = apply_displacement(disp, table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    texture = Path(args.bundle).resolve() / "texture.png"
    export_obj(skin(desc.template, pose, shape, offsets), desc.atlas, texture, out / "reposed.obj")
    return 0


def cmd_register(args) -> int:
    s = _settings(args)
    desc = _model(args.model)
    scan = read_scan(_need(args.scan, "scan"))
    cams = read_cameras(_need(args.cameras, "cameras file"))
    ids, joints = read_joints2d(_need(args.joints2d, "joints2d file"), list(cams))
    tpl = desc.template
    fit = fit_pose_shape(joints, [cams[i] for i in ids], tpl)
    rc = s.get("registration", {})
    try:
        cfg = RegistrationConfig(**rc)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad registration config: {exc}") from None
    reg = register(scan, tpl, fit.pose, fit.shape, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "registration.json", {
        "pose": reg.pose.tolist(), "shape": reg.shape.tolist(), "energy": reg.energy, "trace": list(map(float, reg.trace)),
        "iterations": reg.iterations, "converged": bool(reg.converged), "joint_fit_rmse": float(fit.rmse),
    })
    from .body_model import Mesh

    export_obj(Mesh(reg.vertices, tpl.faces), desc.atlas, "texture.png", out / "registered.obj")
    return 0


def _view_arg(item: str):
    path, _, weight = item.partition(":")
    seg = read_segmentation(_need(path, "view map"))
    if not weight:
        w = 1.0
    elif weight.endswith(".npy"):
        w = np.load(_need(weight, "weight map"))
    else:
        try:
            w = float(weight)
        except ValueError:
            raise InputError(f"bad view weight {weight!r}") from None
    return seg, w


def cmd_stitch_seg(args) -> int:
    s = _settings(args)
    if not args.view:
        raise InputError("no views given")
    desc = _model(args.model)
    obs = [_view_arg(v) for v in args.view]
    r = obs[0][0].resolution
    obs = [(SegmentationMap(seg.labels, seg.mask, desc.palette), w) for seg, w in obs]
    table = build_texel_table(desc.atlas, desc.template, r)
    try:
        out_seg = seg_stitch.stitch(obs, table, float(s["smoothness"]), int(s["max_cycles"]), desc.palette)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_segmentation(out / "segmentation.png", out_seg)
    return 0


def cmd_edit(args) -> int:
    s = _settings(args)
    desc, tex, seg, disp, shape = _read_bundle(args.bundle)
    table = build_texel_table(desc.atlas, desc.template, tex.resolution)
    try:
        if args.edit == "texture":
            swatch = _read_rgb(args.swatch)
            new_tex, new_seg = completion.edit_texture_region(tex, seg, args.label, swatch, table), seg
        elif args.edit == "length":
            new_seg = completion.edit_garment_length(seg, args.garment, args.t, table, desc.template, desc.atlas)
            new_tex = completion.recolor_relabeled(tex, seg, new_seg, table)
        else:
            _, otex, oseg, _, _ = _read_bundle(args.other)
            labels = [l for l in (args.labels or "").split(",") if l]
            new_tex, new_seg = completion.swap_garments(tex, seg, otex, oseg, labels, table)
    except KeyError as exc:
        raise InputError(f"unknown label: {exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if not new_seg.equals(seg):
        disp = completion.predict_displacement(new_seg, _prior(desc, table), table)
    _write_bundle(Path(args.out), desc, new_tex, new_seg, disp, shape, s)
    return 0


def _read_metric_image(path):
    img = cv2.imread(str(_need(path, "image")), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise InputError(f"cannot decode image {path}")
    mask = None
    if img.ndim == 3 and img.shape[2] == 4:
        mask = img[..., 3] > 0
        img = img[..., :3]
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return img, mask


def cmd_metrics(args) -> int:
    a, ma = _read_metric_image(args.a)
    b, mb = _read_metric_image(args.b)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    mask = None if ma is None and mb is None else (np.ones(a.shape[:2], bool) if ma is None else ma) & (
        np.ones(a.shape[:2], bool) if mb is None else mb)
    rep = metrics.report(a, b, mask)
    text = json.dumps(rep, indent=1, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p, out_required=True):
    p.add_argument("--model", help="model.v1 descriptor (default: built-in reference humanoid)")
    p.add_argument("--resolution", type=int, help="UV map resolution (power of two, default 256)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--config", help="JSON settings file; explicit flags take precedence")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uvavatar", description="UV-space avatar reconstruction pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic test subject (renders, IUV, scan, joints)")
    _common(p)
    p.add_argument("--views", type=int, help="number of rendered views (default 4)")
    p.add_argument("--pose-scale", dest="pose_scale", type=float, help="std of random joint rotations (default 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reconstruct", help="image + IUV + segmentation -> textured avatar bundle")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--iuv", required=True)
    p.add_argument("--seg", required=True, help="label image (palette index in the red channel)")
    p.add_argument("--shape", help="JSON shape coefficients (default: mean shape)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("repose", help="export a bundle in a new pose")
    _common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--pose", required=True, help='JSON {"pose": [...], "shape": [...]}')
    p.set_defaults(func=cmd_repose)

    p = sub.add_parser("register", help="fit the body model to a scan")
    _common(p)
    p.add_argument("--scan", required=True)
    p.add_argument("--joints2d", required=True)
    p.add_argument("--cameras", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("stitch-seg", help="fuse partial UV segmentations")
    _common(p)
    p.add_argument("--view", action="append", default=[], help="segmentation PNG[:weight or weights.npy]")
    p.add_argument("--smoothness", type=float, help="Potts weight (default 1)")
    p.add_argument("--max-cycles", dest="max_cycles", type=int, help="expansion cycles (default 20)")
    p.set_defaults(func=cmd_stitch_seg)

    p = sub.add_parser("edit", help="edit a bundle")
    esub = p.add_subparsers(dest="edit", required=True)
    e = esub.add_parser("texture", help="retexture one garment with a tiled swatch")
    _common(e)
    e.add_argument("--bundle", required=True)
    e.add_argument("--label", required=True)
    e.add_argument("--swatch", required=True)
    e = esub.add_parser("length", help="change sleeve or trouser length")
    _common(e)
    e.add_argument("--bundle", required=True)
    e.add_argument("--garment", required=True)
    e.add_argument("--t", type=float, required=True, help="length along the limb in [0, 1]")
    e = esub.add_parser("swap", help="take garments from another bundle")
    _common(e)
    e.add_argument("--bundle", required=True)
    e.add_argument("--other", required=True)
    e.add_argument("--labels", default="", help="comma-separated garment labels")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("metrics", help="compare two images")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (InputError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard maps failures to exit 1
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
