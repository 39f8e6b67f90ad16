"""Fit the body model to a noisy synthetic scan and report the residuals.

Usage: python3 demos/register_scan.py [noise_in_metres]
"""
import sys
import time

import numpy as np

from uvavatar.registration import RegistrationConfig, fit_pose_shape, point_to_surface, register
from uvavatar.body_model import Mesh, posed_joints
from uvavatar.synth import camera_ring, make_humanoid, synth_scan, synthetic_offsets

noise = float(sys.argv[1]) if len(sys.argv) > 1 else 0.002
tpl, _ = make_humanoid()
rng = np.random.default_rng(0)
pose = rng.normal(scale=0.15, size=3 * tpl.num_joints)
shape = rng.normal(scale=0.5, size=tpl.num_shapes)
cfg = RegistrationConfig()
scan = synth_scan(tpl, pose, shape, synthetic_offsets(tpl, pose, shape, weights=cfg.weights_for(tpl)),
                  5000, noise, seed=1)

cams = camera_ring(4)
joints = posed_joints(tpl, pose, shape)
dets = np.stack([np.column_stack([uv, ok]) for uv, ok in (c.project(joints) for c in cams)])
fit = fit_pose_shape(dets, cams, tpl)
print(f"keypoint fit: reprojection rmse {fit.rmse:.3g} px")

t0 = time.perf_counter()
reg = register(scan, tpl, fit.pose, fit.shape, cfg)
d = point_to_surface(scan.points, Mesh(reg.vertices, tpl.faces))[0]
print(f"registration: {reg.iterations} iterations in {time.perf_counter() - t0:.1f} s, converged={reg.converged}")
print(f"scan-to-surface distance: mean {d.mean() * 1e3:.2f} mm, max {d.max() * 1e3:.2f} mm (noise {noise * 1e3:.1f} mm)")
print("energy trace:", " ".join(f"{e:.4g}" for e in reg.trace[:8]), "..." if len(reg.trace) > 8 else "")
