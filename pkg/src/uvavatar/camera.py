from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body_model import rodrigues


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera coordinates.

    Camera axes: x right, y down, z forward. Pixel centers sit at integer coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or np.linalg.det(r) < 0:
            raise ValueError("camera rotation must be a proper orthonormal matrix")

    @classmethod
    def from_axis_angle(cls, fx, fy, cx, cy, axis_angle, translation) -> "Camera":
        return cls(fx, fy, cx, cy, rodrigues(axis_angle), np.asarray(translation, dtype=np.float64))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, focal: float, width: int, height: int) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, rot, -rot @ eye)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points):
        """Pixel coordinates (..., 2) and a validity flag (point strictly in front of the camera)."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        valid = z > 1e-12
        safe = np.where(valid, z, 1.0)
        uv = np.stack([self.fx * pc[..., 0] / safe + self.cx, self.fy * pc[..., 1] / safe + self.cy], axis=-1)
        return uv, valid

    def pixel_rays(self, width: int, height: int) -> np.ndarray:
        """Unit world-space ray directions through every pixel center, shape (H, W, 3)."""
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        d = np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1)
        d = d @ self.rotation  # camera -> world (R^T d)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        from .body_model import normalize_axis_angle

        rot = self.rotation
        angle = np.arccos(np.clip((np.trace(rot) - 1) / 2, -1, 1))
        if angle < 1e-12:
            aa = np.zeros(3)
        elif np.pi - angle < 1e-6:
            # near pi: axis from the symmetric part
            w, v = np.linalg.eigh((rot + rot.T) / 2)
            aa = v[:, np.argmax(w)] * angle
            if np.abs(rodrigues(aa) - rot).max() > 1e-9:
                aa = -aa
        else:
            aa = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]) * angle / (2 * np.sin(angle))
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "rotation": [float(x) for x in normalize_axis_angle(aa)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls.from_axis_angle(d["fx"], d["fy"], d["cx"], d["cy"], d["rotation"], d["translation"])
