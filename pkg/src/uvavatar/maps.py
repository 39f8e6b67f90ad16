"""Fixed-resolution UV map images with validity masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_model import DEFAULT_OFFSET_CAP

DEFAULT_PALETTE = ("background", "skin", "hair", "upper_garment", "lower_garment", "shoes")
GARMENT_LABELS = ("upper_garment", "lower_garment")

# decoded offset = scale * (code / CODE_HALF - offset); code CODE_HALF encodes exactly zero
CODE_HALF = 32767


def _check_mask(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match map shape {shape}")
    return mask


@dataclass(frozen=True, eq=False)
class TextureMap:
    rgb: np.ndarray  # (R, R, 3) uint8
    mask: np.ndarray  # (R, R) bool

    def __post_init__(self):
        if self.rgb.dtype != np.uint8 or self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("texture rgb must be (R, R, 3) uint8")
        object.__setattr__(self, "mask", _check_mask(self.mask, self.rgb.shape[:2]))

    @property
    def resolution(self) -> int:
        return self.rgb.shape[0]

    def canonical(self) -> "TextureMap":
        """Copy with invalid texels zeroed, the serialized form."""
        rgb = self.rgb.copy()
        rgb[~self.mask] = 0
        return TextureMap(rgb, self.mask.copy())

    def equals(self, other: "TextureMap") -> bool:
        a, b = self.canonical(), other.canonical()
        return np.array_equal(a.rgb, b.rgb) and np.array_equal(a.mask, b.mask)

    @classmethod
    def empty(cls, resolution: int) -> "TextureMap":
        return cls(np.zeros((resolution, resolution, 3), np.uint8), np.zeros((resolution, resolution), bool))


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    labels: np.ndarray  # (R, R) integer palette indices
    mask: np.ndarray
    palette: tuple[str, ...] = DEFAULT_PALETTE

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("labels must be a 2-D array")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.palette)):
            raise ValueError(f"label index outside palette of size {len(self.palette)}")
        object.__setattr__(self, "labels", labels.astype(np.int64))
        object.__setattr__(self, "mask", _check_mask(self.mask, labels.shape))
        object.__setattr__(self, "palette", tuple(self.palette))

    @property
    def resolution(self) -> int:
        return self.labels.shape[0]

    def label(self, name: str) -> int:
        try:
            return self.palette.index(name)
        except ValueError:
            raise KeyError(f"label {name!r} not in palette {self.palette}") from None

    def canonical(self) -> "SegmentationMap":
        labels = np.where(self.mask, self.labels, 0)
        return SegmentationMap(labels, self.mask.copy(), self.palette)

    def equals(self, other: "SegmentationMap") -> bool:
        a, b = self.canonical(), other.canonical()
        return a.palette == b.palette and np.array_equal(a.labels, b.labels) and np.array_equal(a.mask, b.mask)

    @classmethod
    def empty(cls, resolution: int, palette=DEFAULT_PALETTE) -> "SegmentationMap":
        return cls(np.zeros((resolution, resolution), np.int64), np.zeros((resolution, resolution), bool), palette)


@dataclass(frozen=True, eq=False)
class DisplacementMap:
    """Offsets stored as 16-bit codes; ``decode`` returns meters."""

    codes: np.ndarray  # (R, R, 3) uint16
    mask: np.ndarray
    scale: float
    offset: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        if self.codes.dtype != np.uint16 or self.codes.ndim != 3 or self.codes.shape[2] != 3:
            raise ValueError("displacement codes must be (R, R, 3) uint16")
        if not self.scale > 0:
            raise ValueError("displacement scale must be positive")
        object.__setattr__(self, "mask", _check_mask(self.mask, self.codes.shape[:2]))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64).reshape(3))

    @property
    def resolution(self) -> int:
        return self.codes.shape[0]

    def decode(self) -> np.ndarray:
        out = self.scale * (self.codes / CODE_HALF - self.offset)
        out[~self.mask] = 0.0
        return out

    @classmethod
    def encode(cls, values: np.ndarray, mask: np.ndarray, scale: float) -> "DisplacementMap":
        values = np.asarray(values, dtype=np.float64)
        if np.abs(values[mask]).max(initial=0.0) > scale * (1 + 1e-12):
            raise ValueError("displacement values exceed the normalization scale")
        codes = np.rint((values / scale + 1.0) * CODE_HALF)
        codes = np.clip(codes, 0, 2 * CODE_HALF).astype(np.uint16)
        codes[~mask] = CODE_HALF
        return cls(codes, mask, float(scale))

    def canonical(self) -> "DisplacementMap":
        codes = self.codes.copy()
        codes[~self.mask] = 0
        return DisplacementMap(codes, self.mask.copy(), self.scale, self.offset.copy())

    def equals(self, other: "DisplacementMap") -> bool:
        a, b = self.canonical(), other.canonical()
        return (
            a.scale == b.scale
            and np.array_equal(a.offset, b.offset)
            and np.array_equal(a.codes, b.codes)
            and np.array_equal(a.mask, b.mask)
        )

    @classmethod
    def zeros(cls, resolution: int, cap: float = DEFAULT_OFFSET_CAP, mask=None) -> "DisplacementMap":
        mask = np.ones((resolution, resolution), bool) if mask is None else mask
        return cls.encode(np.zeros((resolution, resolution, 3)), mask, cap)


@dataclass(frozen=True, eq=False)
class IuvImage:
    """Dense image-to-surface correspondences: part index and 8-bit quantized chart coordinates."""

    data: np.ndarray  # (H, W, 3) uint8: part, u, v

    def __post_init__(self):
        if self.data.dtype != np.uint8 or self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("IUV data must be (H, W, 3) uint8")

    @property
    def part(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def uv(self) -> np.ndarray:
        return self.data[..., 1:3].astype(np.float64) / 255.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @classmethod
    def from_parts(cls, part, u, v) -> "IuvImage":
        q = lambda x: np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)
        part = np.asarray(part).astype(np.uint8)
        u, v = q(u), q(v)
        u[part == 0] = 0
        v[part == 0] = 0
        return cls(np.stack([part, u, v], axis=-1))
