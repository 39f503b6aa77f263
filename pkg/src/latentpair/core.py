"""Shared raster types, image I/O and geometric resampling.

Angles follow image coordinates: x to the right, y downwards, and a ridge
orientation ``theta`` is the direction ``(cos theta, sin theta)`` in (x, y).
Orientations are pi-periodic and stored in ``[0, pi)``; every interpolation
goes through the doubled-angle vector ``(cos 2theta, sin 2theta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image

from .errors import ImageFormatError, InputError

DEFAULT_FILL = 255.0


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def wrap_pi(angles):
    """Wrap angles into ``[0, pi)``, guarding the rounding case that lands on pi."""
    a = np.mod(angles, np.pi)
    return np.where(a >= np.pi, 0.0, a)


def wrap_half_pi(angles):
    """Signed pi-periodic difference mapped into ``(-pi/2, pi/2]``."""
    a = np.pi / 2 - np.mod(np.pi / 2 - np.asarray(angles, dtype=float), np.pi)
    return a


def angular_distance(a, b):
    """pi-periodic angular distance ``min(|a-b|, pi-|a-b|)`` in ``[0, pi/2]``."""
    d = np.mod(np.abs(np.asarray(a, dtype=float) - b), np.pi)
    return np.minimum(d, np.pi - d)


# ---------------------------------------------------------------------------
# Raster types


@dataclass(frozen=True)
class GrayImage:
    data: np.ndarray
    dpi: int = 500

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.size == 0:
            raise InputError(f"GrayImage needs a non-empty 2-D array, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 255:
            raise InputError("GrayImage intensities must lie in [0, 255]")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @classmethod
    def blank(cls, width: int, height: int, value: float = DEFAULT_FILL) -> "GrayImage":
        return cls(np.full((height, width), float(value)))


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise InputError(f"BinaryMask needs a 2-D array, got shape {a.shape}")
        object.__setattr__(self, "data", _frozen(a.astype(bool)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @classmethod
    def full(cls, width: int, height: int, value: bool = True) -> "BinaryMask":
        return cls(np.full((height, width), bool(value)))

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.data & other.data)

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.data | other.data)


@dataclass(frozen=True)
class QualityMap:
    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim != 2:
            raise InputError("QualityMap needs a 2-D array")
        if a.size and (a.min() < 0 or a.max() > 1):
            raise InputError("QualityMap values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(a))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class OrientationField:
    """Per-pixel ridge orientation; invalid pixels carry angle 0 and ``valid=False``."""

    angles: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if a.ndim != 2 or a.shape != v.shape:
            raise InputError("angles and validity must be 2-D arrays of equal shape")
        v = v & np.isfinite(a)
        a = np.where(v, wrap_pi(np.where(np.isfinite(a), a, 0.0)), 0.0)
        object.__setattr__(self, "angles", _frozen(a))
        object.__setattr__(self, "valid", _frozen(v))

    @property
    def height(self) -> int:
        return self.angles.shape[0]

    @property
    def width(self) -> int:
        return self.angles.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.angles.shape

    @property
    def mask(self) -> BinaryMask:
        return BinaryMask(self.valid)

    @classmethod
    def constant(cls, width: int, height: int, theta: float) -> "OrientationField":
        return cls(np.full((height, width), theta), np.ones((height, width), bool))

    def doubled(self) -> Tuple[np.ndarray, np.ndarray]:
        """Doubled-angle components; invalid pixels map to ``(1, 0)``."""
        c = np.where(self.valid, np.cos(2 * self.angles), 1.0)
        s = np.where(self.valid, np.sin(2 * self.angles), 0.0)
        return c, s


MINUTIA_KINDS = ("ending", "bifurcation")


@dataclass(frozen=True)
class Minutia:
    x: float
    y: float
    direction: float
    kind: str
    reliability: float = 1.0

    def __post_init__(self):
        if self.kind not in MINUTIA_KINDS:
            raise InputError(f"unknown minutia kind {self.kind!r}")
        d = float(np.mod(self.direction, 2 * np.pi))
        object.__setattr__(self, "direction", 0.0 if d >= 2 * np.pi else d)
        object.__setattr__(self, "reliability", float(np.clip(self.reliability, 0.0, 1.0)))

    def to_dict(self) -> dict:
        return {"x": float(self.x), "y": float(self.y), "direction": self.direction,
                "kind": self.kind, "reliability": self.reliability}

    @classmethod
    def from_dict(cls, d: dict) -> "Minutia":
        return cls(d["x"], d["y"], d["direction"], d["kind"], d.get("reliability", 1.0))


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class RigidTransform:
    """``p_out = R(dtheta) (p - c) + c + (dx, dy)``.

    ``center`` defaults to the centre of the raster the transform is applied
    to. Composition and inversion are closed-form when both operands share a
    centre; otherwise explicit centres are required.
    """

    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0
    center: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dtheta)):
            raise InputError("transform parameters must be finite")
        if self.center is not None:
            object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_degrees(cls, dx: float, dy: float, dtheta_deg: float, center=None) -> "RigidTransform":
        return cls(dx, dy, math.radians(dtheta_deg), center)

    @property
    def dtheta_deg(self) -> float:
        return math.degrees(self.dtheta)

    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0 and self.dtheta == 0

    def matrix(self, default_center: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
        c = np.asarray(self.center if self.center is not None else default_center, float)
        R = _rot(self.dtheta)
        M = np.eye(3)
        M[:2, :2] = R
        M[:2, 2] = c + (self.dx, self.dy) - R @ c
        return M

    @classmethod
    def from_matrix(cls, M: np.ndarray, center: Tuple[float, float]) -> "RigidTransform":
        theta = math.atan2(M[1, 0], M[0, 0])
        c = np.asarray(center, float)
        d = M[:2, 2] - c + _rot(theta) @ c
        return cls(float(d[0]), float(d[1]), theta, (float(c[0]), float(c[1])))

    def apply_points(self, pts, default_center=(0.0, 0.0)) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        M = self.matrix(default_center)
        return pts @ M[:2, :2].T + M[:2, 2]

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Return ``self o first`` (apply ``first``, then ``self``)."""
        if self.center == first.center:
            R2 = _rot(self.dtheta)
            d = R2 @ np.array([first.dx, first.dy]) + (self.dx, self.dy)
            return RigidTransform(float(d[0]), float(d[1]), self.dtheta + first.dtheta, self.center)
        if self.center is None or first.center is None:
            raise InputError("composing transforms with different centres needs explicit centres")
        M = self.matrix() @ first.matrix()
        return RigidTransform.from_matrix(M, first.center)

    def inverse(self) -> "RigidTransform":
        Rt = _rot(-self.dtheta)
        d = -(Rt @ np.array([self.dx, self.dy]))
        return RigidTransform(float(d[0]), float(d[1]), -self.dtheta, self.center)

    def to_dict(self) -> dict:
        return {"dx": self.dx, "dy": self.dy, "dtheta_deg": self.dtheta_deg,
                "center": list(self.center) if self.center is not None else None}


Raster = Union[GrayImage, OrientationField, BinaryMask, QualityMap]


# ---------------------------------------------------------------------------
# I/O


def load_image(path) -> GrayImage:
    """Read an 8-bit grayscale PNG or binary PGM without any conversion."""
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.array(im, dtype=np.uint8)
            elif mode in ("I;16", "I;16B", "I;16L", "I", "F", "1"):
                raise ImageFormatError(f"{path}: unsupported bit depth (mode {mode}); need 8-bit")
            else:
                raise ImageFormatError(f"{path}: not a grayscale image (mode {mode})")
    except ImageFormatError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for corrupt files
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return GrayImage(arr.astype(np.float64))


def _to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def save_image(img: Union[GrayImage, np.ndarray], path) -> None:
    """Write PNG or PGM (P5) depending on the suffix; values are rounded to 8 bits."""
    path = Path(path)
    arr = img.data if isinstance(img, GrayImage) else np.asarray(img)
    im = Image.fromarray(_to_uint8(arr), mode="L")
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".pnm"):
        im.save(path, format="PPM")
    elif suffix == ".png":
        im.save(path, format="PNG")
    else:
        raise InputError(f"unsupported image suffix {suffix!r}")


def save_mask(mask: BinaryMask, path) -> None:
    save_image(np.where(mask.data, 255.0, 0.0), path)


def load_mask(path) -> BinaryMask:
    img = load_image(path)
    return BinaryMask(img.data >= 128)


# ---------------------------------------------------------------------------
# Resampling


def _bilinear(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinear sample of ``arr`` (H, W[, C]) at float coordinates.

    Returns ``(values, inside)``; ``inside`` marks coordinates within the
    pixel-centre support ``[0, W-1] x [0, H-1]``.
    """
    h, w = arr.shape[:2]
    eps = 1e-9
    inside = (xs >= -eps) & (xs <= w - 1 + eps) & (ys >= -eps) & (ys <= h - 1 + eps)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.minimum(x0, max(w - 2, 0))
    y0 = np.minimum(y0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v = (arr[y0, x0] * (1 - fx) * (1 - fy) + arr[y0, x1] * fx * (1 - fy)
         + arr[y1, x0] * (1 - fx) * fy + arr[y1, x1] * fx * fy)
    return v, inside


def _source_coords(t: RigidTransform, in_shape, out_shape):
    h_in, w_in = in_shape
    h_out, w_out = out_shape
    center = ((w_in - 1) / 2.0, (h_in - 1) / 2.0)
    Minv = np.linalg.inv(t.matrix(center))
    yy, xx = np.mgrid[0:h_out, 0:w_out].astype(np.float64)
    xs = Minv[0, 0] * xx + Minv[0, 1] * yy + Minv[0, 2]
    ys = Minv[1, 0] * xx + Minv[1, 1] * yy + Minv[1, 2]
    return xs, ys


def _resample_field(of: OrientationField, xs, ys, angle_shift: float = 0.0) -> OrientationField:
    c, s = of.doubled()
    w = of.valid.astype(np.float64)
    stack = np.stack([c * w, s * w, w], axis=-1)
    v, inside = _bilinear(stack, xs, ys)
    wt = v[..., 2]
    norm = np.hypot(v[..., 0], v[..., 1])
    valid = inside & (wt >= 0.5 - 1e-12) & (norm > 1e-12)
    ang = 0.5 * np.arctan2(v[..., 1], v[..., 0]) + angle_shift
    return OrientationField(np.where(valid, wrap_pi(ang), 0.0), valid)


def apply_rigid(raster: Raster, t: RigidTransform, fill: Optional[float] = None,
                out_shape: Optional[Tuple[int, int]] = None) -> Raster:
    """Inverse-mapped bilinear resampling of ``raster`` under ``t``.

    Output pixels whose source lies outside the input take ``fill`` (255 for
    images, invalid for orientation fields, False for masks, 0 for quality).
    Orientation angles are additionally rotated by ``t.dtheta``.
    """
    in_shape = raster.shape
    out_shape = tuple(out_shape) if out_shape is not None else in_shape
    if t.is_identity() and out_shape == in_shape:
        return raster
    xs, ys = _source_coords(t, in_shape, out_shape)
    if isinstance(raster, OrientationField):
        return _resample_field(raster, xs, ys, t.dtheta)
    if isinstance(raster, GrayImage):
        v, inside = _bilinear(raster.data, xs, ys)
        f = DEFAULT_FILL if fill is None else float(fill)
        return GrayImage(np.clip(np.where(inside, v, f), 0, 255), raster.dpi)
    if isinstance(raster, BinaryMask):
        v, inside = _bilinear(raster.data.astype(np.float64), xs, ys)
        return BinaryMask(inside & (v >= 0.5))
    if isinstance(raster, QualityMap):
        v, inside = _bilinear(raster.values, xs, ys)
        f = 0.0 if fill is None else float(fill)
        return QualityMap(np.clip(np.where(inside, v, f), 0, 1))
    raise InputError(f"cannot resample {type(raster).__name__}")


def resize_coords(old: int, new: int) -> np.ndarray:
    """Half-pixel-centre source coordinates for resizing one axis."""
    return np.clip((np.arange(new) + 0.5) * (old / new) - 0.5, 0, old - 1)


def resize_array(a: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resize of (H, W) or (H, W, C) arrays."""
    h, w = a.shape[:2]
    if (h, w) == (new_h, new_w):
        return a.copy()
    xs = resize_coords(w, new_w)
    ys = resize_coords(h, new_h)
    XX, YY = np.meshgrid(xs, ys)
    v, _ = _bilinear(a, XX, YY)
    return v


def resize_bilinear(raster: Raster, new_w: int, new_h: int) -> Raster:
    if new_w < 1 or new_h < 1:
        raise InputError(f"target size must be positive, got {new_w}x{new_h}")
    if isinstance(raster, GrayImage):
        return GrayImage(np.clip(resize_array(raster.data, new_w, new_h), 0, 255), raster.dpi)
    if isinstance(raster, OrientationField):
        if raster.shape == (new_h, new_w):
            return raster
        xs = resize_coords(raster.width, new_w)
        ys = resize_coords(raster.height, new_h)
        XX, YY = np.meshgrid(xs, ys)
        return _resample_field(raster, XX, YY)
    if isinstance(raster, BinaryMask):
        return BinaryMask(resize_array(raster.data.astype(float), new_w, new_h) >= 0.5)
    if isinstance(raster, QualityMap):
        return QualityMap(np.clip(resize_array(raster.values, new_w, new_h), 0, 1))
    raise InputError(f"cannot resize {type(raster).__name__}")
