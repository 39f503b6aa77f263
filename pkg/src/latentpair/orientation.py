"""Orientation estimation, coherence quality and FOMFE regularisation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .core import BinaryMask, GrayImage, OrientationField, QualityMap, wrap_pi
from .errors import DegenerateFitError, InputError

WINDOW = 17

# 3x3 Sobel stencils, normalised so a unit ramp has unit gradient.
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
SOBEL_Y = SOBEL_X.T.copy()


def gradients(img: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sobel gradients with edge-replicated borders."""
    a = np.asarray(img, dtype=np.float64)
    gx = ndimage.correlate(a, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(a, SOBEL_Y, mode="nearest")
    return gx, gy


def window_sum(a: np.ndarray, size: int = WINDOW) -> np.ndarray:
    """Sum over a size x size window, pixels outside the raster contribute 0."""
    k = np.ones(size)
    out = ndimage.correlate1d(a, k, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def structure_tensor(img: np.ndarray, size: int = WINDOW):
    gx, gy = gradients(img)
    return window_sum(gx * gx, size), window_sum(gy * gy, size), window_sum(gx * gy, size)


def _coherence(gxx, gyy, gxy):
    num = np.sqrt((gxx - gyy) ** 2 + 4.0 * gxy ** 2)
    den = gxx + gyy
    ok = den > 0
    q = np.zeros_like(den)
    q[ok] = num[ok] / den[ok]
    return np.clip(q, 0.0, 1.0)


def coherence_quality_map(img: GrayImage, size: int = WINDOW) -> QualityMap:
    """Orientation coherence of every pixel over a ``size`` x ``size`` window.

    Pixels with zero gradient energy in the window get quality 0.
    """
    data = img.data if isinstance(img, GrayImage) else np.asarray(img, float)
    if min(data.shape) < size:
        raise InputError(f"image must be at least {size}x{size}")
    return QualityMap(_coherence(*structure_tensor(data, size)))


def quality_mask(q: QualityMap, threshold: float = 0.9) -> BinaryMask:
    if not 0.0 <= threshold <= 1.0:
        raise InputError(f"threshold must lie in [0, 1], got {threshold}")
    return BinaryMask(q.values >= threshold)


def estimate_orientation_field(img: GrayImage, roi: Optional[BinaryMask] = None,
                               size: int = WINDOW) -> OrientationField:
    """Dominant ridge orientation from the windowed gradient structure tensor.

    The ridge runs perpendicular to the dominant gradient. Pixels whose
    window has no gradient energy are invalid.
    """
    data = img.data if isinstance(img, GrayImage) else np.asarray(img, float)
    gxx, gyy, gxy = structure_tensor(data, size)
    energy = gxx + gyy
    valid = energy > 1e-9
    if roi is not None:
        valid &= roi.data
    theta = 0.5 * np.arctan2(2.0 * gxy, gxx - gyy) + np.pi / 2
    return OrientationField(np.where(valid, wrap_pi(theta), 0.0), valid)


# ---------------------------------------------------------------------------
# FOMFE


@dataclass(frozen=True)
class FomfeModel:
    order: int
    coeff_cos: np.ndarray
    coeff_sin: np.ndarray
    width: int
    height: int
    residual: float = 0.0

    def __post_init__(self):
        n = (2 * self.order + 1) ** 2
        if self.order < 1:
            raise InputError("FOMFE order must be >= 1")
        if np.size(self.coeff_cos) != n or np.size(self.coeff_sin) != n:
            raise InputError(f"order {self.order} needs {n} coefficients per surface")

    @property
    def n_basis(self) -> int:
        return (2 * self.order + 1) ** 2


def fourier_basis(coords: np.ndarray, period: float, order: int) -> np.ndarray:
    """Columns ``[1, cos(w t), sin(w t), ..., cos(k w t), sin(k w t)]`` with ``w = 2pi/period``."""
    t = np.asarray(coords, dtype=np.float64)
    w = 2.0 * np.pi / period
    cols = [np.ones_like(t)]
    for m in range(1, order + 1):
        cols.append(np.cos(m * w * t))
        cols.append(np.sin(m * w * t))
    return np.stack(cols, axis=-1)


def fomfe_design(xs, ys, width: int, height: int, order: int) -> np.ndarray:
    bx = fourier_basis(xs, width, order)
    by = fourier_basis(ys, height, order)
    nb = 2 * order + 1
    return (by[:, :, None] * bx[:, None, :]).reshape(len(xs), nb * nb)


def fomfe_fit(of: OrientationField, order: int = 4, damping: float = 1e-8) -> FomfeModel:
    """Least-squares Fourier fit of the doubled-angle field over valid pixels."""
    if order < 1:
        raise InputError("FOMFE order must be >= 1")
    nb = (2 * order + 1) ** 2
    ys, xs = np.nonzero(of.valid)
    if len(xs) < nb:
        raise DegenerateFitError(f"{len(xs)} valid pixels, need at least {nb} for order {order}")
    A = fomfe_design(xs, ys, of.width, of.height, order)
    ang = of.angles[ys, xs]
    c = np.cos(2 * ang)
    s = np.sin(2 * ang)
    AtA = A.T @ A
    eig = np.linalg.eigvalsh(AtA)
    if eig[0] <= 1e-12 * eig[-1]:
        raise DegenerateFitError("rank-deficient FOMFE normal equations")
    lam = damping * np.trace(AtA) / nb
    K = AtA + lam * np.eye(nb)
    rhs = np.stack([A.T @ c, A.T @ s], axis=1)
    coef = np.linalg.solve(K, rhs)
    rc = A @ coef[:, 0] - c
    rs = A @ coef[:, 1] - s
    residual = float(np.mean(rc * rc + rs * rs))
    return FomfeModel(order, coef[:, 0].copy(), coef[:, 1].copy(), of.width, of.height, residual)


def fomfe_surfaces(m: FomfeModel) -> Tuple[np.ndarray, np.ndarray]:
    """Full-domain doubled-angle surfaces ``(cos 2theta, sin 2theta)``, unnormalised."""
    nb = 2 * m.order + 1
    bx = fourier_basis(np.arange(m.width), m.width, m.order)
    by = fourier_basis(np.arange(m.height), m.height, m.order)
    C = by @ np.asarray(m.coeff_cos).reshape(nb, nb) @ bx.T
    S = by @ np.asarray(m.coeff_sin).reshape(nb, nb) @ bx.T
    return C, S


def fomfe_eval(m: FomfeModel, region: Optional[BinaryMask] = None) -> OrientationField:
    """Orientation field from the model, defined on every pixel of ``region``."""
    if region is None:
        region = BinaryMask.full(m.width, m.height)
    if region.shape != (m.height, m.width):
        raise InputError(f"region {region.shape} does not match model domain {(m.height, m.width)}")
    C, S = fomfe_surfaces(m)
    theta = wrap_pi(0.5 * np.arctan2(S, C))
    return OrientationField(np.where(region.data, theta, 0.0), region.data)


# ---------------------------------------------------------------------------
# Serialisation: float32 little-endian grid + JSON sidecar, NaN marks invalid.


def save_orientation_field(of: OrientationField, path) -> None:
    path = Path(path)
    grid = np.where(of.valid, of.angles, np.nan).astype("<f4")
    path.write_bytes(grid.tobytes())
    meta = {"width": of.width, "height": of.height, "encoding": "radians_mod_pi", "invalid": "nan"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))


def load_orientation_field(path) -> OrientationField:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if meta.get("encoding") != "radians_mod_pi":
        raise InputError(f"unknown orientation encoding {meta.get('encoding')!r}")
    grid = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    grid = grid.reshape(meta["height"], meta["width"])
    valid = np.isfinite(grid)
    return OrientationField(np.where(valid, grid, 0.0), valid)
