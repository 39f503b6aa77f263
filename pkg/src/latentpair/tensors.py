"""Pair tensors (FIT / OFT), sliding-window patches, macro-patches and quality gating.

A pair tensor stacks the latent and the aligned reference channel-wise.
Order 1 puts the latent first, order 2 the reference first. Rasters are
indexed ``(row, col) = (y, x)`` and patch coordinates are top-left ``(x, y)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (BinaryMask, GrayImage, OrientationField, RigidTransform, apply_rigid,
                   resize_array)
from .errors import ContractViolation, DegenerateTensorError, InputError

FIT, OFT = "FIT", "OFT"
STRIDE = 16
CCNN_SIZES = (64, 80, 96, 192)
PCNN_SIZES = (32, 48, 64, 96)
PATCH_SIZES = (32, 48, 64, 80, 96, 192)
WHOLE_SIZE = 192
MACRO_OFFSETS = {"A": 16, "B": 32}
GATE_FRACTION = 0.75
MACRO_MIN_ATOMICS = 4  # strictly more than this many atomics must qualify


@dataclass(frozen=True)
class FingerprintView:
    """Everything the tensors need from one preprocessed fingerprint."""

    image: GrayImage  # enhanced image, ridges dark
    of: OrientationField
    roi: BinaryMask
    quality: BinaryMask  # good-quality mask


@dataclass(frozen=True)
class PairTensor:
    kind: str
    order: int
    data: np.ndarray  # (C, H, W)
    valid: np.ndarray  # (2, H, W): per-fingerprint validity, same group order as data
    origin: Tuple[int, int] = (0, 0)  # (x, y) of the crop in the latent frame

    def __post_init__(self):
        if self.kind not in (FIT, OFT):
            raise InputError(f"unknown tensor kind {self.kind!r}")
        if self.order not in (1, 2):
            raise InputError(f"tensor order must be 1 or 2, got {self.order}")
        want = 2 if self.kind == FIT else 4
        if self.data.ndim != 3 or self.data.shape[0] != want:
            raise InputError(f"{self.kind} tensor needs {want} channels, got shape {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def swapped(self) -> "PairTensor":
        """The other concatenation order: per-fingerprint channel groups exchanged."""
        return PairTensor(self.kind, 3 - self.order, swap_groups(self.data), self.valid[::-1].copy(),
                          self.origin)


def swap_groups(data: np.ndarray) -> np.ndarray:
    """Exchange the two per-fingerprint channel groups of a ``(..., C, H, W)`` array."""
    c = data.shape[-3]
    half = c // 2
    idx = list(range(half, c)) + list(range(half))
    return data[..., idx, :, :]


@dataclass(frozen=True)
class PairTensors:
    FIT1: PairTensor
    FIT2: PairTensor
    OFT1: PairTensor
    OFT2: PairTensor
    maskL: np.ndarray
    maskR: np.ndarray
    transform: RigidTransform

    def get(self, kind: str, order: int) -> PairTensor:
        return getattr(self, f"{kind}{order}")

    def swapped(self) -> "PairTensors":
        """Tensors with the roles of the two fingerprints exchanged."""
        return PairTensors(self.FIT2, self.FIT1, self.OFT2, self.OFT1, self.maskR, self.maskL,
                           self.transform)


def _bbox(mask: np.ndarray) -> Optional[Tuple[int, int, int, int]]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def _oft_planes(of: OrientationField) -> np.ndarray:
    c, s = of.doubled()
    return np.stack([c, s])


def build_pair_tensors(latent: FingerprintView, reference: FingerprintView, t: RigidTransform,
                       crop: str = "union", dtype=np.float64) -> PairTensors:
    """FIT and OFT tensors in both orders, in the latent's frame.

    The reference is resampled by ``t`` onto the latent raster. ``crop``
    selects the bounding box of the union of the two ROIs (``"union"``) or of
    their intersection (``"overlap"``). An empty ROI intersection is
    degenerate either way.
    """
    if not all(np.isfinite([t.dx, t.dy, t.dtheta])):
        raise InputError("transform parameters must be finite")
    shape = latent.image.shape
    img_r = apply_rigid(reference.image, t, fill=255.0, out_shape=shape)
    of_r = apply_rigid(reference.of, t, out_shape=shape)
    roi_r = apply_rigid(reference.roi, t, out_shape=shape).data
    q_r = apply_rigid(reference.quality, t, out_shape=shape).data
    roi_l = latent.roi.data
    inter = roi_l & roi_r
    if not inter.any():
        raise DegenerateTensorError("latent and transformed reference ROIs do not overlap")
    if crop == "union":
        box = _bbox(roi_l | roi_r)
    elif crop == "overlap":
        box = _bbox(inter)
    else:
        raise InputError(f"unknown crop mode {crop!r}")
    y0, y1, x0, x1 = box
    win = (slice(y0, y1), slice(x0, x1))
    fit = np.stack([latent.image.data[win], img_r.data[win]]) / 255.0
    oft = np.concatenate([_oft_planes(latent.of)[:, y0:y1, x0:x1], _oft_planes(of_r)[:, y0:y1, x0:x1]])
    valid = np.stack([latent.of.valid[win], of_r.valid[win]])
    fit_valid = np.stack([roi_l[win], roi_r[win]])
    mask_l = (latent.quality.data & roi_l)[win]
    mask_r = (q_r & roi_r)[win]
    origin = (x0, y0)
    fit1 = PairTensor(FIT, 1, fit.astype(dtype), fit_valid, origin)
    oft1 = PairTensor(OFT, 1, oft.astype(dtype), valid, origin)
    return PairTensors(fit1, fit1.swapped(), oft1, oft1.swapped(), mask_l, mask_r, t)


# ---------------------------------------------------------------------------
# Patches


@dataclass(frozen=True)
class Patch:
    kind: str
    order: int
    size: int
    x: int
    y: int
    data: np.ndarray
    resized: bool = False


def window_origins(width: int, height: int, j: int, stride: int = STRIDE) -> List[Tuple[int, int]]:
    """Top-left corners of every fully contained ``j`` x ``j`` window, row-major."""
    if width < j or height < j:
        return []
    return [(x, y) for y in range(0, height - j + 1, stride) for x in range(0, width - j + 1, stride)]


def expected_patch_count(width: int, height: int, j: int, stride: int = STRIDE) -> int:
    n = 0
    if width >= j and height >= j:
        n = ((width - j) // stride + 1) * ((height - j) // stride + 1)
    return n + (1 if j == WHOLE_SIZE else 0)


def resize_tensor(tensor: PairTensor, size: int) -> np.ndarray:
    """Whole-tensor bilinear resize; OFT doubled-angle pairs are renormalised."""
    hwc = np.moveaxis(tensor.data, 0, -1)
    out = resize_array(hwc, size, size)
    if tensor.kind == OFT:
        for g in (0, 2):
            n = np.hypot(out[..., g], out[..., g + 1])
            bad = n < 1e-12
            out[..., g] = np.where(bad, 1.0, out[..., g] / np.where(bad, 1.0, n))
            out[..., g + 1] = np.where(bad, 0.0, out[..., g + 1] / np.where(bad, 1.0, n))
    return np.moveaxis(out, -1, 0).astype(tensor.data.dtype)


def crop_patches(tensor: PairTensor, j: int, stride: int = STRIDE) -> List[Patch]:
    """Sliding ``j`` x ``j`` windows in row-major order; ``j = 192`` also gets the whole-tensor resize."""
    if j not in PATCH_SIZES:
        raise InputError(f"unsupported patch size {j}")
    out = [Patch(tensor.kind, tensor.order, j, x, y, tensor.data[:, y:y + j, x:x + j])
           for x, y in window_origins(tensor.width, tensor.height, j, stride)]
    if j == WHOLE_SIZE:
        out.append(Patch(tensor.kind, tensor.order, j, 0, 0, resize_tensor(tensor, j), resized=True))
    return out


@dataclass(frozen=True)
class MacroPatch:
    kind: str
    order: int
    size: int
    method: str
    center: Tuple[int, int]
    atomics: Tuple[Patch, ...]  # row-major over (dy, dx) in {-d, 0, d}

    def stacked(self) -> np.ndarray:
        return np.stack([a.data for a in self.atomics])


def macro_centers(center: Tuple[float, float], method: str) -> List[Tuple[float, float]]:
    """Atomic-patch centres ``c + (dx, dy)`` with ``dx, dy`` in ``{-d, 0, d}``, row-major."""
    d = MACRO_OFFSETS[method]
    cx, cy = center
    return [(cx + dx, cy + dy) for dy in (-d, 0, d) for dx in (-d, 0, d)]


def macro_grid(width: int, height: int, j: int, method: str, stride: int = STRIDE):
    """Top-left corners ``(x, y)`` of the central atomic window of every fitting macro-patch."""
    d = MACRO_OFFSETS[method]
    span = j + 2 * d
    return [(x + d, y + d) for x, y in window_origins(width, height, span, stride)]


def crop_macro_patches(tensor: PairTensor, j: int, method: str, stride: int = STRIDE) -> List[MacroPatch]:
    """Macro-patches whose nine atomic windows all fit inside the tensor."""
    if j not in PCNN_SIZES:
        raise InputError(f"unsupported atomic size {j}")
    if method not in MACRO_OFFSETS:
        raise InputError(f"unknown macro-patch method {method!r}")
    d = MACRO_OFFSETS[method]
    out = []
    for x, y in macro_grid(tensor.width, tensor.height, j, method, stride):
        atoms = []
        for dy in (-d, 0, d):
            for dx in (-d, 0, d):
                ax, ay = x + dx, y + dy
                atoms.append(Patch(tensor.kind, tensor.order, j, ax, ay, tensor.data[:, ay:ay + j, ax:ax + j]))
        out.append(MacroPatch(tensor.kind, tensor.order, j, method, (x + j // 2, y + j // 2), tuple(atoms)))
    return out


# ---------------------------------------------------------------------------
# Quality gating


def _good(mask_l: np.ndarray, mask_r: np.ndarray) -> np.ndarray:
    return np.asarray(mask_l, bool) & np.asarray(mask_r, bool)


def _window_fraction(good: np.ndarray, x: int, y: int, j: int) -> float:
    return float(good[y:y + j, x:x + j].sum()) / float(j * j)


def patch_qualifies(good: np.ndarray, p: Patch, frac: float = GATE_FRACTION) -> bool:
    if p.resized:
        return bool(good.mean() > frac) if good.size else False
    return _window_fraction(good, p.x, p.y, p.size) > frac


def quality_gate_patches(patches: Sequence[Patch], mask_l, mask_r, frac: float = GATE_FRACTION) -> List[Patch]:
    """FIT patches whose good-quality overlap covers strictly more than ``frac`` of their area."""
    good = _good(mask_l, mask_r)
    kept = []
    for p in patches:
        if p.kind != FIT:
            raise ContractViolation("quality gating applies to FIT patches only")
        if patch_qualifies(good, p, frac):
            kept.append(p)
    return kept


def quality_gate_macro(macros: Sequence[MacroPatch], mask_l, mask_r, frac: float = GATE_FRACTION,
                       min_atomics: int = MACRO_MIN_ATOMICS) -> List[MacroPatch]:
    """Macro-patches with more than ``min_atomics`` individually qualifying atomics."""
    good = _good(mask_l, mask_r)
    kept = []
    for m in macros:
        if m.kind != FIT:
            raise ContractViolation("quality gating applies to FIT macro-patches only")
        n = sum(patch_qualifies(good, a, frac) for a in m.atomics)
        if n > min_atomics:
            kept.append(m)
    return kept


def gate_windows(good: np.ndarray, origins: Sequence[Tuple[int, int]], j: int,
                 frac: float = GATE_FRACTION) -> np.ndarray:
    """Vectorised qualifying flags for windows of size ``j`` (summed-area table)."""
    sat = np.zeros((good.shape[0] + 1, good.shape[1] + 1))
    sat[1:, 1:] = np.cumsum(np.cumsum(good, 0), 1)
    out = np.zeros(len(origins), bool)
    for k, (x, y) in enumerate(origins):
        s = sat[y + j, x + j] - sat[y, x + j] - sat[y + j, x] + sat[y, x]
        out[k] = s / (j * j) > frac
    return out


# ---------------------------------------------------------------------------
# Evaluation padding


def fill_value(kind: str, channels: int) -> np.ndarray:
    """Per-channel fill: white paper for FIT, the ``theta = 0`` vector ``(1, 0)`` for OFT."""
    if kind == FIT:
        return np.ones(channels)
    return np.tile([1.0, 0.0], channels // 2)


def pad_to(tensor: PairTensor, j: int) -> PairTensor:
    """Embed the tensor top-left into a canvas at least ``j`` x ``j``; new area is fill, invalid."""
    h, w = tensor.height, tensor.width
    if h >= j and w >= j:
        return tensor
    nh, nw = max(h, j), max(w, j)
    fill = fill_value(tensor.kind, tensor.channels).astype(tensor.data.dtype)
    data = np.broadcast_to(fill[:, None, None], (tensor.channels, nh, nw)).copy()
    data[:, :h, :w] = tensor.data
    valid = np.zeros((2, nh, nw), bool)
    valid[:, :h, :w] = tensor.valid
    return PairTensor(tensor.kind, tensor.order, data, valid, tensor.origin)


def pad_mask(mask: np.ndarray, j: int) -> np.ndarray:
    h, w = mask.shape
    if h >= j and w >= j:
        return mask
    out = np.zeros((max(h, j), max(w, j)), bool)
    out[:h, :w] = mask
    return out
