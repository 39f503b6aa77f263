"""Contextual Gabor enhancement, thinning and crossing-number minutiae.

These stand in for learned latent enhancers and dedicated minutiae
extractors; the rest of the pipeline only needs an enhanced ridge image and
a ranked list of minutiae.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage, signal
from skimage.morphology import thin

from .core import BinaryMask, GrayImage, Minutia, OrientationField, QualityMap
from .errors import InputError
from .orientation import WINDOW, window_sum

N_ORIENT_BINS = 16


def gabor_kernel(theta: float, freq: float, sigma: Optional[float] = None) -> np.ndarray:
    """Even-symmetric Gabor kernel for ridges running along ``theta``.

    The cosine carrier varies across the ridges; the kernel is made zero-mean
    so flat shading gives no response.
    """
    if sigma is None:
        sigma = 0.5 / freq
    r = int(np.ceil(3 * sigma))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    across = -xx * np.sin(theta) + yy * np.cos(theta)
    along = xx * np.cos(theta) + yy * np.sin(theta)
    env = np.exp(-0.5 * (across ** 2 + along ** 2) / sigma ** 2)
    k = env * np.cos(2 * np.pi * freq * across)
    k -= env * (k.sum() / env.sum())
    return k / np.abs(k).sum()


def orientation_bins(of: OrientationField, n_bins: int = N_ORIENT_BINS) -> np.ndarray:
    return np.rint(of.angles / (np.pi / n_bins)).astype(int) % n_bins


def steered_filter(data: np.ndarray, of: OrientationField, freq: float,
                   n_bins: int = N_ORIENT_BINS, sigma: Optional[float] = None) -> np.ndarray:
    """Per-pixel Gabor response using the kernel nearest to the local orientation."""
    bins = orientation_bins(of, n_bins)
    out = np.zeros_like(data)
    for b in np.unique(bins[of.valid]):
        k = gabor_kernel(b * np.pi / n_bins, freq, sigma)
        resp = signal.fftconvolve(data, k, mode="same")
        sel = of.valid & (bins == b)
        out[sel] = resp[sel]
    return out


def gabor_enhance(img: GrayImage, of: OrientationField, ridge_freq: float = 1 / 8) -> GrayImage:
    """Orientation-steered Gabor filtering binarised at its mean.

    Ridges come out as 0, valleys and background (invalid orientation) as 255.
    """
    if not 0.05 < ridge_freq < 0.25:
        raise InputError(f"ridge frequency {ridge_freq} outside (0.05, 0.25)")
    if of.shape != img.shape:
        raise InputError("orientation field and image sizes differ")
    valid = of.valid
    if not valid.any():
        return GrayImage.blank(img.width, img.height)
    vals = img.data[valid]
    std = vals.std()
    norm = np.where(valid, (img.data - vals.mean()) / (std if std > 0 else 1.0), 0.0)
    resp = steered_filter(norm, of, ridge_freq)
    thr = resp[valid].mean()
    out = np.where(valid & (resp < thr), 0.0, 255.0)
    return GrayImage(out, img.dpi)


def ridge_band_map(img: GrayImage, block: int = 32, step: int = 8, ridge_freq: float = 1 / 8,
                   bandwidth: float = 0.45):
    """Block spectra on a ``step`` grid: fraction of AC energy near the ridge frequency, and band amplitude.

    Ridges are periodic at about ``ridge_freq``; lines, blobs and shading
    spread their energy over other frequencies.
    """
    a = img.data
    h, w = a.shape
    p = np.pad(a, block // 2, mode="reflect")
    ys, xs = np.arange(0, h, step), np.arange(0, w, step)
    tiles = sliding_window_view(p, (block, block))[ys][:, xs]
    tiles = tiles - tiles.mean(axis=(-1, -2), keepdims=True)
    win = np.outer(np.hanning(block), np.hanning(block))
    f = np.hypot(*np.meshgrid(np.fft.fftfreq(block), np.fft.fftfreq(block)))
    band = (f > ridge_freq * (1 - bandwidth)) & (f < ridge_freq * (1 + bandwidth))
    ac = f > 1.5 / block
    power = np.abs(np.fft.fft2(tiles * win)) ** 2
    e_band = (power * band).sum(axis=(-1, -2))
    e_ac = (power * ac).sum(axis=(-1, -2))
    return e_band / np.maximum(e_ac, 1e-9), np.sqrt(e_band / (win ** 2).sum())


def _largest_component(m: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(m)
    if n == 0:
        return m
    sizes = ndimage.sum(m, lab, range(1, n + 1))
    return lab == (1 + int(np.argmax(sizes)))


def segment_ridges(img: GrayImage, threshold: float = 0.72, min_amplitude: float = 20.0,
                   step: int = 8, erode: int = 4) -> BinaryMask:
    """ROI of the largest connected ridge-textured region.

    Blocks qualify when their ridge-band energy fraction exceeds
    ``threshold`` and the band amplitude exceeds ``min_amplitude``; the block
    map is cleaned morphologically, hole-filled and eroded by ``erode`` px.
    """
    frac, amp = ridge_band_map(img, step=step)
    frac = ndimage.uniform_filter(frac, 3, mode="nearest")
    m = _largest_component((frac > threshold) & (amp > min_amplitude))
    m = ndimage.binary_fill_holes(m)
    m = _largest_component(ndimage.binary_opening(m, iterations=2))
    h, w = img.shape
    up = np.kron(m, np.ones((step, step), bool))
    # Block k covers pixels centred on k * step.
    up = np.pad(up, ((0, step), (0, step)))[step // 2:step // 2 + h, step // 2:step // 2 + w]
    if erode > 0 and up.any():
        up = ndimage.binary_erosion(up, iterations=erode)
    return BinaryMask(up)


def _check_binary(img: GrayImage) -> np.ndarray:
    d = img.data
    if not np.all((d == 0) | (d == 255)):
        raise InputError("expected a binary {0, 255} image")
    return d == 0


def skeletonize(binary: GrayImage) -> GrayImage:
    """Thin ridges (value 0) to one-pixel-wide 8-connected curves."""
    ridges = _check_binary(binary)
    skel = thin(ridges) if ridges.any() else ridges
    return GrayImage(np.where(skel, 0.0, 255.0), binary.dpi)


# Neighbour ring in cyclic order starting east, going clockwise in image coords.
_RING = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]


def crossing_numbers(skel: np.ndarray) -> np.ndarray:
    """Crossing number ``0.5 * sum |P_i - P_{i+1}|`` for every pixel of a boolean skeleton."""
    p = np.pad(skel.astype(np.int8), 1)
    h, w = skel.shape
    ring = [p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in _RING]
    cn = np.zeros((h, w), dtype=np.int32)
    for i in range(8):
        cn += np.abs(ring[i] - ring[(i + 1) % 8])
    return np.where(skel, cn // 2, 0)


def _roi_interior(roi: np.ndarray, border: int) -> np.ndarray:
    if border <= 0:
        return roi.copy()
    dist = ndimage.distance_transform_edt(np.pad(roi, 1))[1:-1, 1:-1]
    return roi & (dist > border)


def _direction(skel: np.ndarray, y: int, x: int, theta: float, kind: str, radius: int = 5) -> float:
    """Pick ``theta`` or ``theta + pi``: endings point away from their ridge, bifurcations into their branches."""
    h, w = skel.shape
    y0, y1 = max(0, y - radius), min(h, y + radius + 1)
    x0, x1 = max(0, x - radius), min(w, x + radius + 1)
    ys, xs = np.nonzero(skel[y0:y1, x0:x1])
    ux = (xs + x0).mean() - x if len(xs) else 0.0
    uy = (ys + y0).mean() - y if len(ys) else 0.0
    dot = np.cos(theta) * ux + np.sin(theta) * uy
    flip = dot > 0 if kind == "ending" else dot < 0
    return theta + np.pi if flip else theta


def extract_minutiae(skeleton: GrayImage, of: OrientationField, q: QualityMap,
                     roi: Optional[BinaryMask] = None, border: int = 8) -> List[Minutia]:
    """Crossing-number minutiae sorted by reliability, then (y, x).

    CN = 1 marks a ridge ending, CN = 3 a bifurcation. Reliability is the mean
    quality over a 17 x 17 neighbourhood. Minutiae within ``border`` pixels of
    the ROI edge (default ROI: the valid orientation pixels) are dropped.
    """
    skel = _check_binary(skeleton)
    roi_arr = of.valid if roi is None else roi.data
    keep = _roi_interior(roi_arr, border)
    cn = crossing_numbers(skel)
    counts = window_sum(np.ones(q.shape), WINDOW)
    rel = window_sum(q.values, WINDOW) / counts
    out = []
    for kind, c in (("ending", 1), ("bifurcation", 3)):
        ys, xs = np.nonzero((cn == c) & keep)
        for y, x in zip(ys, xs):
            theta = of.angles[y, x]
            out.append(Minutia(float(x), float(y), _direction(skel, y, x, theta, kind), kind,
                               float(np.clip(rel[y, x], 0, 1))))
    out.sort(key=lambda m: (-m.reliability, m.y, m.x))
    return out


def save_minutiae(minutiae: List[Minutia], path) -> None:
    Path(path).write_text(json.dumps([m.to_dict() for m in minutiae], indent=1))


def load_minutiae(path) -> List[Minutia]:
    return [Minutia.from_dict(d) for d in json.loads(Path(path).read_text())]
