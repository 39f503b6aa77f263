"""Hexagonal orientation-field partitions and coarse alignment (DLO / M-DLO).

Transforms returned here map the second field ``Q`` (the reference) into the
frame of the first field ``P`` (the latent): ``apply_rigid(Q, t, out_shape=P.shape)``
overlays ``Q`` on ``P``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (Minutia, OrientationField, RigidTransform, _bilinear, angular_distance,
                   apply_rigid, wrap_half_pi, wrap_pi)
from .errors import AlignmentFailed, FeatureUnavailable, NoCandidatesError

SIDE = 12
MIN_OVERLAP_ELEMENTS = 5
# E, NE, NW, W, SW, SE in pointy-top axial coordinates (image y grows downwards).
NEIGHBOURS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))
SQRT3 = math.sqrt(3.0)


def hex_area(side: float) -> float:
    return 1.5 * SQRT3 * side * side


def axial_coords(px: np.ndarray, py: np.ndarray, side: float) -> Tuple[np.ndarray, np.ndarray]:
    """Pointy-top axial hex coordinates of offsets ``(px, py)`` from the lattice anchor."""
    qf = (SQRT3 / 3.0 * px - py / 3.0) / side
    rf = (2.0 / 3.0 * py) / side
    xf, zf = qf, rf
    yf = -xf - zf
    rx, ry, rz = np.rint(xf), np.rint(yf), np.rint(zf)
    dx, dy, dz = np.abs(rx - xf), np.abs(ry - yf), np.abs(rz - zf)
    fix_x = (dx > dy) & (dx > dz)
    fix_z = ~fix_x & (dz >= dy)
    rx = np.where(fix_x, -ry - rz, rx)
    rz = np.where(fix_z, -rx - ry, rz)
    return rx.astype(np.int64), rz.astype(np.int64)


def hex_center(q: int, r: int, side: float) -> Tuple[float, float]:
    return side * SQRT3 * (q + r / 2.0), side * 1.5 * r


@dataclass(frozen=True)
class Lattice:
    """Pixel-to-element labelling of a raster window for one anchored tiling."""

    shape: Tuple[int, int]
    center: Tuple[float, float]
    side: float
    window: Tuple[int, int, int, int]  # y0, y1, x0, x1
    labels: np.ndarray  # flattened window pixel -> element index
    keys: np.ndarray  # (n, 2) axial (q, r) per element
    index: dict = field(repr=False, compare=False, hash=False)

    @property
    def n(self) -> int:
        return len(self.keys)


def _build_lattice(shape, center, side, radius) -> Lattice:
    h, w = shape
    cx, cy = center
    if radius is None:
        y0, y1, x0, x1 = 0, h, 0, w
    else:
        y0, y1 = max(0, int(math.floor(cy - radius))), min(h, int(math.ceil(cy + radius)) + 1)
        x0, x1 = max(0, int(math.floor(cx - radius))), min(w, int(math.ceil(cx + radius)) + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    q, r = axial_coords(xx - cx, yy - cy, side)
    q, r = q.ravel(), r.ravel()
    if q.size == 0:
        keys = np.zeros((0, 2), np.int64)
        labels = np.zeros(0, np.int64)
    else:
        q0, r0 = q.min(), r.min()
        nr = int(r.max() - r0) + 1
        labels = (q - q0) * nr + (r - r0)
        n = int(labels.max()) + 1
        kq, kr = np.divmod(np.arange(n), nr)
        keys = np.stack([kq + q0, kr + r0], 1)
    index = {(int(a), int(b)): i for i, (a, b) in enumerate(keys)}
    labels.setflags(write=False)
    keys.setflags(write=False)
    return Lattice(tuple(shape), (cx, cy), side, (y0, y1, x0, x1), labels, keys, index)


_local_lattice = lru_cache(maxsize=4096)(_build_lattice)
_full_lattice = lru_cache(maxsize=48)(_build_lattice)


def lattice(shape: Tuple[int, int], center: Tuple[float, float], side: float = SIDE,
            radius: Optional[float] = None) -> Lattice:
    key = (tuple(shape), (float(center[0]), float(center[1])), float(side), radius)
    return (_full_lattice if radius is None else _local_lattice)(*key)


@dataclass(frozen=True)
class HexElement:
    q: int
    r: int
    angle: float
    count: int
    valid: bool


@dataclass(frozen=True)
class HexPartition:
    center: Tuple[float, float]
    side: float
    keys: np.ndarray
    angles: np.ndarray
    counts: np.ndarray
    valid: np.ndarray
    index: dict = field(repr=False, compare=False)

    @property
    def elements(self) -> List[HexElement]:
        return [HexElement(int(k[0]), int(k[1]), float(a), int(c), bool(v))
                for k, a, c, v in zip(self.keys, self.angles, self.counts, self.valid)]

    def element(self, q: int, r: int) -> Optional[HexElement]:
        i = self.index.get((q, r))
        if i is None:
            return None
        return HexElement(q, r, float(self.angles[i]), int(self.counts[i]), bool(self.valid[i]))


def _element_stats(of: OrientationField, lat: Lattice):
    """Per-element doubled-angle sums and valid-pixel counts."""
    y0, y1, x0, x1 = lat.window
    v = of.valid[y0:y1, x0:x1].ravel()
    a = of.angles[y0:y1, x0:x1].ravel()
    wv = v.astype(np.float64)
    c = np.bincount(lat.labels, weights=np.cos(2 * a) * wv, minlength=lat.n)
    s = np.bincount(lat.labels, weights=np.sin(2 * a) * wv, minlength=lat.n)
    cnt = np.bincount(lat.labels, weights=wv, minlength=lat.n)
    return c, s, cnt


def _element_angles(c, s, cnt, side):
    valid = (cnt >= 0.5 * hex_area(side)) & (np.hypot(c, s) > 1e-9 * np.maximum(cnt, 1))
    ang = np.where(valid, wrap_pi(0.5 * np.arctan2(s, c)), 0.0)
    return ang, valid


def hex_partition(of: OrientationField, center: Tuple[float, float], side: float = SIDE,
                  radius: Optional[float] = None) -> HexPartition:
    """Tile ``of`` with hexagons anchored at ``center``.

    Each element's orientation is the doubled-angle circular mean of its valid
    pixels; an element is valid when at least half of a full hexagon's area is
    covered by valid pixels. ``radius`` restricts the tiling to a window.
    """
    cx, cy = float(center[0]), float(center[1])
    lat = lattice(of.shape, (cx, cy), float(side), radius)
    c, s, cnt = _element_stats(of, lat)
    ang, valid = _element_angles(c, s, cnt, side)
    return HexPartition((cx, cy), float(side), lat.keys, ang, cnt.astype(int), valid, lat.index)


@dataclass(frozen=True)
class HexFeatureVector:
    values: np.ndarray
    anchor: object
    central_angle: float = 0.0


def minutia_feature_vector(part: HexPartition, anchor=None) -> HexFeatureVector:
    """Signed pi-periodic differences between the central element and its six neighbours."""
    keys = [(0, 0)] + [tuple(n) for n in NEIGHBOURS]
    angles = []
    for q, r in keys:
        e = part.element(q, r)
        if e is None or not e.valid:
            raise FeatureUnavailable(f"element {(q, r)} around {part.center} is invalid")
        angles.append(e.angle)
    centre = angles[0]
    vals = wrap_half_pi(centre - np.asarray(angles[1:]))
    return HexFeatureVector(np.asarray(vals, float), anchor if anchor is not None else part.center, centre)


def feature_at(of: OrientationField, point: Tuple[float, float], anchor=None,
               side: float = SIDE) -> HexFeatureVector:
    part = hex_partition(of, point, side, radius=3.0 * side)
    return minutia_feature_vector(part, anchor)


def feature_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance with each entry difference taken pi-periodically."""
    d = wrap_half_pi(np.asarray(a)[..., :] - np.asarray(b))
    return np.sqrt(np.sum(d * d, axis=-1))


def candidate_pairs(fvs_latent: Sequence[HexFeatureVector], fvs_ref: Sequence[HexFeatureVector],
                    keep_fraction: float = 0.20) -> List[Tuple[int, int, float]]:
    """Closest ``ceil(keep_fraction * |L| * |R|)`` cross pairs as ``(i, j, distance)``.

    Ties are broken by ``(i, j)``.
    """
    if not fvs_latent or not fvs_ref:
        raise NoCandidatesError("empty feature-vector list")
    A = np.stack([f.values for f in fvs_latent])
    B = np.stack([f.values for f in fvs_ref])
    d = feature_distance(A[:, None, :], B[None, :, :])
    n_l, n_r = d.shape
    keep = max(1, math.ceil(keep_fraction * n_l * n_r - 1e-9))
    ii, jj = np.meshgrid(np.arange(n_l), np.arange(n_r), indexing="ij")
    order = np.lexsort((jj.ravel(), ii.ravel(), d.ravel()))[:keep]
    return [(int(ii.flat[k]), int(jj.flat[k]), float(d.flat[k])) for k in order]


# ---------------------------------------------------------------------------
# Alignment cost


class _PFrame:
    """Cached element statistics of ``P`` for one lattice anchor."""

    def __init__(self, P: OrientationField, anchor, side):
        self.lat = lattice(P.shape, (float(anchor[0]), float(anchor[1])), float(side), None)
        c, s, cnt = _element_stats(P, self.lat)
        self.angles, self.valid = _element_angles(c, s, cnt, side)
        # Only pixels of P-valid elements can influence the cost.
        sel = np.nonzero(self.valid[self.lat.labels])[0]
        y0, y1, x0, x1 = self.lat.window
        ww = x1 - x0
        self.px = (sel % ww + x0).astype(np.float64)
        self.py = (sel // ww + y0).astype(np.float64)
        self.plabels = self.lat.labels[sel]


def _cost_from_stats(pf: _PFrame, c, s, cnt, side) -> Tuple[float, int]:
    qa, qv = _element_angles(c, s, cnt, side)
    both = pf.valid & qv
    n = int(both.sum())
    if n < MIN_OVERLAP_ELEMENTS:
        return math.inf, n
    return float(np.mean(angular_distance(pf.angles[both], qa[both]))), n


def _cost_against(pf: _PFrame, Qt: OrientationField, side: float) -> Tuple[float, int]:
    return _cost_from_stats(pf, *_element_stats(Qt, pf.lat), side)


class _QSampler:
    """Resamples ``Q`` at P-frame pixels without materialising the full warped field.

    Matches ``apply_rigid`` on orientation fields: bilinear doubled-angle
    vectors, valid where the interpolated validity weight reaches 0.5. The
    rotation by ``dtheta`` is applied to element sums (a linear map) instead
    of to every pixel.
    """

    def __init__(self, Q: OrientationField):
        c, s = Q.doubled()
        w = Q.valid.astype(np.float64)
        self.shape = Q.shape
        self.stack = np.stack([c * w, s * w, w], axis=-1)

    def element_stats(self, pf: _PFrame, t: RigidTransform):
        h, w = self.shape
        Minv = np.linalg.inv(t.matrix(((w - 1) / 2.0, (h - 1) / 2.0)))
        xs = Minv[0, 0] * pf.px + Minv[0, 1] * pf.py + Minv[0, 2]
        ys = Minv[1, 0] * pf.px + Minv[1, 1] * pf.py + Minv[1, 2]
        v, inside = _bilinear(self.stack, xs, ys)
        norm = np.hypot(v[:, 0], v[:, 1])
        ok = inside & (v[:, 2] >= 0.5 - 1e-12) & (norm > 1e-12)
        inv = np.where(ok, 1.0 / np.where(ok, norm, 1.0), 0.0)
        n = pf.lat.n
        c = np.bincount(pf.plabels, weights=v[:, 0] * inv, minlength=n)
        s = np.bincount(pf.plabels, weights=v[:, 1] * inv, minlength=n)
        cnt = np.bincount(pf.plabels, weights=ok.astype(np.float64), minlength=n)
        cs, sn = math.cos(2 * t.dtheta), math.sin(2 * t.dtheta)
        return cs * c - sn * s, sn * c + cs * s, cnt


def alignment_cost(P: OrientationField, Q: OrientationField, t: RigidTransform,
                   side: float = SIDE, anchor: Optional[Tuple[float, float]] = None) -> float:
    """Mean pi-periodic orientation difference over overlapping valid element pairs.

    ``Q`` is resampled into ``P``'s frame by ``t`` and both are tiled by the
    same hexagonal lattice (anchored at ``anchor``, default the centre of
    ``P``). Fewer than five overlapping pairs give an infinite cost.
    """
    if anchor is None:
        anchor = ((P.width - 1) / 2.0, (P.height - 1) / 2.0)
    Qt = apply_rigid(Q, t, out_shape=P.shape)
    return _cost_against(_PFrame(P, anchor, side), Qt, side)[0]


def orientation_error(P: OrientationField, Q: OrientationField, t: RigidTransform) -> float:
    """Mean per-pixel orientation difference (radians) of two aligned fields over their overlap."""
    Qt = apply_rigid(Q, t, out_shape=P.shape)
    both = P.valid & Qt.valid
    if not both.any():
        return math.inf
    return float(np.mean(angular_distance(P.angles[both], Qt.angles[both])))


# ---------------------------------------------------------------------------
# Search


@dataclass(frozen=True)
class AlignmentResult:
    transform: RigidTransform
    cost: float
    candidate: Tuple[int, int]
    n_candidates: int


def transform_for_pair(p_xy, q_xy, dtheta: float, q_shape) -> RigidTransform:
    """Rigid transform rotating ``Q`` by ``dtheta`` and moving ``q_xy`` onto ``p_xy``."""
    h, w = q_shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    cs, sn = math.cos(dtheta), math.sin(dtheta)
    qv = np.asarray(q_xy, float) - c
    rq = np.array([cs * qv[0] - sn * qv[1], sn * qv[0] + cs * qv[1]])
    d = np.asarray(p_xy, float) - c - rq
    return RigidTransform(float(d[0]), float(d[1]), float(dtheta))


def _features(of: OrientationField, points, side, limit=None):
    out = []
    for i, (x, y) in enumerate(points):
        try:
            out.append((i, feature_at(of, (x, y), anchor=i, side=side)))
        except FeatureUnavailable:
            continue
        if limit is not None and len(out) >= limit:
            break
    return out


def _search(P, Q, p_points, q_points, p_dirs, q_dirs, side, keep_fraction, limit):
    fp = _features(P, p_points, side, limit)
    fq = _features(Q, q_points, side, limit)
    if not fp or not fq:
        raise NoCandidatesError(f"usable anchors: {len(fp)} in P, {len(fq)} in Q")
    pairs = candidate_pairs([f for _, f in fp], [f for _, f in fq], keep_fraction)
    frames = {}
    sampler = _QSampler(Q)
    best = None
    for k, (i, j, _) in enumerate(pairs):
        pi, fvp = fp[i]
        qj, fvq = fq[j]
        if p_dirs is None:
            dtheta = float(wrap_half_pi(fvp.central_angle - fvq.central_angle))
        else:
            dtheta = float(wrap_half_pi(p_dirs[pi] - q_dirs[qj]))
        t = transform_for_pair(p_points[pi], q_points[qj], dtheta, Q.shape)
        if pi not in frames:
            frames[pi] = _PFrame(P, p_points[pi], side)
        cost, _ = _cost_from_stats(frames[pi], *sampler.element_stats(frames[pi], t), side)
        if best is None or cost < best.cost:
            best = AlignmentResult(t, cost, (pi, qj), len(pairs))
    if best is None or not math.isfinite(best.cost):
        raise AlignmentFailed("no candidate alignment has a finite cost")
    return best


def mdlo_search(P: OrientationField, Q: OrientationField, minutiae_P: Sequence[Minutia],
                minutiae_Q: Sequence[Minutia], side: float = SIDE, keep_fraction: float = 0.20,
                max_minutiae: Optional[int] = None) -> AlignmentResult:
    """Minutia-anchored DLO: every similar minutia pair proposes one transform, the cheapest wins.

    Minutiae are consumed in the given order (callers pass them most reliable
    first); ``max_minutiae`` caps the number of usable anchors per side.
    """
    pp = [(m.x, m.y) for m in minutiae_P]
    qp = [(m.x, m.y) for m in minutiae_Q]
    pd = [m.direction for m in minutiae_P]
    qd = [m.direction for m in minutiae_Q]
    return _search(P, Q, pp, qp, pd, qd, side, keep_fraction, max_minutiae)


def mdlo_align(P, Q, minutiae_P, minutiae_Q, **kw) -> RigidTransform:
    return mdlo_search(P, Q, minutiae_P, minutiae_Q, **kw).transform


def random_anchors(of: OrientationField, n: int, rng: np.random.Generator, side: float = SIDE,
                   max_tries: int = 8) -> List[Tuple[float, float]]:
    """Up to ``n`` random valid pixels whose hexagon feature vector is computable."""
    ys, xs = np.nonzero(of.valid)
    out: List[Tuple[float, float]] = []
    if len(xs) == 0:
        return out
    for _ in range(n * max_tries):
        k = int(rng.integers(len(xs)))
        pt = (float(xs[k]), float(ys[k]))
        try:
            feature_at(of, pt, side=side)
        except FeatureUnavailable:
            continue
        out.append(pt)
        if len(out) >= n:
            break
    return out


def dlo_search(P: OrientationField, Q: OrientationField, n_anchors: int = 16, seed: int = 0,
               side: float = SIDE, keep_fraction: float = 0.20) -> AlignmentResult:
    """Baseline DLO with hexagons anchored at seeded random valid points.

    Both fields draw anchors from identically seeded generators. Candidate
    rotation is the difference of the central element orientations.
    """
    pa = random_anchors(P, n_anchors, np.random.default_rng(seed), side)
    qa = random_anchors(Q, n_anchors, np.random.default_rng(seed), side)
    if not pa or not qa:
        raise AlignmentFailed(f"no usable DLO anchors ({len(pa)} in P, {len(qa)} in Q)")
    return _search(P, Q, pa, qa, None, None, side, keep_fraction, None)


def dlo_align(P, Q, **kw) -> RigidTransform:
    return dlo_search(P, Q, **kw).transform
