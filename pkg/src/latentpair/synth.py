"""Synthetic training data: plastic distortion, noise compositing, procedural prints.

The distortion model moves every point ``v`` to ``v + Delta(v) * g(f(v), l)``:
points inside the contact ellipse stay put (``g = 0``), points beyond the
transition shell receive the full rotation + traction ``Delta``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import (BinaryMask, GrayImage, Minutia, OrientationField, RigidTransform, _bilinear,
                   apply_rigid, load_image, resize_bilinear, save_image, wrap_pi)
from .enhance import steered_filter
from .errors import InputError
from .orientation import FomfeModel, fomfe_eval

L_RANGE = (0.5, 2.0)
THETA_RANGE = (0.0, 5.0)
A_RANGE = (-15.0, 15.0)
SX_RANGE = (0.2, 0.6)  # multiples of b = width / 2
SY_RANGE = (0.2, 1.2)
NOISE_INTENSITY_RANGE = (0.2, 0.8)
RIDGE_FREQ = 1.0 / 8.0


@dataclass(frozen=True)
class DistortionParams:
    l: float
    theta: float  # degrees
    a: Tuple[float, float]
    o_r: Tuple[float, float]
    o_e: Tuple[float, float]
    s_x: float
    s_y: float

    @classmethod
    def zero(cls, width: int, height: int) -> "DistortionParams":
        c = ((width - 1) / 2.0, (height - 1) / 2.0)
        b = width / 2.0
        return cls(1.0, 0.0, (0.0, 0.0), c, c, 0.4 * b, 0.7 * b)


def sample_distortion_params(rng: np.random.Generator, image_width: int,
                             image_height: Optional[int] = None) -> DistortionParams:
    """Uniform draw from the plastic-distortion parameter ranges.

    Both centres are uniform over the central half of the image.
    """
    h = image_width if image_height is None else image_height
    b = image_width / 2.0

    def centre():
        return (float(rng.uniform(image_width / 4, 3 * image_width / 4)),
                float(rng.uniform(h / 4, 3 * h / 4)))

    return DistortionParams(
        l=float(rng.uniform(*L_RANGE)),
        theta=float(rng.uniform(*THETA_RANGE)),
        a=(float(rng.uniform(*A_RANGE)), float(rng.uniform(*A_RANGE))),
        o_r=centre(),
        o_e=centre(),
        s_x=float(rng.uniform(SX_RANGE[0] * b, SX_RANGE[1] * b)),
        s_y=float(rng.uniform(SY_RANGE[0] * b, SY_RANGE[1] * b)),
    )


def ellipse_distance(v, params: DistortionParams):
    """``sqrt((v - o_e)^T A^-1 (v - o_e)) - 1`` with ``A = diag(s_x^2, s_y^2)``."""
    v = np.asarray(v, dtype=np.float64)
    ex = (v[..., 0] - params.o_e[0]) / params.s_x
    ey = (v[..., 1] - params.o_e[1]) / params.s_y
    return np.sqrt(ex * ex + ey * ey) - 1.0


def transition(f_value, l: float):
    """Raised-cosine ramp: 0 for f <= 0, 1 for f >= l."""
    f = np.asarray(f_value, dtype=np.float64)
    # 0.5 * (1 - cos(pi f / l)) written via sin so both knots and the midpoint are exact
    inner = 0.5 + 0.5 * np.sin(np.pi * (np.clip(f, 0.0, l) / l - 0.5))
    out = np.where(f <= 0, 0.0, np.where(f >= l, 1.0, inner))
    return out if out.ndim else float(out)


def displacement(v, params: DistortionParams):
    """``R_theta (v - o_r) + o_r + a - v`` with ``R_theta = [[cos, sin], [-sin, cos]]``."""
    v = np.asarray(v, dtype=np.float64)
    th = math.radians(params.theta)
    c, s = math.cos(th), math.sin(th)
    px = v[..., 0] - params.o_r[0]
    py = v[..., 1] - params.o_r[1]
    # (R - I)(v - o_r) + a, written so theta = 0 gives exactly a
    dx = (c - 1.0) * px + s * py + params.a[0]
    dy = -s * px + (c - 1.0) * py + params.a[1]
    return np.stack([dx, dy], axis=-1)


def distort_points(v, params: DistortionParams):
    """Forward map ``v -> v + Delta(v) g(f(v), l)``."""
    v = np.asarray(v, dtype=np.float64)
    g = transition(ellipse_distance(v, params), params.l)
    return v + displacement(v, params) * np.asarray(g)[..., None]


def undistort_points(vp, params: DistortionParams, iterations: int = 5):
    """Fixed-point inverse of :func:`distort_points`, seeded at the distorted point."""
    vp = np.asarray(vp, dtype=np.float64)
    v = vp.copy()
    for _ in range(iterations):
        g = transition(ellipse_distance(v, params), params.l)
        v = vp - displacement(v, params) * np.asarray(g)[..., None]
    return v


def plastic_distort(img: GrayImage, params: DistortionParams, iterations: int = 5,
                    fill: float = 255.0) -> GrayImage:
    """Warp ``img`` by the plastic distortion using inverse mapping."""
    if params.theta == 0 and params.a[0] == 0 and params.a[1] == 0:
        return GrayImage(img.data.copy(), img.dpi)
    yy, xx = np.mgrid[0:img.height, 0:img.width].astype(np.float64)
    src = undistort_points(np.stack([xx, yy], -1), params, iterations)
    v, inside = _bilinear(img.data, src[..., 0], src[..., 1])
    return GrayImage(np.clip(np.where(inside, v, fill), 0, 255), img.dpi)


def composite_noise(fp: GrayImage, noise: GrayImage, intensity: float) -> GrayImage:
    """Convex blend ``(1 - intensity) * fp + intensity * noise`` clamped to [0, 255]."""
    lo, hi = NOISE_INTENSITY_RANGE
    if not lo - 1e-12 <= intensity <= hi + 1e-12:
        raise InputError(f"noise intensity {intensity} outside [{lo}, {hi}]")
    if noise.shape != fp.shape:
        noise = resize_bilinear(noise, fp.width, fp.height)
    out = (1.0 - intensity) * fp.data + intensity * noise.data
    return GrayImage(np.clip(out, 0, 255), fp.dpi)


# ---------------------------------------------------------------------------
# Noise bank


def _blur_noise(rng, h, w, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma)
    n -= n.min()
    return n / (n.max() + 1e-12)


def procedural_noise(rng: np.random.Generator, width: int, height: int) -> GrayImage:
    """Background clutter: low-frequency shading, blotches, lines and stroke clusters."""
    h, w = height, width
    img = 150 + 90 * _blur_noise(rng, h, w, rng.uniform(12, 30))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(int(rng.integers(2, 6))):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        rx, ry = rng.uniform(8, w / 4), rng.uniform(8, h / 4)
        blob = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1
        img = np.where(blob, img * rng.uniform(0.3, 0.8), img)
    for _ in range(int(rng.integers(1, 5))):
        ang = rng.uniform(0, np.pi)
        off = rng.uniform(-w / 2, w / 2)
        dist = np.abs((xx - w / 2) * np.sin(ang) - (yy - h / 2) * np.cos(ang) - off)
        img = np.where(dist < rng.uniform(1, 3), rng.uniform(0, 80), img)
    for _ in range(int(rng.integers(0, 3))):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        for _ in range(int(rng.integers(5, 15))):
            x0 = cx + rng.normal(0, 20)
            y0 = cy + rng.normal(0, 8)
            ang = rng.uniform(0, np.pi)
            ln = rng.uniform(4, 12)
            t = np.linspace(0, ln, 24)
            px = np.clip(np.rint(x0 + t * np.cos(ang)).astype(int), 0, w - 1)
            py = np.clip(np.rint(y0 + t * np.sin(ang)).astype(int), 0, h - 1)
            img[py, px] = rng.uniform(0, 60)
    img = ndimage.gaussian_filter(img, 0.7)
    return GrayImage(np.clip(img, 0, 255))


def make_noise_bank(rng: np.random.Generator, n: int, width: int, height: int) -> List[GrayImage]:
    return [procedural_noise(rng, width, height) for _ in range(n)]


def load_noise_dir(path) -> List[GrayImage]:
    """Every PNG/PGM in ``path`` (sorted by name) as a noise image."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".pgm"))
    if not files:
        raise InputError(f"no noise images in {path}")
    return [load_image(p) for p in files]


# ---------------------------------------------------------------------------
# Procedural rolled prints


def random_orientation_field(rng: np.random.Generator, width: int, height: int,
                             order: int = 2) -> OrientationField:
    """Smooth field from low-order Fourier coefficients with decaying Gaussian amplitudes."""
    nb = 2 * order + 1
    freq = np.array([0] + [m for m in range(1, order + 1) for _ in (0, 1)])
    decay = 1.0 / (1.0 + freq[:, None] + freq[None, :]) ** 1.5
    cc = (rng.standard_normal((nb, nb)) * decay).ravel()
    cs = (rng.standard_normal((nb, nb)) * decay).ravel()
    cc[0] += rng.normal(0, 0.5)
    model = FomfeModel(order, cc, cs, width, height)
    return fomfe_eval(model)


def finger_mask(width: int, height: int, rng: Optional[np.random.Generator] = None,
                shrink: float = 1.0) -> BinaryMask:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ax, ay = 0.42 * width * shrink, 0.47 * height * shrink
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    if rng is not None:
        ax *= rng.uniform(0.9, 1.0)
        ay *= rng.uniform(0.9, 1.0)
    return BinaryMask(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0)


def ridge_pattern(of: OrientationField, rng: np.random.Generator, iterations: int = 6,
                  freq: float = RIDGE_FREQ) -> np.ndarray:
    """Grow ridges by repeatedly Gabor-filtering white noise along ``of``; returns values in [-1, 1]."""
    x = rng.standard_normal(of.shape)
    for _ in range(iterations):
        x = steered_filter(x, of, freq, sigma=3.0)
        x = np.tanh(3.0 * x / (x.std() + 1e-12))
    return x


def singular_orientation_field(rng: np.random.Generator, width: int, height: int) -> OrientationField:
    """Zero-pole field with loop, whorl or arch topology plus a low-order Fourier perturbation.

    Each core adds half the argument of ``z - core`` and each delta subtracts
    half the argument of ``z - delta``; the perturbation is the doubled-angle
    field of :func:`random_orientation_field` at a reduced weight.
    """
    w, h = width, height
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    kind = rng.choice(["loop", "loop", "whorl", "arch"])
    cx = w * rng.uniform(0.42, 0.58)
    cy = h * rng.uniform(0.38, 0.52)
    cores, deltas = [], []
    if kind == "loop":
        cores = [(cx, cy)]
        side = rng.choice([-1.0, 1.0])
        deltas = [(cx + side * w * rng.uniform(0.15, 0.3), cy + h * rng.uniform(0.25, 0.4))]
    elif kind == "whorl":
        off = h * rng.uniform(0.04, 0.09)
        cores = [(cx - off * 0.5, cy - off), (cx + off * 0.5, cy + off)]
        deltas = [(cx - w * rng.uniform(0.25, 0.35), cy + h * rng.uniform(0.3, 0.42)),
                  (cx + w * rng.uniform(0.25, 0.35), cy + h * rng.uniform(0.3, 0.42))]
    theta = np.zeros_like(xx)
    for px, py in cores:
        theta += 0.5 * np.arctan2(yy - py, xx - px)
    for px, py in deltas:
        theta -= 0.5 * np.arctan2(yy - py, xx - px)
    if kind == "arch":
        amp = rng.uniform(0.4, 0.8)
        theta = np.arctan(amp * np.tanh((xx - cx) / (0.2 * w)) * np.exp(-((yy - cy) / (0.35 * h)) ** 2))
    theta += rng.uniform(-0.3, 0.3)
    pert = random_orientation_field(rng, w, h)
    c = np.cos(2 * theta) + 0.35 * np.cos(2 * pert.angles)
    s = np.sin(2 * theta) + 0.35 * np.sin(2 * pert.angles)
    return OrientationField(wrap_pi(0.5 * np.arctan2(s, c)), np.ones((h, w), bool))


def generate_synthetic_rolled(seed: int, width: int = 256, height: int = 256):
    """Deterministic binary ridge image plus its ground-truth orientation field."""
    if width < 256 or height < 256:
        raise InputError("synthetic prints need at least 256 x 256 pixels")
    rng = np.random.default_rng([int(seed), 0x5EED])
    full = singular_orientation_field(rng, width, height)
    roi = finger_mask(width, height, rng)
    ridges = ridge_pattern(full, rng)
    img = np.where(roi.data & (ridges < 0), 0.0, 255.0)
    of = OrientationField(np.where(roi.data, full.angles, 0.0), roi.data)
    return GrayImage(img), of


def render_impression(master: GrayImage, rng: np.random.Generator, max_shift: float = 8.0,
                      max_rot_deg: float = 8.0) -> GrayImage:
    """Another capture of the same finger: small rigid pose change plus mild plastic distortion."""
    t = RigidTransform.from_degrees(rng.uniform(-max_shift, max_shift), rng.uniform(-max_shift, max_shift),
                                    rng.uniform(-max_rot_deg, max_rot_deg))
    posed = apply_rigid(master, t, fill=255.0)
    p = sample_distortion_params(rng, master.width, master.height)
    mild = DistortionParams(p.l, p.theta / 2, (p.a[0] / 3, p.a[1] / 3), p.o_r, p.o_e, p.s_x, p.s_y)
    return plastic_distort(posed, mild)


def synthesize_latent(rolled: GrayImage, noise_bank: Sequence[GrayImage], rng: np.random.Generator,
                      visible_axes: Tuple[float, float] = (55.0, 80.0)) -> GrayImage:
    """Distorted, partial, noisy copy of ``rolled``.

    Only an elliptical patch (semi-axes drawn from ``visible_axes``) near the
    print centre keeps ridges; the whole canvas is then blended with a noise
    image at an intensity drawn from [0.2, 0.8].
    """
    if not noise_bank:
        raise InputError("noise bank is empty")
    params = sample_distortion_params(rng, rolled.width, rolled.height)
    distorted = plastic_distort(rolled, params)
    h, w = rolled.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = rng.uniform(0.35 * w, 0.65 * w)
    cy = rng.uniform(0.35 * h, 0.65 * h)
    ax, ay = rng.uniform(*visible_axes), rng.uniform(*visible_axes)
    visible = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    partial = GrayImage(np.where(visible, distorted.data, 255.0), rolled.dpi)
    noise = noise_bank[int(rng.integers(len(noise_bank)))]
    return composite_noise(partial, noise, float(rng.uniform(*NOISE_INTENSITY_RANGE)))


@dataclass
class SyntheticFinger:
    finger_id: str
    master: GrayImage
    f: GrayImage
    s: GrayImage


def make_finger(seed: int, index: int, width: int = 256, height: int = 256) -> SyntheticFinger:
    master, _ = generate_synthetic_rolled(int(seed) * 100003 + index, width, height)
    rng = np.random.default_rng([int(seed), index, 1])
    return SyntheticFinger(f"finger_{index:04d}", master, render_impression(master, rng),
                           render_impression(master, rng))


# ---------------------------------------------------------------------------
# Dataset manifest


@dataclass(frozen=True)
class ManifestEntry:
    latent_path: str
    reference_path: str
    finger_id: str
    reference_finger_id: str
    impression_label: str
    pair_label: str
    split: str


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    seed: int
    root: str = "."

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "entries": [asdict(e) for e in self.entries]},
                          indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        return cls([ManifestEntry(**e) for e in d["entries"]], d["seed"], str(path.parent))

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        return Path(self.root) / rel


def _store(img: GrayImage, out_dir: Path) -> str:
    """Content-addressed PNG store; returns the path relative to ``out_dir``."""
    arr = np.clip(np.rint(img.data), 0, 255).astype(np.uint8)
    digest = hashlib.sha256(arr.tobytes() + repr(arr.shape).encode()).hexdigest()[:20]
    rel = Path("images") / digest[:2] / f"{digest}.png"
    dest = out_dir / rel
    if not dest.exists():
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_image(img, dest)
    return rel.as_posix()


def build_dataset(fingers: Sequence[Tuple[GrayImage, GrayImage]], noise_bank: Sequence[GrayImage],
                  rng: np.random.Generator, out_dir, finger_ids: Optional[Sequence[str]] = None,
                  cnn_fraction: float = 0.8) -> DatasetManifest:
    """Genuine pairs latent(f)/ref(s) and latent(s)/ref(f), one random impostor per latent.

    Every latent uses its own generator derived from ``(base seed, finger, impression)``
    so synthesis order does not matter. Pairs are split 80/20 into
    ``cnn_train`` / ``rbm_train``.
    """
    if len(fingers) < 2:
        raise InputError("need at least two fingers to draw impostors")
    if not noise_bank:
        raise InputError("noise bank is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = int(rng.integers(2 ** 62))
    ids = list(finger_ids) if finger_ids is not None else [f"finger_{i:04d}" for i in range(len(fingers))]
    ref_paths = [(_store(f, out_dir), _store(s, out_dir)) for f, s in fingers]
    pairs = []
    n = len(fingers)
    for i, (f_img, s_img) in enumerate(fingers):
        for imp, src, mate_ref in (("f", f_img, ref_paths[i][1]), ("s", s_img, ref_paths[i][0])):
            lrng = np.random.default_rng([base, i, 0 if imp == "f" else 1])
            latent = synthesize_latent(src, noise_bank, lrng)
            lpath = _store(latent, out_dir)
            pairs.append((lpath, mate_ref, ids[i], ids[i], imp, "genuine"))
            other = int(lrng.integers(n - 1))
            other += other >= i
            ref = ref_paths[other][int(lrng.integers(2))]
            pairs.append((lpath, ref, ids[i], ids[other], imp, "impostor"))
    order = np.random.default_rng([base, 0xC0FFEE]).permutation(len(pairs))
    n_cnn = int(round(cnn_fraction * len(pairs)))
    splits = np.empty(len(pairs), dtype=object)
    splits[order[:n_cnn]] = "cnn_train"
    splits[order[n_cnn:]] = "rbm_train"
    entries = [ManifestEntry(*p, split=str(splits[k])) for k, p in enumerate(pairs)]
    manifest = DatasetManifest(entries, base, str(out_dir))
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# Alignment benchmark cases


@dataclass
class AlignmentCase:
    P: OrientationField
    Q: OrientationField
    P_clean: OrientationField
    Q_clean: OrientationField
    minutiae_P: List[Minutia]
    minutiae_Q: List[Minutia]
    truth: RigidTransform  # maps Q into P's frame


def impulse_orientation_noise(of: OrientationField, fraction: float, rng: np.random.Generator) -> OrientationField:
    """Replace ``fraction`` of the valid pixels by uniformly random orientations."""
    hit = of.valid & (rng.random(of.shape) < fraction)
    ang = np.where(hit, rng.uniform(0, np.pi, of.shape), of.angles)
    return OrientationField(ang, of.valid)


def local_direction(of: OrientationField, x: float, y: float, radius: int = 4) -> float:
    ys, xs = int(round(y)), int(round(x))
    sl = (slice(max(0, ys - radius), ys + radius + 1), slice(max(0, xs - radius), xs + radius + 1))
    v = of.valid[sl]
    a = of.angles[sl][v]
    return float(wrap_pi(0.5 * np.arctan2(np.sin(2 * a).sum(), np.cos(2 * a).sum())))


def alignment_case(seed: int, size: int = 160, max_shift: float = 40.0, max_rot_deg: float = 20.0,
                   noise: float = 0.10, n_true: int = 10, n_spurious: int = 4) -> AlignmentCase:
    """Latent-like field ``P`` and a rigidly moved reference field ``Q`` of the same finger.

    ``truth`` is the transform that maps ``Q`` back onto ``P``. True minutiae
    are shared (moved consistently); each side also gets spurious ones.
    """
    rng = np.random.default_rng([int(seed), 0xA11])
    canvas = size + 2 * int(max_shift) + 40
    master = random_orientation_field(rng, canvas, canvas)
    fwd = RigidTransform.from_degrees(rng.uniform(-max_shift, max_shift), rng.uniform(-max_shift, max_shift),
                                      rng.uniform(-max_rot_deg, max_rot_deg))
    moved = apply_rigid(master, fwd)
    off = (canvas - size) // 2
    crop = (slice(off, off + size), slice(off, off + size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    roi_p = ((xx - c) / (0.45 * size)) ** 2 + ((yy - c) / (0.40 * size)) ** 2 <= 1
    P_clean = OrientationField(np.where(roi_p, master.angles[crop], 0), roi_p & master.valid[crop])
    Q_clean = OrientationField(moved.angles, moved.valid)
    # P pixel p is master pixel p + off; Q pixel q = R(m - C) + C + d about the canvas centre C.
    C = (canvas - 1) / 2.0
    R = np.array([[math.cos(fwd.dtheta), -math.sin(fwd.dtheta)],
                  [math.sin(fwd.dtheta), math.cos(fwd.dtheta)]])
    d = np.array([fwd.dx, fwd.dy])
    back = -(R.T @ d) - off
    truth = RigidTransform(float(back[0]), float(back[1]), -fwd.dtheta)
    P = impulse_orientation_noise(P_clean, noise, rng)
    Q = impulse_orientation_noise(Q_clean, noise, rng)
    interior = np.argwhere(roi_p & (ndimage.distance_transform_edt(roi_p) > 30))
    pick = interior[rng.choice(len(interior), n_true, replace=False)]
    pts_p = pick[:, ::-1].astype(float)
    pts_q = (pts_p + off - C) @ R.T + C + d
    mp, mq = [], []
    for (x, y), (u, v) in zip(pts_p, pts_q):
        if not (0 <= u < canvas and 0 <= v < canvas):
            continue
        mp.append(Minutia(x, y, local_direction(P, x, y), "ending", 0.9))
        mq.append(Minutia(float(u), float(v), local_direction(Q, u, v), "ending", 0.9))
    for _ in range(n_spurious):
        x, y = interior[rng.integers(len(interior))][::-1]
        mp.append(Minutia(float(x), float(y), local_direction(P, x, y), "bifurcation", 0.5))
        qv = np.argwhere(Q.valid)
        y2, x2 = qv[rng.integers(len(qv))]
        mq.append(Minutia(float(x2), float(y2), local_direction(Q, x2, y2), "bifurcation", 0.5))
    return AlignmentCase(P, Q, P_clean, Q_clean, mp, mq, truth)
