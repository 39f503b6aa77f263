"""End-to-end orchestration: preprocessing, alignment, tensors, identification and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .align import AlignmentResult, dlo_search, mdlo_search
from .core import (BinaryMask, GrayImage, Minutia, OrientationField, QualityMap, RigidTransform,
                   load_image, save_image, save_mask)
from .enhance import extract_minutiae, gabor_enhance, save_minutiae, segment_ridges, skeletonize
from .errors import (AlignmentFailed, DegenerateFitError, InputError, LatentPairError,
                     NoCandidatesError, StageError)
from .net.cnn import activations
from .net.ensemble import (ALL_MODEL_IDS, HybridModel, ModelId, hybrid_score, model_inputs,
                           model_layout)
from .net.train import MATCH_LABEL, NONMATCH_LABEL, TrainingPair
from .parallel import parallel_map
from .orientation import (coherence_quality_map, estimate_orientation_field, fomfe_eval, fomfe_fit,
                          quality_mask, save_orientation_field)
from .tensors import FingerprintView, PairTensors, build_pair_tensors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessConfig:
    fomfe_order: int = 4
    quality_threshold: float = 0.9
    ridge_freq: float = 1 / 8
    segment_threshold: float = 0.72
    max_minutiae_latent: int = 16
    max_minutiae_reference: int = 48
    keep_fraction: float = 0.20
    dlo_anchors: int = 16
    side: int = 12
    tensor_crop: str = "overlap"
    seed: int = 0

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Fingerprint:
    """A preprocessed fingerprint: enhanced image, ROI, regularised field, quality and minutiae."""

    raw: GrayImage
    enhanced: GrayImage
    roi: BinaryMask
    of: OrientationField
    quality: QualityMap
    quality_mask: BinaryMask
    minutiae: Tuple[Minutia, ...]
    fomfe_order: int = 0  # 0 when the field could not be regularised

    def view(self) -> FingerprintView:
        return FingerprintView(self.enhanced, self.of, self.roi, self.quality_mask)


def regularize_field(raw: OrientationField, roi: BinaryMask, order: int) -> Tuple[OrientationField, int]:
    """FOMFE fit over the ROI's bounding box, evaluated on the whole ROI.

    The order drops until the fit is well posed; without any usable fit the
    raw field is returned with order 0.
    """
    ys, xs = np.nonzero(roi.data)
    if len(xs) == 0:
        return raw, 0
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    sub = OrientationField(raw.angles[y0:y1, x0:x1], raw.valid[y0:y1, x0:x1])
    for k in range(order, 0, -1):
        try:
            model = fomfe_fit(sub, k)
        except DegenerateFitError:
            continue
        ev = fomfe_eval(model)
        angles = np.zeros(raw.shape)
        angles[y0:y1, x0:x1] = ev.angles
        return OrientationField(angles, roi.data), k
    return raw, 0


def preprocess_fingerprint(img: GrayImage, config: PreprocessConfig = PreprocessConfig(),
                           debug_dir=None, name: str = "fp") -> Fingerprint:
    """Segmentation, orientation estimation, enhancement, quality, FOMFE and minutiae."""
    roi = segment_ridges(img, threshold=config.segment_threshold)
    raw_of = estimate_orientation_field(img, roi)
    enhanced = gabor_enhance(img, raw_of, config.ridge_freq)
    quality = coherence_quality_map(enhanced)
    qmask = BinaryMask(quality_mask(quality, config.quality_threshold).data & roi.data)
    of, order = regularize_field(raw_of, roi, config.fomfe_order)
    minutiae = tuple(extract_minutiae(skeletonize(enhanced), of, quality, roi)) if roi.data.any() else ()
    fp = Fingerprint(img, enhanced, roi, of, quality, qmask, minutiae, order)
    if debug_dir is not None:
        dump_fingerprint(fp, Path(debug_dir), name)
    return fp


def dump_fingerprint(fp: Fingerprint, out: Path, name: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_image(fp.enhanced, out / f"{name}_enhanced.png")
    save_mask(fp.roi, out / f"{name}_roi.pgm")
    save_mask(fp.quality_mask, out / f"{name}_quality.pgm")
    save_image(fp.quality.values * 255.0, out / f"{name}_coherence.png")
    save_orientation_field(fp.of, out / f"{name}_of.f32")
    save_minutiae(list(fp.minutiae), out / f"{name}_minutiae.json")


@dataclass(frozen=True)
class Alignment:
    transform: RigidTransform
    cost: float
    method: str  # "M-DLO" or "DLO"


def align_fingerprints(latent: Fingerprint, reference: Fingerprint,
                       config: PreprocessConfig = PreprocessConfig()) -> Alignment:
    """M-DLO on the most reliable minutiae, falling back to seeded DLO when it has no candidates."""
    try:
        r = mdlo_search(latent.of, reference.of, latent.minutiae[:config.max_minutiae_latent],
                        reference.minutiae[:config.max_minutiae_reference], config.side,
                        config.keep_fraction)
        return Alignment(r.transform, r.cost, "M-DLO")
    except (NoCandidatesError, AlignmentFailed) as first:
        try:
            r = dlo_search(latent.of, reference.of, config.dlo_anchors, config.seed, config.side,
                           config.keep_fraction)
        except (NoCandidatesError, AlignmentFailed) as second:
            raise AlignmentFailed(f"M-DLO: {first}; DLO fallback: {second}",
                                  stage="minutiae/fallback-DLO") from second
        return Alignment(r.transform, r.cost, "DLO")


@dataclass(frozen=True)
class PairResult:
    tensors: PairTensors
    alignment: Alignment
    latent: Fingerprint
    reference: Fingerprint


def pair_tensors(latent: Fingerprint, reference: Fingerprint, t: RigidTransform,
                 config: PreprocessConfig = PreprocessConfig()) -> PairTensors:
    return build_pair_tensors(latent.view(), reference.view(), t, crop=config.tensor_crop, dtype=np.float32)


def match_fingerprints(latent: Fingerprint, reference: Fingerprint,
                       config: PreprocessConfig = PreprocessConfig(),
                       transform: Optional[RigidTransform] = None) -> PairResult:
    al = align_fingerprints(latent, reference, config) if transform is None else \
        Alignment(transform, math.nan, "given")
    return PairResult(pair_tensors(latent, reference, al.transform, config), al, latent, reference)


def preprocess_pair(latent: GrayImage, reference: GrayImage, config: PreprocessConfig = PreprocessConfig(),
                    debug_dir=None) -> PairResult:
    """Both fingerprints preprocessed, aligned (reference into latent frame) and turned into tensors."""
    lf = preprocess_fingerprint(latent, config, debug_dir, "latent")
    rf = preprocess_fingerprint(reference, config, debug_dir, "reference")
    res = match_fingerprints(lf, rf, config)
    if debug_dir is not None:
        t = res.alignment.transform
        Path(debug_dir, "alignment.json").write_text(json.dumps(
            {"dx": t.dx, "dy": t.dy, "dtheta_deg": t.dtheta_deg, "cost": res.alignment.cost,
             "method": res.alignment.method}))
    return res


# ---------------------------------------------------------------------------
# Batch helpers


def _preprocess_task(state, img):
    return preprocess_fingerprint(img, state["config"])


def preprocess_many(images: Sequence[GrayImage], config: PreprocessConfig = PreprocessConfig(),
                    workers: int = 1) -> List[Fingerprint]:
    return parallel_map(_preprocess_task, list(images), workers, {"config": config})


# ---------------------------------------------------------------------------
# Gallery and identification


@dataclass
class GalleryIndex:
    entries: Dict[str, Fingerprint]
    params_hash: str

    @classmethod
    def build(cls, references: Dict[str, GrayImage], config: PreprocessConfig = PreprocessConfig(),
              workers: int = 1) -> "GalleryIndex":
        ids = sorted(references)
        if len(set(ids)) != len(ids):
            raise InputError("gallery ids must be unique")
        fps = preprocess_many([references[i] for i in ids], config, workers)
        return cls(dict(zip(ids, fps)), config.digest())

    @property
    def ids(self) -> List[str]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def _score_task(state, ref_id):
    latent, gallery, model, config = state["latent"], state["gallery"], state["model"], state["config"]
    transform = state.get("transforms", {}).get(ref_id)
    try:
        res = match_fingerprints(latent, gallery.entries[ref_id], config, transform)
        return ref_id, hybrid_score(model, res.tensors), res.alignment.transform
    except StageError as e:
        log.info("scoring %s failed at %s: %s", ref_id, e.stage, e)
        return ref_id, -math.inf, None


def rank_scores(scores: Iterable[Tuple[str, float]]) -> List[Tuple[str, float]]:
    """Descending score; ties broken by ascending reference id."""
    return sorted(scores, key=lambda s: (-s[1], s[0]))


def score_gallery(latent: Fingerprint, gallery: GalleryIndex, model: HybridModel,
                  config: PreprocessConfig = PreprocessConfig(), workers: int = 1,
                  transforms: Optional[Dict[str, RigidTransform]] = None):
    state = {"latent": latent, "gallery": gallery, "model": model, "config": config,
             "transforms": transforms or {}}
    return parallel_map(_score_task, gallery.ids, workers, state)


def identify(latent, gallery: GalleryIndex, model: HybridModel, workers: int = 1,
             config: PreprocessConfig = PreprocessConfig()) -> List[Tuple[str, float]]:
    """Rank every gallery entry by hybrid score against ``latent`` (an image or a preprocessed print).

    Entries whose alignment or tensors fail score ``-inf`` instead of aborting.
    """
    if len(gallery) == 0:
        raise InputError("gallery is empty")
    fp = latent if isinstance(latent, Fingerprint) else preprocess_fingerprint(latent, config)
    return rank_scores((i, s) for i, s, _ in score_gallery(fp, gallery, model, config, workers))


@dataclass(frozen=True)
class CmcCurve:
    ranks: np.ndarray
    rates: np.ndarray
    n_probes: int
    by_label: Dict[str, np.ndarray] = field(default_factory=dict)

    def rate(self, k: int) -> float:
        return float(self.rates[min(k, len(self.rates)) - 1])

    def to_csv(self) -> str:
        return "rank,rate\n" + "".join(f"{r},{v:.6f}\n" for r, v in zip(self.ranks, self.rates))


def mate_rank(ranked: Sequence[Tuple[str, float]], mate_id: str) -> int:
    ids = [i for i, _ in ranked]
    if mate_id not in ids:
        raise InputError(f"mate {mate_id!r} is not in the gallery")
    return ids.index(mate_id) + 1


def cmc(ranked_results: Sequence[Sequence[Tuple[str, float]]], mate_ids: Sequence[str],
        labels: Optional[Sequence[str]] = None) -> CmcCurve:
    """Closed-set CMC: ``rate(k)`` is the fraction of probes whose mate ranks within the top ``k``."""
    if len(ranked_results) != len(mate_ids) or not ranked_results:
        raise InputError("need one mate id per probe and at least one probe")
    n_gallery = max(len(r) for r in ranked_results)
    ranks = np.array([mate_rank(r, m) for r, m in zip(ranked_results, mate_ids)])
    ks = np.arange(1, n_gallery + 1)
    rates = (ranks[None, :] <= ks[:, None]).mean(axis=1)
    by_label = {}
    if labels is not None:
        for lab in sorted(set(labels)):
            sel = np.array([l == lab for l in labels])
            by_label[lab] = (ranks[None, sel] <= ks[:, None]).mean(axis=1)
    return CmcCurve(ks, rates, len(mate_ids), by_label)


def perturb_alignment_check(latent: Fingerprint, mate_id: str, gallery: GalleryIndex, model: HybridModel,
                            noise: Tuple[float, float, float] = (10.0, -10.0, 10.0),
                            config: PreprocessConfig = PreprocessConfig(),
                            baseline=None) -> Dict[str, int]:
    """Rank of the mate before and after adding ``(dx, dy, dtheta_deg)`` to its alignment.

    ``baseline`` may pass the ``score_gallery`` output to avoid rescoring.
    """
    base = baseline if baseline is not None else score_gallery(latent, gallery, model, config)
    before = rank_scores((i, s) for i, s, _ in base)
    t = {i: tr for i, _, tr in base}.get(mate_id)
    if t is None:
        return {"rank_before": mate_rank(before, mate_id), "rank_after": mate_rank(before, mate_id)}
    noisy = RigidTransform(t.dx + noise[0], t.dy + noise[1], t.dtheta + math.radians(noise[2]), t.center)
    _, s_new, _ = _score_task({"latent": latent, "gallery": gallery, "model": model, "config": config,
                               "transforms": {mate_id: noisy}}, mate_id)
    after = rank_scores([(i, s) for i, s, _ in base if i != mate_id] + [(mate_id, s_new)])
    return {"rank_before": mate_rank(before, mate_id), "rank_after": mate_rank(after, mate_id)}


# ---------------------------------------------------------------------------
# Ablations and feature maps

ABLATIONS = ("M", "M-Half", "M-C", "M-F")


def ablation_config(name: str) -> List[ModelId]:
    """Model ids kept by an ablation; the RBM must be retrained on the reduced input."""
    if name == "M":
        return list(ALL_MODEL_IDS)
    if name == "M-Half":
        return [m for m in ALL_MODEL_IDS if m[0] not in (1, 3, 5, 7)]
    if name == "M-C":
        return [m for m in ALL_MODEL_IDS if model_layout(m)[0] != "III"]
    if name == "M-F":
        return [m for m in ALL_MODEL_IDS if model_layout(m)[2] == "FIT"]
    raise InputError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")


def contact_sheet(maps: np.ndarray, pad: int = 2) -> np.ndarray:
    """Tile ``(C, H, W)`` maps, each min-max scaled to [0, 255], into one grayscale sheet."""
    c, h, w = maps.shape
    cols = int(math.ceil(math.sqrt(c)))
    rows = int(math.ceil(c / cols))
    sheet = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), 255.0)
    for k in range(c):
        m = maps[k].astype(np.float64)
        lo, hi = m.min(), m.max()
        m = (m - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(m)
        r, q = divmod(k, cols)
        sheet[pad + r * (h + pad):pad + r * (h + pad) + h, pad + q * (w + pad):pad + q * (w + pad) + w] = m
    return sheet


def feature_maps(model: HybridModel, tensors: PairTensors, model_id: ModelId = (4, 1),
                 order: int = 1) -> List[np.ndarray]:
    """Per-block activations ``(C, H, W)`` of one model on the pair's first input."""
    cnn = model.model(tuple(model_id))
    inp = model_inputs(cnn, tensors)[order - 1]
    batch = inp.patches[-1:] if inp.patches is not None else inp.atoms[:1]
    return [a[0] for a in activations(cnn.spec, cnn.weights, batch)]


def dump_feature_maps(model: HybridModel, tensors: PairTensors, layers: Sequence[int], out_dir,
                      model_id: ModelId = (4, 1), prefix: str = "layer") -> List[Path]:
    """Write one contact sheet per requested convolution block."""
    maps = feature_maps(model, tensors, model_id)
    for l in layers:
        if not 0 <= l < len(maps):
            raise InputError(f"layer {l} out of range: the network has {len(maps)} convolution blocks")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for l in layers:
        p = out / f"{prefix}{l}.png"
        save_image(contact_sheet(maps[l]), p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# Training data from a manifest


def _pair_task(state, item):
    lpath, rpath, label = item
    fps, config = state["fps"], state["config"]
    try:
        res = match_fingerprints(fps[lpath], fps[rpath], config)
    except StageError as e:
        log.info("training pair %s / %s dropped at %s", lpath, rpath, e.stage)
        return None
    return TrainingPair(res.tensors, label, f"{lpath}|{rpath}")


def prepare_training_pairs(manifest, config: PreprocessConfig = PreprocessConfig(), workers: int = 1):
    """Preprocess every image once, align every pair and build tensors; failed pairs are dropped."""
    paths = sorted({e.latent_path for e in manifest.entries} | {e.reference_path for e in manifest.entries})
    imgs = [load_image(manifest.resolve(p)) for p in paths]
    fps = dict(zip(paths, preprocess_many(imgs, config, workers)))
    items = [(e.latent_path, e.reference_path,
              MATCH_LABEL if e.pair_label == "genuine" else NONMATCH_LABEL) for e in manifest.entries]
    results = parallel_map(_pair_task, items, workers, {"fps": fps, "config": config})
    pairs, splits = [], []
    for e, r in zip(manifest.entries, results):
        if r is not None:
            pairs.append(r)
            splits.append(e.split)
    return pairs, splits


def scoring_benchmark(latent: Fingerprint, gallery: GalleryIndex, model: HybridModel, workers: int,
                      config: PreprocessConfig = PreprocessConfig()) -> dict:
    """Wall time of scoring the gallery sequentially and with ``workers`` processes."""
    t0 = time.perf_counter()
    seq = score_gallery(latent, gallery, model, config, 1)
    t1 = time.perf_counter()
    par = score_gallery(latent, gallery, model, config, workers)
    t2 = time.perf_counter()
    same = [(i, s) for i, s, _ in seq] == [(i, s) for i, s, _ in par]
    return {"gallery": len(gallery), "workers": workers, "sequential_s": t1 - t0, "parallel_s": t2 - t1,
            "per_pair_sequential_s": (t1 - t0) / len(gallery), "per_pair_parallel_s": (t2 - t1) / len(gallery),
            "speedup": (t1 - t0) / max(t2 - t1, 1e-9), "identical": same, "cpu_count": os.cpu_count()}
