"""Desk-scale synthetic identification benchmark.

Fingers come from :func:`synth.make_finger`; the training set pairs latents
of both impressions with the opposite impression. Probes are fresh latents of
impression ``f`` drawn with a separate generator, searched against a gallery
holding impression ``s`` of every finger.
"""

from __future__ import annotations

import copy
import logging
import tempfile
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import GrayImage
from .net.ensemble import HybridModel
from .net.train import TrainConfig, TrainingHistory, _split_pairs, train_phases
from .pipeline import (CmcCurve, Fingerprint, GalleryIndex, PreprocessConfig, cmc, prepare_training_pairs,
                       preprocess_many, rank_scores, score_gallery)
from .synth import build_dataset, make_finger, make_noise_bank, synthesize_latent

log = logging.getLogger(__name__)


@dataclass
class ToySetup:
    n_fingers: int = 50
    seed: int = 0
    noise_count: int = 8
    workers: int = 1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(width_base=8))
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)


@dataclass
class ToyRun:
    setup: ToySetup
    model: HybridModel
    history: TrainingHistory
    gallery: GalleryIndex
    probes: List[Fingerprint]
    mate_ids: List[str]
    scores: List[list]  # score_gallery output per probe
    curve: CmcCurve
    timings: Dict[str, float]
    cnn_pairs: list
    rbm_pairs: list
    phase1_models: list  # weights before phases 2 and 3, for re-running them

    def ranked(self, k: int) -> List[Tuple[str, float]]:
        return rank_scores((i, s) for i, s, _ in self.scores[k])


def probe_latents(setup: ToySetup, fingers, bank) -> List[GrayImage]:
    return [synthesize_latent(f.f, bank, np.random.default_rng([setup.seed, 0x9B0BE, i]))
            for i, f in enumerate(fingers)]


def run_toy(setup: ToySetup = ToySetup(), out_dir=None) -> ToyRun:
    """Synthesise, train and evaluate; ``timings`` records the wall time of every stage."""
    t = {"start": time.perf_counter()}
    fingers = [make_finger(setup.seed, i) for i in range(setup.n_fingers)]
    bank = make_noise_bank(np.random.default_rng([setup.seed, 7]), setup.noise_count, 256, 256)
    with tempfile.TemporaryDirectory() as tmp:
        manifest = build_dataset([(f.f, f.s) for f in fingers], bank, np.random.default_rng(setup.seed),
                                 out_dir or tmp, [f.finger_id for f in fingers])
        t["synth"] = time.perf_counter()
        pairs, splits = prepare_training_pairs(manifest, setup.preprocess, setup.workers)
    t["prepare"] = time.perf_counter()
    cnn_pairs, rbm_pairs = _split_pairs(pairs, splits)
    first, h1 = train_phases(cnn_pairs, rbm_pairs, setup.train, phases=(1,), workers=setup.workers)
    phase1 = copy.deepcopy(first.models)
    model, hist = train_phases(cnn_pairs, rbm_pairs, setup.train, models=first.models, phases=(2, 3),
                               workers=setup.workers)
    hist.phase1 = model.metadata["phase1_history"] = h1.phase1
    t["train"] = time.perf_counter()
    gallery = GalleryIndex.build({f.finger_id: f.s for f in fingers}, setup.preprocess, setup.workers)
    probes = preprocess_many(probe_latents(setup, fingers, bank), setup.preprocess, setup.workers)
    mates = [f.finger_id for f in fingers]
    scores = []
    for k, p in enumerate(probes):
        scores.append(score_gallery(p, gallery, model, setup.preprocess, setup.workers))
        log.info("probe %d/%d scored", k + 1, len(probes))
    curve = cmc([rank_scores((i, s) for i, s, _ in sc) for sc in scores], mates)
    t["evaluate"] = time.perf_counter()
    timings = {k: t[k] - t["start"] for k in ("synth", "prepare", "train", "evaluate")}
    return ToyRun(setup, model, hist, gallery, probes, mates, scores, curve, timings, cnn_pairs, rbm_pairs,
                  phase1)
