"""Three-phase optimisation of the hybrid model.

Phase 1 trains every CNN on its own patch stream with binary cross-entropy.
Phase 2 fits the RBM on pooled outputs of the frozen CNNs. Phase 3 back-
propagates the RBM loss through the pooling (a mean, so every patch output
receives ``1/n`` of its order's share) into all CNNs.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import InputError, TrainingDiverged
from ..parallel import parallel_map
from ..tensors import PairTensors
from .cnn import MATCH, Weights, backward, forward
from .ensemble import (ALL_MODEL_IDS, CnnModel, HybridModel, ModelId, ModelInput, make_ensemble,
                       model_inputs, model_name, pooled_features, predict_match)
from .rbm import RbmParams, rbm_loss_and_grad, rbm_posterior

log = logging.getLogger(__name__)

MATCH_LABEL, NONMATCH_LABEL = 0, 1
EPS = 1e-12


@dataclass
class TrainConfig:
    width_base: int = 16
    model_ids: Tuple[ModelId, ...] = ALL_MODEL_IDS
    epochs_cnn: int = 3
    epochs_rbm: int = 3
    epochs_joint: int = 3
    lr_cnn: float = 0.01
    momentum: float = 0.9
    batch_cnn: int = 64
    patch_cap: int = 12  # per pair, order and model in phase 1
    rbm_hidden: int = 64
    lr_rbm: float = 0.1
    batch_rbm: int = 8
    rbm_steps_per_epoch: int = 0  # 0: one pass over the data
    lr_joint: float = 0.001
    lr_joint_rbm: float = 0.01
    batch_joint: int = 8
    joint_patch_cap: int = 0  # 0: every patch
    freeze_rbm: bool = False
    quality_gate: bool = True
    gate_fallback: bool = True  # train a FIT model ungated when no patch passes the gate
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_ids"] = [list(m) for m in self.model_ids]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model_ids" in d:
            d["model_ids"] = tuple(tuple(m) for m in d["model_ids"])
        return cls(**d)


@dataclass
class TrainingPair:
    tensors: PairTensors
    label: int  # class index, 0 = match
    pair_id: str = ""


@dataclass
class TrainingHistory:
    phase1: Dict[str, List[float]] = field(default_factory=dict)
    phase2: List[float] = field(default_factory=list)
    phase3: List[float] = field(default_factory=list)
    phase2_loss: float = math.nan  # rbm_train loss at the end of phase 2 (eval mode)
    phase3_loss: float = math.nan


class Sgd:
    """SGD with classical momentum over a dict of arrays, updated in place."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray]):
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v -= self.lr * g.astype(v.dtype)
            self.params[k] += v


def _check_finite(value: float, what: str):
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what}: loss became {value}")


# ---------------------------------------------------------------------------
# Phase 1


def _concat_inputs(parts: Sequence[ModelInput]) -> ModelInput:
    if parts[0].patches is not None:
        return ModelInput(patches=np.concatenate([p.patches for p in parts]))
    atoms, index, off = [], [], 0
    for p in parts:
        atoms.append(p.atoms)
        index.append(p.index + off)
        off += len(p.atoms)
    return ModelInput(atoms=np.concatenate(atoms), index=np.concatenate(index))


def bce_grad(p: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy of two-way probabilities and its gradient with respect to them."""
    n = len(labels)
    py = np.clip(p[np.arange(n), labels], EPS, 1.0)
    loss = float(-np.log(py).mean())
    g = np.zeros_like(p)
    g[np.arange(n), labels] = -1.0 / (py * n)
    return loss, g


def _patch_index(model: CnnModel, pairs: Sequence[TrainingPair], cap: int, rng,
                 gate: bool = True) -> List[Tuple[int, int, int]]:
    """(pair, order, row) items after quality gating and the per-pair cap."""
    items = []
    for k, pr in enumerate(pairs):
        for order, inp in enumerate(model_inputs(model, pr.tensors, gate=gate), start=1):
            rows = np.arange(inp.count)
            if cap and len(rows) > cap:
                rows = np.sort(rng.choice(rows, cap, replace=False))
            items += [(k, order, int(r)) for r in rows]
    return items


def train_cnn(model: CnnModel, pairs: Sequence[TrainingPair], config: TrainConfig, rng) -> List[float]:
    """Phase-1 SGD on one model; returns the mean training BCE of each epoch."""
    gate = config.quality_gate
    items = _patch_index(model, pairs, config.patch_cap, rng, gate)
    if not items and gate and config.gate_fallback:
        log.warning("%s: no patch passes the quality gate; training ungated", model_name(model.model_id))
        gate = False
        items = _patch_index(model, pairs, config.patch_cap, rng, gate)
    if not items:
        raise InputError(f"{model_name(model.model_id)} has no training inputs after gating")
    opt = Sgd(model.weights, config.lr_cnn, config.momentum)
    cache: "OrderedDict[Tuple[int, int], ModelInput]" = OrderedDict()

    def inputs_of(k, order):
        key = (k, order)
        if key not in cache:
            cache[key] = model_inputs(model, pairs[k].tensors, gate=gate)[order - 1]
            if len(cache) > 256:
                cache.popitem(last=False)
        return cache[key]

    history = []
    for epoch in range(config.epochs_cnn):
        perm = rng.permutation(len(items))
        losses, weights = [], []
        for b in range(0, len(perm), config.batch_cnn):
            chosen = [items[i] for i in perm[b:b + config.batch_cnn]]
            parts, labels = [], []
            for k, order, row in chosen:
                parts.append(inputs_of(k, order).subset(np.array([row])))
                labels.append(pairs[k].label)
            batch = _concat_inputs(parts)
            labels = np.array(labels)
            p, fc = forward(model.spec, model.weights, batch.batch(), True, rng)
            loss, g = bce_grad(p, labels)
            _check_finite(loss, f"phase 1 {model_name(model.model_id)}")
            grads, _ = backward(model.spec, model.weights, fc, g.astype(p.dtype), need_input_grad=False)
            opt.step(grads)
            losses.append(loss)
            weights.append(len(labels))
        history.append(float(np.average(losses, weights=weights)))
        log.info("phase1 %s epoch %d bce %.4f", model_name(model.model_id), epoch + 1, history[-1])
    return history


# ---------------------------------------------------------------------------
# Phase 2


def train_rbm(rbm: RbmParams, X: np.ndarray, y: np.ndarray, config: TrainConfig, rng) -> List[float]:
    opt = Sgd(rbm.arrays(), config.lr_rbm, config.momentum)
    n = len(y)
    history = []
    for epoch in range(config.epochs_rbm):
        steps = config.rbm_steps_per_epoch or math.ceil(n / config.batch_rbm)
        losses = []
        perm = np.concatenate([rng.permutation(n) for _ in range(math.ceil(steps * config.batch_rbm / n) + 1)])
        for s in range(steps):
            idx = perm[s * config.batch_rbm:(s + 1) * config.batch_rbm]
            loss, grads = rbm_loss_and_grad(rbm, X[idx], y[idx])
            _check_finite(loss, "phase 2 RBM")
            opt.step(grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("phase2 epoch %d loss %.4f", epoch + 1, history[-1])
    return history


def pair_loss(models: Sequence[CnnModel], rbm: RbmParams, pairs: Sequence[TrainingPair]) -> float:
    """Mean negative log posterior of the hybrid model over ``pairs`` (eval mode)."""
    X = np.stack([pooled_features(models, p.tensors) for p in pairs])
    y = np.array([p.label for p in pairs])
    return rbm_loss_and_grad(rbm, X, y)[0]


# ---------------------------------------------------------------------------
# Phase 3


def _order_inputs(models, pair: TrainingPair, cap: int, rng) -> List[Tuple[ModelInput, ModelInput]]:
    out = []
    for m in models:
        i1, i2 = model_inputs(m, pair.tensors)
        if cap:
            i1, i2 = [i.subset(np.sort(rng.choice(i.count, cap, replace=False))) if i.count > cap else i
                      for i in (i1, i2)]
        out.append((i1, i2))
    return out


def joint_loss_and_grad(models: Sequence[CnnModel], rbm: RbmParams,
                        inputs: Sequence[List[Tuple[ModelInput, ModelInput]]], labels: np.ndarray):
    """RBM loss over a batch of pairs and its gradient for every CNN weight and RBM parameter.

    ``inputs[i][q]`` holds the two order inputs of model ``q`` for pair ``i``.
    All networks run in evaluation mode, so the loss is a deterministic
    function of the parameters.
    """
    n, nq = len(inputs), len(models)
    X = np.zeros((n, nq))
    for i, per_model in enumerate(inputs):
        for q, (m, (a, b)) in enumerate(zip(models, per_model)):
            X[i, q] = 0.5 * (predict_match(m, a).mean() + predict_match(m, b).mean())
    loss, rgrads, dX = rbm_loss_and_grad(rbm, X, labels, need_input_grad=True)
    cgrads = [{k: np.zeros(v.shape, np.float64) for k, v in m.weights.items()} for m in models]
    for i, per_model in enumerate(inputs):
        for q, (m, orders) in enumerate(zip(models, per_model)):
            if dX[i, q] == 0.0:
                continue
            for inp in orders:
                p, fc = forward(m.spec, m.weights, inp.batch(), False)
                g = np.zeros_like(p)
                g[:, MATCH] = 0.5 * dX[i, q] / inp.count
                grads, _ = backward(m.spec, m.weights, fc, g, need_input_grad=False)
                for k, v in grads.items():
                    cgrads[q][k] += v
    return loss, cgrads, rgrads


def train_joint(models: Sequence[CnnModel], rbm: RbmParams, pairs: Sequence[TrainingPair],
                config: TrainConfig, rng) -> List[float]:
    opts = [Sgd(m.weights, config.lr_joint, config.momentum) for m in models]
    ropt = None if config.freeze_rbm else Sgd(rbm.arrays(), config.lr_joint_rbm, config.momentum)
    history = []
    for epoch in range(config.epochs_joint):
        perm = rng.permutation(len(pairs))
        losses, sizes = [], []
        for b in range(0, len(perm), config.batch_joint):
            chosen = [pairs[i] for i in perm[b:b + config.batch_joint]]
            inputs = [_order_inputs(models, p, config.joint_patch_cap, rng) for p in chosen]
            labels = np.array([p.label for p in chosen])
            loss, cgrads, rgrads = joint_loss_and_grad(models, rbm, inputs, labels)
            _check_finite(loss, "phase 3 joint")
            for opt, g in zip(opts, cgrads):
                opt.step(g)
            if ropt is not None:
                ropt.step(rgrads)
            losses.append(loss)
            sizes.append(len(chosen))
        history.append(float(np.average(losses, weights=sizes)))
        log.info("phase3 epoch %d loss %.4f", epoch + 1, history[-1])
    return history


# ---------------------------------------------------------------------------
# Driver


def _split_pairs(pairs: Sequence[TrainingPair], splits: Sequence[str]):
    cnn = [p for p, s in zip(pairs, splits) if s == "cnn_train"]
    rbm = [p for p, s in zip(pairs, splits) if s == "rbm_train"]
    return cnn, rbm


def _phase1_task(state, k):
    m, config = state["models"][k], state["config"]
    rng = np.random.default_rng([config.seed, 1, m.model_id[0], m.model_id[1]])
    h = train_cnn(m, state["pairs"], config, rng)
    return m.weights, h


def train_phases(cnn_pairs: Sequence[TrainingPair], rbm_pairs: Sequence[TrainingPair],
                 config: TrainConfig, models: Optional[List[CnnModel]] = None,
                 phases: Sequence[int] = (1, 2, 3), workers: int = 1) -> Tuple[HybridModel, TrainingHistory]:
    """Run the requested phases. ``models`` lets callers resume from phase-1 weights.

    Phase 1 trains the CNNs independently, one per worker process; each model
    has its own seeded generator, so the result does not depend on ``workers``.
    """
    if 1 in phases and not cnn_pairs:
        raise InputError("cnn_train split is empty")
    if (2 in phases or 3 in phases) and not rbm_pairs:
        raise InputError("rbm_train split is empty")
    hist = TrainingHistory()
    if models is None:
        models = make_ensemble(config.model_ids, config.width_base, config.seed)
    if 1 in phases:
        results = parallel_map(_phase1_task, range(len(models)), workers,
                               {"models": models, "pairs": cnn_pairs, "config": config})
        for m, (weights, h) in zip(models, results):
            m.weights.update(weights)
            hist.phase1[model_name(m.model_id)] = h
    rbm = RbmParams.init(len(models), config.rbm_hidden, np.random.default_rng([config.seed, 2]))
    if 2 in phases:
        X = np.stack([pooled_features(models, p.tensors) for p in rbm_pairs])
        y = np.array([p.label for p in rbm_pairs])
        hist.phase2 = train_rbm(rbm, X, y, config, np.random.default_rng([config.seed, 2, 1]))
        hist.phase2_loss = rbm_loss_and_grad(rbm, X, y)[0]
    if 3 in phases:
        hist.phase3 = train_joint(models, rbm, rbm_pairs, config, np.random.default_rng([config.seed, 3]))
        hist.phase3_loss = pair_loss(models, rbm, rbm_pairs)
    meta = {"config": config.to_dict(), "phases": list(phases),
            "phase1_history": hist.phase1, "phase2_history": hist.phase2, "phase3_history": hist.phase3,
            "phase2_loss": hist.phase2_loss, "phase3_loss": hist.phase3_loss}
    return HybridModel(list(models), rbm, meta), hist


def train_hybrid(dataset, config: Optional[TrainConfig] = None, splits: Optional[Sequence[str]] = None,
                 **kw) -> HybridModel:
    """Train all phases from a dataset manifest or from prepared :class:`TrainingPair` lists.

    A manifest is preprocessed with the default pipeline settings (aligned
    pair tensors); prepared pairs need ``splits`` naming each pair's split.
    """
    config = config or TrainConfig()
    if hasattr(dataset, "entries"):
        from ..pipeline import prepare_training_pairs
        pairs, splits = prepare_training_pairs(dataset, **kw)
    else:
        pairs = list(dataset)
        if splits is None:
            raise InputError("prepared pairs need their split names")
    cnn, rbm = _split_pairs(pairs, splits)
    return train_phases(cnn, rbm, config, workers=kw.get("workers", 1))[0]
