"""The 24-model CNN ensemble, per-model patch inputs and the hybrid score.

Model ids are ``(network, index)``. Networks 1-4 are cCNNs on 64, 80, 96 and
192 patches with index 1 = FIT, 2 = OFT. Networks 5-8 are pCNNs on 32, 48,
64 and 96 atomic patches with index 1 = FIT-A, 2 = FIT-B, 3 = OFT-A,
4 = OFT-B. Pooled feature vectors list the models in ascending id order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractViolation, DegenerateTensorError, InputError
from ..tensors import (FIT, MACRO_OFFSETS, OFT, STRIDE, WHOLE_SIZE, PairTensor, PairTensors,
                       crop_patches, gate_windows, macro_grid, pad_mask, pad_to, resize_tensor,
                       window_origins)
from .cnn import MATCH, NetworkSpec, Weights, build_network, forward, init_weights
from .rbm import RbmParams, rbm_posterior

ModelId = Tuple[int, int]

CCNN_NETWORKS = {1: 64, 2: 80, 3: 96, 4: 192}
PCNN_NETWORKS = {5: 32, 6: 48, 7: 64, 8: 96}
CCNN_INDEX = {1: FIT, 2: OFT}
PCNN_INDEX = {1: (FIT, "A"), 2: (FIT, "B"), 3: (OFT, "A"), 4: (OFT, "B")}
CHANNELS = {FIT: 2, OFT: 4}
INFER_BATCH = 64


def model_layout(mid: ModelId) -> Tuple[str, int, str, str]:
    """``(architecture, size, kind, method)`` of a model id."""
    net, idx = mid
    if net in CCNN_NETWORKS and idx in CCNN_INDEX:
        size = CCNN_NETWORKS[net]
        return ("II" if size == WHOLE_SIZE else "I"), size, CCNN_INDEX[idx], "plain"
    if net in PCNN_NETWORKS and idx in PCNN_INDEX:
        kind, method = PCNN_INDEX[idx]
        return "III", PCNN_NETWORKS[net], kind, method
    raise InputError(f"unknown model id {mid}")


ALL_MODEL_IDS: Tuple[ModelId, ...] = tuple(
    [(n, i) for n in sorted(CCNN_NETWORKS) for i in sorted(CCNN_INDEX)]
    + [(n, i) for n in sorted(PCNN_NETWORKS) for i in sorted(PCNN_INDEX)])


def model_name(mid: ModelId) -> str:
    arch, size, kind, method = model_layout(mid)
    family = "cCNN" if arch != "III" else "pCNN"
    return f"{family}{mid[0]},{mid[1]}"


@dataclass
class CnnModel:
    model_id: ModelId
    spec: NetworkSpec
    weights: Weights
    kind: str
    method: str

    @property
    def size(self) -> int:
        return self.spec.input_size

    @property
    def is_macro(self) -> bool:
        return self.spec.arch == "III"

    @property
    def span(self) -> int:
        """Smallest tensor side that yields at least one input without padding."""
        return self.size + 2 * MACRO_OFFSETS[self.method] if self.is_macro else self.size


def make_model(mid: ModelId, width_base: int = 16, rng=None, dtype=np.float32, spec: NetworkSpec = None) -> CnnModel:
    arch, size, kind, method = model_layout(mid)
    if spec is None:
        spec = build_network(arch, size, CHANNELS[kind], width_base)
    rng = rng if rng is not None else np.random.default_rng(0)
    return CnnModel(mid, spec, init_weights(spec, rng, dtype), kind, method)


def make_ensemble(model_ids: Sequence[ModelId] = ALL_MODEL_IDS, width_base: int = 16, seed: int = 0,
                  dtype=np.float32) -> List[CnnModel]:
    return [make_model(mid, width_base, np.random.default_rng([seed, mid[0], mid[1]]), dtype)
            for mid in sorted(model_ids)]


# ---------------------------------------------------------------------------
# Per-model inputs


@dataclass
class ModelInput:
    """Inputs of one model for one tensor order.

    Plain models use ``patches`` ``(n, C, j, j)``. Macro models use unique
    ``atoms`` ``(U, C, j, j)`` and ``index`` ``(n, 9)``; each row of
    ``index`` lists a macro-patch's atomics row-major over the offsets.
    """

    patches: Optional[np.ndarray] = None
    atoms: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return len(self.patches) if self.patches is not None else len(self.index)

    def subset(self, rows: np.ndarray) -> "ModelInput":
        if self.patches is not None:
            return ModelInput(patches=self.patches[rows])
        idx = self.index[rows]
        used, inv = np.unique(idx, return_inverse=True)
        return ModelInput(atoms=self.atoms[used], index=inv.reshape(idx.shape))

    def batch(self):
        return self.patches if self.patches is not None else (self.atoms, self.index)


def _tensor_and_mask(tensor: PairTensor, good: Optional[np.ndarray], span: int):
    padded = pad_to(tensor, span)
    gm = pad_mask(good, span) if good is not None else None
    return padded, gm


def plain_input(tensor: PairTensor, j: int, good: Optional[np.ndarray] = None) -> ModelInput:
    """All ``j`` windows of the tensor (padded when none fits); ``good`` gates FIT windows."""
    if j == WHOLE_SIZE:
        t = tensor
    else:
        t, good = _tensor_and_mask(tensor, good, j)
    origins = window_origins(t.width, t.height, j)
    if good is not None and origins:
        keep = gate_windows(good, origins, j)
        origins = [o for o, k in zip(origins, keep) if k]
    arrs = [t.data[:, y:y + j, x:x + j] for x, y in origins]
    if j == WHOLE_SIZE:
        whole_ok = good is None or bool(good.mean() > 0.75)
        if whole_ok:
            arrs.append(resize_tensor(t, j))
    if not arrs:
        return ModelInput(patches=np.zeros((0, t.channels, j, j), t.data.dtype))
    return ModelInput(patches=np.stack(arrs))


def macro_input(tensor: PairTensor, j: int, method: str, good: Optional[np.ndarray] = None) -> ModelInput:
    """Macro-patches as shared atomics; ``good`` keeps macros with more than four qualifying atomics."""
    d = MACRO_OFFSETS[method]
    t, good = _tensor_and_mask(tensor, good, j + 2 * d)
    centres = macro_grid(t.width, t.height, j, method)
    offsets = [(dx, dy) for dy in (-d, 0, d) for dx in (-d, 0, d)]
    slots: Dict[Tuple[int, int], int] = {}
    rows = []
    for x, y in centres:
        row = []
        for dx, dy in offsets:
            key = (x + dx, y + dy)
            if key not in slots:
                slots[key] = len(slots)
            row.append(slots[key])
        rows.append(row)
    origins = list(slots)
    if good is not None and rows:
        ok = gate_windows(good, origins, j)
        rows = [r for r in rows if int(ok[r].sum()) > 4]
        used = sorted({k for r in rows for k in r})
        remap = {k: i for i, k in enumerate(used)}
        origins = [origins[k] for k in used]
        rows = [[remap[k] for k in r] for r in rows]
    if not rows:
        return ModelInput(atoms=np.zeros((0, t.channels, j, j), t.data.dtype), index=np.zeros((0, 9), np.intp))
    atoms = np.stack([t.data[:, y:y + j, x:x + j] for x, y in origins])
    return ModelInput(atoms=atoms, index=np.asarray(rows, dtype=np.intp))


def model_inputs(model: CnnModel, tensors: PairTensors, gate: bool = False) -> Tuple[ModelInput, ModelInput]:
    """Inputs for both orders. ``gate`` applies the training-time quality rule to FIT models."""
    out = []
    for order in (1, 2):
        t = tensors.get(model.kind, order)
        good = None
        if gate and model.kind == FIT:
            good = tensors.maskL & tensors.maskR
        if model.is_macro:
            out.append(macro_input(t, model.size, model.method, good))
        else:
            out.append(plain_input(t, model.size, good))
    return out[0], out[1]


def predict_match(model: CnnModel, inp: ModelInput, batch_size: int = INFER_BATCH) -> np.ndarray:
    """Eval-mode match probability of every patch / macro-patch."""
    if inp.count == 0:
        return np.zeros(0)
    if inp.patches is not None:
        outs = [forward(model.spec, model.weights, inp.patches[i:i + batch_size])[0][:, MATCH]
                for i in range(0, inp.count, batch_size)]
        return np.concatenate(outs).astype(np.float64)
    p, _ = forward(model.spec, model.weights, (inp.atoms, inp.index))
    return p[:, MATCH].astype(np.float64)


def order_output(model: CnnModel, inp: ModelInput) -> float:
    p = predict_match(model, inp)
    if len(p) == 0:
        raise DegenerateTensorError(f"{model_name(model.model_id)} received no inputs")
    return float(p.mean())


def model_output(model: CnnModel, tensor_pair) -> float:
    """Match probability averaged over patches within each order, then over the two orders.

    ``tensor_pair`` is a :class:`PairTensors` or an ``(order 1, order 2)``
    pair of :class:`PairTensor` of the model's kind.
    """
    if isinstance(tensor_pair, PairTensors):
        i1, i2 = model_inputs(model, tensor_pair)
    else:
        t1, t2 = tensor_pair
        if t1.kind != model.kind or t2.kind != model.kind:
            raise ContractViolation(f"{model_name(model.model_id)} takes {model.kind} tensors")
        mk = (lambda t: macro_input(t, model.size, model.method)) if model.is_macro else \
            (lambda t: plain_input(t, model.size))
        i1, i2 = mk(t1), mk(t2)
    return 0.5 * (order_output(model, i1) + order_output(model, i2))


# ---------------------------------------------------------------------------
# Hybrid model


@dataclass
class HybridModel:
    models: List[CnnModel]
    rbm: RbmParams
    metadata: dict = field(default_factory=dict)

    @property
    def model_ids(self) -> List[ModelId]:
        return [m.model_id for m in self.models]

    def model(self, mid: ModelId) -> CnnModel:
        for m in self.models:
            if m.model_id == mid:
                return m
        raise KeyError(mid)


def pooled_features(models: Sequence[CnnModel], tensors: PairTensors) -> np.ndarray:
    """One pooled scalar per model, in the given model order."""
    return np.array([model_output(m, tensors) for m in models])


def hybrid_score(model: HybridModel, tensors: PairTensors) -> float:
    """Match probability of a pair: pooled CNN outputs through the RBM posterior."""
    x = pooled_features(model.models, tensors)
    return float(rbm_posterior(model.rbm, x)[MATCH])
