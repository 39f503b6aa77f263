"""Network specifications for architectures I, II and III plus forward/backward passes.

Architectures I and II stack ``conv3x3(pad 1) + ReLU + maxpool2`` blocks until
the spatial extent is at most 12, then a convolution spanning the remaining
extent reduces it to 1 x 1, followed by ``FC(128) + ReLU + dropout + FC(2) +
softmax``. Architecture II is architecture I with one more block (the 192
input). Architecture III runs a shared architecture-I sub-network on the
nine atomic patches of a macro-patch, arranges the nine softmax outputs as a
3 x 3 x 2 map and applies a 3 x 3 combining convolution and a softmax.

Class index 0 is "match" throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ContractViolation, InputError
from . import layers as L

MATCH = 0
SHRINK_LIMIT = 12
FC_WIDTH = 128
DROPOUT = 0.5
MAX_CHANNELS = 128

ARCH_I_SIZES = (32, 48, 64, 80, 96)
ARCH_II_SIZES = (192,)
ARCH_III_SIZES = (32, 48, 64, 96)

Weights = Dict[str, np.ndarray]


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    input_size: int
    input_channels: int
    layers: Tuple[dict, ...]
    width_base: int = 16
    sub: Optional["NetworkSpec"] = None

    def to_dict(self) -> dict:
        d = {"arch": self.arch, "input_size": self.input_size, "input_channels": self.input_channels,
             "width_base": self.width_base, "layers": [dict(l) for l in self.layers]}
        if self.sub is not None:
            d["sub"] = self.sub.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        sub = cls.from_dict(d["sub"]) if d.get("sub") else None
        return cls(d["arch"], d["input_size"], d["input_channels"], tuple(d["layers"]),
                   d.get("width_base", 16), sub)

    @property
    def conv_layers(self) -> List[dict]:
        base = self.sub if self.sub is not None else self
        return [l for l in base.layers if l["type"] == "conv"]

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        if self.sub is not None:
            for k, v in self.sub.param_shapes().items():
                shapes["sub." + k] = v
        for l in self.layers:
            if l["type"] in ("conv", "combine"):
                shapes[l["name"] + ".W"] = (l["out"], l["in"], l["k"], l["k"])
                shapes[l["name"] + ".b"] = (l["out"],)
            elif l["type"] == "dense":
                shapes[l["name"] + ".W"] = (l["out"], l["in"])
                shapes[l["name"] + ".b"] = (l["out"],)
        return shapes


def _plain_layers(size: int, channels: int, width_base: int, min_blocks: int = 0,
                  fc_width: int = FC_WIDTH, dropout: float = DROPOUT) -> List[dict]:
    layers: List[dict] = []
    c_in, s, b = channels, size, 0
    while s > SHRINK_LIMIT or b < min_blocks:
        if s < 2:
            raise InputError(f"input size {size} too small for {min_blocks} pooling blocks")
        c_out = min(width_base * 2 ** b, MAX_CHANNELS)
        layers += [{"type": "conv", "name": f"conv{b}", "in": c_in, "out": c_out, "k": 3, "pad": 1},
                   {"type": "relu"}, {"type": "maxpool"}]
        c_in, s, b = c_out, s // 2, b + 1
    c_out = min(width_base * 2 ** b, MAX_CHANNELS)
    layers += [{"type": "conv", "name": f"conv{b}", "in": c_in, "out": c_out, "k": s, "pad": 0},
               {"type": "relu"}, {"type": "flatten"},
               {"type": "dense", "name": "fc1", "in": c_out, "out": fc_width}, {"type": "relu"},
               {"type": "dropout", "rate": dropout},
               {"type": "dense", "name": "fc2", "in": fc_width, "out": 2}, {"type": "softmax"}]
    return layers


def build_network(arch: str, input_size: int, input_channels: int, width_base: int = 16,
                  strict_sizes: bool = True, fc_width: int = FC_WIDTH) -> NetworkSpec:
    """Layer schedule for one of the three architectures.

    ``strict_sizes`` restricts ``input_size`` to the sizes each architecture
    is used with; miniature networks for tests switch it off.
    """
    allowed = {"I": ARCH_I_SIZES, "II": ARCH_II_SIZES, "III": ARCH_III_SIZES}
    if arch not in allowed:
        raise InputError(f"unknown architecture {arch!r}")
    if input_size < 1 or input_channels < 1 or width_base < 1:
        raise InputError("sizes and widths must be positive")
    if strict_sizes and input_size not in allowed[arch]:
        raise InputError(f"architecture {arch} does not take {input_size} x {input_size} inputs")
    if arch == "I":
        return NetworkSpec("I", input_size, input_channels,
                           tuple(_plain_layers(input_size, input_channels, width_base, fc_width=fc_width)),
                           width_base)
    if arch == "II":
        ref = _plain_layers(input_size // 2, input_channels, width_base)
        n_blocks = sum(l["type"] == "maxpool" for l in ref) + 1
        return NetworkSpec("II", input_size, input_channels,
                           tuple(_plain_layers(input_size, input_channels, width_base, n_blocks,
                                               fc_width=fc_width)), width_base)
    sub = build_network("I", input_size, input_channels, width_base, strict_sizes=False, fc_width=fc_width)
    head = ({"type": "combine", "name": "combine", "in": 2, "out": 2, "k": 3, "pad": 0},
            {"type": "flatten"}, {"type": "softmax"})
    return NetworkSpec("III", input_size, input_channels, head, width_base, sub)


def init_weights(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> Weights:
    """He-normal convolution/dense weights, zero biases; the combining layer starts as a vote."""
    w: Weights = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            w[name] = np.zeros(shape, dtype)
        elif name == "combine.W":
            base = np.zeros(shape)
            base[0, 0] = base[1, 1] = 4.0 / 9.0
            w[name] = (base + 0.01 * rng.standard_normal(shape)).astype(dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            w[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
    return w


def zeros_like_weights(weights: Weights) -> Weights:
    return {k: np.zeros_like(v) for k, v in weights.items()}


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class ForwardCache:
    spec: NetworkSpec
    steps: list = field(default_factory=list)
    sub: Optional["ForwardCache"] = None
    index: Optional[np.ndarray] = None
    n_atoms: int = 0
    activations: list = field(default_factory=list)


def _plain_forward(spec: NetworkSpec, w: Weights, x: np.ndarray, train: bool, rng, prefix: str = "",
                   keep_activations: bool = False):
    cache = ForwardCache(spec)
    h = np.ascontiguousarray(x.transpose(1, 0, 2, 3))  # channel-major inside the network
    for l in spec.layers:
        t = l["type"]
        if t == "conv":
            h, c = L.conv_forward(h, w[prefix + l["name"] + ".W"], w[prefix + l["name"] + ".b"], l["pad"])
        elif t == "relu":
            h, c = L.relu_forward(h)
            if keep_activations and h.ndim == 4:
                cache.activations.append(h.transpose(1, 0, 2, 3))
        elif t == "maxpool":
            h, c = L.maxpool_forward(h)
        elif t == "flatten":
            c = h.shape
            h = np.ascontiguousarray(h.transpose(1, 0, 2, 3)).reshape(h.shape[1], -1)
        elif t == "dense":
            h, c = L.dense_forward(h, w[prefix + l["name"] + ".W"], w[prefix + l["name"] + ".b"])
        elif t == "dropout":
            h, c = L.dropout_forward(h, l["rate"], rng, train)
        elif t == "softmax":
            h, c = L.softmax_forward(h)
        else:
            raise ContractViolation(f"unexpected layer {t!r} in a plain network")
        cache.steps.append(c)
    return h, cache


def _plain_backward(spec: NetworkSpec, w: Weights, cache: ForwardCache, dy: np.ndarray, prefix: str = "",
                    need_input_grad: bool = True):
    grads: Weights = {}
    d = dy
    first = spec.layers.index(next(l for l in spec.layers if l["type"] == "conv"))
    for pos in range(len(spec.layers) - 1, -1, -1):
        l, c = spec.layers[pos], cache.steps[pos]
        t = l["type"]
        if t == "conv":
            d, dW, db = L.conv_backward(d, c, need_input_grad or pos != first)
            grads[prefix + l["name"] + ".W"] = dW
            grads[prefix + l["name"] + ".b"] = db
        elif t == "relu":
            d = L.relu_backward(d, c)
        elif t == "maxpool":
            d = L.maxpool_backward(d, c)
        elif t == "flatten":
            d = d.reshape(c[1], c[0], c[2], c[3]).transpose(1, 0, 2, 3)
        elif t == "dense":
            W = w[prefix + l["name"] + ".W"]
            d, dW, db = L.dense_backward(d, c, W)
            grads[prefix + l["name"] + ".W"] = dW
            grads[prefix + l["name"] + ".b"] = db
        elif t == "dropout":
            d = L.dropout_backward(d, c)
        elif t == "softmax":
            d = L.softmax_backward(d, c)
    return grads, (d.transpose(1, 0, 2, 3) if d is not None else None)


MacroBatch = Tuple[np.ndarray, np.ndarray]


def as_macro_batch(batch) -> MacroBatch:
    """Normalise architecture-III input to ``(atoms (U, C, j, j), index (N, 9))``.

    A plain ``(N, 9, C, j, j)`` array becomes one atom per slot.
    """
    if isinstance(batch, tuple):
        atoms, index = batch
        return atoms, np.asarray(index, dtype=np.intp)
    batch = np.asarray(batch)
    if batch.ndim != 5 or batch.shape[1] != 9:
        raise InputError(f"macro batch must be (N, 9, C, j, j), got {batch.shape}")
    n = batch.shape[0]
    return batch.reshape((n * 9,) + batch.shape[2:]), np.arange(n * 9).reshape(n, 9)


def _check_input(spec: NetworkSpec, x: np.ndarray):
    want = (spec.input_channels, spec.input_size, spec.input_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise InputError(f"{spec.arch} network expects (N, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")


def forward(spec: NetworkSpec, weights: Weights, batch, train_mode: bool = False,
            rng: Optional[np.random.Generator] = None, keep_activations: bool = False):
    """Two-way class probabilities ``(N, 2)`` and the cache needed by :func:`backward`."""
    if train_mode and rng is None:
        rng = np.random.default_rng(0)
    if spec.arch != "III":
        x = np.asarray(batch)
        _check_input(spec, x)
        return _plain_forward(spec, weights, x, train_mode, rng, keep_activations=keep_activations)
    atoms, index = as_macro_batch(batch)
    _check_input(spec.sub, atoms)
    pa, sub_cache = _plain_forward(spec.sub, weights, atoms, train_mode, rng, "sub.", keep_activations)
    n = index.shape[0]
    grid = pa[index]  # (N, 9, 2), row-major over the 3 x 3 offsets
    fmap = np.ascontiguousarray(grid.reshape(n, 3, 3, 2).transpose(3, 0, 1, 2))
    cache = ForwardCache(spec, sub=sub_cache, index=index, n_atoms=atoms.shape[0])
    cache.activations = sub_cache.activations
    z, cc = L.conv_forward(fmap, weights["combine.W"], weights["combine.b"], 0)
    p, sc = L.softmax_forward(z.reshape(2, n).T)
    cache.steps = [cc, sc]
    return p, cache


def backward(spec: NetworkSpec, weights: Weights, cache: ForwardCache, grad_out: np.ndarray,
             need_input_grad: bool = True):
    """Gradients of ``sum(grad_out * probabilities)`` with respect to weights and input.

    The input gradient is None when ``need_input_grad`` is false.
    """
    if cache.spec is not spec and cache.spec != spec:
        raise ContractViolation("cache was produced by a different network")
    if spec.arch != "III":
        return _plain_backward(spec, weights, cache, grad_out, need_input_grad=need_input_grad)
    cc, sc = cache.steps
    n = cache.index.shape[0]
    dz = np.ascontiguousarray(L.softmax_backward(grad_out, sc).T).reshape(2, n, 1, 1)
    dmap, dW, db = L.conv_backward(dz, cc)
    dgrid = dmap.transpose(1, 2, 3, 0).reshape(n, 9, 2)
    dpa = np.zeros((cache.n_atoms, 2), dtype=grad_out.dtype)
    np.add.at(dpa, cache.index, dgrid)
    grads, dx = _plain_backward(spec.sub, weights, cache.sub, dpa, "sub.", need_input_grad)
    grads["combine.W"] = dW
    grads["combine.b"] = db
    return grads, dx


def activations(spec: NetworkSpec, weights: Weights, batch) -> List[np.ndarray]:
    """Post-ReLU feature maps of every convolution block (sub-network for architecture III)."""
    _, cache = forward(spec, weights, batch, False, keep_activations=True)
    return cache.activations
