"""Discriminative RBM over the pooled CNN outputs.

Energy ``E(y, x, h) = -h.W x - r.x - s.h - t_y - h.U e_y`` with binary hidden
units. Summing the hidden units out gives the closed-form class posterior

    p(y | x) = softmax_y( t_y + sum_j softplus(s_j + U_jy + W_j . x) ),

evaluated here in log space. Class 0 is "match".
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy.special import expit, log_softmax, softmax

from ..errors import InputError

N_CLASSES = 2
DEFAULT_HIDDEN = 64


@dataclass
class RbmParams:
    W: np.ndarray  # (H, D)
    U: np.ndarray  # (H, 2)
    r: np.ndarray  # (D,)
    s: np.ndarray  # (H,)
    t: np.ndarray  # (2,)

    def __post_init__(self):
        h, d = np.shape(self.W)
        if h < 1:
            raise InputError("an RBM needs at least one hidden unit")
        shapes = {"U": (h, N_CLASSES), "r": (d,), "s": (h,), "t": (N_CLASSES,)}
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise InputError(f"RBM {name} must have shape {shape}")
        for name in ("W", "U", "r", "s", "t"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"RBM {name} has non-finite entries")

    @property
    def hidden(self) -> int:
        return self.W.shape[0]

    @property
    def inputs(self) -> int:
        return self.W.shape[1]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"W": self.W, "U": self.U, "r": self.r, "s": self.s, "t": self.t}

    def copy(self) -> "RbmParams":
        return RbmParams(**{k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def init(cls, n_inputs: int, hidden: int = DEFAULT_HIDDEN, rng=None, scale: float = 0.1,
             dtype=np.float64) -> "RbmParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls((rng.standard_normal((hidden, n_inputs)) * scale).astype(dtype),
                   (rng.standard_normal((hidden, N_CLASSES)) * scale).astype(dtype),
                   np.zeros(n_inputs, dtype), np.zeros(hidden, dtype), np.zeros(N_CLASSES, dtype))

    @classmethod
    def zeros(cls, n_inputs: int, hidden: int) -> "RbmParams":
        return cls(np.zeros((hidden, n_inputs)), np.zeros((hidden, N_CLASSES)), np.zeros(n_inputs),
                   np.zeros(hidden), np.zeros(N_CLASSES))


def softplus(a):
    return np.logaddexp(0.0, a)


def _pre_activations(p: RbmParams, X: np.ndarray) -> np.ndarray:
    """``s_j + U_jy + W_j . x`` with shape (N, H, 2)."""
    base = X @ p.W.T + p.s  # (N, H)
    return base[:, :, None] + p.U[None, :, :]


def class_logits(p: RbmParams, X: np.ndarray) -> np.ndarray:
    return p.t[None, :] + softplus(_pre_activations(p, X)).sum(axis=1)


def rbm_posterior(params: RbmParams, x) -> np.ndarray:
    """Class posterior ``(p_match, p_nonmatch)``; a batch ``(N, D)`` gives ``(N, 2)``."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != params.inputs:
        raise InputError(f"RBM expects {params.inputs} inputs, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise InputError("RBM inputs must be finite")
    post = softmax(class_logits(params, X), axis=1)
    return post[0] if single else post


def rbm_loss_and_grad(params: RbmParams, X, y, need_input_grad: bool = False):
    """Mean ``-log p(y_i | x_i)`` and its analytic gradients.

    ``y`` holds class indices (0 = match). ``r`` never enters the posterior,
    so its gradient is zero. With ``need_input_grad`` the gradient with
    respect to ``X`` is returned as well.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.intp)
    if y.shape != (X.shape[0],) or np.any((y < 0) | (y >= N_CLASSES)):
        raise InputError("labels must be class indices in {0, 1}, one per row")
    n = X.shape[0]
    A = _pre_activations(params, X)  # (N, H, 2)
    logits = params.t[None, :] + softplus(A).sum(axis=1)
    logp = log_softmax(logits, axis=1)
    loss = float(-logp[np.arange(n), y].mean())
    post = np.exp(logp)
    onehot = np.zeros_like(post)
    onehot[np.arange(n), y] = 1.0
    dlogit = (post - onehot) / n  # (N, 2)
    sig = expit(A)  # d softplus
    dA = sig * dlogit[:, None, :]  # (N, H, 2)
    dbase = dA.sum(axis=2)  # (N, H)
    grads = {"W": dbase.T @ X, "U": dA.sum(axis=0), "r": np.zeros_like(params.r),
             "s": dbase.sum(axis=0), "t": dlogit.sum(axis=0)}
    if need_input_grad:
        return loss, grads, dbase @ params.W
    return loss, grads
