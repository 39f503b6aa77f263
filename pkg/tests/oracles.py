"""Independent reference implementations shared by the unit and acceptance tests."""

import itertools
import math

import numpy as np
from scipy.special import logsumexp


def rbm_exhaustive(params, x):
    """p(y | x) by summing exp(-E(y, x, h)) over all 2^H binary hidden vectors."""
    W, U, r, s, t = (np.asarray(a, float) for a in (params.W, params.U, params.r, params.s, params.t))
    H = W.shape[0]
    x = np.asarray(x, float)
    logs = []
    for y in range(2):
        terms = []
        for bits in itertools.product((0.0, 1.0), repeat=H):
            h = np.array(bits)
            energy = -(h @ W @ x) - r @ x - s @ h - t[y] - h @ U[:, y]
            terms.append(-energy)
        logs.append(logsumexp(terms))
    logs = np.array(logs)
    return np.exp(logs - logsumexp(logs))


def finite_difference(f, arrays, eps=1e-5):
    """Central differences of the scalar ``f()`` with respect to every entry of each array (edited in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        for i in range(a.size):
            old = a.flat[i]
            a.flat[i] = old + eps
            fp = f()
            a.flat[i] = old - eps
            fm = f()
            a.flat[i] = old
            g.flat[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def relative_error(numeric, analytic):
    """Largest entry error scaled by the largest numeric magnitude of the array."""
    numeric, analytic = np.asarray(numeric, float), np.asarray(analytic, float)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(numeric - analytic).max() / scale)


def coherence_loops(a, half=8):
    """Per-pixel coherence: clamped Sobel/8 gradients, then window sums with zeros outside.

    Plain Python lists keep the loops independent of the vectorised code path.
    """
    sob = [[-1 / 8, 0.0, 1 / 8], [-2 / 8, 0.0, 2 / 8], [-1 / 8, 0.0, 1 / 8]]
    rows = np.asarray(a, float).tolist()
    h, w = len(rows), len(rows[0])
    gx = [[0.0] * w for _ in range(h)]
    gy = [[0.0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            for i in range(3):
                for j in range(3):
                    v = rows[min(max(y + i - 1, 0), h - 1)][min(max(x + j - 1, 0), w - 1)]
                    gx[y][x] += sob[i][j] * v
                    gy[y][x] += sob[j][i] * v
    q = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            sxx = syy = sxy = 0.0
            for v in range(max(0, y - half), min(h, y + half + 1)):
                for u in range(max(0, x - half), min(w, x + half + 1)):
                    sxx += gx[v][u] ** 2
                    syy += gy[v][u] ** 2
                    sxy += gx[v][u] * gy[v][u]
            den = sxx + syy
            q[y, x] = math.sqrt((sxx - syy) ** 2 + 4 * sxy ** 2) / den if den > 0 else 0.0
    return q
