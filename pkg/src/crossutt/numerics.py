"""Dense kernels used by the language model.

Matrices are 2-D numpy arrays. Parameters are stored as float32 and all
arithmetic is carried out in float64 so that cached and uncached forward
passes agree to well below 1e-5.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateRowError, ShapeError

NEG_INF = -np.inf


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax; ``-inf`` entries come out as exactly 0."""
    m = np.asarray(m, dtype=np.float64)
    top = m.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegenerateRowError("softmax over a row with no finite entry")
    e = np.exp(m - top)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    top = m.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegenerateRowError("log-softmax over a row with no finite entry")
    shifted = m - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def l2_normalize_rows(m, eps: float = 1e-6) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return m / (np.sqrt((m * m).sum(axis=-1, keepdims=True)) + eps)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    centred = x - x.sum(axis=-1, keepdims=True) / n
    var = (centred * centred).sum(axis=-1, keepdims=True) / n
    return centred / np.sqrt(var + eps) * gain + bias


def silu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + np.exp(-x))


def logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))
