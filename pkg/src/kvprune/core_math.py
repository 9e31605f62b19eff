"""Dense float64 helpers shared by the decoder, the cache and the policies.

Vectors and matrices are plain ``numpy`` float64 arrays. Finiteness is checked
once, when a value enters through :func:`vec64` or :func:`mat64`; the
operations themselves only check shapes. Norms sum strictly left to right;
other reductions use numpy's fixed (deterministic) order.
"""

from __future__ import annotations

import math
from typing import Iterable, Union

import numpy as np

from .errors import InvalidInput

NormOrder = Union[int, float]

NORM_ORDERS = (1, 2, math.inf)


def parse_norm_order(p: str | int | float) -> NormOrder:
    """Accept 1, 2, inf (or the strings "1", "2", "inf"/"max")."""
    if isinstance(p, str):
        key = p.strip().lower()
        if key in ("inf", "infinity", "max", "∞"):
            return math.inf
        try:
            p = float(key)
        except ValueError:
            raise InvalidInput(f"unknown norm order {p!r}") from None
    if p == 1:
        return 1
    if p == 2:
        return 2
    if p == math.inf:
        return math.inf
    raise InvalidInput(f"norm order must be 1, 2 or inf, got {p!r}")


def vec64(values: Iterable[float] | np.ndarray) -> np.ndarray:
    """Validate and copy ``values`` into a 1-D float64 array."""
    v = np.array(values, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidInput(f"expected a 1-D vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise InvalidInput("vector contains NaN or Inf")
    return v


def mat64(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and copy ``values`` into a 2-D float64 array.

    A flat sequence is accepted when ``rows`` and ``cols`` are given and is
    read in row-major order.
    """
    m = np.array(values, dtype=np.float64)
    if rows is not None and cols is not None:
        if m.size != rows * cols:
            raise InvalidInput(f"data length {m.size} != {rows} x {cols}")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise InvalidInput(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise InvalidInput("matrix contains NaN or Inf")
    return m


def lp_norm(v: np.ndarray, p: NormOrder = 1) -> float:
    if v.size == 0:
        raise InvalidInput("norm of an empty vector")
    # Plain left-to-right accumulation; numpy's pairwise sum reorders for n >= 8.
    total = 0.0
    if p == 1:
        for x in v.tolist():
            total += abs(x)
        return total
    if p == 2:
        for x in v.tolist():
            total += x * x
        return math.sqrt(total)
    if p == math.inf:
        return float(np.abs(v).max())
    raise InvalidInput(f"norm order must be 1, 2 or inf, got {p!r}")


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    if logits.size == 0:
        raise InvalidInput("softmax of an empty vector")
    e = np.exp(logits - logits.max())
    return e / e.sum()


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise InvalidInput(f"cannot multiply {m.shape} matrix by {v.shape} vector")
    return m @ v


def dot(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInput(f"dot of mismatched shapes {a.shape} and {b.shape}")
    return float(np.dot(a, b))


def rms_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / math.sqrt(float(np.dot(x, x)) / x.shape[0] + eps)
