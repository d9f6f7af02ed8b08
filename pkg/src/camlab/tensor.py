"""Float32 tensor helpers shared by every other module.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32.
Feature maps are laid out ``[C, H, W]`` and logits ``[N]``. Public
operations reject non-finite values instead of propagating them.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float32


class NonFiniteError(ValueError):
    """A tensor handed to a public operation contains NaN or Inf."""


def check_finite(t: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{name} contains non-finite values")


def as_tensor(data, shape=None, name: str = "tensor") -> np.ndarray:
    """Return ``data`` as a finite float32 array, optionally reshaped.

    A fresh array is returned only when a conversion is needed; callers
    must treat the result as read-only.
    """
    t = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ValueError(f"negative extent in shape {shape}")
        if int(np.prod(shape, dtype=np.int64)) != t.size:
            raise ValueError(
                f"{name}: {t.size} values cannot fill shape {shape}"
            )
        t = t.reshape(shape)
    check_finite(t, name)
    return t


def relu(t) -> np.ndarray:
    t = as_tensor(t)
    return np.maximum(t, DTYPE(0))


def global_average_pool(t) -> np.ndarray:
    """Spatial mean per channel of a ``[C, H, W]`` tensor.

    Sums are taken in float64 and rounded once.
    """
    t = as_tensor(t)
    if t.ndim != 3:
        raise ValueError(f"global_average_pool expects [C,H,W], got shape {t.shape}")
    c, h, w = t.shape
    if h * w == 0:
        raise ValueError("global_average_pool needs a nonzero spatial extent")
    sums = t.reshape(c, h * w).astype(np.float64).sum(axis=1)
    return (sums / (h * w)).astype(DTYPE)


def softmax64(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax over a ``[N]`` logit vector."""
    z = as_tensor(logits, name="logits")
    if z.ndim != 1:
        raise ValueError(f"softmax expects a vector, got shape {z.shape}")
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    return softmax64(z).astype(DTYPE)
