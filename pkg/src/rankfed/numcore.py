"""Small dense linear-algebra and seeded-randomness helpers.

Matrices and vectors are plain ``float64`` numpy arrays; the helpers here
validate shapes and finiteness so the rest of the package can assume both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_NORM = 1e-12


class DimensionError(ValueError):
    """Raised when operand shapes do not line up."""


class DegenerateNormError(ArithmeticError):
    """Raised by :func:`cosine` when either operand has (near) zero norm."""


def as_vector(v, name="vector"):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_matrix(m, name="matrix"):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def matvec(m, v):
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise DimensionError(f"cannot multiply {m.shape} matrix by length-{v.shape[0]} vector")
    return m @ v


def softmax(v):
    """Numerically stable softmax of a 1-d array."""
    v = as_vector(v)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(z):
    """Row-wise softmax for a 2-d array of logits."""
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cosine(u, v):
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < DEGENERATE_NORM or nv < DEGENERATE_NORM:
        raise DegenerateNormError("cosine undefined for a near-zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def top_k_indices(v, k):
    """Indices of the ``k`` largest entries, sorted ascending.

    Ties go to the lower index.
    """
    v = as_vector(v)
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} out of range for length {v.size}")
    order = np.argsort(-v, kind="stable")
    return np.sort(order[:k])


def top_k_mask_rows(g, k):
    """0/1 mask of the top-``k`` entries in each row of ``g`` (lower index wins ties).

    ``k`` may be 0, which masks everything out.
    """
    mask = np.zeros_like(g)
    if k <= 0:
        return mask
    order = np.argsort(-g, axis=-1, kind="stable")[..., :k]
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


_MIX_MASK = (1 << 64) - 1


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MIX_MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MIX_MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MIX_MASK
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int

    def generator(self):
        # Philox is counter-based: the key fixes the stream, so no draw order
        # between streams can leak into another.
        key = [self.seed & _MIX_MASK, self.stream_id & _MIX_MASK]
        return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


def derive_stream(master, round_index, device):
    """Deterministic per-(round, device) stream from a master seed."""
    h = _splitmix64(master & _MIX_MASK)
    h = _splitmix64(h ^ (round_index & _MIX_MASK))
    h = _splitmix64(h ^ ((device * 0xD6E8FEB86659FD93) & _MIX_MASK))
    return RngStream(seed=master & _MIX_MASK, stream_id=h)
