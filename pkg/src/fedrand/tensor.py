"""Dense float64 helpers and hierarchically seeded random streams.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The
functions here add the shape checks and argument validation the rest of the
package relies on.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

Label = Union[int, str]


class DimensionError(ValueError):
    """Raised when matrix shapes are incompatible."""


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` with an explicit shape check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax_row(logits) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("softmax_row needs a non-empty 1-D vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax_row input must be finite")
    return softmax(z[None, :])[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array (max-subtracted)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _label_words(label: Label) -> list[int]:
    digest = hashlib.sha256(f"{type(label).__name__}:{label}".encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


@dataclass(frozen=True)
class RngStream:
    """A named position in a tree of random streams.

    ``RngStream(seed).child("round", 3, "client", 7)`` always produces the
    same numbers regardless of which other streams were used before, so
    client scheduling cannot change results.
    """

    seed: int
    path: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def child(self, *labels: Label) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        entropy = [int(self.seed) & 0xFFFFFFFF, int(self.seed) >> 32]
        for label in self.path:
            entropy.extend(_label_words(label))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def rand_normal(stream: RngStream, rows: int, cols: int, stddev: float) -> np.ndarray:
    if stddev <= 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    if rows < 1 or cols < 1:
        raise DimensionError(f"invalid shape {rows}x{cols}")
    return stream.generator().normal(0.0, stddev, size=(rows, cols))


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


def weighted_sum(mats: Sequence[np.ndarray], coefs: Sequence[float]) -> np.ndarray:
    """``sum_i coefs[i] * mats[i]`` accumulated left to right."""
    if len(mats) == 0 or len(mats) != len(coefs):
        raise ValueError("weighted_sum needs matching non-empty sequences")
    out = coefs[0] * mats[0]
    for c, m in zip(coefs[1:], mats[1:]):
        out = out + c * m
    return out
