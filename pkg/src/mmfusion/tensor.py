"""Dense float64 tensors, validated kernels, a SplitMix64 random source and
the ``MMT1`` binary tensor encoding.

Tensors are plain C-contiguous ``numpy.float64`` arrays. The helpers here add
the validation and error types the rest of the package relies on.
"""
from __future__ import annotations

import math
import struct
from typing import BinaryIO, Sequence

import numpy as np

from .errors import (
    BadMagic,
    BadShape,
    DivideByZero,
    FormatError,
    LengthMismatch,
    ShapeMismatch,
)

TENSOR_MAGIC = b"MMT1"

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise BadShape(f"invalid shape {shape}")
    return shape


def tensor_create(shape: Sequence[int], fill=0.0) -> np.ndarray:
    """Build a tensor from a scalar fill or a flat row-major value list."""
    shape = _check_shape(shape)
    if np.isscalar(fill):
        return np.full(shape, float(fill), dtype=np.float64)
    values = np.asarray(fill, dtype=np.float64).ravel()
    if values.size != math.prod(shape):
        raise LengthMismatch(f"{values.size} values for shape {shape}")
    return values.reshape(shape).copy()


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction (safe for large logits)."""
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


_KINDS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def elementwise(a: np.ndarray, b, kind: str) -> np.ndarray:
    """Pointwise add/sub/mul/div of equal-shape tensors or tensor and scalar."""
    if kind not in _KINDS:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    a = np.asarray(a, dtype=np.float64)
    if np.isscalar(b):
        b = float(b)
    else:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != a.shape:
            raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if kind == "div" and np.any(np.asarray(b) == 0.0):
        raise DivideByZero("division by zero")
    return _KINDS[kind](a, b)


def splitmix64(x: int) -> int:
    """One SplitMix64 step from state ``x``; returns the mixed output."""
    z = (x + _GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 stream.

    Uniforms are the top 53 bits of each output divided by 2**53. Normals
    use Box-Muller on consecutive uniform pairs ``(u1, u2)``, emitting
    ``r*cos`` then ``r*sin`` with ``r = sqrt(-2 ln(1 - u1))``; an odd
    request drops the final ``sin`` value.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        out = splitmix64(self.state)
        self.state = (self.state + _GAMMA) & _MASK64
        return out

    def u64_array(self, n: int) -> np.ndarray:
        # state after k steps is seed + k*gamma mod 2**64, so the stream vectorizes
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & _MASK64
        return z

    def uniform(self, n: int | None = None):
        if n is None:
            return (self.next_u64() >> 11) * 2.0**-53
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randint(self, n: int) -> int:
        """Integer in ``[0, n)`` as ``floor(u * n)``."""
        return min(int(self.uniform() * n), n - 1)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = _check_shape(shape)
        if std < 0:
            raise ValueError("std must be non-negative")
        n = math.prod(shape)
        u = self.uniform(2 * ((n + 1) // 2)).reshape(-1, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()[:n]
        return (mean + std * z).reshape(shape)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle in place; returns ``items``."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def permutation(self, n: int) -> list[int]:
        return self.shuffle(list(range(n)))


def rng_normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    return rng.normal(shape, mean, std)


def write_tensor(fh: BinaryIO, t: np.ndarray) -> None:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = t.reshape(1)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", t.ndim))
    fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
    fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated input: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if read_exact(fh, 4) != TENSOR_MAGIC:
        raise BadMagic("expected MMT1 tensor")
    (rank,) = struct.unpack("<I", read_exact(fh, 4))
    if rank == 0:
        raise FormatError("tensor rank 0")
    shape = struct.unpack(f"<{rank}I", read_exact(fh, 4 * rank))
    if any(s < 1 for s in shape):
        raise FormatError(f"bad extents {shape}")
    n = math.prod(shape)
    data = np.frombuffer(read_exact(fh, 8 * n), dtype="<f8")
    return data.astype(np.float64).reshape(shape)
