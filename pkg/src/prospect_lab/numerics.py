"""Seeded random streams and basic image metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import philox_blocks

_MASK64 = (1 << 64) - 1
PSNR_CAP_DB = 99.0


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer, used to derive child stream ids."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _check_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError("empty shape")
    return shape


@dataclass
class RngStream:
    """Counter-based Philox4x32-10 stream.

    The 64-bit seed is the Philox key; the block counter occupies counter words
    0-1 and the stream id words 2-3, so streams with different ids never
    overlap. Not thread-safe: one owner per stream.
    """

    seed: int
    stream: int = 0
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.stream = int(self.stream) & _MASK64

    def child(self, index: int) -> "RngStream":
        """Independent stream derived from this stream's id and ``index``."""
        sid = splitmix64(self.stream ^ splitmix64(int(index) & _MASK64))
        return RngStream(self.seed, sid)

    def state(self) -> tuple:
        return (self.seed, self.stream, self.counter)

    def _words(self, n: int) -> np.ndarray:
        nblocks = (n + 3) // 4
        blocks = philox_blocks(self.counter, nblocks, self.stream, self.seed)
        self.counter += nblocks
        return blocks.reshape(-1)[:n]

    def uint32(self, n: int) -> np.ndarray:
        return self._words(n)

    def uniform(self, shape) -> np.ndarray:
        """float64 uniform on [0, 1) with 53 random bits."""
        shape = _check_shape(shape)
        n = math.prod(shape)
        w = self._words(2 * n).astype(np.uint64).reshape(n, 2)
        hi = (w[:, 0] >> np.uint64(5)).astype(np.float64)
        lo = (w[:, 1] >> np.uint64(6)).astype(np.float64)
        return ((hi * 67108864.0 + lo) / 9007199254740992.0).reshape(shape)

    def integers(self, high: int, shape) -> np.ndarray:
        """Integers in [0, high) by 32-bit multiply-shift."""
        if not 1 <= high <= 1 << 32:
            raise ValueError("high must be in [1, 2**32]")
        shape = _check_shape(shape)
        w = self._words(math.prod(shape)).astype(np.uint64)
        return ((w * np.uint64(high)) >> np.uint64(32)).astype(np.int64).reshape(shape)

    def gaussian(self, shape) -> np.ndarray:
        """Standard normal float32 samples via Box-Muller on word pairs."""
        shape = _check_shape(shape)
        n = math.prod(shape)
        m = (n + 1) // 2
        w = self._words(2 * m).astype(np.float64).reshape(m, 2)
        u1 = (w[:, 0] + 0.5) / 4294967296.0
        u2 = (w[:, 1] + 0.5) / 4294967296.0
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return z.astype(np.float32).reshape(shape)


def gaussian(rng: RngStream, shape) -> np.ndarray:
    return rng.gaussian(shape)


def mse(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def psnr_from_mse(m: float) -> float:
    if m <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(4.0 / m))


def psnr(a, b) -> float:
    """PSNR in dB for images on [-1, 1] (peak-to-peak 2), capped at 99 dB."""
    return psnr_from_mse(mse(a, b))


@dataclass(frozen=True)
class ImageMetrics:
    mse: float
    psnr: float

    @classmethod
    def compare(cls, a, b) -> "ImageMetrics":
        m = mse(a, b)
        return cls(m, psnr_from_mse(m))
