"""2D DFT, high-frequency energy ratio and trajectory frequency curves.

Convention: for an image ``img[y, x]`` of width M and height N,
``F(u, v) = sum_x sum_y f(x, y) exp(-2*pi*i*(u*x/M + v*y/N))`` with ``u`` the
horizontal (column) frequency. ``SpectrumMap.F`` is indexed ``[u, v]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .io import write_csv, write_pgm

DEFAULT_CUTOFF = 0.25
MISSING = "missing"


class ZeroEnergyError(ValueError):
    def __init__(self, msg: str = "zero energy"):
        super().__init__(msg)


@dataclass(frozen=True)
class SpectrumMap:
    F: np.ndarray = field(repr=False)  # complex128, shape (M, N)
    centered: bool = False

    @property
    def M(self) -> int:
        return self.F.shape[0]

    @property
    def N(self) -> int:
        return self.F.shape[1]

    def energy(self) -> np.ndarray:
        return np.abs(self.F) ** 2

    def center(self) -> "SpectrumMap":
        if self.centered:
            return self
        return SpectrumMap(np.fft.fftshift(self.F), True)


def dft2(img) -> SpectrumMap:
    f = np.asarray(img, dtype=np.float64)
    if f.ndim != 2 or min(f.shape) < 1:
        raise ValueError("dft2 needs a nonempty 2D image")
    return SpectrumMap(np.fft.fft2(f.T))


def naive_dft2(img) -> np.ndarray:
    """Direct double sum over all pixels for every bin, O(M^2 N^2); reference oracle.

    No separability or FFT factorisation: each row u evaluates the full
    phase term u*x/M + v*y/N for every (v, x, y).
    """
    f = np.asarray(img, dtype=np.float64).T  # f[x, y]
    M, N = f.shape
    x = np.arange(M)[None, :, None]
    y = np.arange(N)[None, None, :]
    v = np.arange(N)[:, None, None]
    out = np.empty((M, N), dtype=np.complex128)
    for u in range(M):
        phase = -2 * np.pi * (u * x / M + v * y / N)
        out[u] = np.sum(f[None] * (np.cos(phase) + 1j * np.sin(phase)), axis=(1, 2))
    return out


def radius_grid(M: int, N: int) -> np.ndarray:
    """Distance of each uncentered bin (u, v) from DC in signed-frequency units."""
    su = np.fft.fftfreq(M) * M
    sv = np.fft.fftfreq(N) * N
    return np.hypot(su[:, None], sv[None, :])


def hf_ratio(spec: SpectrumMap, cutoff: float = DEFAULT_CUTOFF) -> float:
    """Share of non-DC energy at radius > cutoff * max_radius (max_radius = min(M, N) / 2)."""
    if not 0.0 <= cutoff < 1.0:
        raise ValueError("cutoff must lie in [0, 1)")
    F = np.fft.ifftshift(spec.F) if spec.centered else spec.F
    e = np.abs(F) ** 2
    r = radius_grid(*F.shape)
    e_dc = e[0, 0]
    total = e.sum() - e_dc
    if total <= 1e-12 * (e_dc + 1.0):
        raise ZeroEnergyError()
    high = e[r > cutoff * (min(F.shape) / 2.0)].sum()
    return float(min(max(high / total, 0.0), 1.0))


def image_hf_ratio(img, cutoff: float = DEFAULT_CUTOFF) -> float:
    return hf_ratio(dft2(img), cutoff)


def trajectory_rows(rec, cutoff: float = DEFAULT_CUTOFF) -> list:
    """(step, t, ratio or None) for every record entry; None marks zero energy."""
    rows = []
    for k, (t, img) in enumerate(rec.steps):
        try:
            ratio = image_hf_ratio(np.clip(img, -1.0, 1.0), cutoff)
        except ZeroEnergyError:
            ratio = None
        rows.append((k, int(t), ratio))
    return rows


def trajectory_hf_curve(rec, cutoff: float = DEFAULT_CUTOFF) -> list:
    if len(rec.steps) == 0:
        raise ValueError("empty trajectory")
    return [(k, r) for k, _, r in trajectory_rows(rec, cutoff) if r is not None]


def _ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a), dtype=np.float64)
    sorted_a = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two equal-length 1D sequences")
    if len(x) < 2:
        raise ValueError("spearman needs at least 2 points")
    rx, ry = _ranks(x), _ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        return float("nan")
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


def curve_spearman(curve) -> float:
    steps = [k for k, _ in curve]
    return spearman(steps, [r for _, r in curve])


def write_curve_csv(path, rows) -> None:
    write_csv(path, ["step", "t", "hf_ratio"],
              [(k, t, MISSING if r is None else repr(r)) for k, t, r in rows])


def log_magnitude_image(img) -> np.ndarray:
    """Centered log(1 + |F|) scaled to [-1, 1], displayed with u horizontal."""
    mag = np.log1p(np.abs(dft2(img).center().F)).T
    lo, hi = float(mag.min()), float(mag.max())
    if hi - lo <= 0:
        return np.zeros_like(mag, dtype=np.float32)
    return ((mag - lo) / (hi - lo) * 2.0 - 1.0).astype(np.float32)


def write_log_magnitude_pgm(path, img) -> None:
    write_pgm(path, log_magnitude_image(img))


__all__ = ["SpectrumMap", "ZeroEnergyError", "dft2", "naive_dft2", "hf_ratio", "image_hf_ratio",
           "trajectory_rows", "trajectory_hf_curve", "spearman", "curve_spearman",
           "write_curve_csv", "log_magnitude_image", "write_log_magnitude_pgm"]
