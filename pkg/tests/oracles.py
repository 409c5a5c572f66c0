"""Independent reference implementations used only as test oracles.

Everything here is deliberately naive (O(n^2) transforms, per-sample loops,
quadrature) and never shares code with the package under test.
"""
from __future__ import annotations

import numpy as np


def estimate_pitch(x: np.ndarray, sample_rate: int,
                   fmin: float = 50.0, fmax: float = 500.0) -> float:
    """Autocorrelation pitch estimate with parabolic peak interpolation."""
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    n = len(x)
    ac = np.correlate(x, x, mode="full")[n - 1:]
    lo = max(2, int(sample_rate / fmax))
    hi = min(n - 2, int(np.ceil(sample_rate / fmin)))
    lag = lo + int(np.argmax(ac[lo:hi + 1]))
    y0, y1, y2 = ac[lag - 1], ac[lag], ac[lag + 1]
    denom = y0 - 2 * y1 + y2
    shift = 0.0 if denom == 0 else 0.5 * (y0 - y2) / denom
    return sample_rate / (lag + shift)


def naive_power_spectrum(frame: np.ndarray) -> np.ndarray:
    """Hann window + direct O(n^2) DFT, magnitude squared."""
    frame = np.asarray(frame, dtype=np.float64) * np.hanning(len(frame))
    n = len(frame)
    k = np.arange(n // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)
    return np.abs(basis @ frame) ** 2


def naive_log_mel(x: np.ndarray, sample_rate: int, n_mels: int, frame_len: int,
                  hop: int, fmin: float, fmax: float, log_floor: float) -> np.ndarray:
    """Frame loop + naive DFT + explicitly evaluated triangle filters."""
    def mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def imel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    pts = imel(np.linspace(mel(fmin), mel(fmax), n_mels + 2))
    nbins = frame_len // 2 + 1
    freqs = np.arange(nbins) * sample_rate / frame_len
    tri = np.zeros((n_mels, nbins))
    for m in range(n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        for b, f in enumerate(freqs):
            if lo < f < c:
                tri[m, b] = (f - lo) / (c - lo)
            elif c <= f < hi:
                tri[m, b] = (hi - f) / (hi - c)

    out = []
    start = 0
    while start + frame_len <= len(x):
        spec = naive_power_spectrum(x[start:start + frame_len])
        out.append(np.log(tri @ spec + log_floor))
        start += hop
    return np.array(out)


def brute_quantize(x: np.ndarray, q: int) -> np.ndarray:
    """Per-sample Python-loop version of the re-quantizer."""
    from fractions import Fraction

    def half_away(v: Fraction) -> int:
        f = Fraction(v)
        n = f.numerator
        d = f.denominator
        if n >= 0:
            return (2 * n + d) // (2 * d)
        return -((-2 * n + d) // (2 * d))

    out = []
    for v in np.asarray(x, dtype=np.float64):
        s = half_away(Fraction(v * 32768).limit_denominator(10 ** 12))
        s_hat = q * half_away(Fraction(s, q))
        out.append(min(1.0, max(-1.0, s_hat / 32768)))
    return np.array(out)


def brute_median(x: np.ndarray, k: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    out = np.empty(n)
    for i in range(n):
        window = [x[min(n - 1, max(0, j))] for j in range(i - k, i + k + 1)]
        out[i] = sorted(window)[k]
    return out


def brute_squeeze_zeros(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    kept = [x[m * d] for m in range(int(np.ceil(len(x) / d)))]
    out = []
    for n in range(d * len(kept)):
        out.append(kept[n // d] if n % d == 0 else 0.0)
    return np.array(out)


def t_density(t: np.ndarray, df: float) -> np.ndarray:
    from math import lgamma
    c = np.exp(lgamma((df + 1) / 2.0) - lgamma(df / 2.0)) / np.sqrt(df * np.pi)
    return c * (1.0 + t ** 2 / df) ** (-(df + 1) / 2.0)


def t_pvalue_quadrature(t_stat: float, df: float) -> float:
    """Two-sided p-value by dense Simpson integration of the t density."""
    a = abs(t_stat)
    upper = max(a + 80.0, 120.0)
    grid = np.linspace(a, upper, 400001)
    dens = t_density(grid, df)
    h = grid[1] - grid[0]
    tail = h / 3.0 * (dens[0] + dens[-1] + 4 * dens[1:-1:2].sum() + 2 * dens[2:-1:2].sum())
    return min(1.0, 2.0 * tail)
