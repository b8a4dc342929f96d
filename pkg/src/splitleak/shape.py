"""Recover (C, H, W) of intercepted flattened features from their covariance.

The covariance of flattened CNN features has a block structure with period
W along the diagonal. Row means of the covariance carry that period, so
the autocorrelation of the row-mean vector peaks at lag W.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BlockTooLarge,
    DegenerateSignal,
    NoPeakFound,
    NonFinite,
    NoValidFactorization,
    SplitLeakError,
    TooFewSamples,
)
from .wire import read_capture

MAX_BLOCK = 4096


def _as_matrix(capture) -> np.ndarray:
    x = np.asarray(capture, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"capture must be an N x d matrix, got shape {x.shape}")
    if x.shape[0] < 2:
        raise TooFewSamples(f"covariance needs N >= 2 samples, got {x.shape[0]}")
    if not np.isfinite(x).all():
        raise NonFinite("capture contains NaN or Inf")
    return x


def _centered(x: np.ndarray) -> np.ndarray:
    # subtract the first row before the mean: identical rows centre to exact zeros
    shifted = x - x[0]
    return shifted - shifted.mean(axis=0)


def covariance_row_means(capture) -> np.ndarray:
    """Row means of the 1/N sample covariance without forming the d x d matrix.

    mu = Xc^T (Xc 1) / (N d); O(N d) time and O(d) extra memory.
    """
    x = _as_matrix(capture)
    n, d = x.shape
    xc = _centered(x)
    return xc.T @ xc.sum(axis=1) / (n * d)


def covariance_block(capture, i0: int, i1: int) -> np.ndarray:
    """Dense covariance entries [i0:i1, i0:i1] (for heatmaps)."""
    x = _as_matrix(capture)
    d = x.shape[1]
    if not 0 <= i0 < i1 <= d:
        raise ValueError(f"block [{i0}, {i1}) outside [0, {d})")
    if i1 - i0 > MAX_BLOCK:
        raise BlockTooLarge(f"block of {i1 - i0} exceeds {MAX_BLOCK}")
    xc = _centered(x)[:, i0:i1]
    return xc.T @ xc / x.shape[0]


@dataclass
class AutocorrProfile:
    lags: np.ndarray
    values: np.ndarray
    r0: float

    @property
    def normalized(self) -> np.ndarray:
        return self.values / self.r0

    def at(self, k: int) -> float:
        return float(self.values[k - 1])

    @property
    def k_max(self) -> int:
        return len(self.values)


def autocorrelation(mu, k_max: int) -> AutocorrProfile:
    """R(k) = sum_{i < d-k} mu_i mu_{i+k} for k = 1..k_max, plus R(0)."""
    mu = np.asarray(mu, dtype=np.float64)
    d = len(mu)
    if not 1 <= k_max <= d - 1:
        raise ValueError(f"k_max must lie in [1, {d - 1}], got {k_max}")
    r0 = float(mu @ mu)
    if r0 == 0.0:
        raise DegenerateSignal("row-mean vector is identically zero")
    values = np.array([mu[: d - k] @ mu[k:] for k in range(1, k_max + 1)])
    return AutocorrProfile(np.arange(1, k_max + 1), values, r0)


def divisors(n: int) -> list[int]:
    small = [k for k in range(1, math.isqrt(n) + 1) if n % k == 0]
    return sorted(set(small + [n // k for k in small]))


def detect_width(profile: AutocorrProfile, d: int) -> tuple[int, float]:
    """Highest strict local maximum of R among divisor lags; returns (W, R(W)/R(0)).

    Neighbours are k-1 and k+1 on the full profile, so the largest usable
    lag is ``k_max - 1``. Ties go to the smaller lag.
    """
    best = None
    for k in divisors(d):
        if k < 2 or k + 1 > profile.k_max:
            continue
        rk = profile.at(k)
        if profile.at(k - 1) < rk > profile.at(k + 1) and (best is None or rk > best[1]):
            best = (k, rk)
    if best is None:
        raise NoPeakFound(f"no interior autocorrelation peak at a divisor of d={d}")
    return best[0], best[1] / profile.r0


def enumerate_shapes(d: int, width: int, aspect: float = 1.0) -> list[tuple[int, int, int]]:
    """Candidate (C, H, W) with C*H*W = d and H close to aspect*W (at most 3)."""
    if width < 1 or d % width:
        raise NoValidFactorization(f"width {width} does not divide d={d}")
    if aspect <= 0:
        raise ValueError("aspect ratio must be positive")
    target = aspect * width
    h = max(1, int(math.floor(target + 0.5)))
    rest = d // width
    if rest % h == 0:
        return [(rest // h, h, width)]
    ranked = sorted(divisors(rest), key=lambda hh: (abs(hh - target), hh))
    return [(rest // hh, hh, width) for hh in ranked[:3]]


@dataclass
class ShapeEstimate:
    width: int
    height: int
    candidates: list
    peak_score: float
    aspect: float
    profile: AutocorrProfile = field(repr=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.candidates[0]


def _staged(stage, fn, *args):
    try:
        return fn(*args)
    except SplitLeakError as exc:
        exc.stage = stage
        raise


def estimate_shape(capture, aspect: float = 1.0, k_max: int | None = None) -> ShapeEstimate:
    """Full pipeline on a capture path or an N x d matrix."""
    if isinstance(capture, (str, Path)):
        capture = _staged("read", read_capture, capture)
    x = np.asarray(capture)
    d = x.shape[1]
    if k_max is None:
        k_max = min(d - 1, 512)
    mu = _staged("covariance", covariance_row_means, x)
    profile = _staged("autocorrelation", autocorrelation, mu, k_max)
    width, score = _staged("peak", detect_width, profile, d)
    cands = _staged("factorization", enumerate_shapes, d, width, aspect)
    return ShapeEstimate(width, cands[0][1], cands, score, aspect, profile)
