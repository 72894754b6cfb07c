"""Closed-form and Monte-Carlo reference values for Gaussian toys."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

MIN_MC_SAMPLES = 1000


class HcrbResult(NamedTuple):
    variance_floor: float
    chi2: float


def hcrb_check(delta: float, sigma: float) -> HcrbResult:
    """Chapman-Robbins floor for the Gaussian location family.

    ``chi2(N(delta, s^2) || N(0, s^2)) = exp(delta^2/s^2) - 1`` and the floor
    is ``delta^2 / chi2``, which tends to the Cramer-Rao value ``s^2`` as
    ``delta -> 0``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = (delta / sigma) ** 2
    if r == 0.0:
        return HcrbResult(sigma ** 2, 0.0)
    try:
        chi2 = math.expm1(r)
    except OverflowError:
        return HcrbResult(0.0, math.inf)
    return HcrbResult(delta ** 2 / chi2, chi2)


def d2_gaussian(delta: float, sigma: float) -> float:
    """Order-2 Renyi divergence between ``N(delta, s^2)`` and ``N(0, s^2)``."""
    return (delta / sigma) ** 2


def d2_from_chi2(chi2: float) -> float:
    """``D_2 = log(1 + chi2)``."""
    return math.log1p(chi2)


def tightness_bound(m: float, sigma: float) -> float:
    """``M^2 / (4 (exp(M^2/s^2) - 1))``: the RDP floor for the Gaussian mechanism on ``[0, M]``."""
    r = (m / sigma) ** 2
    if r == 0.0:
        return sigma ** 2 / 4.0
    if r > 700.0:
        return m * m / 4.0 * math.exp(-r)
    return m * m / (4.0 * math.expm1(r))


class McEstimate(NamedTuple):
    mean: float
    stderr: float
    samples: int


def mc_fim_1d(scores) -> McEstimate:
    """Fisher information as the Monte-Carlo mean of squared scores."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size < MIN_MC_SAMPLES:
        raise ValueError(f"need at least {MIN_MC_SAMPLES} score samples, got {s.size}")
    sq = s * s
    return McEstimate(float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(s.size)), s.size)


def gaussian_score(h, z: float, sigma: float) -> np.ndarray:
    """``d/dz log N(h; z, s^2)``."""
    return (np.asarray(h) - z) / sigma ** 2


def mixture_score(h, z: float, q: float, sigma: float) -> np.ndarray:
    """``d/dz log[(1-q) N(h; 0, s^2) + q N(h; z, s^2)]``."""
    h = np.asarray(h, dtype=np.float64)
    # posterior weight of the z-component, computed in log space
    log_in = math.log(q) - 0.5 * ((h - z) / sigma) ** 2
    log_out = math.log1p(-q) - 0.5 * (h / sigma) ** 2 if q < 1.0 else np.full_like(h, -np.inf)
    resp = np.exp(log_in - np.logaddexp(log_in, log_out))
    return resp * (h - z) / sigma ** 2


def sample_mixture(rng: np.random.Generator, size: int, z: float, q: float, sigma: float) -> np.ndarray:
    member = rng.random(size) < q
    return np.where(member, z, 0.0) + sigma * rng.standard_normal(size)
