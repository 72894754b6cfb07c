"""Order-2 Renyi DP and the (eps, delta) constants used by the FIL accountant."""

from __future__ import annotations

import math
from typing import NamedTuple, Optional

import numpy as np

from reconbound.mechanisms import CLIP_OVERHEAD


def rdp_output_perturbation(n: int, l2: float, sigma: float) -> float:
    """(2, eps)-RDP of ``w* + N(0, sigma^2 I)``: ``eps = 4 / (n * l2 * sigma)^2``.

    Relies on the ``2/(n*l2)`` replace-one sensitivity of the regularised
    logistic minimiser (inputs with ``|x| <= 1``).
    """
    if n < 1 or l2 <= 0 or sigma <= 0:
        raise ValueError("need n >= 1, l2 > 0 and sigma > 0")
    return 4.0 / (n * l2 * sigma) ** 2


def rdp_subsampled_gaussian_alpha2(q: float, sigma_eff: float) -> float:
    """Order-2 RDP of one subsampled Gaussian step.

    ``log(1 + q^2 (exp(1/sigma_eff^2) - 1))``, i.e. the order-2 divergence of
    ``(1-q) N(0, s^2) + q N(1, s^2)`` from ``N(0, s^2)``; evaluated in log
    space so tiny ``sigma_eff`` does not overflow.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    if sigma_eff <= 0:
        raise ValueError("sigma_eff must be positive")
    a = 1.0 / sigma_eff ** 2
    if q == 1.0:
        return a
    # log(1 - q^2 + q^2 e^a)
    return float(np.logaddexp(math.log1p(-q * q), 2.0 * math.log(q) + a))


def dpsgd_sigma_eff(sigma: float) -> float:
    """Noise-to-sensitivity ratio of a DP-SGD step.

    Replacing one sample moves the clipped sum by at most ``2 * 1.115 * C``
    while the noise has standard deviation ``sigma * C``.
    """
    return sigma / (2.0 * CLIP_OVERHEAD)


def rdp_dpsgd(q: float, sigma: float, iters: int) -> float:
    """Order-2 RDP of ``iters`` composed DP-SGD steps (additive composition)."""
    if iters == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    return iters * rdp_subsampled_gaussian_alpha2(q, dpsgd_sigma_eff(sigma))


def mia_advantage_bound(eps: float) -> float:
    """Membership-inference advantage ceiling ``(e^eps - 1)/(e^eps + 1)`` for eps-DP."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return math.tanh(eps / 2.0)


def step_epsilon_dp(sigma: float, delta: float) -> float:
    """Per-step DP epsilon ``1.115 * 2 * sqrt(2 log(1.25/delta)) / sigma``.

    The 2 accounts for replace-one sensitivity, 1.115 for the GELU clip
    overhead.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0.0 < delta < 1.25:
        raise ValueError(f"delta must lie in (0, 1.25), got {delta}")
    return CLIP_OVERHEAD * 2.0 * math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def kappa(q: float, eps_step: float, policy: str = "amplified") -> float:
    """Subsampling factor on the per-step Fisher information.

    ``policy="convexity"`` gives 1; ``"amplified"`` gives
    ``q / (q + (1 - q) e^{-eps_step})``.
    """
    if policy == "convexity":
        return 1.0
    if policy != "amplified":
        raise ValueError(f"unknown kappa policy {policy!r}")
    if not 0.0 < q <= 1.0 or eps_step < 0:
        raise ValueError("need q in (0, 1] and eps_step >= 0")
    return q / (q + (1.0 - q) * math.exp(-eps_step))


class DeltaBudget(NamedTuple):
    delta_step: float
    clamped: bool


DELTA_STEP_CAP = 1e-2


def delta_budget(iters: int, n: int, q: float, delta_total: Optional[float] = None) -> DeltaBudget:
    """Split the failure budget over every (sample, step) participation.

    Each sample joins ``q * iters`` batches in expectation, so ``n * q * iters``
    per-participation failures are union-bounded by ``delta_total`` (default
    ``1/n``): ``delta_step = delta_total / (n * q * iters)``.  Values above
    ``1e-2`` are clamped and flagged.
    """
    if iters < 1 or n < 1:
        raise ValueError("need iters >= 1 and n >= 1")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    total = 1.0 / n if delta_total is None else delta_total
    delta = total / (n * q * iters)
    if delta > DELTA_STEP_CAP:
        return DeltaBudget(DELTA_STEP_CAP, True)
    return DeltaBudget(delta, False)
