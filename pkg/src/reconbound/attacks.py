"""Informed-adversary reconstruction attacks and the evaluation harness.

The adversary sees the released weights ``h``, every training sample except the
target, the target's label, ``l2`` and ``n``.  Success is measured by the
per-coordinate squared error ``|x_hat - x|^2 / d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from reconbound.data import Dataset
from reconbound.rng import Stream, substream

#: log-spaced search grid for the scale t = |s| in (0, 1]
_T_GRID = np.logspace(-12, 0, 2401)
_BISECT_STEPS = 80
_MIN_SCALE = 1e-12


class Reconstruction(NamedTuple):
    x: np.ndarray
    fallback: np.ndarray  # True where the root finder gave up and the box midpoint was used


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def _logistic_grads(h: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Rows ``(sigmoid(<h, x>) - y) x``."""
    return (_sigmoid(X @ h) - y)[:, None] * X


def random_guess_attack(lo: float, hi: float, d: int) -> np.ndarray:
    """Box midpoint, the best data-independent guess under squared error."""
    if lo > hi:
        raise ValueError(f"empty box [{lo}, {hi}]")
    return np.full(d, 0.5 * (lo + hi))


def _scale_roots(a: np.ndarray) -> list[np.ndarray]:
    """All roots ``t`` in (0, 1] of ``t = sigmoid(a/t)``, one array per entry of ``a``."""
    t = _T_GRID
    phi = t[None, :] - _sigmoid(a[:, None] / t[None, :])
    sign = np.signbit(phi)
    rows, cols = np.nonzero(sign[:, :-1] != sign[:, 1:])
    lo, hi = t[cols].copy(), t[cols + 1].copy()
    arow = a[rows]
    phi_lo = lo - _sigmoid(arow / lo)
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        phi_mid = mid - _sigmoid(arow / mid)
        same = np.signbit(phi_mid) == np.signbit(phi_lo)
        lo = np.where(same, mid, lo)
        phi_lo = np.where(same, phi_mid, phi_lo)
        hi = np.where(same, hi, mid)
    roots = 0.5 * (lo + hi)
    out = [np.empty(0) for _ in range(a.size)]
    for r in np.unique(rows):
        out[r] = roots[rows == r]
    return out


def _invert(g_hat: np.ndarray, y: np.ndarray, h: np.ndarray, lo: float, hi: float,
            ref_peak: float) -> Reconstruction:
    """Recover ``x`` from ``g_hat = s x`` with ``s = sigmoid(<h, x>) - y``.

    Writing ``a = <h, g_hat>`` and ``s = +t`` (label 0) or ``-t`` (label 1)
    turns the self-consistency condition into ``t = sigmoid(a/t)`` for both
    labels.  The equation usually has two roots, giving candidates that differ
    only by a positive scale factor.  The adversary keeps the one whose largest
    coordinate is closest to ``ref_peak``, the median peak of the known samples.
    Distance to the box is a poor tie-breaker: the true ``x`` often touches
    ``hi`` and round-off pushes it a hair outside.
    """
    m, d = g_hat.shape
    a = g_hat @ h
    roots = _scale_roots(a)
    X = np.empty((m, d))
    fallback = np.zeros(m, dtype=bool)
    mid = random_guess_attack(lo, hi, d)
    for j in range(m):
        if not np.any(g_hat[j]):
            X[j] = np.clip(0.0, lo, hi)
            continue
        ts = roots[j][roots[j] >= _MIN_SCALE]
        if ts.size == 0:
            X[j], fallback[j] = mid, True
            continue
        s = ts if y[j] == 0 else -ts
        cand = g_hat[j][None, :] / s[:, None]
        best = np.argmin(np.abs(cand.max(axis=1) - ref_peak))
        X[j] = np.clip(cand[best], lo, hi)
    return Reconstruction(X, fallback)


def glm_stationarity_attack(h, rest: Dataset, y_target: int, l2: float, n: int) -> Reconstruction:
    """Reconstruct one target from released logistic weights ``h``.

    Plugs ``h`` into the stationarity condition of the regularised objective,
    ``sum_i grad l(z_i; w) + n * l2 * w = 0``, to isolate the target's
    gradient ``g_hat = -n l2 h - sum_rest grad l(z'; h)`` and inverts it.
    """
    h = np.asarray(h, dtype=np.float64)
    if len(rest) != n - 1:
        raise ValueError(f"rest has {len(rest)} samples, expected n - 1 = {n - 1}")
    g_hat = -n * l2 * h - _logistic_grads(h, rest.X, rest.y).sum(axis=0)
    ref = float(np.median(rest.X.max(axis=1))) if len(rest) else rest.hi
    return _invert(g_hat[None, :], np.array([y_target]), h, rest.lo, rest.hi, ref)


def glm_attack_all(h, dataset: Dataset, l2: float) -> Reconstruction:
    """Run the stationarity attack against every sample of ``dataset`` at once.

    The rest-of-data gradient sum for target ``j`` is the full sum minus the
    target's own term, algebraically identical to summing over the other
    ``n - 1`` samples.
    """
    h = np.asarray(h, dtype=np.float64)
    n = len(dataset)
    G = _logistic_grads(h, dataset.X, dataset.y)
    total = G.sum(axis=0)
    g_hat = -n * l2 * h[None, :] - (total[None, :] - G)
    # the median over all n samples stands in for n separate leave-one-out medians
    ref = float(np.median(dataset.X.max(axis=1)))
    return _invert(g_hat, dataset.y, h, dataset.lo, dataset.hi, ref)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class AttackResult:
    """Per-sample expected squared error over independent mechanism draws."""

    mse: np.ndarray
    stderr: np.ndarray
    trials: int
    fallback_rate: np.ndarray
    reconstructions: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


MAX_KEPT_RECONSTRUCTIONS = 16


def evaluate_attack(
    mechanism: Callable[[np.random.Generator], np.ndarray],
    attack: Callable[[np.ndarray], np.ndarray],
    target: np.ndarray,
    trials: int = 1000,
    seed: int = 0,
    keep: int = 0,
) -> AttackResult:
    """Expected ``|attack(release) - target|^2 / d`` for a single target.

    Every trial draws the mechanism's randomness from its own substream.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    target = np.asarray(target, dtype=np.float64)
    errs = np.empty(trials)
    kept = []
    for k in range(trials):
        try:
            release = mechanism(substream(seed, Stream.RELEASE, k))
        except Exception as exc:
            raise RuntimeError(f"mechanism failed at trial {k}: {exc}") from exc
        x_hat = np.asarray(attack(release), dtype=np.float64)
        errs[k] = float(np.sum((x_hat - target) ** 2)) / target.size
        if len(kept) < min(keep, MAX_KEPT_RECONSTRUCTIONS):
            kept.append(x_hat)
    stderr = errs.std(ddof=1) / math.sqrt(trials) if trials > 1 else 0.0
    return AttackResult(np.array([errs.mean()]), np.array([stderr]), trials, np.zeros(1),
                        np.array(kept) if kept else None)


def evaluate_output_perturbation_attack(
    w_star: np.ndarray,
    dataset: Dataset,
    sigma: float,
    l2: float,
    trials: int = 1000,
    seed: int = 0,
) -> AttackResult:
    """Stationarity attack against every sample under output perturbation.

    Each trial releases ``w* + N(0, sigma^2 I)`` once and attacks all targets
    with it; a target's errors across trials are therefore independent.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n, d = dataset.X.shape
    total = np.zeros(n)
    total_sq = np.zeros(n)
    falls = np.zeros(n)
    for k in range(trials):
        rng = substream(seed, Stream.RELEASE, k)
        h = w_star + sigma * rng.standard_normal(w_star.shape)
        rec = glm_attack_all(h, dataset, l2)
        err = np.sum((rec.x - dataset.X) ** 2, axis=1) / d
        total += err
        total_sq += err * err
        falls += rec.fallback
    mean = total / trials
    if trials > 1:
        var = np.maximum(total_sq - trials * mean ** 2, 0.0) / (trials - 1)
        stderr = np.sqrt(var / trials)
    else:
        stderr = np.zeros(n)
    return AttackResult(mean, stderr, trials, falls / trials)
