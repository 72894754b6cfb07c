"""Per-sample Fisher information leakage (FIL) accounting.

For one DP-SGD step the release is ``g_bar = (sum_b smooth_clip(grad l(z_b)) + N(0, s^2 I)) / B``
with ``s = sigma * C``.  Its Fisher information about the input ``x`` of a
batch member is ``J^T J / s^2`` where ``J`` is the input Jacobian of that
member's clipped gradient; the ``1/B`` cancels.  Steps compose additively and
subsampling multiplies each step by ``kappa``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg

from reconbound.accounting.rdp import DeltaBudget, delta_budget, kappa, step_epsilon_dp
from reconbound.autodiff import (
    ConvergenceError,
    batched_power_iteration,
    clipped_gradient_fn,
    gelu,
    input_grad_jvp,
    normal_operator,
    power_iteration,
)
from reconbound.data import Dataset, Sample
from reconbound.mechanisms import SgdConfig, private_sgd_train
from reconbound.models import ModelSpec, Objective, check_sample
from reconbound.rng import Stream, substream


# ---------------------------------------------------------------------------
# single-step quantities

def per_step_fim_trace(model, w, z: Sample, sigma: float, clip: Optional[float], coords) -> float:
    """Unbiased estimate of ``Tr(I)`` for one step from a subset of input coordinates.

    ``(d/m) * sum_{i in coords} |J e_i|^2 / s^2`` with ``s = sigma * C`` (or
    ``sigma`` when ``clip`` is None); exact when ``coords`` covers every input.
    """
    coords = np.asarray(coords, dtype=np.int64).ravel()
    d = np.size(z.x)
    if coords.size == 0:
        raise ValueError("coords must not be empty")
    if np.unique(coords).size != coords.size or coords.min() < 0 or coords.max() >= d:
        raise ValueError("coords must be distinct indices in [0, d)")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    scale = _noise_scale(sigma, clip)
    eye = np.eye(d)
    total = 0.0
    for i in coords:
        col = input_grad_jvp(model, w, z, jnp.asarray(eye[i]), clip)
        total += float(col @ col)
    return d / coords.size * total / scale ** 2


def per_step_fil_spectral(model, w, z: Sample, sigma: float, clip: Optional[float], seed: int = 0,
                          max_iters: int = 500, tol: float = 1e-10):
    """Largest eigenvalue of ``J^T J / s^2`` by power iteration; returns ``(value, converged)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    f = clipped_gradient_fn(model, jnp.asarray(w), z.y, clip)
    op = normal_operator(f, z.x, _noise_scale(sigma, clip) ** 2)
    res = power_iteration(op, np.size(z.x), max_iters=max_iters, tol=tol, seed=seed)
    return res.value, res.converged


def _noise_scale(sigma: float, clip: Optional[float]) -> float:
    return sigma * (1.0 if clip is None else clip)


@lru_cache(maxsize=None)
def _batched_sq_jvp(spec: ModelSpec, clip: Optional[float]):
    """``(w, X, Y, idx) -> sum_j |J_b e_{idx[b, j]}|^2`` for each row ``b``."""

    def one(w, x, y, idx):
        f = clipped_gradient_fn(spec, w, y, clip)
        _, f_jvp = jax.linearize(f, x)

        def column(i):
            col = f_jvp(jax.nn.one_hot(i, x.shape[0], dtype=x.dtype))
            return jnp.sum(col * col)

        return jnp.sum(jax.lax.map(column, idx))

    # sequential maps keep the working set small; vmapping 2500 tangents is slower on CPU
    return jax.jit(lambda w, X, Y, idx: jax.lax.map(lambda a: one(w, *a), (X, Y, idx)))


@lru_cache(maxsize=None)
def _sampled_sq_norms(spec: ModelSpec, clip: Optional[float]):
    norms = _column_sq_norms(spec, clip)
    return jax.jit(lambda w, X, Y, idx: jnp.sum(jnp.take_along_axis(norms(w, X, Y), idx, axis=1), axis=1))


@lru_cache(maxsize=None)
def _column_sq_norms(spec: ModelSpec, clip: Optional[float]):
    """``(w, x, y) -> [|J e_i|^2 for every input coordinate i]`` without per-coordinate JVPs.

    The input only enters through ``a = W1 x``, so the unclipped gradient is
    ``(delta(a) x^T, r(a))`` and column ``i`` of its input Jacobian is
    ``(Q_i x^T + delta e_i^T, R_i)`` with ``Q = (d delta/da) W1`` and
    ``R = (dr/da) W1``.  Clipping multiplies by ``(I - beta g g^T) / D``.
    """
    d_gelu = jax.grad(gelu)

    def one(w, x, y):
        W1, _ = spec.first_layer(w)
        h = W1.shape[0]
        start = h * x.shape[0]  # the W1 block leads the flat parameter vector

        def parts(a):
            delta = jax.grad(spec.head_loss, argnums=1)(w, a, y)
            rest = jax.grad(spec.head_loss)(w, a, y)[start:]
            return delta, rest

        a = W1 @ x
        delta, r = parts(a)
        d_delta, d_rest = jax.jacfwd(parts)(a)
        Q = d_delta @ W1
        R = d_rest @ W1
        xx = x @ x
        dd = delta @ delta
        Qd = Q.T @ delta
        vv = jnp.sum(Q * Q, axis=0) * xx + 2.0 * x * Qd + dd + jnp.sum(R * R, axis=0)
        if clip is None:
            return vv
        gv = Qd * xx + x * dd + R.T @ r
        gnorm2 = dd * xx + r @ r
        gnorm = jnp.sqrt(gnorm2)
        u = gnorm / clip
        D = gelu(u - 1.0) + 1.0
        beta = jnp.where(gnorm > 0, d_gelu(u - 1.0) / (clip * D * jnp.where(gnorm > 0, gnorm, 1.0)), 0.0)
        return (vv + (beta * beta * gnorm2 - 2.0 * beta) * gv * gv) / (D * D)

    return jax.jit(jax.vmap(one, in_axes=(None, 0, 0)))


@lru_cache(maxsize=None)
def _batched_normal_op(spec: ModelSpec, clip: Optional[float]):
    """``(w, X, Y, V) -> rows J_b^T J_b v_b``."""

    def one(w, x, y, v):
        f = clipped_gradient_fn(spec, w, y, clip)
        _, f_vjp = jax.vjp(f, x)
        return f_vjp(jax.jvp(f, (x,), (v,))[1])[0]

    return jax.jit(jax.vmap(one, in_axes=(None, 0, 0, 0)))


# ---------------------------------------------------------------------------
# accumulation

@dataclass
class AccountingParams:
    """Knobs of the FIL accountant.

    ``kappa_policy`` is ``"amplified"`` (subsampling factor from the step's
    DP epsilon) or ``"convexity"`` (factor 1).  ``coords_per_step`` input
    coordinates are drawn without replacement, fresh per (step, sample).
    ``engine`` picks how the sampled columns ``|J e_i|^2`` are evaluated:
    ``"jvp"`` pushes one tangent per coordinate, ``"structured"`` uses the
    first-layer factorisation; both give the same numbers.
    """

    kappa_policy: str = "amplified"
    coords_per_step: int = 50
    engine: str = "structured"
    runs: int = 10
    spectral: bool = False
    delta_total: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kappa_policy not in ("amplified", "convexity"):
            raise ValueError(f"unknown kappa policy {self.kappa_policy!r}")
        if self.engine not in ("structured", "jvp"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.coords_per_step < 1 or self.runs < 1:
            raise ValueError("coords_per_step and runs must be >= 1")


@dataclass
class FilEstimate:
    """Per-sample accumulated leakage.

    ``trace_sum[i]`` is the run-averaged ``sum_t kappa * Tr(I_t(z_i))`` and
    already includes ``kappa``; ``dfil = trace_sum / d``.  ``spectral_est``
    accumulates ``kappa * |I_t|_2`` (an upper bound on the composed spectral
    norm) and is NaN when not computed.
    """

    trace_sum: np.ndarray
    spectral_est: np.ndarray
    visit_count: np.ndarray
    dim: int
    kappa: float = 1.0
    runs: int = 1
    spectral_converged: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def dfil(self) -> np.ndarray:
        return self.trace_sum / self.dim

    @property
    def mse_bound(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.trace_sum > 0, self.dim / np.where(self.trace_sum > 0, self.trace_sum, 1.0), np.inf)

    @classmethod
    def zeros(cls, n: int, dim: int, kappa: float = 1.0, runs: int = 1) -> "FilEstimate":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64), dim, kappa, runs)


class FilAccumulator:
    """Order-independent per-sample sums of nonnegative contributions.

    Contributions are kept and summed with :func:`math.fsum`, which is exactly
    rounded, so any delivery order gives bit-identical totals.
    """

    def __init__(self, n: int):
        self.n = n
        self._trace: dict[int, list[float]] = defaultdict(list)
        self._spectral: dict[int, list[float]] = defaultdict(list)

    def add(self, i: int, trace: float, spectral: float = 0.0) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"sample index {i} outside dataset of size {self.n}")
        if trace < 0 or spectral < 0:
            raise ValueError("Fisher information contributions must be non-negative")
        self._trace[i].append(float(trace))
        self._spectral[i].append(float(spectral))

    def totals(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        trace = np.array([math.fsum(self._trace.get(i, ())) for i in range(self.n)])
        spec = np.array([math.fsum(self._spectral.get(i, ())) for i in range(self.n)])
        visits = np.array([len(self._trace.get(i, ())) for i in range(self.n)], dtype=np.int64)
        return trace, spec, visits


class FilAccountant:
    """Step hook for :func:`private_sgd_train` that accumulates per-sample FIL."""

    def __init__(self, spec: ModelSpec, dataset: Dataset, cfg: SgdConfig, params: AccountingParams,
                 kappa_value: float, run: int = 0):
        self.spec = spec
        self.dataset = dataset
        self.cfg = cfg
        self.params = params
        self.kappa = kappa_value
        self.run = run
        self.acc = FilAccumulator(len(dataset))
        self.scale2 = cfg.noise_std ** 2
        self.spectral_converged = True
        self.m = min(params.coords_per_step, dataset.dim)
        kernel = _batched_sq_jvp if params.engine == "jvp" else _sampled_sq_norms
        self._sq_jvp = kernel(spec, cfg.clip)
        self._normal = _batched_normal_op(spec, cfg.clip) if params.spectral else None
        self._X = jnp.asarray(dataset.X)
        self._Y = jnp.asarray(dataset.y)

    def _coords(self, t: int, i: int) -> np.ndarray:
        rng = substream(self.params.seed, self.run, Stream.COORDS, t, i)
        return rng.choice(self.dataset.dim, size=self.m, replace=False)

    def _probe_seed(self, t: int) -> int:
        return int(substream(self.params.seed, self.run, Stream.PROBE, t).integers(2 ** 31))

    def __call__(self, t: int, batch: np.ndarray, w_prev: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.int64)
        if batch.size and (batch.min() < 0 or batch.max() >= len(self.dataset)):
            raise IndexError("hook delivered a sample outside the dataset")
        w = jnp.asarray(w_prev)
        X, Y = self._X[batch], self._Y[batch]
        idx = jnp.asarray(np.stack([self._coords(t, int(i)) for i in batch]))
        sq = np.asarray(self._sq_jvp(w, X, Y, idx))
        traces = self.kappa * (self.dataset.dim / self.m) * sq / self.scale2
        if self._normal is not None:
            op = lambda V: self._normal(w, X, Y, V)  # noqa: E731
            vals, conv = batched_power_iteration(op, batch.size, self.dataset.dim,
                                                 seed=self._probe_seed(t))
            self.spectral_converged &= bool(conv.all())
            spectral = self.kappa * vals / self.scale2
        else:
            spectral = np.zeros(batch.size)
        for k, i in enumerate(batch):
            self.acc.add(int(i), float(traces[k]), float(max(spectral[k], 0.0)))


@dataclass
class DpSgdAccounting:
    """Everything one accountant run produces."""

    estimate: FilEstimate
    weights: list[np.ndarray]
    delta: DeltaBudget
    eps_step: float
    q: float


def step_kappa(cfg: SgdConfig, n: int, params: AccountingParams) -> tuple[float, float, DeltaBudget]:
    """``(kappa, eps_step, delta_budget)`` for a DP-SGD configuration."""
    q = cfg.sampling_ratio(n)
    delta_total = params.delta_total if params.delta_total is not None else cfg.delta_total
    budget = delta_budget(max(cfg.iters, 1), n, q, delta_total)
    if params.kappa_policy == "convexity" or cfg.sigma == 0:
        return 1.0, math.inf if cfg.sigma == 0 else step_epsilon_dp(cfg.sigma, budget.delta_step), budget
    eps = step_epsilon_dp(cfg.sigma, budget.delta_step)
    return kappa(q, eps, params.kappa_policy), eps, budget


def fil_accountant_run(spec: ModelSpec, dataset: Dataset, cfg: SgdConfig, params: AccountingParams,
                       ) -> DpSgdAccounting:
    """Train ``params.runs`` independent DP-SGD models and average their per-sample FIL.

    Each run draws a fresh initialisation, batch sequence, noise and
    coordinate subsets; per-sample totals are averaged across runs.
    """
    n = len(dataset)
    if cfg.sigma <= 0:
        raise ValueError("FIL accounting needs sigma > 0")
    k, eps, budget = step_kappa(cfg, n, params)
    trace_runs, spec_runs, visits_runs, weights = [], [], [], []
    converged = True
    for r in range(params.runs):
        hook = FilAccountant(spec, dataset, cfg, params, k, run=r)
        w, _ = private_sgd_train(spec, dataset, cfg, hooks=[hook], run=r)
        tr, sp, vi = hook.acc.totals()
        trace_runs.append(tr)
        spec_runs.append(sp)
        visits_runs.append(vi)
        weights.append(w)
        converged &= hook.spectral_converged
    trace = np.array([math.fsum(col) for col in np.stack(trace_runs, axis=1)]) / params.runs
    spectral = np.array([math.fsum(col) for col in np.stack(spec_runs, axis=1)]) / params.runs
    if not params.spectral:
        spectral = np.full(n, np.nan)
    est = FilEstimate(trace, spectral, np.sum(visits_runs, axis=0), dataset.dim, k, params.runs,
                      converged, meta={"eps_step": eps, "delta_step": budget.delta_step,
                                       "delta_clamped": budget.clamped})
    return DpSgdAccounting(est, weights, budget, eps, cfg.sampling_ratio(n))


# ---------------------------------------------------------------------------
# output perturbation

@dataclass
class OutputPerturbationFim:
    trace: np.ndarray
    spectral: np.ndarray
    dim: int
    spectral_converged: bool = True

    @property
    def dfil(self) -> np.ndarray:
        return self.trace / self.dim

    @property
    def mse_bound(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.trace > 0, self.dim / np.where(self.trace > 0, self.trace, 1.0), np.inf)


def _logistic_parts(spec: ModelSpec, dataset: Dataset, w_star):
    obj = Objective(spec, dataset.X, dataset.y)
    H = np.asarray(obj.hessian(jnp.asarray(w_star)))
    factor = scipy.linalg.cho_factor(H)
    h_inv = scipy.linalg.cho_solve(factor, np.eye(H.shape[0]))
    X = dataset.X
    margin = X @ w_star
    p = 0.5 * (1.0 + np.tanh(0.5 * margin))
    s = p - dataset.y
    c = p * (1.0 - p)
    U = X @ h_inv  # rows u_i = H^{-1} x_i
    return h_inv, s, c, U


def output_perturbation_fim(
    spec: ModelSpec,
    dataset: Dataset,
    sigma: float,
    w_star,
    indices=None,
    spectral: bool = True,
    seed: int = 0,
) -> OutputPerturbationFim:
    """FIM of ``w* + N(0, sigma^2 I)`` about each training input (binary logistic).

    Implicit differentiation of the stationarity condition gives
    ``J = dw*/dx = -H^{-1} M`` with ``M = (1/n)(s I + p(1-p) x w^T)``;
    then ``I = J^T J / sigma^2``.  Writing ``u = H^{-1} x`` the trace is

        |J|_F^2 = (s^2 |H^{-1}|_F^2 + 2 s c w^T H^{-1} u + c^2 |u|^2 |w|^2) / n^2.
    """
    if not spec.binary_logistic:
        raise ValueError("closed-form output-perturbation FIM needs binary logistic regression")
    if spec.l2 <= 0 or sigma <= 0:
        raise ValueError("need l2 > 0 and sigma > 0")
    n = len(dataset)
    w = np.asarray(w_star, dtype=np.float64)
    try:
        h_inv, s, c, U = _logistic_parts(spec, dataset, w)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError("Hessian is not positive definite") from exc
    idx = np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64)
    s, c, U = s[idx], c[idx], U[idx]
    fro2 = float(np.sum(h_inv * h_inv))
    wu = U @ (h_inv @ w)
    fro = (s ** 2 * fro2 + 2.0 * s * c * wu + c ** 2 * np.sum(U * U, axis=1) * (w @ w)) / n ** 2
    trace = np.maximum(fro, 0.0) / sigma ** 2

    if not spectral:
        return OutputPerturbationFim(trace, np.full(idx.size, np.nan), dataset.dim)

    h_inv_j = jnp.asarray(h_inv)
    wj, Uj = jnp.asarray(w), jnp.asarray(U)
    sj, cj = jnp.asarray(s)[:, None], jnp.asarray(c)[:, None]

    # rows: J^T J v with -n J = s H^{-1} + c u w^T and -n J^T = s H^{-1} + c w u^T
    @jax.jit
    def normal(V):
        JV = sj * (V @ h_inv_j) + cj * Uj * (V @ wj)[:, None]
        return (sj * (JV @ h_inv_j) + cj * wj[None, :] * jnp.sum(Uj * JV, axis=1)[:, None]) / (n * sigma) ** 2

    vals, conv = batched_power_iteration(normal, idx.size, dataset.dim, max_iters=1000, tol=1e-10, seed=seed)
    return OutputPerturbationFim(trace, vals, dataset.dim, bool(conv.all()))


def output_perturbation_jacobian(spec: ModelSpec, dataset: Dataset, w_star, i: int) -> np.ndarray:
    """``dw*/dx_i`` by implicit differentiation with autodiff (any smooth convex model)."""
    check_sample(spec, dataset.sample(i))
    n = len(dataset)
    obj = Objective(spec, dataset.X, dataset.y)
    w = jnp.asarray(w_star)
    H = np.asarray(obj.hessian(w))
    z = dataset.sample(i)
    mixed = jax.jacfwd(lambda x: jax.grad(spec.loss)(w, x, z.y))(jnp.asarray(z.x))
    M = np.asarray(mixed) / n
    return -scipy.linalg.cho_solve(scipy.linalg.cho_factor(H), M)


def output_perturbation_fim_dense(spec: ModelSpec, dataset: Dataset, sigma: float, w_star, i: int) -> np.ndarray:
    """Full ``d x d`` FIM ``J^T J / sigma^2`` for one sample via the autodiff path."""
    J = output_perturbation_jacobian(spec, dataset, w_star, i)
    return J.T @ J / sigma ** 2
