"""Differentiation and linear-algebra kernels.

Everything runs on JAX in 64-bit mode; second-order quantities (derivatives of
clipped gradients with respect to the input) lose too many digits in float32.
Importing this module switches ``jax_enable_x64`` on for the process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple, Optional, Union

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402
import scipy.linalg  # noqa: E402
from jax.scipy.special import erf  # noqa: E402

from reconbound.rng import Stream, substream  # noqa: E402

Tensor = jax.Array

SQRT2 = math.sqrt(2.0)


class NonSmoothPrimitiveError(ValueError):
    """A model or loss was built from a primitive that is not C^2."""


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations."""


def as_tensor(x: Any) -> Tensor:
    """Convert to a float64 JAX array, rejecting non-finite entries."""
    t = jnp.asarray(x, dtype=jnp.float64)
    if not bool(jnp.all(jnp.isfinite(t))):
        raise FloatingPointError("tensor contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# smooth primitives

def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def safe_norm(g: Tensor) -> Tensor:
    """Euclidean norm whose derivative at 0 is 0 instead of NaN."""
    sq = jnp.sum(g * g)
    pos = sq > 0.0
    return jnp.where(pos, jnp.sqrt(jnp.where(pos, sq, 1.0)), 0.0)


def smooth_clip(g: Tensor, clip: Optional[float]) -> Tensor:
    """Divide ``g`` by ``gelu(|g|/clip - 1) + 1``.

    ``clip=None`` disables clipping altogether (returns ``g``).  Note that a very
    large finite ``clip`` is *not* the identity: the divisor tends to
    ``gelu(-1) + 1 ~= 0.8413``.
    """
    if clip is None:
        return g
    return g / (gelu(safe_norm(g) / clip - 1.0) + 1.0)


# ---------------------------------------------------------------------------
# derivatives

def grad(loss: Callable[[Tensor], Tensor], w: Tensor) -> Tensor:
    """Reverse-mode gradient of a scalar function at ``w``."""
    return jax.grad(loss)(jnp.asarray(w, dtype=jnp.float64))


def jvp(f: Callable[[Tensor], Tensor], x: Tensor, v: Tensor) -> Tensor:
    """Forward-mode Jacobian-vector product ``J_f(x) v``."""
    x = jnp.asarray(x, dtype=jnp.float64)
    v = jnp.asarray(v, dtype=jnp.float64)
    if x.shape != v.shape:
        raise ValueError(f"tangent shape {v.shape} does not match primal shape {x.shape}")
    return jax.jvp(f, (x,), (v,))[1]


def hvp(f: Callable[[Tensor], Tensor], w: Tensor, v: Tensor) -> Tensor:
    """Hessian-vector product by forward-over-reverse differentiation."""
    return jvp(jax.grad(f), w, v)


def clipped_gradient_fn(model, w: Tensor, y, clip: Optional[float]) -> Callable[[Tensor], Tensor]:
    """``x -> smooth_clip(grad_w loss(w; x, y), clip)`` for a model exposing ``loss(w, x, y)``."""

    def g(x):
        return smooth_clip(jax.grad(model.loss)(w, x, y), clip)

    return g


def input_grad_jvp(model, w: Tensor, z, v: Tensor, clip: Optional[float]) -> Tensor:
    """Directional derivative of the clipped weight-gradient with respect to the input.

    Returns ``[d/dx smooth_clip(grad_w loss(w; x, y))] v`` at ``x = z.x``: a
    forward-mode tangent pushed through the reverse-mode gradient.
    """
    return jvp(clipped_gradient_fn(model, jnp.asarray(w), z.y, clip), z.x, v)


# ---------------------------------------------------------------------------
# linear operators

@dataclass(frozen=True)
class LinearOperator:
    """A matrix known only through its action on vectors.

    ``diag`` is optional and only used for Jacobi preconditioning.
    """

    in_dim: int
    out_dim: int
    matvec: Callable[[Tensor], Tensor]
    diag: Optional[Tensor] = None

    def __call__(self, v: Tensor) -> Tensor:
        return self.matvec(v)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    @classmethod
    def from_matrix(cls, a) -> "LinearOperator":
        a = jnp.asarray(a, dtype=jnp.float64)
        d = jnp.diag(a) if a.shape[0] == a.shape[1] else None
        return cls(in_dim=a.shape[1], out_dim=a.shape[0], matvec=lambda v: a @ v, diag=d)


def jacobian_operator(f: Callable[[Tensor], Tensor], x: Tensor) -> tuple[LinearOperator, LinearOperator]:
    """Return ``(J, J^T)`` of ``f`` at ``x`` as operators (JVP and VJP)."""
    x = jnp.asarray(x, dtype=jnp.float64)
    out, f_jvp = jax.linearize(f, x)
    f_vjp = jax.linear_transpose(f_jvp, x)
    j = LinearOperator(x.size, out.size, jax.jit(f_jvp))
    jt = LinearOperator(out.size, x.size, jax.jit(lambda u: f_vjp(u)[0]))
    return j, jt


def normal_operator(f: Callable[[Tensor], Tensor], x: Tensor, scale: float = 1.0) -> LinearOperator:
    """``v -> J^T J v / scale`` for the Jacobian of ``f`` at ``x`` (symmetric PSD)."""
    j, jt = jacobian_operator(f, x)
    return LinearOperator(j.in_dim, j.in_dim, lambda v: jt(j(v)) / scale)


class PowerIterationResult(NamedTuple):
    value: float
    converged: bool
    iterations: int


def power_iteration(
    op: Union[LinearOperator, Callable[[Tensor], Tensor]],
    dim: int,
    max_iters: int = 500,
    tol: float = 1e-10,
    seed: int = 0,
    restarts: int = 2,
) -> PowerIterationResult:
    """Largest eigenvalue of a symmetric PSD operator.

    Runs ``restarts`` independent starts from seeded random unit vectors and
    keeps the largest Rayleigh quotient.  A start has converged when two
    successive Rayleigh quotients differ by less than ``tol`` relative.
    """
    if dim <= 0:
        raise ValueError("power iteration needs a positive dimension")
    best, all_converged, total = 0.0, True, 0
    for r in range(restarts):
        rng = substream(seed, Stream.PROBE, r)
        v = jnp.asarray(rng.standard_normal(dim))
        v = v / jnp.linalg.norm(v)
        prev, converged = None, False
        value = 0.0
        for it in range(1, max_iters + 1):
            u = op(v)
            value = float(v @ u)
            nrm = float(jnp.linalg.norm(u))
            total += 1
            if nrm == 0.0:
                value, converged = 0.0, True
                break
            if prev is not None and abs(value - prev) <= tol * max(abs(value), 1e-300):
                converged = True
                break
            prev = value
            v = u / nrm
        best = max(best, value)
        all_converged = all_converged and converged
    return PowerIterationResult(best, all_converged, total)


def batched_power_iteration(
    op: Callable[[Tensor], Tensor],
    batch: int,
    dim: int,
    max_iters: int = 300,
    tol: float = 1e-8,
    seed: int = 0,
    restarts: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Power iteration on ``batch`` independent operators at once.

    ``op`` maps a ``(batch, dim)`` array to ``(batch, dim)``, row ``b`` going
    through operator ``b``.  Returns ``(values, converged)`` arrays.
    """
    best = np.zeros(batch)
    conv_all = np.ones(batch, dtype=bool)
    for r in range(restarts):
        rng = substream(seed, Stream.PROBE, r)
        v = jnp.asarray(rng.standard_normal((batch, dim)))
        v = v / jnp.linalg.norm(v, axis=1, keepdims=True)
        prev = np.full(batch, np.nan)
        done = np.zeros(batch, dtype=bool)
        values = np.zeros(batch)
        for _ in range(max_iters):
            u = op(v)
            cur = np.asarray(jnp.sum(v * u, axis=1))
            nrm = np.asarray(jnp.linalg.norm(u, axis=1))
            zero = nrm == 0.0
            cur = np.where(zero, 0.0, cur)
            newly = zero | (np.abs(cur - prev) <= tol * np.maximum(np.abs(cur), 1e-300))
            values = np.where(done, values, cur)
            done |= newly
            if done.all():
                break
            prev = cur
            v = u / jnp.asarray(np.where(zero, 1.0, nrm))[:, None]
        best = np.maximum(best, values)
        conv_all &= done
    return best, conv_all


def solve_spd(
    h: Union[LinearOperator, Any],
    b: Tensor,
    tol: float = 1e-8,
    max_iters: Optional[int] = None,
) -> Tensor:
    """Solve ``H x = b`` for symmetric positive-definite ``H``.

    Dense matrices up to 1024 rows go through Cholesky; operators (and larger
    matrices) through conjugate gradients with Jacobi preconditioning when the
    diagonal is known.  Raises :class:`ConvergenceError` unless
    ``|Hx - b| / |b| <= tol``.
    """
    b = jnp.asarray(b, dtype=jnp.float64)
    bnorm = float(jnp.linalg.norm(b))
    if bnorm == 0.0:
        return jnp.zeros_like(b)

    if not isinstance(h, LinearOperator):
        a = np.asarray(h, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        if a.shape[0] <= 1024:
            try:
                factor = scipy.linalg.cho_factor(a)
            except np.linalg.LinAlgError as exc:
                raise ConvergenceError("matrix is not positive definite") from exc
            x = scipy.linalg.cho_solve(factor, np.asarray(b))
            res = np.linalg.norm(a @ x - np.asarray(b)) / bnorm
            if res > tol:
                raise ConvergenceError(f"Cholesky residual {res:.3e} exceeds {tol:.1e}")
            return jnp.asarray(x)
        h = LinearOperator.from_matrix(a)

    n = b.shape[0]
    max_iters = max_iters or 10 * n
    inv_diag = None if h.diag is None else 1.0 / jnp.asarray(h.diag)

    def precond(r):
        return r if inv_diag is None else inv_diag * r

    x = jnp.zeros_like(b)
    r = b
    z = precond(r)
    p = z
    rz = float(r @ z)
    for _ in range(max_iters):
        hp = h(p)
        php = float(p @ hp)
        if php <= 0.0:
            raise ConvergenceError("operator is not positive definite along a search direction")
        alpha = rz / php
        x = x + alpha * p
        r = r - alpha * hp
        if float(jnp.linalg.norm(r)) <= 0.1 * tol * bnorm:
            break
        z = precond(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = float(jnp.linalg.norm(h(x) - b)) / bnorm
    if res > tol:
        raise ConvergenceError(f"CG residual {res:.3e} exceeds {tol:.1e} after {max_iters} iterations")
    return x
