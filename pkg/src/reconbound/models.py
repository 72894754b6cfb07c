"""Smooth models: linear logistic regression and a small tanh MLP.

Parameters are always one flat float64 vector.  The training objective is

    F(w) = (1/n) * sum_i loss(w; x_i, y_i) + (l2/2) * |w|^2

so the replace-one sensitivity of the logistic minimiser is ``2/(n*l2)`` when
``|x| <= 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import jax
import jax.numpy as jnp
import numpy as np

from reconbound.autodiff import (
    ConvergenceError,
    LinearOperator,
    NonSmoothPrimitiveError,
    solve_spd,
)
from reconbound.data import Dataset, Sample

KINDS = ("logistic", "tanh-mlp")
NON_SMOOTH = ("relu", "leaky_relu", "hard_tanh", "abs", "max")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture plus L2 strength.

    ``logistic`` with two classes is the classic sigmoid model with one weight
    per input (no bias); with more classes it is a bias-free softmax layer.
    ``tanh-mlp`` stacks ``hidden`` tanh layers (with biases) under a linear
    softmax output.
    """

    kind: str = "logistic"
    input_dim: int = 784
    num_classes: int = 2
    hidden: tuple[int, ...] = ()
    activation: str = "tanh"
    l2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.activation.lower() in NON_SMOOTH:
            raise NonSmoothPrimitiveError(
                f"activation {self.activation!r} is not twice differentiable; use tanh"
            )
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.kind == "logistic" and self.hidden:
            raise ValueError("logistic regression has no hidden layers")
        if self.kind == "tanh-mlp" and not self.hidden:
            raise ValueError("tanh-mlp needs at least one hidden layer")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")

    @property
    def binary_logistic(self) -> bool:
        return self.kind == "logistic" and self.num_classes == 2

    @cached_property
    def layer_shapes(self) -> tuple[tuple[int, int, bool], ...]:
        """``(fan_out, fan_in, has_bias)`` per layer."""
        if self.binary_logistic:
            return ((1, self.input_dim, False),)
        if self.kind == "logistic":
            return ((self.num_classes, self.input_dim, False),)
        widths = (self.input_dim,) + self.hidden + (self.num_classes,)
        return tuple((o, i, True) for i, o in zip(widths[:-1], widths[1:]))

    @cached_property
    def num_params(self) -> int:
        return sum(o * i + (o if b else 0) for o, i, b in self.layer_shapes)

    def unflatten(self, w):
        layers, k = [], 0
        for o, i, has_bias in self.layer_shapes:
            W = w[k:k + o * i].reshape(o, i)
            k += o * i
            b = None
            if has_bias:
                b = w[k:k + o]
                k += o
            layers.append((W, b))
        return layers

    def logits(self, w, x):
        """Margin ``<w, x>`` for binary logistic, class logits otherwise."""
        if self.binary_logistic:
            return x @ w
        layers = self.unflatten(w)
        h = x
        for j, (W, b) in enumerate(layers):
            h = h @ W.T
            if b is not None:
                h = h + b
            if j < len(layers) - 1:
                h = jnp.tanh(h)
        return h

    def loss(self, w, x, y):
        """Per-sample loss of one example (``x`` a vector, ``y`` an int)."""
        out = self.logits(w, x)
        if self.binary_logistic:
            signed = 2.0 * y - 1.0
            return jnp.logaddexp(0.0, -signed * out)
        return jax.nn.logsumexp(out) - out[y]

    def first_layer(self, w):
        """``(W1, b1)`` of the layer that touches the input (``b1`` may be None)."""
        if self.binary_logistic:
            return w[None, :], None
        return self.unflatten(w)[0]

    def head_loss(self, w, a, y):
        """Loss as a function of the bias-free first pre-activation ``a = W1 x``.

        Only ``b1`` and the later layers of ``w`` are used, so ``grad_w`` of this
        is zero on the ``W1`` block.
        """
        if self.binary_logistic:
            signed = 2.0 * y - 1.0
            return jnp.logaddexp(0.0, -signed * a[0])
        layers = self.unflatten(w)
        b1 = layers[0][1]
        h = a if b1 is None else a + b1
        for W, b in layers[1:]:
            h = jnp.tanh(h) @ W.T + b
        return jax.nn.logsumexp(h) - h[y]

    def predict(self, w, X) -> np.ndarray:
        out = np.asarray(jax.vmap(lambda x: self.logits(w, x))(jnp.asarray(X)))
        if self.binary_logistic:
            return (out > 0).astype(np.int64)
        return np.argmax(out, axis=1)


def check_sample(spec: ModelSpec, z: Sample) -> None:
    if np.shape(z.x) != (spec.input_dim,):
        raise ValueError(f"sample has shape {np.shape(z.x)}, model expects ({spec.input_dim},)")
    if not 0 <= z.y < spec.num_classes:
        raise ValueError(f"label {z.y} outside [0, {spec.num_classes})")


def per_sample_loss(spec: ModelSpec, w, z: Sample) -> float:
    check_sample(spec, z)
    return float(spec.loss(jnp.asarray(w), jnp.asarray(z.x), z.y))


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per layer, data independent."""
    parts = []
    for o, i, has_bias in spec.layer_shapes:
        bound = 1.0 / math.sqrt(i)
        parts.append(rng.uniform(-bound, bound, size=o * i))
        if has_bias:
            parts.append(rng.uniform(-bound, bound, size=o))
    return np.concatenate(parts)


def accuracy(spec: ModelSpec, w, dataset: Dataset) -> float:
    return float(np.mean(spec.predict(jnp.asarray(w), dataset.X) == dataset.y))


class Objective:
    """Regularised empirical risk and its derivatives, jit-compiled for one dataset."""

    def __init__(self, spec: ModelSpec, X, y, l2: float | None = None):
        self.spec = spec
        self.X = jnp.asarray(X)
        self.y = jnp.asarray(y)
        self.l2 = spec.l2 if l2 is None else l2
        self.n = self.X.shape[0]

        def value(w):
            losses = jax.vmap(spec.loss, in_axes=(None, 0, 0))(w, self.X, self.y)
            return jnp.mean(losses) + 0.5 * self.l2 * (w @ w)

        self.value = jax.jit(value)
        self.grad = jax.jit(jax.grad(value))
        self.hvp = jax.jit(lambda w, v: jax.jvp(jax.grad(value), (w,), (v,))[1])
        self.hessian = jax.jit(jax.hessian(value))

    def hessian_diag(self, w):
        """Exact Hessian diagonal for binary logistic, ``None`` otherwise."""
        if not self.spec.binary_logistic:
            return None
        p = jax.nn.sigmoid(self.X @ w)
        return jnp.mean((p * (1 - p))[:, None] * self.X ** 2, axis=0) + self.l2


def train_erm(
    spec: ModelSpec,
    dataset: Dataset,
    tol: float = 1e-12,
    max_iters: int = 100,
) -> np.ndarray:
    """Minimise the regularised logistic objective with damped Newton-CG.

    Stops once ``|grad F| <= tol``; raises :class:`ConvergenceError` otherwise.
    """
    if spec.kind != "logistic":
        raise ValueError("train_erm is defined for the convex logistic model only")
    if spec.l2 <= 0:
        raise ValueError("train_erm needs l2 > 0 for a unique minimiser")
    obj = Objective(spec, dataset.X, dataset.y)
    w = jnp.zeros(spec.num_params)
    gnorm = math.inf
    for _ in range(max_iters):
        g = obj.grad(w)
        gnorm = float(jnp.linalg.norm(g))
        if gnorm <= tol:
            return np.asarray(w)
        op = LinearOperator(w.size, w.size, lambda v, w=w: obj.hvp(w, v), diag=obj.hessian_diag(w))
        step = solve_spd(op, -g, tol=1e-10)
        f0 = float(obj.value(w))
        slope = float(g @ step)
        t = 1.0
        # Armijo backtracking; near the optimum the decrease drops below float resolution
        while gnorm > 1e-6 and float(obj.value(w + t * step)) > f0 + 1e-4 * t * slope and t > 1e-10:
            t *= 0.5
        w = w + t * step
    raise ConvergenceError(f"Newton stopped at |grad| = {gnorm:.3e} > tol = {tol:.1e}")


# ---------------------------------------------------------------------------
# closed forms for binary logistic regression (test oracles)

def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def logistic_grad_analytic(w, z: Sample) -> np.ndarray:
    """``grad_w loss = s x`` with ``s = sigmoid(<w, x>) - y``."""
    x = np.asarray(z.x, dtype=np.float64)
    s = _sigmoid(np.dot(w, x)) - z.y
    return s * x


def logistic_input_jacobian_analytic(w, z: Sample) -> np.ndarray:
    """Mixed partial ``d/dx grad_w loss = s I + p(1-p) x w^T`` with ``p = sigmoid(<w, x>)``."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(z.x, dtype=np.float64)
    p = _sigmoid(np.dot(w, x))
    return (p - z.y) * np.eye(x.size) + p * (1.0 - p) * np.outer(x, w)
