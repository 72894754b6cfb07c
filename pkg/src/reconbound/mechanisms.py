"""Private learners: Gaussian output perturbation and DP-SGD with GELU clipping."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import jax
import jax.numpy as jnp
import numpy as np

from reconbound.autodiff import gelu, smooth_clip
from reconbound.data import Dataset
from reconbound.models import ModelSpec, init_params, train_erm
from reconbound.rng import Stream, substream

__all__ = [
    "gelu",
    "smooth_clip",
    "CLIP_OVERHEAD",
    "SgdConfig",
    "StepTrace",
    "private_sgd_train",
    "output_perturbation_train",
    "gaussian_release",
    "save_checkpoint",
    "load_checkpoint",
]

#: sup over z > 0 of z / (gelu(z - 1) + 1); bounds |smooth_clip(g, C)| <= 1.115 C
CLIP_OVERHEAD = 1.115


@dataclass(frozen=True)
class SgdConfig:
    """DP-SGD hyperparameters.

    ``clip=None`` switches clipping off (a non-private reference path); the
    noise standard deviation is then ``sigma`` instead of ``sigma * clip``.
    """

    iters: int
    batch_size: int
    sigma: float
    clip: Optional[float] = 1.0
    lr: float = 0.1
    momentum: float = 0.5
    delta_total: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.sigma < 0 or self.lr <= 0:
            raise ValueError("need sigma >= 0 and lr > 0")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be positive (or None for no clipping)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.delta_total is not None and not 0.0 < self.delta_total < 1.0:
            raise ValueError("delta_total must lie in (0, 1)")

    def sampling_ratio(self, n: int) -> float:
        if self.batch_size > n:
            raise ValueError(f"batch size {self.batch_size} exceeds dataset size {n}")
        return self.batch_size / n

    @property
    def noise_std(self) -> float:
        return self.sigma * (1.0 if self.clip is None else self.clip)


@dataclass(frozen=True)
class StepTrace:
    """What happened at one step: the batch, and handles on ``w_{t-1}`` and the noise draw."""

    step: int
    batch: tuple[int, ...]
    params_digest: str
    noise_key: tuple[int, ...]


def _digest(w) -> str:
    return hashlib.blake2b(np.asarray(w, dtype="<f8").tobytes(), digest_size=8).hexdigest()


# hook(t, batch_indices, w_prev) is called once per step, before the update,
# with every member of the batch
StepHook = Callable[[int, np.ndarray, np.ndarray], None]


@lru_cache(maxsize=None)
def _clipped_batch_grads(spec: ModelSpec, clip: Optional[float]):
    def one(w, x, y):
        return smooth_clip(jax.grad(spec.loss)(w, x, y), clip)

    return jax.jit(jax.vmap(one, in_axes=(None, 0, 0)))


def private_sgd_train(
    spec: ModelSpec,
    dataset: Dataset,
    cfg: SgdConfig,
    hooks: Iterable[StepHook] = (),
    w0: Optional[np.ndarray] = None,
    run: int = 0,
) -> tuple[np.ndarray, list[StepTrace]]:
    """Train with DP-SGD, GELU-smoothed per-sample clipping and heavy-ball momentum.

    Step ``t`` draws a uniformly random ``B``-subset without replacement,
    computes per-sample gradients at ``w_{t-1}``, clips them, adds one
    ``N(0, sigma^2 C^2 I)`` draw to their sum, divides by ``B`` and applies
    ``v <- momentum * v + g_bar; w <- w - lr * v``.  Hooks see ``w_{t-1}``.
    """
    n = len(dataset)
    B = cfg.batch_size
    cfg.sampling_ratio(n)
    hooks = list(hooks)
    if w0 is None:
        w0 = init_params(spec, substream(cfg.seed, run, Stream.INIT))
    w = jnp.asarray(w0, dtype=jnp.float64)
    if w.shape != (spec.num_params,):
        raise ValueError(f"w0 has shape {w.shape}, expected ({spec.num_params},)")
    velocity = jnp.zeros_like(w)
    grads = _clipped_batch_grads(spec, cfg.clip)
    X, Y = jnp.asarray(dataset.X), jnp.asarray(dataset.y)
    traces: list[StepTrace] = []

    for t in range(1, cfg.iters + 1):
        batch = np.sort(substream(cfg.seed, run, Stream.BATCH, t).choice(n, size=B, replace=False))
        w_prev = np.asarray(w)
        for hook in hooks:
            hook(t, batch, w_prev)
        g_sum = jnp.sum(grads(w, X[batch], Y[batch]), axis=0)
        noise_key = (cfg.seed, run, int(Stream.NOISE), t)
        noise = substream(cfg.seed, run, Stream.NOISE, t).standard_normal(w.size)
        g_bar = (g_sum + cfg.noise_std * jnp.asarray(noise)) / B
        velocity = cfg.momentum * velocity + g_bar
        w = w - cfg.lr * velocity
        if not bool(jnp.all(jnp.isfinite(w))):
            raise FloatingPointError(f"non-finite weights after step {t} (lr={cfg.lr}, sigma={cfg.sigma})")
        traces.append(StepTrace(t, tuple(int(i) for i in batch), _digest(w_prev), noise_key))
    return np.asarray(w), traces


def output_perturbation_train(
    spec: ModelSpec,
    dataset: Dataset,
    sigma: float,
    rng: np.random.Generator,
    w_star: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Release ``w* + N(0, sigma^2 I)`` where ``w*`` minimises the regularised logistic risk."""
    if spec.l2 <= 0:
        raise ValueError("output perturbation needs l2 > 0")
    if w_star is None:
        w_star = train_erm(spec, dataset)
    if sigma == 0:
        return np.array(w_star, dtype=np.float64)
    return w_star + sigma * rng.standard_normal(np.shape(w_star))


def gaussian_release(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """The identity Gaussian mechanism ``h = x + N(0, sigma^2 I)``."""
    return np.asarray(x, dtype=np.float64) + sigma * rng.standard_normal(np.shape(x))


# ---------------------------------------------------------------------------
# checkpoints: raw little-endian float64 weights plus a JSON sidecar

def save_checkpoint(path: Union[str, Path], w: np.ndarray, spec: ModelSpec, step: int, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.asarray(w, dtype="<f8").tobytes())
    meta = {"spec": {**asdict(spec), "hidden": list(spec.hidden)}, "step": step, "seed": seed,
            "num_params": spec.num_params}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[np.ndarray, ModelSpec, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    spec_fields = dict(meta["spec"])
    spec_fields["hidden"] = tuple(spec_fields.get("hidden", ()))
    spec = ModelSpec(**spec_fields)
    w = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    if w.size != spec.num_params:
        raise ValueError(f"checkpoint holds {w.size} weights, spec needs {spec.num_params}")
    return w, spec, meta


def clip_overhead_sup(grid: Sequence[float] | None = None) -> float:
    """Numerically maximise ``z / (gelu(z - 1) + 1)`` over ``z`` in ``(0, 10]``."""
    z = np.linspace(1e-6, 10.0, 200001) if grid is None else np.asarray(grid)
    vals = z / (np.asarray(gelu(jnp.asarray(z - 1.0))) + 1.0)
    return float(vals.max())
