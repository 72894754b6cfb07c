"""Lower bounds on the per-coordinate MSE of a reconstruction attack."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

#: returned when no information leaks (eps = 0 or zero Fisher information)
PERFECT_PRIVACY = math.inf


@dataclass
class BoundInputs:
    """Geometry of the data box and the attacker's bias model.

    ``gamma`` defaults to 1 everywhere (an unbiased attacker).  Values in
    ``[0, 1]`` model shrinking estimators; the bound takes them as given.
    """

    diam: np.ndarray
    gamma: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    estimator_jacobian: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.diam = np.atleast_1d(np.asarray(self.diam, dtype=np.float64))
        if np.any(self.diam < 0):
            raise ValueError("diameters must be non-negative")
        if self.gamma is not None:
            self.gamma = np.broadcast_to(np.asarray(self.gamma, dtype=np.float64), self.diam.shape)

    @classmethod
    def unit_box(cls, d: int) -> "BoundInputs":
        return cls(diam=np.ones(d))

    @property
    def d(self) -> int:
        return self.diam.size

    def squared_bias(self) -> float:
        if self.bias is None:
            return 0.0
        b = np.asarray(self.bias, dtype=np.float64)
        return float(b @ b) / self.d


def mse_lower_bound_rdp(eps: float, inputs: BoundInputs) -> float:
    """MSE floor for a (2, eps)-RDP learner.

    ``sum_i gamma_i^2 diam_i^2 / (4 d) / (e^eps - 1) + |bias|^2 / d``.
    With ``eps = 0`` and any positive variance term the floor is ``inf``.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    gamma = np.ones_like(inputs.diam) if inputs.gamma is None else inputs.gamma
    numer = float(np.sum(gamma ** 2 * inputs.diam ** 2)) / (4.0 * inputs.d)
    bias = inputs.squared_bias()
    if numer == 0.0:
        return bias
    if eps == 0.0:
        return PERFECT_PRIVACY
    # numer / expm1(eps) without overflow for huge eps
    variance = numer * math.exp(-eps) / -math.expm1(-eps) if eps > 1.0 else numer / math.expm1(eps)
    return variance + bias


def mse_lower_bound_fil(
    fim_trace: Optional[float] = None,
    d: Optional[int] = None,
    fim: Optional[np.ndarray] = None,
    inputs: Optional[BoundInputs] = None,
) -> float:
    """MSE floor from Fisher information.

    Unbiased form: ``d / Tr(I)``.  Given the full matrix ``fim`` plus an
    estimator Jacobian in ``inputs``, the biased form
    ``Tr(J I^{-1} J^T)/d + |bias|^2/d`` is returned instead.
    """
    if fim is not None and inputs is not None and inputs.estimator_jacobian is not None:
        fim = np.asarray(fim, dtype=np.float64)
        jac = np.asarray(inputs.estimator_jacobian, dtype=np.float64)
        dim = fim.shape[0]
        try:
            sol = np.linalg.solve(fim, jac.T)
        except np.linalg.LinAlgError:
            return PERFECT_PRIVACY
        return float(np.trace(jac @ sol)) / dim + inputs.squared_bias()
    if fim is not None:
        fim = np.asarray(fim, dtype=np.float64)
        fim_trace, d = float(np.trace(fim)), fim.shape[0]
    if fim_trace is None or d is None:
        raise ValueError("need either (fim_trace, d) or a full fim")
    if fim_trace < 0:
        raise ValueError("Fisher information trace must be non-negative")
    if fim_trace == 0.0:
        return PERFECT_PRIVACY
    return d / fim_trace


def dfil_bound(dfil: float) -> float:
    """``1 / dFIL``, the unbiased floor written in terms of the average diagonal."""
    return PERFECT_PRIVACY if dfil == 0 else 1.0 / dfil
