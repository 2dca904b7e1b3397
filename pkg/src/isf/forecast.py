"""
Autoregressive forecasting and the forecast consistency check.

Models are AR(p) with an intercept, optionally fitted on first differences
(d=1), estimated by ordinary least squares on the lagged design matrix.
Each inbound value is compared with the one-step-ahead forecast:

    deviation = |observed * beta - gamma * forecast|
    threshold = max(epsilon_abs, epsilon_rel * |gamma * forecast|,
                    k_sigma * beta * residual_std)

and accepted iff ``deviation <= threshold``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError

DEFAULT_ORDER = 2
DEFAULT_TRAINING_WINDOW = 50
DEFAULT_REFIT_EVERY = 200

# relative spread below which a series is treated as constant
_FLAT_TOLERANCE = 1e-12


@dataclass(frozen=True)
class ARModel:
    order_p: int
    diff_d: int
    coefficients: tuple[float, ...]
    intercept: float
    residual_std: float
    degenerate: bool = False

    def __post_init__(self):
        if len(self.coefficients) != self.order_p:
            raise InputError("coefficient count must equal the model order")
        if self.residual_std < 0:
            raise InputError("residual_std must be non-negative")

    @classmethod
    def mean_only(cls, level: float, order_p: int = DEFAULT_ORDER, diff_d: int = 0,
                  residual_std: float = 0.0) -> "ARModel":
        return cls(order_p, diff_d, (0.0,) * order_p, float(level), residual_std, True)


@dataclass(frozen=True)
class ToleranceConfig:
    gamma: float = 1.0
    beta: float = 1.0
    epsilon_abs: float = 0.0
    epsilon_rel: float = 0.0
    k_sigma: float = 4.0

    def __post_init__(self):
        if not (self.gamma > 0 and self.beta > 0):
            raise InputError("gamma and beta must be positive")
        if min(self.epsilon_abs, self.epsilon_rel, self.k_sigma) < 0:
            raise InputError("tolerance terms must be non-negative")
        if self.epsilon_abs == 0 and self.epsilon_rel == 0 and self.k_sigma == 0:
            raise InputError("at least one of epsilon_abs, epsilon_rel, k_sigma must be nonzero")


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    forecast: float
    deviation: float
    threshold: float


def difference(series: Sequence[float], d: int) -> list[float]:
    if d not in (0, 1):
        raise InputError(f"differencing order must be 0 or 1, got {d}")
    values = [float(x) for x in series]
    if d == 0:
        return values
    if len(values) < 2:
        raise InputError("first differencing needs at least two values")
    return [b - a for a, b in zip(values, values[1:])]


def _is_flat(z: np.ndarray) -> bool:
    spread = float(z.max() - z.min())
    return spread <= _FLAT_TOLERANCE * max(1.0, float(np.abs(z).max()))


def fit_ar(series: Sequence[float], p: int = DEFAULT_ORDER, d: int = 0) -> ARModel:
    """Least-squares AR(p) fit on the (optionally differenced) series.

    A constant input, or one whose design matrix is rank deficient, yields a
    mean-only model (zero coefficients, intercept = series mean) with
    ``degenerate=True``.
    """
    if p < 1:
        raise InputError("order p must be at least 1")
    z_list = difference(series, d)
    needed = max(2 * p + 5, 10)
    if len(z_list) < needed:
        raise InputError(f"need at least {needed} values after differencing, got {len(z_list)}")
    z = np.asarray(z_list, dtype=float)
    if not np.all(np.isfinite(z)):
        raise InputError("series contains non-finite values")

    level = math.fsum(z_list) / len(z_list)
    if _is_flat(z):
        return ARModel.mean_only(level, p, d)

    n = len(z)
    # row t: [1, z[t-1], ..., z[t-p]] -> z[t]
    design = np.column_stack([np.ones(n - p)] + [z[p - i:n - i] for i in range(1, p + 1)])
    target = z[p:]
    solution, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < p + 1:
        resid = z - level
        return ARModel.mean_only(level, p, d, float(np.sqrt(np.mean(resid ** 2))))
    residuals = target - design @ solution
    residual_std = float(np.sqrt(np.mean(residuals ** 2)))
    return ARModel(
        order_p=p,
        diff_d=d,
        coefficients=tuple(float(c) for c in solution[1:]),
        intercept=float(solution[0]),
        residual_std=residual_std,
    )


def forecast_next(model: ARModel, history: Sequence[float]) -> float:
    need = model.order_p + model.diff_d
    if len(history) < need:
        raise InputError(f"forecast needs {need} history values, got {len(history)}")
    recent = list(history)[-need:]
    tail = difference(recent, model.diff_d)
    predicted = model.intercept
    for i, coef in enumerate(model.coefficients, start=1):
        if coef != 0.0:
            predicted += coef * tail[-i]
    if model.diff_d == 1:
        predicted += recent[-1]
    return predicted


def consistency_check(observed: float, model: ARModel, history: Sequence[float],
                      tol: ToleranceConfig = ToleranceConfig()) -> Verdict:
    expected = forecast_next(model, history)
    scaled = tol.gamma * expected
    deviation = abs(observed * tol.beta - scaled)
    threshold = max(
        tol.epsilon_abs,
        tol.epsilon_rel * abs(scaled),
        tol.k_sigma * tol.beta * model.residual_std,
    )
    return Verdict(deviation <= threshold, expected, deviation, threshold)
