"""SGD and gRDA updates, the soft-thresholding operator and learning-rate schedules."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import DimensionError


def soft_threshold(v, g):
    """``sign(v) * max(0, |v| - g)``, elementwise for arrays."""
    if np.any(np.asarray(g) < 0):
        raise ValueError("threshold must be nonnegative")
    if np.isscalar(v):
        return math.copysign(max(0.0, abs(v) - g), v) if abs(v) > g else 0.0
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - g, 0.0)


@dataclass(frozen=True)
class TuningFn:
    """Threshold growth law ``g(n, gamma) = c * sqrt(gamma) * (n * gamma) ** mu``."""

    c: float
    mu: float

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("c must be nonnegative")
        if not 0.0 < self.mu < 1.0:
            raise ValueError("mu must lie in (0, 1)")
        if self.mu <= 0.5:
            warnings.warn(f"mu={self.mu} is outside (0.5, 1); the pruning guarantee does not apply",
                          stacklevel=3)

    @property
    def notes(self):
        return [] if self.mu > 0.5 else [f"mu={self.mu} <= 0.5"]


def tuning_g(n, gamma, tf):
    if n < 0 or gamma <= 0:
        raise ValueError("need n >= 0 and gamma > 0")
    if n == 0 or tf.c == 0:
        return 0.0
    return tf.c * math.sqrt(gamma) * (n * gamma) ** tf.mu


def sgd_step(w, grad, gamma):
    w = np.asarray(w, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if w.shape != grad.shape:
        raise DimensionError(f"weights {w.shape} and gradient {grad.shape} differ")
    return w - gamma * grad


@dataclass
class GrdaState:
    """Dual accumulator ``v``, threshold accumulator ``g_tilde``, step ``n`` and weights ``w``."""

    v: np.ndarray
    w: np.ndarray
    tf: TuningFn
    n: int = 0
    g_tilde: float = 0.0
    w0: np.ndarray = field(default=None, repr=False)

    @classmethod
    def init(cls, w0, tf):
        w0 = np.array(w0, dtype=np.float64)
        return cls(v=w0.copy(), w=w0.copy(), tf=tf, w0=w0.copy())

    def copy(self):
        return replace(self, v=self.v.copy(), w=self.w.copy(),
                       w0=None if self.w0 is None else self.w0.copy())


def _accumulate(state, grad, gamma):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.v.shape:
        raise DimensionError(f"gradient {grad.shape} does not match state {state.v.shape}")
    return state.v - gamma * grad


def grda_step(state, grad, gamma):
    """One constant-learning-rate gRDA step.

    After incrementing ``n`` the threshold is ``g(n, gamma)``, so a single step
    from ``n = 0`` already thresholds with ``g(1, gamma)``.
    """
    v = _accumulate(state, grad, gamma)
    n = state.n + 1
    g = tuning_g(n, gamma, state.tf)
    return replace(state, v=v, w=soft_threshold(v, g), n=n, g_tilde=g)


def grda_step_scheduled(state, grad, gamma_n):
    """gRDA step for a varying learning rate.

    The threshold accumulates ``g(n, gamma_n) - g(n - 1, gamma_n)``, so a drop
    in the learning rate slows the threshold growth without a jump.
    """
    if gamma_n <= 0:
        raise ValueError("learning rate must be positive")
    v = _accumulate(state, grad, gamma_n)
    n = state.n + 1
    inc = tuning_g(n, gamma_n, state.tf) - tuning_g(n - 1, gamma_n, state.tf)
    g_tilde = state.g_tilde + inc
    return replace(state, v=v, w=soft_threshold(v, g_tilde), n=n, g_tilde=g_tilde)


SCHEDULES = ("constant", "constant_and_drop", "garipov_linear")


@dataclass(frozen=True)
class LrSchedule:
    """Learning rate as a function of the elapsed fraction of training.

    ``drops`` holds ``(fraction, factor)`` pairs for ``constant_and_drop``: once
    the fraction reaches a drop point the rate is multiplied by its factor.
    """

    kind: str = "constant"
    base: float = 0.1
    drops: tuple = ()
    epochs: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.base <= 0:
            raise ValueError("base learning rate must be positive")
        drops = tuple((float(f), float(k)) for f, k in self.drops)
        if any(k <= 0 for _, k in drops):
            raise ValueError("drop factors must be positive")
        object.__setattr__(self, "drops", tuple(sorted(drops)))


def lr_at(schedule, epoch_fraction):
    f = float(epoch_fraction)
    if not 0.0 <= f <= 1.0:
        raise ValueError("epoch fraction must lie in [0, 1]")
    base = schedule.base
    if schedule.kind == "constant":
        return base
    if schedule.kind == "constant_and_drop":
        gamma = base
        for point, factor in schedule.drops:
            if f >= point:
                gamma *= factor
        return gamma
    if f < 0.5:
        return base
    if f < 0.9:
        return (1.0 - (f - 0.5) * 0.99 / 0.4) * base
    return 0.01 * base
