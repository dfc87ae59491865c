"""Variance-preserving noise schedule and the probability-flow ODE coefficients.

The linear-beta VP schedule has closed forms for everything the solvers need::

    log alpha(t) = -t^2 (beta1 - beta0) / 4 - t beta0 / 2
    sigma(t)     = sqrt(1 - alpha(t)^2)
    f(t)         = d log alpha / dt = -beta(t) / 2
    g^2(t)       = d sigma^2 / dt - 2 f(t) sigma^2(t) = beta(t)

with ``beta(t) = beta0 + t (beta1 - beta0)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """A time argument fell outside the schedule's domain."""


def _check_time(t, lo: float, hi: float) -> None:
    if isinstance(t, float | int):
        ok = lo <= t <= hi
    else:
        t = np.asarray(t, dtype=float)
        ok = bool(np.all((t >= lo) & (t <= hi)))
    if not ok:
        raise DomainError(f"time {t!r} outside [{lo}, {hi}]")


def _exp(x):
    return math.exp(x) if isinstance(x, float) else np.exp(x)


def _sqrt(x):
    return math.sqrt(x) if isinstance(x, float) else np.sqrt(x)


@dataclass(frozen=True)
class Schedule:
    beta0: float = 0.1
    beta1: float = 20.0
    t_max: float = 1.0
    n_steps: int = 50

    def __post_init__(self):
        if not self.beta0 > 0:
            raise ValueError(f"beta0 must be positive, got {self.beta0}")
        if not self.beta1 > self.beta0:
            raise ValueError(f"beta1 must exceed beta0, got beta0={self.beta0}, beta1={self.beta1}")
        if not self.t_max > 0:
            raise ValueError(f"t_max must be positive, got {self.t_max}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps}")

    @property
    def delta(self) -> float:
        """Nominal step size of an n_steps grid over [0, t_max]."""
        return self.t_max / self.n_steps

    def _t(self, t):
        _check_time(t, 0.0, self.t_max)
        return float(t) if np.ndim(t) == 0 else np.asarray(t, dtype=float)

    def beta(self, t):
        t = self._t(t)
        return self.beta0 + t * (self.beta1 - self.beta0)

    def log_alpha(self, t):
        t = self._t(t)
        return -0.25 * t * t * (self.beta1 - self.beta0) - 0.5 * t * self.beta0

    def alpha(self, t):
        return _exp(self.log_alpha(t))

    def sigma(self, t):
        # -expm1(2 log a) keeps sigma accurate for small t
        la = self.log_alpha(t)
        s2 = -math.expm1(2.0 * la) if isinstance(la, float) else -np.expm1(2.0 * la)
        return _sqrt(s2)

    def snr(self, t):
        a = self.alpha(t)
        s = self.sigma(t)
        return (a * a) / (s * s)

    def half_log_snr(self, t):
        """lambda(t) = log(alpha / sigma); strictly decreasing in t."""
        la = self.log_alpha(t)
        s = self.sigma(t)
        return la - (math.log(s) if isinstance(s, float) else np.log(s))

    def time_from_half_log_snr(self, lam):
        """Inverse of :meth:`half_log_snr` on (0, t_max]."""
        # -log alpha = log(1 + exp(-2 lam)) / 2, then solve the quadratic in t
        neg_log_alpha = 0.5 * np.logaddexp(0.0, -2.0 * np.asarray(lam, dtype=float))
        d = self.beta1 - self.beta0
        t = 4.0 * neg_log_alpha / (self.beta0 + np.sqrt(self.beta0**2 + 4.0 * d * neg_log_alpha))
        return float(t) if np.ndim(t) == 0 else t

    def f_drift(self, t):
        return -0.5 * self.beta(t)

    def g_squared(self, t):
        return self.beta(t)


@dataclass(frozen=True, eq=False)
class StepGrid:
    """Uniform solver grid. ``times[0]`` is t_N = t_max and ``times[-1]`` is t_0 = t_floor."""

    times: np.ndarray
    t_floor: float

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def time_at(self, step: int) -> float:
        """Time of grid index ``step`` (countdown indexing, step N is t_max)."""
        if not 0 <= step <= self.n_steps:
            raise IndexError(f"step {step} outside [0, {self.n_steps}]")
        return float(self.times[self.n_steps - step])


def make_grid(schedule: Schedule, t_floor: float = 1e-3) -> StepGrid:
    if not 0.0 < t_floor < schedule.t_max:
        raise ValueError(f"t_floor must lie in (0, t_max={schedule.t_max}), got {t_floor}")
    times = np.linspace(schedule.t_max, t_floor, schedule.n_steps + 1)
    times.setflags(write=False)
    return StepGrid(times=times, t_floor=float(t_floor))
