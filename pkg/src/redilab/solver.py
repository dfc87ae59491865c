"""Deterministic probability-flow ODE solvers with NFE accounting.

The ODE is ``dx/dt = f(t) x - g^2(t)/2 * score(x, t)``, integrated backwards
from t_max to the time floor. Every solver works on a single state ``(d,)`` or
a batch ``(n, d)``; one batched evaluation counts as one NFE because every row
consumes exactly one noise prediction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .schedule import Schedule, StepGrid

DIVERGENCE_NORM = 1e8

# most recent evaluation first
AB_COEFFS = {
    1: (1.0,),
    2: (3 / 2, -1 / 2),
    3: (23 / 12, -16 / 12, 5 / 12),
    4: (55 / 24, -59 / 24, 37 / 24, -9 / 24),
}


class DivergenceError(RuntimeError):
    def __init__(self, step, rows=None):
        self.step = step
        self.rows = rows
        where = f" (rows {list(rows)[:10]})" if rows is not None else ""
        super().__init__(f"solver diverged at grid step {step}{where}")


@dataclass
class NfeCounter:
    count: int = 0

    def tick(self, n: int = 1) -> None:
        self.count += n


@dataclass(frozen=True, eq=False)
class ScoreField:
    """A score function bound to a schedule; optional analytic score Jacobian.

    ``mixture`` optionally carries the packed mixture parameters
    ``(log_w, means, covs, uncond_log_w, uncond_means, uncond_covs, w_g)`` so the
    RK4 reference can run compiled.
    """

    schedule: Schedule
    score: Callable[[np.ndarray, float], np.ndarray]
    jacobian: Callable[[np.ndarray, float], np.ndarray] | None = None
    mixture: tuple | None = None

    def eps(self, x, t, counter: NfeCounter | None = None):
        if counter is not None:
            counter.tick()
        return -self.schedule.sigma(t) * self.score(x, t)


@dataclass(frozen=True)
class SolverMethod:
    kind: str
    order: int

    _ORDERS = {"euler": 1, "heun": 2, "expo2": 2}
    _IDS = {"euler": 0, "heun": 1, "expo2": 2}

    def __post_init__(self):
        if self.kind == "pseudo":
            if not 1 <= self.order <= 4:
                raise ValueError(f"pseudo-multistep order must be in [1, 4], got {self.order}")
        elif self.kind in self._ORDERS:
            if self.order != self._ORDERS[self.kind]:
                raise ValueError(f"{self.kind} has order {self._ORDERS[self.kind]}, got {self.order}")
        else:
            raise ValueError(f"unknown solver kind {self.kind!r}")

    @classmethod
    def parse(cls, name: "str | SolverMethod") -> "SolverMethod":
        """'euler', 'heun', 'expo2', 'pseudo' (order 4) or 'pseudo1'..'pseudo4'."""
        if isinstance(name, SolverMethod):
            return name
        name = name.strip().lower()
        if name.startswith("pseudo"):
            return cls("pseudo", int(name[6:] or 4))
        if name not in cls._ORDERS:
            raise ValueError(f"unknown solver method {name!r}")
        return cls(name, cls._ORDERS[name])

    @classmethod
    def from_id(cls, ident: int) -> "SolverMethod":
        if 11 <= ident <= 14:
            return cls("pseudo", ident - 10)
        for kind, i in cls._IDS.items():
            if i == ident:
                return cls(kind, cls._ORDERS[kind])
        raise ValueError(f"unknown solver id {ident}")

    @property
    def ident(self) -> int:
        return 10 + self.order if self.kind == "pseudo" else self._IDS[self.kind]

    @property
    def name(self) -> str:
        return f"pseudo{self.order}" if self.kind == "pseudo" else self.kind

    @property
    def evals_per_step(self) -> int:
        return 2 if self.kind in ("heun", "expo2") else 1

    def __str__(self) -> str:
        return self.name


@dataclass(eq=False)
class Trajectory:
    states: np.ndarray  # (L, d) or (L, n, d), from from_step down to to_step
    times: np.ndarray
    steps: np.ndarray
    nfe: int
    method: SolverMethod
    condition: object = None

    def at_step(self, step: int) -> np.ndarray:
        idx = int(self.steps[0]) - step
        if not 0 <= idx < len(self.steps):
            raise IndexError(f"step {step} not in trajectory [{self.steps[-1]}, {self.steps[0]}]")
        return self.states[idx]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_json(self) -> str:
        cond = getattr(self.condition, "code", None)
        return json.dumps({
            "method": self.method.name,
            "nfe": self.nfe,
            "condition": list(cond) if cond else None,
            "steps": [int(s) for s in self.steps],
            "times": [float(t) for t in self.times],
            "states": self.states.reshape(len(self.times), -1).tolist(),
        })


def ode_rhs(field: ScoreField, x, t, counter: NfeCounter | None = None):
    sched = field.schedule
    if counter is not None:
        counter.tick()
    return sched.f_drift(t) * x - 0.5 * sched.g_squared(t) * field.score(x, t)


def step_euler(field, x, t_hi, t_lo, counter=None):
    return x + (t_lo - t_hi) * ode_rhs(field, x, t_hi, counter)


def step_heun(field, x, t_hi, t_lo, counter=None):
    h = t_lo - t_hi
    k1 = ode_rhs(field, x, t_hi, counter)
    k2 = ode_rhs(field, x + h * k1, t_lo, counter)
    return x + 0.5 * h * (k1 + k2)


def step_expo2(field, x, t_hi, t_lo, counter=None):
    """Second-order exponential integrator, midpoint in half-log-SNR.

    The linear drift is integrated exactly; only the noise prediction is
    approximated.
    """
    sched = field.schedule
    lam_hi, lam_lo = sched.half_log_snr(t_hi), sched.half_log_snr(t_lo)
    h = lam_lo - lam_hi
    t_mid = min(max(sched.time_from_half_log_snr(lam_hi + 0.5 * h), t_lo), t_hi)
    a_hi = sched.alpha(t_hi)
    e_hi = field.eps(x, t_hi, counter)
    u = (sched.alpha(t_mid) / a_hi) * x - sched.sigma(t_mid) * np.expm1(0.5 * h) * e_hi
    e_mid = field.eps(u, t_mid, counter)
    return (sched.alpha(t_lo) / a_hi) * x - sched.sigma(t_lo) * np.expm1(h) * e_mid


def ab_combine(history, max_order: int = 4):
    """Adams-Bashforth combination of the newest <= max_order derivative evaluations."""
    if not history:
        raise ValueError("multistep update needs at least one history entry")
    order = min(len(history), max_order)
    coeffs = AB_COEFFS[order]
    out = coeffs[0] * history[-1]
    for c, h in zip(coeffs[1:], reversed(history[-order:-1])):
        out = out + c * h
    return out


def step_pseudo_multistep(field, history, x, t_hi, t_lo, max_order: int = 4):
    """Euler-form update driven by the AB combination of past RHS evaluations.

    ``history`` must already hold the evaluation at ``(x, t_hi)`` as its last
    entry, so the step itself costs no extra NFE. Fewer than ``max_order``
    entries give the lower-order warmup.
    """
    return x + (t_lo - t_hi) * ab_combine(history, max_order)


def rk4_integrate(field, x, t_hi, t_lo, n_sub: int, counter=None, compiled: bool = True, threads: int = 1):
    """Classical RK4 over ``n_sub`` uniform substeps; the high-resolution reference.

    ``threads`` > 1 splits the rows of a batch across worker threads (compiled
    path only); rows are independent so the result does not change.
    """
    x = np.array(x, dtype=float)
    ts = np.linspace(t_hi, t_lo, n_sub + 1)
    if compiled and field.mixture is not None:
        if counter is not None:
            counter.tick(4 * n_sub)
        return _rk4_compiled(field, x, ts, threads)
    for i in range(n_sub):
        a, b = float(ts[i]), float(ts[i + 1])
        h = b - a
        m = 0.5 * (a + b)
        k1 = ode_rhs(field, x, a, counter)
        k2 = ode_rhs(field, x + 0.5 * h * k1, m, counter)
        k3 = ode_rhs(field, x + 0.5 * h * k2, m, counter)
        k4 = ode_rhs(field, x + h * k3, b, counter)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def _rk4_compiled(field, x, ts, threads: int = 1):
    from ._kernels import equal_variances, rk4_coefficients, rk4_mixture, rk4_mixture_2d

    log_w, means, covs, ulog_w, umeans, ucovs, w_g = field.mixture
    single = x.ndim == 1
    xs = np.ascontiguousarray(np.atleast_2d(x))
    n = xs.shape[0]
    if log_w.ndim == 1:
        log_w = np.broadcast_to(log_w, (n,) + log_w.shape)
        means = np.broadcast_to(means, (n,) + means.shape)
        covs = np.broadcast_to(covs, (n,) + covs.shape)
    log_w, means, covs = (np.ascontiguousarray(a) for a in (log_w, means, covs))
    eq = equal_variances(log_w, covs)
    ueq = bool(equal_variances(ulog_w, ucovs))
    coef = rk4_coefficients(field.schedule, ts)
    kernel = rk4_mixture_2d if xs.shape[1] == 2 else rk4_mixture

    def run(sl):
        return kernel(xs[sl], log_w[sl], means[sl], covs[sl], eq[sl], ulog_w, umeans, ucovs, ueq,
                      float(w_g), coef, ts)

    if threads > 1 and n > 1:
        from concurrent.futures import ThreadPoolExecutor

        bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)
        slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(len(slices)) as pool:
            out = np.concatenate(list(pool.map(run, slices)))
    else:
        out = run(slice(None))
    return out[0] if single else out


def _bad_rows(x):
    x = np.asarray(x)
    if x.ndim == 1:
        bad = not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM
        return np.array([bad])
    with np.errstate(invalid="ignore", over="ignore"):
        norms = np.linalg.norm(x, axis=-1)
    return ~np.isfinite(norms) | (norms > DIVERGENCE_NORM)


def integrate(field: ScoreField, x_start, grid: StepGrid, from_step: int, to_step: int,
              method: SolverMethod | str = "heun", counter: NfeCounter | None = None):
    """Run the solver over grid steps ``from_step -> to_step``.

    Returns ``(states, bad)`` where ``bad`` flags rows that diverged. A
    diverged row is frozen at its last finite state so the rest of the batch
    carries on; :func:`solve` turns any flagged row into an error.
    """
    method = SolverMethod.parse(method)
    if not from_step > to_step >= 0:
        raise ValueError(f"need from_step > to_step >= 0, got {from_step} -> {to_step}")
    if from_step > grid.n_steps:
        raise ValueError(f"from_step {from_step} beyond grid with {grid.n_steps} steps")
    x = np.array(x_start, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x_start must be finite")
    counter = counter if counter is not None else NfeCounter()
    states = np.empty((from_step - to_step + 1,) + x.shape)
    states[0] = x
    bad = np.zeros(1 if x.ndim == 1 else x.shape[0], dtype=bool)
    bad_step = None
    history: list = []
    for i, step in enumerate(range(from_step, to_step, -1)):
        t_hi, t_lo = grid.time_at(step), grid.time_at(step - 1)
        with np.errstate(over="ignore", invalid="ignore"):
            if method.kind == "euler":
                x_new = step_euler(field, x, t_hi, t_lo, counter)
            elif method.kind == "heun":
                x_new = step_heun(field, x, t_hi, t_lo, counter)
            elif method.kind == "expo2":
                x_new = step_expo2(field, x, t_hi, t_lo, counter)
            else:
                history.append(ode_rhs(field, x, t_hi, counter))
                del history[:-method.order]
                x_new = step_pseudo_multistep(field, history, x, t_hi, t_lo, method.order)
        new_bad = _bad_rows(x_new) & ~bad
        if new_bad.any():
            if bad_step is None:
                bad_step = step - 1
            bad |= new_bad
            if x.ndim == 1:
                x_new = x
            else:
                x_new[bad] = x[bad]
                for h in history:
                    h[bad] = 0.0
        x = x_new
        states[i + 1] = x
    return states, bad, bad_step, counter.count


def solve(field: ScoreField, x_start, grid: StepGrid, from_step: int, to_step: int,
          method: SolverMethod | str = "heun", condition=None) -> Trajectory:
    method = SolverMethod.parse(method)
    counter = NfeCounter()
    states, bad, bad_step, nfe = integrate(field, x_start, grid, from_step, to_step, method, counter)
    if bad.any():
        raise DivergenceError(bad_step, np.flatnonzero(bad) if states.ndim > 2 else None)
    steps = np.arange(from_step, to_step - 1, -1)
    times = np.array([grid.time_at(int(s)) for s in steps])
    return Trajectory(states, times, steps, nfe, method, condition)
