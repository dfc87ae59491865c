"""Empirical check of the ODE sensitivity bound behind retrieval.

Two solutions of an L-Lipschitz ODE that start gamma apart stay within
gamma * exp(L dt). We estimate L for the probability-flow field, perturb
solver states at the key step, integrate base and perturbed states to the
value step with a high-resolution RK4 reference, and count violations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..model import Condition, MixtureModel
from ..redi import initial_noise
from ..schedule import make_grid
from ..solver import SolverMethod, integrate, ode_rhs, rk4_integrate

# resolution of the reference integrator over the whole [t_floor, t_max] span
REFERENCE_STEPS = 100_000
BOUND_TOL = 1e-6


def _as_conditions(y, n: int | None = None) -> list[Condition]:
    if isinstance(y, Condition):
        return [y] * (n or 1)
    y = list(y)
    if n is not None and len(y) != n:
        raise ValueError(f"need {n} conditions, got {len(y)}")
    return y


def probe_times(model: MixtureModel, t_range, t_floor: float = 1e-3, refine: int = 4) -> np.ndarray:
    """Grid times inside ``t_range`` with ``refine`` extra points per interval, plus both ends."""
    lo, hi = t_range
    if not t_floor <= lo <= hi <= model.schedule.t_max:
        raise ValueError(f"t_range {t_range} must lie within [{t_floor}, {model.schedule.t_max}]")
    grid = make_grid(model.schedule, t_floor).times[::-1]
    fine = np.concatenate([np.linspace(a, b, refine + 1, endpoint=False) for a, b in zip(grid[:-1], grid[1:])]
                          + [grid[-1:]])
    ts = fine[(fine >= lo) & (fine <= hi)]
    return np.unique(np.concatenate([ts, [lo, hi]]))


def _probe_points(model, y, t, n_probes, rng):
    spec = model.marginal(model.resolve(y), t)
    pts = [spec.means[rng.choice(spec.n_components, n_probes, p=spec.weights)]
           + np.sqrt(spec.cov_scales.max()) * rng.standard_normal((n_probes, model.dim))]
    # +-3 sigma box around every component mean
    half = 3.0 * np.sqrt(spec.cov_scales.max())
    lo = spec.means.min(0) - half
    hi = spec.means.max(0) + half
    pts.append(rng.uniform(lo, hi, (n_probes, model.dim)))
    return np.concatenate(pts)


def lipschitz_estimate(model: MixtureModel, y, w_g: float = 1.0, t_range=None, n_probes: int = 200,
                       seed: int = 0, t_floor: float = 1e-3, safety: float = 1.0) -> float:
    """Sup over probes of the RHS Lipschitz ratio, times ``safety``.

    Each probe contributes both a finite-difference ratio
    |RHS(x+h) - RHS(x)| / |h| and the spectral norm of the analytic Jacobian
    f I - g^2/2 * dscore/dx. ``y`` may be one condition or several.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be at least 1")
    sched = model.schedule
    t_range = (t_floor, sched.t_max) if t_range is None else t_range
    rng = np.random.default_rng(seed)
    conds = sorted(set(_as_conditions(y)), key=lambda c: c.code)
    best = 0.0
    for cond in conds:
        fld = model.field(cond, w_g)
        for t in probe_times(model, t_range, t_floor):
            x = _probe_points(model, cond, t, n_probes, rng)
            jac = sched.f_drift(t) * np.eye(model.dim) - 0.5 * sched.g_squared(t) * fld.jacobian(x, t)
            best = max(best, float(np.linalg.norm(jac, ord=2, axis=(-2, -1)).max()))
            step = rng.standard_normal(x.shape)
            step *= (1e-5 * (1.0 + np.linalg.norm(x, axis=1)) / np.linalg.norm(step, axis=1))[:, None]
            num = np.linalg.norm(ode_rhs(fld, x + step, t) - ode_rhs(fld, x, t), axis=1)
            best = max(best, float((num / np.linalg.norm(step, axis=1)).max()))
    return best * safety


@dataclass
class BoundReport:
    l_hat: float
    delta_t: float
    k_step: int
    v_step: int
    # columns: gamma, observed deviation at t_v, bound gamma * exp(l_hat * dt)
    pairs: np.ndarray
    violation_count: int
    raw_pairs: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    raw_violation_count: int = 0
    tolerance: float = BOUND_TOL
    nominal: np.ndarray | None = None  # requested epsilon of each pair

    @property
    def growth_factor(self) -> float:
        return float(np.exp(self.l_hat * self.delta_t))

    def max_ratio(self) -> float:
        """Largest observed / gamma over pairs with gamma > 0."""
        ok = self.pairs[:, 0] > 0
        return float((self.pairs[ok, 1] / self.pairs[ok, 0]).max()) if ok.any() else 0.0

    def to_dict(self) -> dict:
        out = {"l_hat": self.l_hat, "delta_t": self.delta_t, "k_step": self.k_step, "v_step": self.v_step,
               "growth_factor": self.growth_factor, "n_pairs": int(len(self.pairs)),
               "violation_count": int(self.violation_count), "max_observed_ratio": self.max_ratio(),
               "raw_violation_count": int(self.raw_violation_count), "tolerance": self.tolerance}
        by_eps = {}
        nominal = self.pairs[:, 0] if self.nominal is None else self.nominal
        for g in np.unique(nominal):
            sel = nominal == g
            by_eps[repr(float(g))] = {"n": int(sel.sum()), "max_observed": float(self.pairs[sel, 1].max()),
                                      "mean_observed": float(self.pairs[sel, 1].mean()),
                                      "bound": float(self.pairs[sel, 2].max())}
        out["by_epsilon"] = by_eps
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def bound_check(model: MixtureModel, y, k_step: int, v_step: int, epsilons=(1e-4, 1e-3, 1e-2),
                n_pairs: int = 1000, seed: int = 0, w_g: float = 1.0, method="euler", t_floor: float = 1e-3,
                l_hat: float | None = None, safety: float = 1.1, n_probes: int = 200,
                reference_steps: int = REFERENCE_STEPS, threads: int = 1) -> BoundReport:
    """Perturb solver states at step k by each epsilon and test the growth bound at step v.

    Base states come from the solver (x_T drawn from seed + i). Deviations are
    measured on RK4 reference solutions, so solver truncation error is not
    mistaken for sensitivity; the same comparison on raw solver output is
    reported alongside without being asserted.
    """
    if not k_step > v_step >= 0:
        raise ValueError(f"need k_step > v_step >= 0, got k={k_step}, v={v_step}")
    sched = model.schedule
    grid = make_grid(sched, t_floor)
    conds = _as_conditions(y, n_pairs) if not isinstance(y, Condition) else [y] * n_pairs
    t_k, t_v = grid.time_at(k_step), grid.time_at(v_step)
    dt = t_k - t_v
    if l_hat is None:
        l_hat = lipschitz_estimate(model, conds, w_g, (t_v, t_k), n_probes, seed + 1, t_floor, safety)
    method = SolverMethod.parse(method)
    fld = model.field(conds, w_g)
    x_t = initial_noise(seed + np.arange(n_pairs), model.dim)
    base = integrate(fld, x_t, grid, sched.n_steps, k_step, method)[0][-1] if k_step < sched.n_steps else x_t
    eps = np.asarray(list(epsilons), dtype=float)
    rng = np.random.default_rng(seed + 2)
    u = rng.standard_normal((len(eps), n_pairs, model.dim))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    pert = base[None] + eps[:, None, None] * u
    starts = np.concatenate([base[None], pert]).reshape(-1, model.dim)
    all_conds = conds * (len(eps) + 1)
    big = model.field(all_conds, w_g)
    n_sub = max(1, int(round(reference_steps * dt / (sched.t_max - t_floor))))
    ends = rk4_integrate(big, starts, t_k, t_v, n_sub, threads=threads).reshape(len(eps) + 1, n_pairs, model.dim)
    gamma = np.linalg.norm(pert - base[None], axis=-1)
    observed = np.linalg.norm(ends[1:] - ends[0][None], axis=-1)
    bound = gamma * np.exp(l_hat * dt)
    pairs = np.stack([gamma.ravel(), observed.ravel(), bound.ravel()], axis=1)
    violations = int(np.sum(pairs[:, 1] > pairs[:, 2] * (1.0 + BOUND_TOL)))
    raw = integrate(big, starts, grid, k_step, v_step, method)[0][-1].reshape(len(eps) + 1, n_pairs, model.dim)
    raw_obs = np.linalg.norm(raw[1:] - raw[0][None], axis=-1)
    raw_pairs = np.stack([gamma.ravel(), raw_obs.ravel(), bound.ravel()], axis=1)
    raw_viol = int(np.sum(raw_pairs[:, 1] > raw_pairs[:, 2] * (1.0 + BOUND_TOL)))
    nominal = np.repeat(eps, n_pairs)
    return BoundReport(float(l_hat), float(dt), k_step, v_step, pairs, violations, raw_pairs, raw_viol,
                       BOUND_TOL, nominal)
