"""ReDi inference: solve to the key step, retrieve, jump to the value step, finish.

Inference runs over a batch of rows at once; :func:`infer` is the one-row
convenience form. Each row draws its own x_T from its own seed, so results do
not depend on how rows are batched.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .kb import KdIndex, KnowledgeBase, RetrievalResult, ls_weights, median_nn_distance, query_top_h
from .model import Condition, MixtureModel
from .schedule import make_grid
from .solver import DivergenceError, NfeCounter, SolverMethod, integrate


class CompatibilityError(ValueError):
    """Knowledge base metadata does not match the inference configuration."""


class RetrievalDistanceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RediConfig:
    k_step: int = 40
    v_step: int = 20
    h: int = 1
    w_g: float = 1.0
    method: SolverMethod = field(default_factory=lambda: SolverMethod.parse("euler"))
    t_floor: float = 1e-3
    # search only entries whose condition matches the query's
    match_condition: bool = True
    # None -> 10x the median self-excluded nearest-neighbour key distance
    trust_radius: float | None = None
    use_kdtree: bool = False
    # accept a KB built at another guidance scale (guidance-generalisation runs)
    allow_guidance_mismatch: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", SolverMethod.parse(self.method))
        if not self.k_step > self.v_step >= 0:
            raise ValueError(f"need k_step > v_step >= 0, got k={self.k_step}, v={self.v_step}")
        if self.h < 1:
            raise ValueError(f"H must be at least 1, got {self.h}")
        if self.w_g < 0:
            raise ValueError(f"guidance scale must be non-negative, got {self.w_g}")
        if self.trust_radius is not None and not self.trust_radius > 0:
            raise ValueError(f"trust_radius must be positive, got {self.trust_radius}")

    def check_steps(self, n_steps: int) -> None:
        if not self.k_step < n_steps:
            raise ValueError(f"k_step={self.k_step} must be below n_steps={n_steps}")


def nfe_of(config: RediConfig, n_steps: int, method: SolverMethod | str | None = None) -> int:
    method = config.method if method is None else SolverMethod.parse(method)
    return ((n_steps - config.k_step) + config.v_step) * method.evals_per_step


@dataclass(frozen=True)
class RediOutcome:
    final: np.ndarray
    retrieval: RetrievalResult
    nfe: int
    query: np.ndarray
    seed: int | None = None
    condition: Condition | None = None

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "condition": list(self.condition.code) if self.condition else None,
               "nfe": self.nfe}
        out.update(self.retrieval.to_dict())
        out["query"] = [float(x) for x in self.query]
        out["final"] = [float(x) for x in self.final]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def check_compatible(kb: KnowledgeBase, model: MixtureModel, config: RediConfig) -> None:
    problems = []
    if len(kb) == 0:
        raise ValueError("knowledge base is empty")
    if kb.schedule != model.schedule:
        problems.append(f"schedule {kb.schedule} != {model.schedule}")
    if kb.t_floor != config.t_floor:
        problems.append(f"t_floor {kb.t_floor} != {config.t_floor}")
    if kb.method != config.method:
        problems.append(f"solver {kb.method.name} != {config.method.name}")
    if kb.w_g != config.w_g and not config.allow_guidance_mismatch:
        problems.append(f"w_g {kb.w_g} != {config.w_g}")
    if kb.k_step != config.k_step:
        problems.append(f"k_step {kb.k_step} != {config.k_step}")
    if kb.key_override is None and kb.dim != model.dim:
        problems.append(f"dim {kb.dim} != {model.dim}")
    if problems:
        raise CompatibilityError("knowledge base incompatible with config: " + "; ".join(problems))


class Retriever:
    """Top-H search plus least-squares combination over one knowledge base.

    With ``match_condition`` the search is restricted to entries sharing the
    query's (content, style) code; indices returned are always global.
    """

    def __init__(self, kb: KnowledgeBase, config: RediConfig):
        self.kb = kb
        self.config = config
        self._groups: dict = {}
        self._index: dict = {}
        self._radius = config.trust_radius

    @property
    def trust_radius(self) -> float:
        if self._radius is None:
            self._radius = 10.0 * median_nn_distance(self.kb.keys) if len(self.kb) > 1 else np.inf
        return self._radius

    def _group(self, code):
        if not self.config.match_condition:
            code = None
        if code not in self._groups:
            if code is None:
                sel = np.arange(len(self.kb))
            else:
                sel = np.flatnonzero((self.kb.codes[:, 0] == code[0]) & (self.kb.codes[:, 1] == code[1]))
            self._groups[code] = sel
            if self.config.use_kdtree and len(sel):
                self._index[code] = KdIndex(self.kb.keys[sel])
        return self._groups[code], self._index.get(code)

    def retrieve(self, q, code, v_step: int, h: int | None = None) -> RetrievalResult:
        h = self.config.h if h is None else h
        sel, index = self._group(code)
        if len(sel) == 0:
            raise ValueError(f"knowledge base holds no entries for condition {code}")
        local, dist = query_top_h(self.kb.keys[sel], q, h, index)
        idx = sel[local]
        w, resid = ls_weights(q, self.kb.keys[idx])
        value = w @ self.kb.values(v_step, idx)
        return RetrievalResult(idx, dist, w, resid, value)


def initial_noise(seeds, dim: int) -> np.ndarray:
    """x_T ~ N(0, I), one independent generator per seed."""
    return np.stack([np.random.default_rng(int(s)).standard_normal(dim) for s in seeds])


def _warn_far(results, radius: float) -> None:
    far = [r.distances[0] for r in results if r.distances[0] > radius]
    if far:
        warnings.warn(f"{len(far)} of {len(results)} queries retrieved a key beyond the trust radius "
                      f"{radius:.4g} (largest distance {max(far):.4g})", RetrievalDistanceWarning, stacklevel=3)


def _run(model, kb, prefix_conds, key_codes, suffix_conds, config, x_start, seeds, retriever):
    check_compatible(kb, model, config)
    sched = model.schedule
    config.check_steps(sched.n_steps)
    grid = make_grid(sched, config.t_floor)
    n = len(x_start)
    counter = NfeCounter()
    field = model.field(prefix_conds, config.w_g)
    states, bad, bad_step, _ = integrate(field, x_start, grid, sched.n_steps, config.k_step,
                                         config.method, counter)
    if bad.any():
        raise DivergenceError(bad_step, np.flatnonzero(bad))
    x_k = states[-1]
    retriever = retriever or Retriever(kb, config)
    results = [retriever.retrieve(x_k[i], key_codes[i], config.v_step) for i in range(n)]
    _warn_far(results, retriever.trust_radius)
    x_v = np.array([r.combined_value for r in results])
    if config.v_step > 0:
        field = model.field(suffix_conds, config.w_g)
        states, bad, bad_step, _ = integrate(field, x_v, grid, config.v_step, 0, config.method, counter)
        if bad.any():
            raise DivergenceError(bad_step, np.flatnonzero(bad))
        finals = states[-1]
    else:
        finals = x_v
    # one batched evaluation is one NFE for every row
    return [RediOutcome(finals[i], results[i], counter.count, x_k[i],
                        None if seeds is None else int(seeds[i]), suffix_conds[i]) for i in range(n)]


def infer_batch(model: MixtureModel, kb: KnowledgeBase, conditions, config: RediConfig,
                seeds=None, x_start=None, retriever: Retriever | None = None) -> list[RediOutcome]:
    """Algorithm-2 inference for many rows. Give ``seeds`` (x_T drawn per seed) or ``x_start``."""
    conditions = list(conditions)
    if x_start is None:
        if seeds is None:
            raise ValueError("give seeds or x_start")
        x_start = initial_noise(seeds, model.dim)
    x_start = np.atleast_2d(np.asarray(x_start, dtype=float))
    if len(conditions) != len(x_start):
        raise ValueError("one condition per row required")
    codes = [c.code for c in conditions]
    return _run(model, kb, conditions, codes, conditions, config, x_start, seeds, retriever)


def infer(model: MixtureModel, kb: KnowledgeBase, y: Condition, config: RediConfig, seed: int,
          x_start=None, retriever: Retriever | None = None) -> RediOutcome:
    xs = None if x_start is None else np.asarray(x_start, dtype=float)[None]
    return infer_batch(model, kb, [y], config, [seed], xs, retriever)[0]


def infer_adapted_batch(model: MixtureModel, kb: KnowledgeBase, y_content, y_full, config: RediConfig,
                        seeds=None, x_start=None, retriever: Retriever | None = None) -> list[RediOutcome]:
    """Zero-shot adaptation: key trajectory under the content condition, resume under the full one."""
    y_content, y_full = list(y_content), list(y_full)
    if len(y_content) != len(y_full):
        raise ValueError("y_content and y_full must pair up")
    for c, f in zip(y_content, y_full):
        if c.style_id is not None:
            raise ValueError(f"content condition must be style-free, got {c}")
        if f.content_id != c.content_id:
            raise ValueError(f"full condition {f} does not extend content condition {c}")
    if len(kb) and np.any(kb.codes[:, 1] != -1):
        raise ValueError("adapted inference needs a style-free knowledge base")
    if x_start is None:
        if seeds is None:
            raise ValueError("give seeds or x_start")
        x_start = initial_noise(seeds, model.dim)
    x_start = np.atleast_2d(np.asarray(x_start, dtype=float))
    codes = [c.code for c in y_content]
    return _run(model, kb, y_content, codes, y_full, config, x_start, seeds, retriever)


def infer_adapted(model: MixtureModel, kb: KnowledgeBase, y_content: Condition, y_full: Condition,
                  config: RediConfig, seed: int, x_start=None) -> RediOutcome:
    xs = None if x_start is None else np.asarray(x_start, dtype=float)[None]
    return infer_adapted_batch(model, kb, [y_content], [y_full], config, [seed], xs)[0]


def full_solve(model: MixtureModel, conditions, method, w_g: float = 1.0, t_floor: float = 1e-3,
               seeds=None, x_start=None):
    """Plain sampling without retrieval; returns ``(states, nfe)`` with states (N+1, n, d)."""
    conditions = list(conditions)
    if x_start is None:
        x_start = initial_noise(seeds, model.dim)
    sched = model.schedule
    counter = NfeCounter()
    states, bad, bad_step, _ = integrate(model.field(conditions, w_g), np.atleast_2d(x_start),
                                         make_grid(sched, t_floor), sched.n_steps, 0, method, counter)
    if bad.any():
        raise DivergenceError(bad_step, np.flatnonzero(bad))
    return states, counter.count
