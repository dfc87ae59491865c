"""Baselines around ReDi: vanilla skipping, fidelity to the full solver, key kinds."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..kb import KnowledgeBase
from ..model import Condition, MixtureModel
from ..redi import RediConfig, Retriever, check_compatible, full_solve, infer_batch, initial_noise
from ..schedule import StepGrid, make_grid
from ..solver import NfeCounter, SolverMethod, integrate
from .metrics import frechet_sq


@dataclass(frozen=True)
class QuerySet:
    conditions: list
    seeds: np.ndarray
    x_start: np.ndarray

    def __len__(self) -> int:
        return len(self.seeds)


def make_queries(model: MixtureModel, n: int, seed: int, conditions=None) -> QuerySet:
    """``n`` queries with x_T drawn from seed + i; conditions uniform over contents unless given."""
    if conditions is None:
        rng = np.random.default_rng(seed)
        conditions = [Condition(int(c)) for c in rng.integers(0, model.n_contents, n)]
    elif isinstance(conditions, Condition):
        conditions = [conditions] * n
    conditions = list(conditions)
    seeds = seed + np.arange(n, dtype=np.int64)
    return QuerySet(conditions, seeds, initial_noise(seeds, model.dim))


def reference_states(model: MixtureModel, queries: QuerySet, method, w_g: float = 1.0, t_floor: float = 1e-3):
    """Full solver trajectories of the queries, shape (N+1, n, d) from step N down to 0."""
    return full_solve(model, queries.conditions, method, w_g, t_floor, x_start=queries.x_start)[0]


def ground_truth(model: MixtureModel, conditions, per_row: int, seed: int) -> np.ndarray:
    """Direct q0 draws, ``per_row`` for each query condition."""
    return np.concatenate([model.sample_data(c, per_row, seed + i) for i, c in enumerate(conditions)])


def vanilla_skip(model: MixtureModel, x_k, k_step: int, v_step: int, y, method="euler", w_g: float = 1.0,
                 t_floor: float = 1e-3):
    """Bridge from step k to step v with one solver step; returns ``(x_v estimate, nfe)``.

    A multistep method has no history here, so it takes its first-order step.
    """
    if not k_step > v_step >= 0:
        raise ValueError(f"need k_step > v_step >= 0, got k={k_step}, v={v_step}")
    grid = make_grid(model.schedule, t_floor)
    jump = StepGrid(np.array([grid.time_at(k_step), grid.time_at(v_step)]), t_floor)
    x_k = np.asarray(x_k, dtype=float)
    conds = y if isinstance(y, Condition) else list(y)
    counter = NfeCounter()
    states = integrate(model.field(conds, w_g), x_k, jump, 1, 0, method, counter)[0]
    return states[-1], counter.count


def compare_skip(model: MixtureModel, kb: KnowledgeBase, config: RediConfig, queries: QuerySet) -> dict:
    """Mean distance to the true x_v for ReDi's retrieved value and for a vanilla skip.

    Both start from the same x_k of the same query trajectories.
    """
    ref = reference_states(model, queries, config.method, config.w_g, config.t_floor)
    n = model.schedule.n_steps
    x_k, x_v = ref[n - config.k_step], ref[n - config.v_step]
    outs = infer_batch(model, kb, queries.conditions, config, queries.seeds, queries.x_start)
    redi_v = np.array([o.retrieval.combined_value for o in outs])
    skip_v, skip_nfe = vanilla_skip(model, x_k, config.k_step, config.v_step, queries.conditions,
                                    config.method, config.w_g, config.t_floor)
    return {"mean_l2_redi": float(np.linalg.norm(redi_v - x_v, axis=1).mean()),
            "mean_l2_vanilla": float(np.linalg.norm(skip_v - x_v, axis=1).mean()),
            "query_matches_reference": bool(np.array_equal(np.array([o.query for o in outs]), x_k)),
            "nfe_redi": outs[0].nfe, "nfe_vanilla_skip": skip_nfe, "n_queries": len(queries)}


def fidelity_ratio(model: MixtureModel, kb: KnowledgeBase, config: RediConfig, n_eval: int, seed: int,
                   gt_per_row: int = 10, queries: QuerySet | None = None):
    """(frechet(redi, original), frechet(original, ground truth), their ratio) on paired seeds."""
    if n_eval < 50:
        raise ValueError(f"n_eval must be at least 50, got {n_eval}")
    queries = queries or make_queries(model, n_eval, seed)
    ref = reference_states(model, queries, config.method, config.w_g, config.t_floor)
    outs = infer_batch(model, kb, queries.conditions, config, queries.seeds, queries.x_start)
    redi = np.array([o.final for o in outs])
    gt = ground_truth(model, queries.conditions, gt_per_row, seed + 1_000_000)
    f_ro = frechet_sq(redi, ref[-1])
    f_og = frechet_sq(ref[-1], gt)
    return f_ro, f_og, (f_ro / f_og if f_og > 0 else float("inf"))


def embedding_kb(model: MixtureModel, kb: KnowledgeBase) -> KnowledgeBase:
    """The same trajectories keyed by the embedding of each entry's condition."""
    keys = np.array([model.embedding(kb.condition(i)) for i in range(len(kb))]).reshape(len(kb), -1)
    return kb.with_keys(keys)


def key_comparison(model: MixtureModel, kb: KnowledgeBase, queries: QuerySet, h: int, v_step: int,
                   config: RediConfig, gt_per_row: int = 10, seed: int = 0) -> list[dict]:
    """Trajectory keys against condition-embedding keys on identical queries and values."""
    config = replace(config, h=h, v_step=v_step)
    check_compatible(kb, model, config)
    ref = reference_states(model, queries, config.method, config.w_g, config.t_floor)
    n = model.schedule.n_steps
    x_k, x_v = ref[n - config.k_step], ref[n - v_step]
    gt = ground_truth(model, queries.conditions, gt_per_row, seed + 1_000_000)
    grid = make_grid(model.schedule, config.t_floor)
    fld = model.field(queries.conditions, config.w_g)
    rows = []
    for kind, base, q in (("trajectory", kb, x_k),
                          ("embedding", embedding_kb(model, kb),
                           np.array([model.embedding(c) for c in queries.conditions]))):
        r = Retriever(base, config)
        est = np.array([r.retrieve(q[i], queries.conditions[i].code, v_step).combined_value
                        for i in range(len(queries))])
        finals = integrate(fld, est, grid, v_step, 0, config.method)[0][-1] if v_step > 0 else est
        rows.append({"key": kind, "mean_l2": float(np.linalg.norm(est - x_v, axis=1).mean()),
                     "frechet_sq": frechet_sq(finals, gt)})
    return rows
