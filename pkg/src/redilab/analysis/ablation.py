"""Ablation sweeps over knowledge-base size, key/value steps and neighbour count."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..kb import KnowledgeBase
from ..model import MixtureModel
from ..redi import RediConfig, infer_batch
from .baselines import QuerySet, ground_truth, make_queries, reference_states
from .metrics import frechet_sq, metric_report

ABLATION_KINDS = ("kb_size", "kv_gap", "k_position", "n_neighbors")
DEFAULT_GRIDS = {
    "kb_size": (1000, 2000, 4000, 8000),
    "kv_gap": (35, 30, 25),
    "k_position": (40, 30, 20),
    "n_neighbors": (1, 2, 3),
}
COLUMNS = ("kind", "setting", "k_step", "v_step", "h", "kb_size", "mean_l2", "frechet_sq",
           "frechet_orig", "mmd_sq", "nfe")


def _variant(kind: str, value, config: RediConfig, kb: KnowledgeBase, gap: int):
    if kind == "kb_size":
        if value > len(kb):
            raise ValueError(f"kb_size {value} exceeds the {len(kb)} available entries")
        return config, kb.subset(np.arange(int(value)))
    if kind == "kv_gap":
        return replace(config, v_step=int(value)), kb
    if kind == "k_position":
        k = int(value)
        return replace(config, k_step=k, v_step=k - gap), kb.at_key_step(k)
    if kind == "n_neighbors":
        return replace(config, h=int(value)), kb
    raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")


def ablate(model: MixtureModel, kind: str, grid, config: RediConfig, kb: KnowledgeBase, n_queries: int = 300,
           seed: int = 0, gap: int = 15, gt_per_row: int = 10, queries: QuerySet | None = None) -> list[dict]:
    """One row per grid value, all evaluated on the same paired queries.

    ``kb`` must be keyed at ``config.k_step`` (``k_position`` re-keys it at
    each smaller k). Quality columns: mean L2 of the retrieved x_v to the true
    x_v, Frechet and MMD of the finals against direct q0 draws, and Frechet
    of the finals against the full solver's finals on the same x_T.
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")
    if kb.k_step != config.k_step:
        raise ValueError(f"knowledge base is keyed at step {kb.k_step}, config at {config.k_step}")
    queries = queries or make_queries(model, n_queries, seed)
    ref = reference_states(model, queries, config.method, config.w_g, config.t_floor)
    gt = ground_truth(model, queries.conditions, gt_per_row, seed + 1_000_000)
    n = model.schedule.n_steps
    rows = []
    for value in grid:
        cfg, base = _variant(kind, value, config, kb, gap)
        outs = infer_batch(model, base, queries.conditions, cfg, queries.seeds, queries.x_start)
        est = np.array([o.retrieval.combined_value for o in outs])
        finals = np.array([o.final for o in outs])
        rep = metric_report(finals, gt)
        rows.append({
            "kind": kind, "setting": value, "k_step": cfg.k_step, "v_step": cfg.v_step, "h": cfg.h,
            "kb_size": len(base),
            "mean_l2": float(np.linalg.norm(est - ref[n - cfg.v_step], axis=1).mean()),
            "frechet_sq": rep.frechet_sq,
            "frechet_orig": frechet_sq(finals, ref[-1]),
            "mmd_sq": rep.mmd_sq,
            "nfe": outs[0].nfe,
        })
    return rows
