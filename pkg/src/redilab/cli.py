"""Command-line entry point: build-kb, sample, eval, ablate, bound-check.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
failure, 5 knowledge base incompatible with the configuration.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .analysis import DEFAULT_GRIDS, ablate, bound_check, compare_skip, fidelity_ratio, make_queries
from .analysis.ablation import COLUMNS as ABLATION_COLUMNS
from .config import ConfigError, RunConfig
from .kb import DimMismatchError, KbError, build_kb, load_kb, median_nn_distance, sample_dataset, save_kb
from .model import Condition, MixtureModel, MixtureSpec, StyleTransform, default_contents, default_styles
from .redi import (CompatibilityError, RediConfig, check_compatible, full_solve, infer_adapted_batch,
                   infer_batch)
from .schedule import Schedule
from .solver import DivergenceError, SolverMethod

log = logging.getLogger("redilab")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4, 5

COMMAND_HELP = {
    "build-kb": "build a knowledge base: writes kb.redikb and build.json",
    "sample": "sample with retrieval; writes samples.csv "
              "(seed,content_id,style_id,x0..,nfe,distance,residual) and samples.json",
    "eval": "fidelity and skip comparison; writes eval.csv "
            "(frechet_redi_original,frechet_original_gt,ratio,mean_l2_redi,mean_l2_vanilla,nfe) and eval.json",
    "ablate": "ablation sweep; writes ablation.csv (" + ",".join(ABLATION_COLUMNS) + ") and ablation.json",
    "bound-check": "sensitivity-bound check; writes bound.json and bound_pairs.csv "
                   "(epsilon,gamma,observed,bound,raw_observed)",
}


class NumericFailure(RuntimeError):
    pass


# --- helpers ------------------------------------------------------------------


def load_mixture(path: str, schedule: Schedule) -> MixtureModel:
    """JSON: {"contents": [{"weights", "means", "cov_scales"}], "styles": [{"rotation", "shift", "scale"}]}."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read mixture file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"mixture file {path} is not valid JSON: {exc}") from None
    try:
        contents = [MixtureSpec(np.array(c["weights"], float), np.array(c["means"], float),
                                np.array(c["cov_scales"], float)) for c in data["contents"]]
        styles = [StyleTransform(np.array(s["rotation"], float), np.array(s["shift"], float), float(s["scale"]))
                  for s in data.get("styles", [])]
        return MixtureModel(contents, styles, schedule)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"mixture file {path}: {exc}") from None


def make_model(cfg: RunConfig) -> MixtureModel:
    sched = Schedule(cfg.beta0, cfg.beta1, 1.0, cfg.n_steps)
    if cfg.mixture == "default":
        return MixtureModel(default_contents(), default_styles(), sched)
    return load_mixture(cfg.mixture, sched)


def redi_config(cfg: RunConfig, **changes) -> RediConfig:
    kw = dict(k_step=cfg.k_step, v_step=cfg.v_step, h=cfg.h, w_g=cfg.w_g, method=SolverMethod.parse(cfg.method),
              t_floor=cfg.t_floor, match_condition=cfg.match_condition,
              trust_radius=cfg.trust_radius or None, use_kdtree=cfg.use_kdtree,
              allow_guidance_mismatch=cfg.allow_guidance_mismatch)
    kw.update(changes)
    return RediConfig(**kw)


def kb_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.kb) if cfg.kb else out / "kb.redikb"


def open_kb(cfg: RunConfig, out: Path, model: MixtureModel):
    try:
        kb = load_kb(kb_path(cfg, out), expected_dim=model.dim)
    except DimMismatchError as exc:
        raise CompatibilityError(str(exc)) from None
    check_compatible(kb, model, redi_config(cfg))
    return kb


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def query_conditions(model: MixtureModel, cfg: RunConfig, n: int, seed: int):
    if cfg.content >= 0:
        conds = [Condition(cfg.content)] * n
    else:
        rng = np.random.default_rng(seed)
        conds = [Condition(int(c)) for c in rng.integers(0, model.n_contents, n)]
    for c in conds[:1]:
        model.validate(c)
    return conds


# --- commands -------------------------------------------------------------------


def cmd_build_kb(cfg: RunConfig, out: Path) -> dict:
    model = make_model(cfg)
    conds = [Condition(i % model.n_contents) for i in range(cfg.dataset_size)]
    if cfg.style >= 0:
        conds = [Condition(c.content_id, cfg.style) for c in conds]
    dataset = sample_dataset(model, conds, cfg.seed + cfgmod.SEED_DATA)
    t0 = time.perf_counter()
    kb = build_kb(model, dataset, cfg.k_step, cfg.method, cfg.w_g, cfg.seed + cfgmod.SEED_KB, cfg.t_floor)
    wall = time.perf_counter() - t0
    skipped = cfg.dataset_size - len(kb)
    if cfg.dataset_size and skipped / cfg.dataset_size > cfg.max_failure_rate:
        raise NumericFailure(f"{skipped} of {cfg.dataset_size} trajectories diverged "
                             f"(limit {cfg.max_failure_rate:.1%})")
    save_kb(kb, kb_path(cfg, out))
    report = {"entries": len(kb), "skipped": skipped, "k_step": kb.k_step, "dim": kb.dim,
              "solver": kb.method.name, "w_g": kb.w_g,
              "median_nn_distance": median_nn_distance(kb.keys) if len(kb) > 1 else None}
    write_json(out / "build.json", report)
    return {"build_wall_time_s": wall}


def cmd_sample(cfg: RunConfig, out: Path) -> dict:
    model = make_model(cfg)
    n = cfg.count
    seeds = cfg.seed + cfgmod.SEED_QUERY + np.arange(n)
    conds = query_conditions(model, cfg, n, cfg.seed + cfgmod.SEED_QUERY)
    full = [Condition(c.content_id, cfg.style if cfg.style >= 0 else None) for c in conds]
    rows = []
    t0 = time.perf_counter()
    if cfg.no_retrieval:
        states, nfe = full_solve(model, full, cfg.method, cfg.w_g, cfg.t_floor, seeds=seeds)
        for i in range(n):
            rows.append([int(seeds[i]), *full[i].code, *states[-1][i].tolist(), nfe, "", ""])
    else:
        kb = open_kb(cfg, out, model)
        rc = redi_config(cfg)
        if cfg.adapted:
            outs = infer_adapted_batch(model, kb, conds, full, rc, seeds)
        else:
            outs = infer_batch(model, kb, full, rc, seeds)
        for o in outs:
            rows.append([o.seed, *o.condition.code, *o.final.tolist(), o.nfe,
                         float(o.retrieval.distances[0]), float(o.retrieval.residual)])
    wall = time.perf_counter() - t0
    header = ["seed", "content_id", "style_id"] + [f"x{j}" for j in range(model.dim)] + ["nfe", "distance", "residual"]
    write_csv(out / "samples.csv", header, rows)
    write_json(out / "samples.json", {"count": n, "mode": "full" if cfg.no_retrieval else
                                      ("adapted" if cfg.adapted else "redi"), "nfe": rows[0][-3]})
    return {"sample_wall_time_s": wall}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    model = make_model(cfg)
    kb = open_kb(cfg, out, model)
    rc = redi_config(cfg)
    seed = cfg.seed + cfgmod.SEED_QUERY
    queries = make_queries(model, cfg.n_eval, seed, query_conditions(model, cfg, cfg.n_eval, seed))
    f_ro, f_og, ratio = fidelity_ratio(model, kb, rc, cfg.n_eval, cfg.seed + cfgmod.SEED_GT,
                                       cfg.gt_per_row, queries)
    skip = compare_skip(model, kb, rc, queries)
    row = [f_ro, f_og, ratio, skip["mean_l2_redi"], skip["mean_l2_vanilla"], skip["nfe_redi"]]
    write_csv(out / "eval.csv", ["frechet_redi_original", "frechet_original_gt", "ratio", "mean_l2_redi",
                                 "mean_l2_vanilla", "nfe"], [row])
    write_json(out / "eval.json", {"frechet_redi_original": f_ro, "frechet_original_gt": f_og, "ratio": ratio,
                                   "skip_comparison": skip, "n_eval": cfg.n_eval})
    return {}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    model = make_model(cfg)
    kb = open_kb(cfg, out, model)
    grid = cfg.grid or DEFAULT_GRIDS[cfg.kind]
    if cfg.kind == "kb_size" and max(grid) > len(kb):
        raise ConfigError(f"grid: kb_size {max(grid)} exceeds the knowledge base's {len(kb)} entries")
    if cfg.kind == "kv_gap" and max(grid) >= cfg.k_step:
        raise ConfigError(f"grid: value steps must be below k_step={cfg.k_step}")
    if cfg.kind == "k_position" and (max(grid) > cfg.k_step or min(grid) <= cfg.gap):
        raise ConfigError(f"grid: key steps must lie in (gap={cfg.gap}, k_step={cfg.k_step}]")
    rows = ablate(model, cfg.kind, grid, redi_config(cfg), kb, cfg.n_queries, cfg.seed + cfgmod.SEED_QUERY,
                  cfg.gap, cfg.gt_per_row)
    write_csv(out / "ablation.csv", ABLATION_COLUMNS, [[r[c] for c in ABLATION_COLUMNS] for r in rows])
    write_json(out / "ablation.json", {"kind": cfg.kind, "grid": list(grid), "rows": rows})
    return {}


def cmd_bound_check(cfg: RunConfig, out: Path) -> dict:
    model = make_model(cfg)
    seed = cfg.seed + cfgmod.SEED_BOUND
    conds = query_conditions(model, cfg, cfg.n_pairs, seed)
    report = bound_check(model, conds, cfg.k_step, cfg.v_step, cfg.epsilons, cfg.n_pairs, seed, cfg.w_g,
                         cfg.method, cfg.t_floor, safety=cfg.safety, n_probes=cfg.n_probes,
                         reference_steps=cfg.reference_steps, threads=cfg.threads)
    write_json(out / "bound.json", report.to_dict())
    rows = [[float(e), *p.tolist(), float(r[1])] for e, p, r in zip(report.nominal, report.pairs, report.raw_pairs)]
    write_csv(out / "bound_pairs.csv", ["epsilon", "gamma", "observed", "bound", "raw_observed"], rows)
    if report.violation_count:
        raise NumericFailure(f"{report.violation_count} bound violations (l_hat={report.l_hat:.4g})")
    return {}


COMMANDS = {"build-kb": cmd_build_kb, "sample": cmd_sample, "eval": cmd_eval, "ablate": cmd_ablate,
            "bound-check": cmd_bound_check}


# --- argument handling ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    keys = ", ".join(sorted(k for k in cfgmod.SCHEMA if k not in ("seed", "threads")))
    p = argparse.ArgumentParser(
        prog="redilab",
        description="Retrieval-based ODE step skipping on an analytic diffusion model.",
        epilog="Any config key may be overridden as --key value (dashes or underscores). Keys: " + keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        allow_abbrev=False,
    )
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="root seed; derived seeds add fixed offsets")
    p.add_argument("--threads", type=int, help="worker threads for the reference integrator")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, text in COMMAND_HELP.items():
        sp = sub.add_parser(name, help=text, description=text, allow_abbrev=False)
        if name == "sample":
            sp.add_argument("--count", help="number of samples")
            sp.add_argument("--no-retrieval", action="store_true", help="plain full solve (baseline)")
            sp.add_argument("--adapted", metavar="STYLE", help="zero-shot adaptation to style id STYLE")
        if name in ("sample", "eval", "ablate"):
            sp.add_argument("--kb", help="knowledge base path (default: <out>/kb.redikb)")
    return p


def _overrides(args, extra) -> dict:
    ov = {}
    for name in ("seed", "threads", "count", "kb"):
        val = getattr(args, name, None)
        if val is not None:
            ov[name] = str(val)
    if getattr(args, "no_retrieval", False):
        ov["no_retrieval"] = "true"
    if getattr(args, "adapted", None) is not None:
        ov["adapted"] = "true"
        ov["style"] = str(args.adapted)
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{tok} needs a value")
            val = extra[i + 1]
            i += 2
        ov[key.replace("-", "_")] = val
    return ov


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    out = Path(args.out)
    try:
        cfg = cfgmod.load_config(args.config, _overrides(args, extra))
        if cfg.kb:
            cfg.values["kb"] = str(Path(cfg.kb).resolve())
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(cfg.resolved_text(), encoding="utf-8")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            t0 = time.perf_counter()
            timings = COMMANDS[args.command](cfg, out) or {}
            timings["total_wall_time_s"] = time.perf_counter() - t0
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        # wall times live apart from the reproducible outputs
        write_json(out / "timings.json", timings)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CompatibilityError as exc:
        print(f"incompatible: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (KbError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericFailure, DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining contract violations come from inconsistent settings
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
