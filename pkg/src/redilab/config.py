"""Flat ``key = value`` run configuration with typed keys and cross-field checks."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .solver import SolverMethod


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _str(text: str) -> str:
    return text.strip()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


# key -> (parser, default). Derived seeds are root seed + a fixed offset:
# data +0, KB noise +1_000_000, queries +2_000_000, ground truth +3_000_000,
# bound check +4_000_000.
SCHEMA = {
    "beta0": (float, 0.1),
    "beta1": (float, 20.0),
    "n_steps": (int, 50),
    "t_floor": (float, 1e-3),
    "mixture": (_str, "default"),
    "method": (_str, "euler"),
    "w_g": (float, 1.0),
    "k_step": (int, 40),
    "v_step": (int, 20),
    "h": (int, 1),
    "match_condition": (_bool, True),
    "trust_radius": (float, 0.0),
    "use_kdtree": (_bool, False),
    "allow_guidance_mismatch": (_bool, False),
    "dataset_size": (int, 2000),
    "seed": (int, 0),
    "kb": (_str, ""),
    "count": (int, 100),
    "content": (int, -1),
    "style": (int, -1),
    "no_retrieval": (_bool, False),
    "adapted": (_bool, False),
    "n_eval": (int, 300),
    "n_queries": (int, 300),
    "gt_per_row": (int, 10),
    "kind": (_str, "n_neighbors"),
    "grid": (_ints, ()),
    "gap": (int, 15),
    "n_pairs": (int, 1000),
    "epsilons": (_floats, (1e-4, 1e-3, 1e-2)),
    "n_probes": (int, 200),
    "safety": (float, 1.1),
    "reference_steps": (int, 100_000),
    "max_failure_rate": (float, 0.01),
    "threads": (int, 1),
}

SEED_DATA = 0
SEED_KB = 1_000_000
SEED_QUERY = 2_000_000
SEED_GT = 3_000_000
SEED_BOUND = 4_000_000


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def resolved_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))


def parse_text(text: str, source: str = "<config>") -> dict:
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        raw[key.replace("-", "_")] = value
    return raw


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, file values and overrides (overrides win), then validate."""
    raw = dict(file_values or {})
    raw.update(overrides or {})
    values = {k: d for k, (_, d) in SCHEMA.items()}
    for key, text in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = text if not isinstance(text, str) else parser(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    validate(values)
    return RunConfig(values)


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    file_values = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        file_values = parse_text(text, str(path))
    return build_config(file_values, overrides)


def validate(v: dict) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg} (got {v[key]!r})")

    need(v["beta0"] > 0, "beta0", "must be positive")
    need(v["beta1"] > v["beta0"], "beta1", "must exceed beta0")
    need(v["n_steps"] >= 2, "n_steps", "must be at least 2")
    need(0 < v["t_floor"] < 1.0, "t_floor", "must lie in (0, t_max=1)")
    try:
        SolverMethod.parse(v["method"])
    except ValueError as exc:
        raise ConfigError(f"method: {exc}") from None
    need(v["w_g"] >= 0, "w_g", "must be non-negative")
    need(0 < v["k_step"] < v["n_steps"], "k_step", f"must lie in (0, n_steps={v['n_steps']})")
    need(0 <= v["v_step"] < v["k_step"], "v_step", f"must lie in [0, k_step={v['k_step']})")
    need(v["h"] >= 1, "h", "must be at least 1")
    need(v["trust_radius"] >= 0, "trust_radius", "must be non-negative (0 selects the automatic radius)")
    need(v["dataset_size"] >= 0, "dataset_size", "must be non-negative")
    need(v["seed"] >= 0, "seed", "must be non-negative")
    need(v["count"] >= 1, "count", "must be at least 1")
    need(v["n_eval"] >= 50, "n_eval", "must be at least 50")
    need(v["n_queries"] >= 1, "n_queries", "must be at least 1")
    need(v["gt_per_row"] >= 1, "gt_per_row", "must be at least 1")
    need(v["n_pairs"] >= 1, "n_pairs", "must be at least 1")
    need(all(e >= 0 for e in v["epsilons"]) and v["epsilons"], "epsilons", "need non-negative values")
    need(v["n_probes"] >= 1, "n_probes", "must be at least 1")
    need(v["safety"] >= 1.0, "safety", "must be at least 1")
    need(v["reference_steps"] >= 1, "reference_steps", "must be at least 1")
    need(0 <= v["max_failure_rate"] <= 1, "max_failure_rate", "must lie in [0, 1]")
    need(v["threads"] >= 1, "threads", "must be at least 1")
    need(v["kind"] in ("kb_size", "kv_gap", "k_position", "n_neighbors"), "kind",
         "must be one of kb_size, kv_gap, k_position, n_neighbors")
    need(v["gap"] >= 1, "gap", "must be at least 1")
    need(not (v["adapted"] and v["style"] < 0), "adapted", "needs a style id (style >= 0)")
    need(not (v["adapted"] and v["no_retrieval"]), "adapted", "cannot be combined with no_retrieval")
