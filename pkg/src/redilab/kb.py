"""Trajectory knowledge base: construction, persistence and exact top-H retrieval.

An entry stores the whole suffix of one solver trajectory, from the key step
k down to step 0, so a single base serves every value step v < k.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Condition, MixtureModel
from .schedule import Schedule, make_grid
from .solver import SolverMethod, integrate

log = logging.getLogger(__name__)

MAGIC = b"REDIKB01"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIdddBdQ")


class KbError(ValueError):
    pass


class BadMagicError(KbError):
    pass


class VersionMismatchError(KbError):
    pass


class TruncatedFileError(KbError):
    pass


class DimMismatchError(KbError):
    pass


@dataclass(frozen=True)
class KbEntry:
    key: np.ndarray
    suffix: np.ndarray  # (k+1, d), step k first
    condition: Condition
    trajectory_id: int
    seed: int


@dataclass(eq=False)
class KnowledgeBase:
    states: np.ndarray  # (n, k+1, d); states[:, 0] is step k, states[:, k] is step 0
    codes: np.ndarray  # (n, 2) int32 (content, style|-1)
    seeds: np.ndarray  # (n,) uint64
    k_step: int
    schedule: Schedule
    t_floor: float
    method: SolverMethod
    w_g: float
    key_override: np.ndarray | None = None  # alternative keys, e.g. condition embeddings

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3 or self.states.shape[1] != self.k_step + 1:
            raise ValueError(f"states must be (n, k_step+1, d), got {self.states.shape} for k_step={self.k_step}")
        if not 0 < self.k_step < self.schedule.n_steps:
            raise ValueError(f"k_step must lie in (0, n_steps={self.schedule.n_steps}), got {self.k_step}")
        self.codes = np.asarray(self.codes, dtype=np.int32).reshape(-1, 2)
        self.seeds = np.asarray(self.seeds, dtype=np.uint64)
        if not len(self.codes) == len(self.seeds) == len(self.states):
            raise ValueError("states, codes and seeds must have one row per entry")
        self.method = SolverMethod.parse(self.method)
        if self.key_override is not None:
            self.key_override = np.asarray(self.key_override, dtype=float)
            if self.key_override.shape != (len(self.states), self.dim):
                raise ValueError(f"key_override must be (n, {self.dim}), got {self.key_override.shape}")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def keys(self) -> np.ndarray:
        return self.states[:, 0] if self.key_override is None else self.key_override

    def values(self, v_step: int, indices=None) -> np.ndarray:
        if not 0 <= v_step < self.k_step:
            raise ValueError(f"value step v={v_step} must satisfy 0 <= v < k={self.k_step}")
        col = self.k_step - v_step
        return self.states[:, col] if indices is None else self.states[np.asarray(indices), col]

    def condition(self, i: int) -> Condition:
        return Condition.from_code(*self.codes[i])

    def entry(self, i: int) -> KbEntry:
        return KbEntry(self.keys[i].copy(), self.states[i].copy(), self.condition(i), i, int(self.seeds[i]))

    def subset(self, indices) -> "KnowledgeBase":
        idx = np.asarray(indices, dtype=np.intp)
        keys = None if self.key_override is None else self.key_override[idx]
        return KnowledgeBase(self.states[idx], self.codes[idx], self.seeds[idx], self.k_step,
                             self.schedule, self.t_floor, self.method, self.w_g, keys)

    def at_key_step(self, k_step: int) -> "KnowledgeBase":
        """The same trajectories keyed at an earlier-stored step k' <= k."""
        if not 0 < k_step <= self.k_step:
            raise ValueError(f"new key step must lie in (0, {self.k_step}], got {k_step}")
        return KnowledgeBase(self.states[:, self.k_step - k_step:], self.codes, self.seeds, k_step,
                             self.schedule, self.t_floor, self.method, self.w_g)

    def with_keys(self, keys) -> "KnowledgeBase":
        return KnowledgeBase(self.states, self.codes, self.seeds, self.k_step, self.schedule,
                             self.t_floor, self.method, self.w_g, keys)

    def same_content(self, other: "KnowledgeBase") -> bool:
        """Bitwise equality of data and metadata."""
        return (self.k_step == other.k_step and self.schedule == other.schedule
                and self.t_floor == other.t_floor and self.method == other.method
                and self.w_g == other.w_g and self.states.tobytes() == other.states.tobytes()
                and np.array_equal(self.codes, other.codes) and np.array_equal(self.seeds, other.seeds))


# --- construction ---------------------------------------------------------


def sample_dataset(model: MixtureModel, conditions: Sequence[Condition], seed: int):
    """One data point per condition, each drawn with seed + i."""
    x0 = np.empty((len(conditions), model.dim))
    for i, y in enumerate(conditions):
        x0[i] = model.sample_data(y, 1, seed + i)[0]
    return list(zip(x0, conditions))


def build_kb(model: MixtureModel, dataset, k_step: int, method="euler", w_g: float = 1.0,
             base_seed: int = 0, t_floor: float = 1e-3, chunk: int = 4096) -> KnowledgeBase:
    """Algorithm-1 construction: noise each item to t_max, solve, keep steps k..0.

    Item i is noised with seed ``base_seed + i``. Items whose trajectory
    diverges are skipped and logged.
    """
    method = SolverMethod.parse(method)
    sched = model.schedule
    grid = make_grid(sched, t_floor)
    if not 0 < k_step < sched.n_steps:
        raise ValueError(f"k_step must lie in (0, n_steps={sched.n_steps}), got {k_step}")
    n = len(dataset)
    d = model.dim
    if n == 0:
        return KnowledgeBase(np.empty((0, k_step + 1, d)), np.empty((0, 2), np.int32),
                             np.empty(0, np.uint64), k_step, sched, t_floor, method, w_g)
    conds = [y for _, y in dataset]
    x0 = np.array([np.asarray(x, dtype=float) for x, _ in dataset])
    if x0.shape != (n, d):
        raise ValueError(f"dataset items must be {d}-vectors, got array of shape {x0.shape}")
    x_t = np.stack([model.forward_noise(x0[i], sched.t_max, base_seed + i) for i in range(n)])
    kept_states, kept = [], []
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        field = model.field(conds[lo:hi], w_g)
        states, bad, bad_step, _ = integrate(field, x_t[lo:hi], grid, sched.n_steps, 0, method)
        for j in np.flatnonzero(bad):
            log.warning("kb build: item %d diverged near step %s, skipped", lo + j, bad_step)
        ok = ~bad
        # states is (L, rows, d) from step N down to 0; keep steps k..0
        kept_states.append(np.transpose(states[sched.n_steps - k_step:, ok], (1, 0, 2)))
        kept.append(np.arange(lo, hi)[ok])
    kept = np.concatenate(kept)
    codes = np.array([conds[i].code for i in kept], dtype=np.int32).reshape(-1, 2)
    seeds = (np.uint64(base_seed) + kept.astype(np.uint64)).astype(np.uint64)
    return KnowledgeBase(np.ascontiguousarray(np.concatenate(kept_states)), codes, seeds,
                         k_step, sched, t_floor, method, w_g)


# --- persistence ------------------------------------------------------------


def _entry_dtype(k_step: int, dim: int) -> np.dtype:
    return np.dtype([("content", "<i4"), ("style", "<i4"), ("seed", "<u8"),
                     ("states", "<f8", ((k_step + 1) * dim,))])


def kb_to_bytes(kb: KnowledgeBase) -> bytes:
    if kb.key_override is not None:
        raise ValueError("keys other than the stored states cannot be persisted")
    s = kb.schedule
    head = _HEADER.pack(MAGIC, VERSION, kb.dim, s.n_steps, kb.k_step, s.beta0, s.beta1, kb.t_floor,
                        kb.method.ident, kb.w_g, len(kb))
    rec = np.empty(len(kb), dtype=_entry_dtype(kb.k_step, kb.dim))
    rec["content"] = kb.codes[:, 0]
    rec["style"] = kb.codes[:, 1]
    rec["seed"] = kb.seeds
    rec["states"] = kb.states.reshape(len(kb), -1)
    return head + rec.tobytes()


def kb_from_bytes(buf: bytes, expected_dim: int | None = None) -> KnowledgeBase:
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:8]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, dim, n_steps, k_step, beta0, beta1, t_floor, solver_id, w_g, count = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported format version {version}, expected {VERSION}")
    if dim < 1 or (expected_dim is not None and dim != expected_dim):
        raise DimMismatchError(f"knowledge base has dim {dim}, expected {expected_dim}")
    dt = _entry_dtype(k_step, dim)
    need = _HEADER.size + count * dt.itemsize
    if len(buf) < need:
        raise TruncatedFileError(f"{count} entries need {need} bytes, file has {len(buf)}")
    if len(buf) > need:
        raise KbError(f"{len(buf) - need} trailing bytes after {count} entries")
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=_HEADER.size)
    states = rec["states"].reshape(count, k_step + 1, dim).copy()
    codes = np.stack([rec["content"], rec["style"]], axis=1).astype(np.int32)
    return KnowledgeBase(states, codes, rec["seed"].copy(), k_step, Schedule(beta0, beta1, 1.0, n_steps),
                         t_floor, SolverMethod.from_id(solver_id), w_g)


def save_kb(kb: KnowledgeBase, path) -> None:
    Path(path).write_bytes(kb_to_bytes(kb))


def load_kb(path, expected_dim: int | None = None) -> KnowledgeBase:
    return kb_from_bytes(Path(path).read_bytes(), expected_dim)


def kb_to_json(kb: KnowledgeBase) -> str:
    s = kb.schedule
    return json.dumps({
        "magic": MAGIC.decode(), "version": VERSION, "dim": kb.dim, "n_steps": s.n_steps,
        "k_step": kb.k_step, "beta0": s.beta0, "beta1": s.beta1, "t_floor": kb.t_floor,
        "solver_id": kb.method.ident, "solver": kb.method.name, "w_g": kb.w_g, "count": len(kb),
        "entries": [{"content_id": int(c[0]), "style_id": int(c[1]), "seed": int(sd),
                     "states": st.tolist()} for c, sd, st in zip(kb.codes, kb.seeds, kb.states)],
    })


# --- retrieval ---------------------------------------------------------------


def _distances(keys: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = keys - q
    return np.sqrt(np.einsum("...d,...d->...", diff, diff))


def _check_h(n: int, h: int) -> None:
    if n == 0:
        raise ValueError("cannot query an empty knowledge base")
    if not 1 <= h <= n:
        raise ValueError(f"H must lie in [1, {n}], got {h}")


def query_top_h(kb_or_keys, q, h: int, index: "KdIndex | None" = None):
    """Exact H nearest keys by L2 distance, ascending; ties go to the lower id.

    ``q`` may be one query (d,) or a batch (m, d); returns ``(indices, distances)``
    with matching leading shape.
    """
    keys = kb_or_keys.keys if isinstance(kb_or_keys, KnowledgeBase) else np.asarray(kb_or_keys, dtype=float)
    _check_h(len(keys), h)
    q = np.asarray(q, dtype=float)
    if index is not None:
        return index.query(q, h)
    if q.ndim == 1:
        dist = _distances(keys, q)
        order = np.argsort(dist, kind="stable")[:h]
        return order, dist[order]
    idx = np.empty((len(q), h), dtype=np.intp)
    dst = np.empty((len(q), h))
    for i, qi in enumerate(q):
        idx[i], dst[i] = query_top_h(keys, qi, h)
    return idx, dst


class KdIndex:
    """kd-tree accelerated top-H search returning exactly what the scan returns.

    The tree proposes every key within the H-th tree distance (plus slack);
    candidates are then re-ranked with the scan's own distance formula.
    """

    def __init__(self, keys):
        from scipy.spatial import cKDTree

        self.keys = np.asarray(keys, dtype=float)
        self.tree = cKDTree(self.keys)

    def query(self, q, h: int):
        _check_h(len(self.keys), h)
        q = np.asarray(q, dtype=float)
        if q.ndim > 1:
            out = [self.query(qi, h) for qi in q]
            return np.array([o[0] for o in out]), np.array([o[1] for o in out])
        far, _ = self.tree.query(q, k=h)
        radius = float(np.max(far))
        cand = np.array(sorted(self.tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-300)), dtype=np.intp)
        dist = _distances(self.keys[cand], q)
        order = np.argsort(dist, kind="stable")[:h]
        return cand[order], dist[order]


def median_nn_distance(keys) -> float:
    """Median distance from each key to its nearest other key."""
    from scipy.spatial import cKDTree

    keys = np.asarray(keys, dtype=float)
    if len(keys) < 2:
        raise ValueError("need at least two keys")
    dist, _ = cKDTree(keys).query(keys, k=2)
    return float(np.median(dist[:, 1]))


# --- least-squares combination ----------------------------------------------


def ls_weights(q, keys, rcond: float = 1e-10):
    """argmin_w || q - sum_i w_i key_i || without constraints.

    Solved through the normal equations when they are well conditioned, else
    by the pseudoinverse (the minimal-norm solution). Returns ``(w, residual)``.
    """
    q = np.asarray(q, dtype=float)
    a = np.atleast_2d(np.asarray(keys, dtype=float)).T  # (d, H)
    # solve on unit-scale keys so tiny or huge keys neither underflow nor overflow the Gram matrix
    peak = float(np.abs(a).max()) if a.size else 0.0
    if peak == 0.0:
        return np.zeros(a.shape[1]), float(np.linalg.norm(q))
    scale = float(np.ldexp(1.0, int(np.frexp(peak)[1])))  # power of two: rescaling is exact
    a_s = a / scale
    gram = a_s.T @ a_s
    w = None
    cond = np.linalg.cond(gram)
    if cond * rcond < 1.0:
        w = np.linalg.solve(gram, a_s.T @ q)
    if w is None:
        w = np.linalg.pinv(a_s) @ q
    w = w / scale
    resid = float(np.linalg.norm(q - a @ w))
    return w, resid


def combine_value(kb: KnowledgeBase, indices, weights, v_step: int) -> np.ndarray:
    vals = kb.values(v_step, indices)
    return np.asarray(weights, dtype=float) @ vals


@dataclass(frozen=True)
class RetrievalResult:
    indices: np.ndarray
    distances: np.ndarray
    weights: np.ndarray
    residual: float
    combined_value: np.ndarray

    def to_dict(self) -> dict:
        return {"indices": [int(i) for i in self.indices], "distances": [float(x) for x in self.distances],
                "weights": [float(x) for x in self.weights], "residual": float(self.residual)}


def retrieve(kb: KnowledgeBase, q, h: int, v_step: int, index: KdIndex | None = None) -> RetrievalResult:
    idx, dist = query_top_h(kb, q, h, index)
    w, resid = ls_weights(q, kb.keys[idx])
    return RetrievalResult(idx, dist, w, resid, combine_value(kb, idx, w, v_step))
