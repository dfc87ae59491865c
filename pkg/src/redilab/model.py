"""Conditional Gaussian-mixture data distribution with an analytic score.

Every component has isotropic covariance ``s^2 I``, so the forward-noised
marginal at time t is again a mixture with means ``alpha(t) mu`` and
covariances ``(alpha(t)^2 s^2 + sigma(t)^2) I``. The score, noise prediction
and score Jacobian all follow in closed form from responsibility-weighted
component terms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .schedule import Schedule

NO_STYLE = -1


@dataclass(frozen=True)
class Condition:
    content_id: int
    style_id: int | None = None

    @property
    def code(self) -> tuple[int, int]:
        """Integer pair used in every file format; style -1 means style-free."""
        return (int(self.content_id), NO_STYLE if self.style_id is None else int(self.style_id))

    @classmethod
    def from_code(cls, content_id: int, style_id: int) -> "Condition":
        return cls(int(content_id), None if style_id == NO_STYLE else int(style_id))

    def without_style(self) -> "Condition":
        return Condition(self.content_id)


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    cov_scales: np.ndarray  # (K,), covariance of component i is cov_scales[i] * I

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.asarray(self.cov_scales, dtype=float)
        if w.ndim != 1 or len(w) < 1:
            raise ValueError("a mixture needs at least one component")
        if m.shape[0] != len(w) or s.shape != w.shape:
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {m.shape}, cov_scales {s.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1, got sum {w.sum()!r}")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("cov_scales must be finite and non-negative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "cov_scales", s)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def same_as(self, other: "MixtureSpec") -> bool:
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.cov_scales, other.cov_scales)
        )

    def marginal(self, schedule: Schedule, t: float) -> "MixtureSpec":
        a = schedule.alpha(t)
        s = schedule.sigma(t)
        return MixtureSpec(self.weights, a * self.means, a * a * self.cov_scales + s * s)


@dataclass(frozen=True, eq=False)
class StyleTransform:
    rotation: np.ndarray
    shift: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        sh = np.asarray(self.shift, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1] or sh.shape != (r.shape[0],):
            raise ValueError(f"rotation must be d x d and shift length d, got {r.shape} and {sh.shape}")
        if not np.allclose(r @ r.T, np.eye(len(r)), atol=1e-10, rtol=0):
            raise ValueError("rotation must be orthogonal")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "shift", sh)
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, spec: MixtureSpec) -> MixtureSpec:
        means = self.scale * spec.means @ self.rotation.T + self.shift
        return MixtureSpec(spec.weights, means, self.scale**2 * spec.cov_scales)


def rotation_2d(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    r = np.array([[c, -s], [s, c]])
    # exact zeros/ones for the quarter turns
    return np.where(np.abs(r) < 1e-15, 0.0, r)


# --- batched mixture kernels -------------------------------------------------
#
# ``means`` may be (K, d) shared by all rows or (n, K, d) per row; ``x`` is
# (d,) or (n, d). ``var`` is the marginal component variance, (K,) or (n, K).


def _log_resp(x, log_w, means, var):
    d = x.shape[-1]
    diff = x[..., None, :] - means
    sq = np.einsum("...kd,...kd->...k", diff, diff)
    logits = log_w - 0.5 * sq / var - 0.5 * d * np.log(2.0 * np.pi * var)
    return logits, diff


def mixture_log_density(x, log_w, means, var):
    logits, _ = _log_resp(x, log_w, means, var)
    return logsumexp(logits, axis=-1)


def mixture_score(x, log_w, means, var):
    logits, diff = _log_resp(x, log_w, means, var)
    logits = logits - logits.max(axis=-1, keepdims=True)
    r = np.exp(logits)
    r /= r.sum(axis=-1, keepdims=True)
    return -np.einsum("...k,...kd->...d", r / var, diff)


def mixture_score_jacobian(x, log_w, means, var):
    """d score / dx: sum_i r_i (-I / v_i) + Cov_r(component scores)."""
    logits, diff = _log_resp(x, log_w, means, var)
    logits = logits - logits.max(axis=-1, keepdims=True)
    r = np.exp(logits)
    r /= r.sum(axis=-1, keepdims=True)
    comp = -diff / var[..., None]
    mean_score = np.einsum("...k,...kd->...d", r, comp)
    second = np.einsum("...k,...kd,...ke->...de", r, comp, comp)
    d = x.shape[-1]
    diag = -np.einsum("...k,...k->...", r, 1.0 / var)
    return diag[..., None, None] * np.eye(d) + second - mean_score[..., :, None] * mean_score[..., None, :]


@dataclass(frozen=True, eq=False)
class _Packed:
    """A mixture spec (or a stack of them) in kernel-ready form."""

    log_w: np.ndarray
    means: np.ndarray
    cov_scales: np.ndarray

    @classmethod
    def of(cls, spec: MixtureSpec) -> "_Packed":
        with np.errstate(divide="ignore"):
            return cls(np.log(spec.weights), spec.means, spec.cov_scales)

    @classmethod
    def stack(cls, specs: Sequence[MixtureSpec]) -> "_Packed":
        k = max(s.n_components for s in specs)
        d = specs[0].dim
        log_w = np.full((len(specs), k), -np.inf)
        means = np.zeros((len(specs), k, d))
        covs = np.ones((len(specs), k))
        for i, s in enumerate(specs):
            p = cls.of(s)
            n = s.n_components
            log_w[i, :n], means[i, :n], covs[i, :n] = p.log_w, p.means, p.cov_scales
        return cls(log_w, means, covs)

    def take(self, idx: np.ndarray) -> "_Packed":
        return _Packed(self.log_w[idx], self.means[idx], self.cov_scales[idx])

    def at(self, schedule: Schedule, t: float):
        a = schedule.alpha(t)
        s = schedule.sigma(t)
        return self.log_w, a * self.means, a * a * self.cov_scales + s * s


def default_contents(n_contents: int = 4, radius: float = 4.0, sub_offset: float = 0.5,
                     cov_scale: float = 0.09) -> list[MixtureSpec]:
    """Content clusters on a circle, each a pair of sub-components split tangentially."""
    contents = []
    for c in range(n_contents):
        ang = 2.0 * math.pi * c / n_contents
        center = radius * np.array([math.cos(ang), math.sin(ang)])
        tangent = np.array([-math.sin(ang), math.cos(ang)])
        means = np.stack([center + sub_offset * tangent, center - sub_offset * tangent])
        contents.append(MixtureSpec(np.array([0.5, 0.5]), means, np.full(2, cov_scale)))
    return contents


def default_styles() -> list[StyleTransform]:
    eye = np.eye(2)
    return [
        StyleTransform(eye, np.zeros(2), 1.0),
        StyleTransform(rotation_2d(math.pi / 2), np.zeros(2), 1.0),
        StyleTransform(eye, np.array([2.0, 2.0]), 1.2),
    ]


class MixtureModel:
    """Analytic stand-in for a conditional noise-prediction network.

    Conditions pick a content mixture and optionally a style transform.
    The unconditional distribution (used for guidance) is the equal-weight
    mixture over all style-free contents.
    """

    def __init__(self, contents: Sequence[MixtureSpec], styles: Sequence[StyleTransform],
                 schedule: Schedule | None = None, embedding_seed: int = 20230501):
        if not contents:
            raise ValueError("need at least one content mixture")
        dims = {c.dim for c in contents} | {len(s.shift) for s in styles}
        if len(dims) != 1:
            raise ValueError(f"all contents and styles must share one dimension, got {sorted(dims)}")
        self.contents = list(contents)
        self.styles = list(styles)
        self.schedule = schedule or Schedule()
        self.dim = dims.pop()
        self._uncond = self._build_unconditional()
        self._uncond_packed = _Packed.of(self._uncond)
        # every (content, style|none) pair gets its own stacked slot
        self._codes = [(c, s) for c in range(self.n_contents) for s in range(-1, self.n_styles)]
        self._slot = {code: i for i, code in enumerate(self._codes)}
        self._stacked = _Packed.stack([self.resolve(Condition.from_code(*code)) for code in self._codes])
        proj_rng = np.random.default_rng(embedding_seed)
        self._embed = proj_rng.standard_normal((len(self._codes), self.dim))

    @classmethod
    def default(cls, schedule: Schedule | None = None) -> "MixtureModel":
        return cls(default_contents(), default_styles(), schedule)

    @property
    def n_contents(self) -> int:
        return len(self.contents)

    @property
    def n_styles(self) -> int:
        return len(self.styles)

    def _build_unconditional(self) -> MixtureSpec:
        c = self.n_contents
        w = np.concatenate([spec.weights / c for spec in self.contents])
        w /= w.sum()
        return MixtureSpec(w, np.concatenate([s.means for s in self.contents]),
                           np.concatenate([s.cov_scales for s in self.contents]))

    def validate(self, y: Condition) -> None:
        if not 0 <= y.content_id < self.n_contents:
            raise ValueError(f"unknown content id {y.content_id} (have {self.n_contents})")
        if y.style_id is not None and not 0 <= y.style_id < self.n_styles:
            raise ValueError(f"unknown style id {y.style_id} (have {self.n_styles})")

    def resolve(self, y: Condition) -> MixtureSpec:
        self.validate(y)
        spec = self.contents[y.content_id]
        if y.style_id is not None:
            spec = self.styles[y.style_id].apply(spec)
        return spec

    def unconditional(self) -> MixtureSpec:
        return self._uncond

    def marginal(self, spec: MixtureSpec, t: float) -> MixtureSpec:
        return spec.marginal(self.schedule, t)

    # -- packed parameters for one condition or a per-row batch of them --

    def _packed(self, y: Condition | Sequence[Condition]) -> _Packed:
        if isinstance(y, Condition):
            self.validate(y)
            return self._stacked.take(self._slot[y.code])
        for c in y:
            self.validate(c)
        return self._stacked.take(np.array([self._slot[c.code] for c in y], dtype=np.intp))

    @staticmethod
    def _check_x(x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("x must be finite")
        return x

    def log_density(self, x, t: float, y: Condition):
        x = self._check_x(x)
        return mixture_log_density(x, *self._packed(y).at(self.schedule, t))

    def score(self, x, t: float, y: Condition | Sequence[Condition]):
        x = self._check_x(x)
        return mixture_score(x, *self._packed(y).at(self.schedule, t))

    def unconditional_score(self, x, t: float):
        return mixture_score(np.asarray(x, dtype=float), *self._uncond_packed.at(self.schedule, t))

    def guided_score(self, x, t: float, y: Condition | Sequence[Condition], w_g: float = 1.0):
        if w_g < 0:
            raise ValueError(f"guidance scale must be non-negative, got {w_g}")
        if w_g == 1.0:
            return self.score(x, t, y)
        s_u = self.unconditional_score(self._check_x(x), t)
        if w_g == 0.0:
            return s_u
        return s_u + w_g * (self.score(x, t, y) - s_u)

    def guided_score_jacobian(self, x, t: float, y, w_g: float = 1.0):
        x = self._check_x(x)
        j_c = mixture_score_jacobian(x, *self._packed(y).at(self.schedule, t))
        if w_g == 1.0:
            return j_c
        j_u = mixture_score_jacobian(x, *self._uncond_packed.at(self.schedule, t))
        return j_u + w_g * (j_c - j_u)

    def epsilon(self, x, t: float, y, w_g: float = 1.0):
        """Noise prediction, eps = -sigma(t) * score."""
        s = self.schedule.sigma(t)
        if s <= 0:
            raise ValueError(f"epsilon is undefined at t={t} (sigma = 0)")
        return -s * self.guided_score(x, t, y, w_g)

    def field(self, y: Condition | Sequence[Condition], w_g: float = 1.0):
        """Bind a condition (or per-row conditions) and guidance scale into an ODE field."""
        from .solver import ScoreField

        if w_g < 0:
            raise ValueError(f"guidance scale must be non-negative, got {w_g}")
        packed = self._packed(y)
        uncond = self._uncond_packed
        sched = self.schedule

        def score(x, t):
            s_c = mixture_score(x, *packed.at(sched, t))
            if w_g == 1.0:
                return s_c
            s_u = mixture_score(x, *uncond.at(sched, t))
            return s_u + w_g * (s_c - s_u)

        def jacobian(x, t):
            j_c = mixture_score_jacobian(x, *packed.at(sched, t))
            if w_g == 1.0:
                return j_c
            j_u = mixture_score_jacobian(x, *uncond.at(sched, t))
            return j_u + w_g * (j_c - j_u)

        mixture = (packed.log_w, packed.means, packed.cov_scales,
                   uncond.log_w, uncond.means, uncond.cov_scales, float(w_g))
        return ScoreField(sched, score, jacobian, mixture)

    # -- sampling --

    def sample_data(self, y: Condition, count: int, rng_seed: int) -> np.ndarray:
        if count < 0:
            raise ValueError(f"count must be non-negative, got {count}")
        return sample_mixture(self.resolve(y), count, np.random.default_rng(rng_seed))

    def forward_noise(self, x0, t: float, rng_seed: int | None = None, zero_noise: bool = False):
        """One draw of x_t = alpha(t) x0 + sigma(t) e."""
        x0 = np.asarray(x0, dtype=float)
        a, s = self.schedule.alpha(t), self.schedule.sigma(t)
        if zero_noise:
            return a * x0
        e = np.random.default_rng(rng_seed).standard_normal(x0.shape)
        return a * x0 + s * e

    def embedding(self, y: Condition) -> np.ndarray:
        """Fixed random projection of the one-hot (content, style) code to dimension d."""
        self.validate(y)
        return self._embed[self._slot[y.code]].copy()


def sample_mixture(spec: MixtureSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(spec.n_components, size=count, p=spec.weights)
    noise = rng.standard_normal((count, spec.dim))
    return spec.means[comp] + np.sqrt(spec.cov_scales[comp])[:, None] * noise
