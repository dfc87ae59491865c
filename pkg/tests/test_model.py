import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from redilab.analysis import frechet_sq
from redilab.model import Condition, MixtureModel, MixtureSpec, StyleTransform, rotation_2d, sample_mixture
from redilab.schedule import Schedule

from conftest import single_gaussian

S = Schedule()


def two_symmetric(schedule=None):
    spec = MixtureSpec(np.array([0.5, 0.5]), np.array([[1.5, 0.0], [-1.5, 0.0]]), np.array([0.2, 0.2]))
    return MixtureModel([spec], [], schedule)


def test_condition_code_roundtrip():
    assert Condition(2).code == (2, -1)
    assert Condition.from_code(1, 2) == Condition(1, 2)
    assert Condition.from_code(1, -1) == Condition(1)
    assert Condition(3, 1).without_style() == Condition(3)


def test_spec_validation():
    with pytest.raises(ValueError):
        MixtureSpec(np.array([0.5, 0.4]), np.zeros((2, 2)), np.ones(2))
    with pytest.raises(ValueError):
        MixtureSpec(np.array([1.0]), np.zeros((2, 2)), np.ones(1))
    with pytest.raises(ValueError):
        StyleTransform(np.array([[1.0, 0.1], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(ValueError):
        StyleTransform(np.eye(2), np.zeros(2), 0.0)


def test_resolve(model):
    base = model.resolve(Condition(0))
    assert base.same_as(model.contents[0])
    assert model.resolve(Condition(0, 0)).same_as(base)
    rot = model.resolve(Condition(0, 1))
    expected = base.means @ np.array([[0.0, 1.0], [-1.0, 0.0]])
    assert np.allclose(rot.means, expected, atol=1e-15)
    assert np.array_equal(rot.weights, base.weights)
    shifted = model.resolve(Condition(0, 2))
    assert np.allclose(shifted.means, 1.2 * base.means + 2.0)
    assert np.allclose(shifted.cov_scales, 1.44 * base.cov_scales)
    for bad in (Condition(4), Condition(-1), Condition(0, 3)):
        with pytest.raises(ValueError):
            model.resolve(bad)


def test_default_layout(model):
    assert model.dim == 2 and model.n_contents == 4 and model.n_styles == 3
    for c in model.contents:
        assert np.allclose(np.linalg.norm(c.means.mean(0)), 4.0)
        assert np.allclose(c.cov_scales, 0.09)


def test_marginal(model):
    spec = model.resolve(Condition(1))
    m0 = model.marginal(spec, 0.0)
    assert np.array_equal(m0.means, spec.means) and np.array_equal(m0.cov_scales, spec.cov_scales)
    m1 = model.marginal(spec, 1.0)
    assert np.allclose(m1.means, S.alpha(1.0) * spec.means)
    assert np.allclose(m1.cov_scales, 1.0, atol=1e-4)
    pm = MixtureSpec(np.array([1.0]), np.array([[2.0, -3.0]]), np.array([0.0]))
    h = pm.marginal(S, 0.5)
    assert np.allclose(h.means, S.alpha(0.5) * pm.means)
    assert np.isclose(h.cov_scales[0], S.sigma(0.5) ** 2)


def test_log_density_examples():
    std = MixtureModel([MixtureSpec(np.array([1.0]), np.zeros((1, 2)), np.array([1.0]))], [])
    assert std.log_density(np.zeros(2), 0.0, Condition(0)) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)
    sym = two_symmetric()
    x = np.random.default_rng(1).normal(size=(20, 2))
    assert np.allclose(sym.log_density(x, 0.3, Condition(0)), sym.log_density(-x, 0.3, Condition(0)), rtol=0,
                       atol=1e-13)
    with pytest.raises(ValueError):
        sym.log_density(np.array([np.nan, 0.0]), 0.3, Condition(0))


def test_log_density_integrates_to_one(model):
    # importance sampling with the marginal's own components at doubled variance
    rng = np.random.default_rng(3)
    for y, t in ((Condition(0), 0.4), (Condition(2, 1), 0.7)):
        spec = model.marginal(model.resolve(y), t)
        wide = MixtureSpec(spec.weights, spec.means, 2.0 * spec.cov_scales)
        x = sample_mixture(wide, 100_000, rng)
        log_q = MixtureModel([wide], []).log_density(x, 0.0, Condition(0))
        w = np.exp(model.log_density(x, t, y) - log_q)
        assert abs(w.mean() - 1.0) < 0.01


def test_log_density_far_tail(model):
    v = model.log_density(np.array([1e6, -1e6]), 0.2, Condition(0))
    assert np.isfinite(v) and v < -1e10


def test_score_single_component():
    g = single_gaussian(mean=(1.5, -1.0), var=0.25)
    x = np.array([0.3, 0.8])
    for t in (0.01, 0.3, 0.9):
        a, s = S.alpha(t), S.sigma(t)
        expected = -(x - a * np.array([1.5, -1.0])) / (a * a * 0.25 + s * s)
        assert np.allclose(g.score(x, t, Condition(0)), expected, rtol=1e-14, atol=0)


def test_score_symmetry():
    sym = two_symmetric()
    x = np.column_stack([np.linspace(-3, 3, 13), np.zeros(13)])
    # on the symmetry axis y=0 the off-axis component vanishes; at x=0 the whole score does
    assert np.all(sym.score(x, 0.4, Condition(0))[:, 1] == 0.0)
    assert np.allclose(sym.score(np.zeros(2), 0.4, Condition(0)), 0.0, atol=1e-15)


def _fd_grad(model, x, t, y, h=1e-5):
    g = np.zeros_like(x)
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = h
        g[..., j] = (model.log_density(x + e, t, y) - model.log_density(x - e, t, y)) / (2 * h)
    return g


def test_score_matches_finite_differences(model):
    rng = np.random.default_rng(5)
    n = 1000
    ts = rng.uniform(1e-3, 1.0, n)
    codes = rng.integers(0, 4, n), rng.integers(-1, 3, n)
    worst_abs, worst_rel = 0.0, 0.0
    for i in range(n):
        y = Condition.from_code(int(codes[0][i]), int(codes[1][i]))
        spec = model.marginal(model.resolve(y), ts[i])
        k = rng.integers(spec.n_components)
        x = spec.means[k] + np.sqrt(spec.cov_scales[k]) * rng.normal(size=2) * 1.5
        h = 1e-5 * math.sqrt(spec.cov_scales[k])
        s = model.score(x, ts[i], y)
        fd = _fd_grad(model, x, ts[i], y, h)
        err = np.linalg.norm(s - fd)
        worst_abs = max(worst_abs, err)
        worst_rel = max(worst_rel, err / max(np.linalg.norm(s), 1.0))
    assert worst_rel < 1e-4


def test_epsilon_examples():
    x0 = np.array([0.7, -1.3])
    pm = MixtureModel([MixtureSpec(np.array([1.0]), x0[None], np.array([0.0]))], [])
    e = np.array([0.25, -0.4])
    for t in (0.05, 0.5, 1.0):
        x = S.alpha(t) * x0 + S.sigma(t) * e
        assert np.allclose(pm.epsilon(x, t, Condition(0)), e, rtol=0, atol=1e-12)
    g = single_gaussian()
    mean = S.alpha(0.6) * np.array([1.5, -1.0])
    assert np.allclose(g.epsilon(mean, 0.6, Condition(0)), 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        g.epsilon(mean, 0.0, Condition(0))


def test_epsilon_far_from_data(model):
    for r in (1e3, 1e6):
        e = model.epsilon(np.array([r, -r]), 0.5, Condition(1, 2))
        assert np.all(np.isfinite(e))


def test_epsilon_score_relation(model):
    rng = np.random.default_rng(7)
    x = rng.normal(0, 3, size=(200, 2))
    y = Condition(3, 1)
    for t in (1e-3, 0.2, 0.8):
        assert np.all(model.epsilon(x, t, y) + S.sigma(t) * model.score(x, t, y) == 0.0)


def test_guided_score(model):
    rng = np.random.default_rng(9)
    x = rng.normal(0, 3, size=(50, 2))
    y = Condition(1, 2)
    t = 0.35
    s_c = model.score(x, t, y)
    s_u = model.unconditional_score(x, t)
    assert np.array_equal(model.guided_score(x, t, y, 1.0), s_c)
    assert np.array_equal(model.guided_score(x, t, y, 0.0), s_u)
    assert np.allclose(model.guided_score(x, t, y, 2.0), 2 * s_c - s_u, rtol=1e-13, atol=1e-13)
    with pytest.raises(ValueError):
        model.guided_score(x, t, y, -0.5)
    uncond = model.unconditional()
    assert np.allclose(s_u, MixtureModel([uncond], []).score(x, t, Condition(0)))


def test_field_matches_guided_score(model):
    rng = np.random.default_rng(11)
    x = rng.normal(0, 2, size=(6, 2))
    conds = [Condition.from_code(i % 4, (i % 4) - 1) for i in range(6)]
    for w in (0.0, 1.0, 3.0):
        f = model.field(conds, w)
        per_row = np.array([model.guided_score(x[i], 0.4, conds[i], w) for i in range(6)])
        assert np.allclose(f.score(x, 0.4), per_row, rtol=1e-13, atol=1e-13)


def test_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(13)
    y = Condition(2)
    for t in (0.05, 0.4, 0.9):
        x = rng.normal(0, 2, size=2) + model.marginal(model.resolve(y), t).means[0]
        jac = model.guided_score_jacobian(x, t, y, 1.5)
        h = 1e-6
        fd = np.column_stack([(model.guided_score(x + h * e, t, y, 1.5) - model.guided_score(x - h * e, t, y, 1.5))
                              / (2 * h) for e in np.eye(2)])
        assert np.allclose(jac, fd, rtol=1e-5, atol=1e-5)


def test_sample_data(model):
    a = model.sample_data(Condition(1, 1), 50, 42)
    b = model.sample_data(Condition(1, 1), 50, 42)
    assert np.array_equal(a, b)
    assert model.sample_data(Condition(0), 0, 1).shape == (0, 2)
    g = single_gaussian(mean=(1.0, -2.0), var=0.25)
    x = g.sample_data(Condition(0), 10_000, 3)
    assert np.all(np.abs(x.mean(0) - np.array([1.0, -2.0])) < 3 * 0.5 / 100)


def test_forward_noise(model):
    x0 = np.array([1.0, -2.0])
    assert np.array_equal(model.forward_noise(x0, 0.0, 5), x0)
    assert np.array_equal(model.forward_noise(x0, 0.5, zero_noise=True), S.alpha(0.5) * x0)
    draws = np.array([model.forward_noise(x0, 0.5, s) for s in range(10_000)])
    se = S.sigma(0.5) / 100
    assert np.all(np.abs(draws.mean(0) - S.alpha(0.5) * x0) < 4 * se)
    cov = np.cov(draws, rowvar=False)
    assert np.allclose(cov, S.sigma(0.5) ** 2 * np.eye(2), atol=0.05)


def test_marginal_consistency(model):
    rng = np.random.default_rng(17)
    for y, t in ((Condition(0), 0.3), (Condition(3, 2), 0.6)):
        x0 = model.sample_data(y, 10_000, 21)
        xt = model.forward_noise(x0, t, 22)
        direct = sample_mixture(model.marginal(model.resolve(y), t), 10_000, rng)
        assert frechet_sq(xt, direct) < 0.05


def test_embedding(model):
    codes = [Condition.from_code(c, s) for c in range(4) for s in range(-1, 3)]
    embs = np.array([model.embedding(y) for y in codes])
    assert embs.shape == (len(codes), 2)
    assert np.array_equal(model.embedding(Condition(1, 0)), model.embedding(Condition(1, 0)))
    diff = np.linalg.norm(embs[:, None] - embs[None], axis=-1)
    assert np.all(diff[~np.eye(len(codes), dtype=bool)] > 0)
    assert np.array_equal(MixtureModel.default().embedding(Condition(2, 1)), model.embedding(Condition(2, 1)))


def test_rotation_quarter_turn_exact():
    r = rotation_2d(math.pi / 2)
    assert np.array_equal(r, np.array([[0.0, -1.0], [1.0, 0.0]]))


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(1e-3, 1.0), st.integers(0, 3), st.integers(-1, 2))
def test_score_finite_and_relation(x, y, t, c, s):
    model = MixtureModel.default()
    cond = Condition.from_code(c, s)
    pt = np.array([x, y])
    sc = model.score(pt, t, cond)
    assert np.all(np.isfinite(sc))
    assert np.array_equal(model.epsilon(pt, t, cond), -S.sigma(t) * sc)
    assert np.array_equal(model.guided_score(pt, t, cond, 1.0), sc)


@given(st.floats(0.0, 1.0), st.floats(-10, 10), st.floats(-10, 10))
def test_marginal_weights_preserved(t, a, b):
    spec = MixtureSpec(np.array([0.3, 0.7]), np.array([[a, b], [b, a]]), np.array([0.1, 0.5]))
    m = spec.marginal(S, t)
    assert np.array_equal(m.weights, spec.weights)
    assert np.allclose(m.cov_scales, S.alpha(t) ** 2 * spec.cov_scales + S.sigma(t) ** 2)
