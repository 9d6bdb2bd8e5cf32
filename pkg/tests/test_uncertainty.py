import numpy as np
import pytest
from hypothesis import given, strategies as st

from physrefine.diffusion import build_schedule, reverse_step
from physrefine.dynamics import pseudoforce_values
from physrefine.kinematics import chain_tree
from physrefine.uncertainty import (VarianceReport, VarianceState, force_variance, heatmap_svg, mc_covariance,
                                    propagate, step_expectation, step_variance, variance_maps)

from helpers import free_body, random_chain


class LinearDenoiser:
    """f(x, y, n) = a_n x + b_n y + c_n with constant predictive variance g_n."""

    def __init__(self, a, b, c, g):
        self.a, self.b, self.c, self.g = a, b, c, g

    def predict(self, x, y, n):
        return self.a[n] * x + self.b[n] * y + self.c[n]

    def gamma2(self, x, y, n):
        return np.full(np.shape(x), self.g[n])


def linear_model(N):
    a = {n: 0.3 + 0.1 * n for n in range(1, N + 1)}
    b = {n: 0.5 - 0.05 * n for n in range(1, N + 1)}
    c = {n: 0.01 * n for n in range(1, N + 1)}
    g = {n: 0.02 * n for n in range(1, N + 1)}
    return LinearDenoiser(a, b, c, g)


def state(rng, shape=(4, 3)):
    return VarianceState(rng.normal(size=shape), rng.uniform(0.1, 1, shape), rng.normal(size=shape))


def test_state_validation():
    with pytest.raises(ValueError):
        VarianceState(np.zeros(3), -np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        VarianceState(np.zeros(3), np.ones(2), np.zeros(3))


def test_step_expectation_cases(rng):
    sched = build_schedule(4)
    s = state(rng)
    for n in range(1, 5):
        np.testing.assert_allclose(step_expectation(s, s.mean, n, sched), s.mean, rtol=1e-15, atol=1e-15)
    m_hat = rng.normal(size=s.mean.shape)
    assert np.array_equal(step_expectation(s, m_hat, 1, sched), m_hat)
    expected = sched.A(3) * s.mean + sched.B(3) * m_hat
    np.testing.assert_allclose(step_expectation(s, m_hat, 3, sched), expected, rtol=1e-15)
    with pytest.raises(IndexError):
        step_expectation(s, m_hat, 5, sched)


def test_step_variance_cases(rng):
    sched = build_schedule(4)
    s = state(rng)
    for n in range(1, 5):
        v = step_variance(s, s.var, s.var, n, sched)
        np.testing.assert_allclose(v, s.var + sched.Sigma(n), rtol=1e-12)
        v = step_variance(s, np.zeros_like(s.var), np.zeros_like(s.var), n, sched)
        np.testing.assert_allclose(v, sched.A(n) ** 2 * s.var + sched.Sigma(n), rtol=1e-12)


def test_step_variance_floors_negative(rng):
    sched = build_schedule(4)
    s = state(rng)
    v = step_variance(s, np.zeros_like(s.var), -10 * np.ones_like(s.var), 3, sched)
    assert np.all(v == 0)


def test_mc_covariance_self_and_constant(rng):
    S = 100_000
    xs = rng.normal(0.5, 0.7, size=(S, 2, 3))
    est = mc_covariance(xs, xs, xs.mean(axis=0))
    np.testing.assert_allclose(est, 0.49, rtol=0.03)
    const = np.broadcast_to(rng.normal(size=(2, 3)), xs.shape)
    small = xs[:20]
    est = mc_covariance(small, const[:20], small.mean(axis=0))
    assert np.all(np.abs(est) <= 4 * 0.7 / np.sqrt(20))
    with pytest.raises(ValueError):
        mc_covariance(xs[:1], xs[:1], xs[0])


def test_recursion_exact_with_analytic_moments(rng):
    """Linear denoiser, exact Var(x_hat) and Cov: recursion equals the affine closed form."""
    N = 4
    sched = build_schedule(N, kappa=0.7)
    model = linear_model(N)
    shape = (6, 3)
    s = VarianceState(rng.normal(size=shape), np.zeros(shape), np.zeros(shape))
    closed = np.zeros(shape)
    for n in range(N, 0, -1):
        a, g = model.a[n], model.g[n]
        var_xhat = a * a * s.var + g
        cov = a * s.var
        new_var = step_variance(s, var_xhat, cov, n, sched)
        s = VarianceState(s.mean, new_var, cov)
        closed = (sched.A(n) + sched.B(n) * a) ** 2 * closed + sched.B(n) ** 2 * g + sched.Sigma(n)
    np.testing.assert_allclose(s.var, closed, rtol=0, atol=1e-10)


def brute_force_chain(model, y, x_init, sched, runs, rng):
    x = np.broadcast_to(x_init, (runs,) + x_init.shape).copy()
    for n in range(sched.N, 0, -1):
        x_hat = model.predict(x, y, n) + np.sqrt(model.g[n]) * rng.standard_normal(x.shape)
        x = reverse_step(x, x_hat, n, sched, rng)
    return x


def test_propagate_matches_brute_force(rng):
    sched = build_schedule(4, kappa=0.5)
    model = linear_model(4)
    y = rng.normal(size=(8, 3))
    x_init = y + 0.5 * rng.normal(size=y.shape)
    rep = propagate(y, model, model.gamma2, sched, 20, rng, x_init=x_init)
    bf = brute_force_chain(model, y, x_init, sched, 10_000, rng)
    rel = np.abs(rep.var0 - bf.var(axis=0)) / bf.var(axis=0)
    assert rel.mean() < 0.05
    np.testing.assert_allclose(rep.mean0, bf.mean(axis=0), atol=5 * np.sqrt(bf.var(axis=0).max() / 10_000))


def test_propagate_single_step_returns_gamma2(rng):
    sched = build_schedule(1)
    model = linear_model(1)
    y = rng.normal(size=(5, 3))
    rep = propagate(y, model, model.gamma2, sched, 20, rng)
    np.testing.assert_allclose(rep.var0, model.g[1], rtol=1e-12, atol=1e-15)


def test_propagate_collapsed_posterior(rng):
    sched = build_schedule(4, kappa=1e-12)
    model = linear_model(4)
    y = rng.normal(size=(5, 3))
    rep = propagate(y, model, lambda x, y_, n: np.zeros(np.shape(x)), sched, 20, rng)
    assert np.all(rep.var0 >= 0)
    np.testing.assert_allclose(rep.var0, 0.0, atol=1e-20)


def test_propagate_requires_posterior_and_samples(rng):
    sched = build_schedule(2)
    model = linear_model(2)
    y = np.zeros((4, 3))
    with pytest.raises(ValueError):
        propagate(y, model, None, sched, 20, rng)
    with pytest.raises(ValueError):
        propagate(y, model, model.gamma2, sched, 1, rng)


def test_propagate_is_seeded():
    sched = build_schedule(3)
    model = linear_model(3)
    y = np.linspace(0, 1, 12).reshape(4, 3)
    a = propagate(y, model, model.gamma2, sched, 20, np.random.default_rng(5))
    b = propagate(y, model, model.gamma2, sched, 20, np.random.default_rng(5))
    assert np.array_equal(a.var0, b.var0) and np.array_equal(a.refined, b.refined)


def test_force_variance_zero():
    tree, bodies = free_body()
    mean0 = np.zeros((6, 6))
    np.testing.assert_array_equal(force_variance(tree, bodies, mean0, np.zeros_like(mean0), 0.1), 0.0)
    with pytest.raises(ValueError):
        force_variance(tree, bodies, mean0, -np.ones_like(mean0), 0.1)


def test_force_variance_point_mass():
    m, v, dt = 2.0, 1e-6, 0.05
    tree, bodies = free_body(m)
    T = 7
    mean0 = np.zeros((T, 6))
    mean0[:, 3] = np.linspace(0, 0.3, T)
    var0 = np.zeros_like(mean0)
    var0[:, 3:6] = v
    fv = force_variance(tree, bodies, mean0, var0, dt)
    expected = m**2 * v * 6.0 / dt**4
    np.testing.assert_allclose(fv[1:-1, 3:6], expected, rtol=1e-6)
    np.testing.assert_allclose(fv[[0, -1], 3:6], m**2 * v * 46.0 / dt**4, rtol=1e-6)
    np.testing.assert_allclose(fv[:, 0:3], 0.0, atol=expected * 1e-8)


def test_force_variance_matches_monte_carlo(rng):
    tree, bodies = random_chain(rng, 3)
    T, dt = 8, 1 / 30
    t = np.arange(T)[:, None] * dt
    mean0 = 0.3 * np.sin(2.0 * t + rng.uniform(0, np.pi, tree.dim))
    var0 = rng.uniform(0.5, 1.5, mean0.shape) * 1e-8
    fv = force_variance(tree, bodies, mean0, var0, dt)
    draws = mean0 + np.sqrt(var0) * rng.standard_normal((10_000,) + mean0.shape)
    mc = pseudoforce_values(tree, bodies, draws, dt).var(axis=0)
    np.testing.assert_allclose(fv, mc, rtol=0.1)


def test_variance_maps_cases(rng):
    tree = chain_tree(3)
    T = 5
    uniform = np.ones((T, tree.dim))
    joint, vertex = variance_maps(uniform, tree)
    np.testing.assert_allclose(joint, 1.0)
    assert vertex is None

    hot = np.zeros((T, tree.dim))
    hot[2, tree.rot_slice(1)] = 0.4
    joint, _ = variance_maps(hot, tree)
    expected = np.zeros((T, 3))
    expected[2, 1] = 1.0
    np.testing.assert_array_equal(joint, expected)

    joint, _ = variance_maps(np.zeros((T, tree.dim)), tree)
    assert np.all(joint == 0)

    r = rng.uniform(size=(T, tree.dim))
    raw = np.stack([r[:, tree.rot_slice(k)].sum(axis=1) for k in range(3)], axis=1)
    weights = rng.dirichlet(np.ones(3), size=10)
    joint, vertex = variance_maps(r, tree, weights)
    np.testing.assert_allclose(joint, raw / raw.max(), rtol=1e-14)
    np.testing.assert_allclose(vertex, joint @ weights.T, rtol=1e-14)
    assert vertex.max() <= 1.0 + 1e-12


def test_variance_maps_validation():
    tree = chain_tree(2)
    with pytest.raises(ValueError):
        variance_maps(-np.ones((3, tree.dim)), tree)
    with pytest.raises(ValueError):
        variance_maps(np.ones((3, tree.dim + 1)), tree)
    with pytest.raises(ValueError):
        variance_maps(np.ones((3, tree.dim)), tree, np.ones((4, 5)))


@given(st.integers(0, 10_000))
def test_maps_normalized_to_unit_max(seed):
    rng = np.random.default_rng(seed)
    tree = chain_tree(3)
    joint, _ = variance_maps(rng.exponential(size=(6, tree.dim)), tree)
    assert joint.max() == pytest.approx(1.0) and joint.min() >= 0


def test_report_exports(tmp_path, rng):
    tree, bodies = free_body()
    T = 5
    mean0 = np.zeros((T, 6))
    var0 = rng.uniform(size=(T, 6)) * 1e-6
    fv = force_variance(tree, bodies, mean0, var0, 0.1)
    joint, _ = variance_maps(fv, tree)
    rep = VarianceReport(mean0, mean0, var0, fv, joint, tree=tree)
    rep.to_csv(tmp_path / "v.csv")
    rows = (tmp_path / "v.csv").read_text().splitlines()
    assert rows[0] == "frame,joint,coordinate,var_x0,var_force,normalized_map"
    assert len(rows) == 1 + T * 6
    rep.to_svg(tmp_path / "v.svg")
    svg = (tmp_path / "v.svg").read_text()
    assert svg.count("<rect") == T
    np.testing.assert_allclose(rep.frame_force_variance(), fv.sum(axis=1))


def test_heatmap_svg_grid():
    svg = heatmap_svg(np.array([[0.0, 1.0], [0.5, 0.25]]), cell=10)
    assert 'width="20"' in svg and svg.count("<rect") == 4
    assert "#313695" in svg and "#d73027" in svg
