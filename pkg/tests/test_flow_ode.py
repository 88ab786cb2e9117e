import time

import numpy as np
import pytest

from almcflow.core import Ensemble, RngStream
from almcflow.flow_ode import (
    FlowConfig,
    VelocityDegeneracyError,
    estimate_velocity,
    euler_flow,
    kernel_responsibilities,
    run_flow,
)
from almcflow.interpolant import InterpolantSchedule
from almcflow.target import GaussianMixture, kou20

S = InterpolantSchedule()


def test_config_defaults_and_validation():
    cfg = FlowConfig()
    assert cfg.T0 == 1e-2 and cfg.T_end == pytest.approx(0.99)
    assert cfg.grid()[-1] == pytest.approx(cfg.T_end)
    with pytest.raises(ValueError):
        FlowConfig(T0=0.5, T_end=0.4)
    with pytest.raises(ValueError):
        FlowConfig(epsilon=0.0)


def test_velocity_collapses_to_single_point():
    y = np.array([1.5, -0.5])
    e = Ensemble(np.tile(y, (6, 1)), np.random.default_rng(0).normal(size=6))
    x = np.array([[0.2, 0.3], [-1.0, 2.0]])
    a, c = S.velocity_coeffs(0.4)
    np.testing.assert_allclose(estimate_velocity(S, 0.4, x, e), a * x + c * y, rtol=1e-12)


def test_responsibilities_normalized():
    gen = np.random.default_rng(1)
    pos = gen.normal(size=(50, 3))
    lw = gen.normal(size=50)
    lw -= np.log(np.exp(lw).sum())
    r = kernel_responsibilities(S, 0.7, gen.normal(size=(9, 3)), pos, lw)
    np.testing.assert_allclose(np.exp(r).sum(1), 1.0, atol=1e-12)


def test_weight_scale_invariance():
    gen = np.random.default_rng(2)
    pos = gen.normal(size=(40, 2))
    lw = gen.normal(size=40)
    x = gen.normal(size=(5, 2))
    v1 = estimate_velocity(S, 0.5, x, Ensemble(pos, lw))
    v2 = estimate_velocity(S, 0.5, x, Ensemble(pos, lw + np.log(17.0)))
    np.testing.assert_allclose(v1, v2, rtol=1e-12, atol=1e-14)


def test_velocity_matches_exact_for_gaussian():
    g = GaussianMixture([[1.0, -0.5]], 0.8)
    gen = np.random.default_rng(3)
    n = 100_000
    pos = g.sample(n, gen)
    e = Ensemble.unweighted(pos)
    t = 0.6
    probes = np.array([[0.0, 0.0], [1.0, 1.0], [-0.5, 0.3]])
    est = estimate_velocity(S, t, probes, e)
    exact = g.exact_velocity(S, t, probes)
    boot = []
    for b in range(30):
        idx = gen.integers(0, n, n)
        boot.append(estimate_velocity(S, t, probes, Ensemble.unweighted(pos[idx])))
    se = np.std(boot, axis=0, ddof=1)
    assert np.all(np.abs(est - exact) < 4 * se + 1e-12)


def test_degenerate_velocity_raises():
    e = Ensemble.unweighted(np.zeros((3, 2)))
    with pytest.raises(VelocityDegeneracyError) as info:
        estimate_velocity(S, 0.5, np.array([[0.0, 0.0], [np.inf, 0.0]]), e)
    assert info.value.t == 0.5 and info.value.particle == 1
    assert not np.isfinite(info.value.norm)


def test_single_euler_step():
    cfg = FlowConfig(M=1, N=4)
    e = Ensemble.unweighted(np.random.default_rng(4).normal(size=(30, 2)))
    out = run_flow(cfg, e, RngStream(5))
    x0 = RngStream(5).child(4).generator().standard_normal((4, 2))
    np.testing.assert_allclose(out, x0 + cfg.h * estimate_velocity(S, cfg.T0, x0, e), rtol=1e-12)


def _exact_flow(g, M, N=10_000, seed=6):
    cfg = FlowConfig(M=M, N=N, epsilon=1e-2)
    dummy = Ensemble.unweighted(np.zeros((1, g.dim)))
    return cfg, run_flow(cfg, dummy, RngStream(seed), velocity=lambda t, x: g.exact_velocity(S, t, x))


def test_exact_velocity_flow_reaches_interpolant_marginal():
    mu = np.array([2.0, -1.0])
    sigma = 0.5
    g = GaussianMixture([mu], sigma)
    cfg, out = _exact_flow(g, 100)
    alpha, beta, _, _ = S.eval(cfg.T_end)
    var = beta**2 * sigma**2 + alpha**2
    se = np.sqrt(var / len(out))
    assert np.all(np.abs(out.mean(0) - beta * mu) < 4 * se)
    np.testing.assert_allclose(np.var(out, axis=0), var, rtol=0.05)


def test_euler_refinement_is_monotone():
    # for a single Gaussian the flow map is affine: x_T = m_T + (s_T / s_0) (x_0 - m_0)
    mu = np.array([2.0, -1.0])
    sigma = 0.5
    g = GaussianMixture([mu], sigma)

    def moments(t):
        alpha, beta, _, _ = S.eval(t)
        return beta * mu, np.sqrt(beta**2 * sigma**2 + alpha**2)

    def err(M):
        cfg, out = _exact_flow(g, M, N=500)
        x0 = RngStream(6).child(4).generator().standard_normal((500, 2))
        m0, s0 = moments(cfg.T0)
        m1, s1 = moments(cfg.T_end)
        return np.mean(np.sum((out - (m1 + s1 / s0 * (x0 - m0))) ** 2, axis=1))

    errors = [err(M) for M in (25, 50, 100, 200)]
    assert all(b < a for a, b in zip(errors, errors[1:]))


def test_euler_flow_tags_step():
    calls = []

    def velocity(t, x):
        calls.append(t)
        if len(calls) == 3:
            raise VelocityDegeneracyError("boom", t=t)
        return np.zeros_like(x)

    with pytest.raises(VelocityDegeneracyError) as info:
        euler_flow(FlowConfig(M=10, N=2), np.zeros((2, 1)), velocity)
    assert info.value.step == 2


def _best_time(fn, reps=3):
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def test_runtime_scales_linearly_in_test_particles():
    gen = np.random.default_rng(7)
    e = Ensemble.unweighted(kou20().sample(2000, gen))
    small = _best_time(lambda: run_flow(FlowConfig(M=10, N=1000), e, RngStream(1)))
    large = _best_time(lambda: run_flow(FlowConfig(M=10, N=2000), e, RngStream(1)))
    assert 1.0 <= large / small <= 4.0
