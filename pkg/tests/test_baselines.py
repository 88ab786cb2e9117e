import numpy as np
import pytest
from scipy import stats

from almcflow.baselines import HmcConfig, hmc_chain, leapfrog, mc_ode_proposals, mc_ode_velocity, run_mc_ode
from almcflow.core import RngStream
from almcflow.flow_ode import FlowConfig, weighted_conditional_mean
from almcflow.interpolant import InterpolantSchedule
from almcflow.target import GaussianMixture, kou20, standard_gaussian

S = InterpolantSchedule()


def batch_means_se(x, batches=50):
    b = np.array_split(x, batches)
    means = np.array([c.mean(0) for c in b])
    return means.std(0, ddof=1) / np.sqrt(batches)


def test_config_validation():
    with pytest.raises(ValueError):
        HmcConfig(step_size=0.0)
    with pytest.raises(ValueError):
        HmcConfig(leapfrog_steps=0)


def test_leapfrog_reversible():
    g = kou20()
    q0 = np.array([3.0, 3.4])
    p0 = np.array([0.3, -1.1])
    q1, p1 = leapfrog(g.grad_log_density, q0, p0, 0.01, 25)
    q2, p2 = leapfrog(g.grad_log_density, q1, -p1, 0.01, 25)
    np.testing.assert_allclose(q2, q0, atol=1e-8)
    np.testing.assert_allclose(-p2, p0, atol=1e-8)


def test_hmc_standard_gaussian():
    res = hmc_chain(HmcConfig(0.05, 10, 1000, 10_000, seed=1), standard_gaussian(2), np.zeros(2))
    assert res.acceptance_rate > 0.95
    x = res.samples
    assert np.all(np.abs(x.mean(0)) < 4 * batch_means_se(x))
    se2 = batch_means_se(x**2)
    assert np.all(np.abs(np.mean(x**2, 0) - 1.0) < 4 * se2)


def test_hmc_tiny_step_accepts_everything():
    res = hmc_chain(HmcConfig(1e-3, 10, 0, 2000, seed=2), standard_gaussian(3), np.ones(3))
    assert res.acceptance_rate >= 0.999


def test_hmc_ks_one_dimensional():
    res = hmc_chain(HmcConfig(0.15, 10, 500, 50_000, seed=3), standard_gaussian(1), np.zeros(1))
    thinned = res.samples[::5, 0]
    assert len(thinned) == 10_000
    assert stats.kstest(thinned, "norm").pvalue > 0.001


def test_hmc_nonfinite_proposal_is_rejected():
    # a huge step makes the Gaussian energy overflow; those moves must be rejected, not crash
    res = hmc_chain(HmcConfig(1e150, 3, 0, 20, seed=4), standard_gaussian(1), np.zeros(1))
    assert res.acceptance_rate == 0.0
    assert np.all(res.samples == 0.0)


def _kou20_chain(seed, n_samples):
    g = kou20()
    init = RngStream(seed).child(6, 0).generator().standard_normal(2)
    return g, init, hmc_chain(HmcConfig(0.05, 10, 1000, n_samples, seed=seed), g, init)


def _modes_visited(g, samples):
    d = np.linalg.norm(samples[:, None] - g.means[None], axis=2)
    return set(d.argmin(1)[d.min(1) <= 0.3].tolist())


def test_hmc_kou20_trapped():
    rates = []
    for seed in range(8):
        g, _, res = _kou20_chain(seed, 2000)
        rates.append(res.acceptance_rate)
        assert len(_modes_visited(g, res.samples)) <= 3
    assert 0.90 <= np.median(rates) <= 1.0


def test_hmc_kou20_can_freeze_at_start():
    # from this start every trajectory overshoots badly; the chain never moves
    g, init, res = _kou20_chain(0, 500)
    assert res.acceptance_rate == 0.0
    np.testing.assert_array_equal(res.samples, np.tile(init, (500, 1)))


def test_mc_ode_gaussian_weights_constant():
    g = GaussianMixture(np.zeros((1, 3)), 1.0)
    z, lw = mc_ode_proposals(g, 100, RngStream(5))
    np.testing.assert_allclose(lw, 0.0, atol=1e-12)
    x = np.array([[0.3, -0.2, 1.0]])
    a, c = S.velocity_coeffs(0.5)
    expected = a * x + c * weighted_conditional_mean(S, 0.5, x, z, np.full(100, -np.log(100)))
    np.testing.assert_allclose(mc_ode_velocity(S, 0.5, x, g, 100, RngStream(5)), expected, rtol=1e-12)


def test_mc_ode_velocity_bimodal_1d():
    g = GaussianMixture([[-1.5], [1.5]], [0.5, 0.5])
    t = 0.5
    probes = np.array([[-1.0], [0.1], [0.8]])
    exact = g.exact_velocity(S, t, probes)
    ests = np.array([mc_ode_velocity(S, t, probes, g, 100_000, RngStream(6, (b,))) for b in range(20)])
    se = ests.std(0, ddof=1)
    # single-replicate estimate against the spread of independent replicates
    assert np.all(np.abs(ests[0] - exact) < 4 * se + 1e-9)
    assert np.all(np.abs(ests.mean(0) - exact) < 4 * se / np.sqrt(20) + 1e-9)


def test_run_mc_ode_standard_gaussian():
    g = standard_gaussian(2)
    out = run_mc_ode(FlowConfig(M=50, N=4000), g, 2000, RngStream(7))
    x = out.samples
    # Föllmer: alpha^2 + beta^2 = 1, so the interpolant marginal is N(0, I) at every t
    assert np.all(np.abs(x.mean(0)) < 4 / np.sqrt(len(x)))
    np.testing.assert_allclose(x.var(0), 1.0, rtol=0.1)
    assert not out.degenerate
    assert len(out.proposal_ess) == 50
