"""Comparison samplers: single-chain HMC and the Gaussian-proposal Monte Carlo ODE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import STREAM_FLOW_INIT, STREAM_HMC, STREAM_MC_ODE, RngStream, ess
from .flow_ode import FlowConfig, euler_flow, weighted_conditional_mean
from .interpolant import InterpolantSchedule

# proposal-weight ESS below this marks the MC-ODE run as degenerate
DEGENERATE_ESS = 5.0


@dataclass
class HmcConfig:
    step_size: float = 0.05
    leapfrog_steps: int = 10
    burn_in: int = 1000
    n_samples: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0 or self.leapfrog_steps < 1:
            raise ValueError("HMC needs step_size > 0 and leapfrog_steps >= 1")
        if self.burn_in < 0 or self.n_samples < 1:
            raise ValueError("burn_in must be >= 0 and n_samples >= 1")


@dataclass
class HmcResult:
    samples: np.ndarray
    acceptance_rate: float
    burn_in_acceptance_rate: float


def leapfrog(grad_log_density, q, p, step_size, n_steps):
    """``n_steps`` velocity-Verlet steps for ``H(q, p) = -log rho(q) + |p|^2 / 2``."""
    q = np.array(q, dtype=float, copy=True)
    p = np.array(p, dtype=float, copy=True)
    p += 0.5 * step_size * grad_log_density(q)
    for i in range(n_steps):
        q += step_size * p
        if i < n_steps - 1:
            p += step_size * grad_log_density(q)
    p += 0.5 * step_size * grad_log_density(q)
    return q, p


def hmc_chain(cfg: HmcConfig, target, init) -> HmcResult:
    """Plain HMC (identity mass matrix); a non-finite Hamiltonian counts as a rejection."""
    gen = RngStream(cfg.seed, (STREAM_HMC,)).generator()
    q = np.asarray(init, dtype=float).copy()
    d = q.size

    def grad(x):
        return target.grad_log_density(x)

    logp = target.log_density(q)
    total = cfg.burn_in + cfg.n_samples
    samples = np.empty((cfg.n_samples, d))
    accepted = np.zeros(total, dtype=bool)
    for it in range(total):
        p0 = gen.standard_normal(d)
        log_u = np.log(gen.random())
        with np.errstate(over="ignore", invalid="ignore"):
            q1, p1 = leapfrog(grad, q, p0, cfg.step_size, cfg.leapfrog_steps)
            logp1 = target.log_density(q1) if np.all(np.isfinite(q1)) else -np.inf
            h0 = -logp + 0.5 * p0 @ p0
            h1 = -logp1 + 0.5 * p1 @ p1
        if np.isfinite(h1) and log_u < h0 - h1:
            q, logp = q1, logp1
            accepted[it] = True
        if it >= cfg.burn_in:
            samples[it - cfg.burn_in] = q
    burn = accepted[: cfg.burn_in]
    return HmcResult(
        samples,
        float(accepted[cfg.burn_in :].mean()),
        float(burn.mean()) if burn.size else float("nan"),
    )


def _std_normal_logpdf(z):
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * np.log(2.0 * np.pi)


def mc_ode_proposals(target, n_mc, rng: RngStream):
    """Fresh N(0, I) proposals with log-weights ``log rho(z) - log phi(z)``."""
    z = rng.generator().standard_normal((n_mc, target.dim))
    return z, target.log_density(z) - _std_normal_logpdf(z)


def mc_ode_velocity(s, t, x, target, n_mc, rng: RngStream):
    """Velocity estimate from ``n_mc`` Gaussian proposals importance-weighted toward the target."""
    s = InterpolantSchedule(s)
    a, c = s.velocity_coeffs(t)
    z, log_w = mc_ode_proposals(target, n_mc, rng)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    v = a * xb + c * weighted_conditional_mean(s, t, xb, z, log_w - logsumexp(log_w), chunk=512)
    return v[0] if single else v


@dataclass
class McOdeResult:
    samples: np.ndarray
    proposal_ess: np.ndarray = field(repr=False)

    @property
    def min_proposal_ess(self) -> float:
        return float(self.proposal_ess.min())

    @property
    def degenerate(self) -> bool:
        return self.min_proposal_ess < DEGENERATE_ESS


def run_mc_ode(cfg: FlowConfig, target, n_mc, rng: RngStream) -> McOdeResult:
    """Euler flow where every step draws ``n_mc`` new proposals for the velocity."""
    s = cfg.schedule
    x0 = rng.child(STREAM_FLOW_INIT).generator().standard_normal((cfg.N, target.dim))
    ess_trace = []
    step = iter(range(cfg.M))

    def velocity(t, x):
        m = next(step)
        z, log_w = mc_ode_proposals(target, n_mc, rng.child(STREAM_MC_ODE, m))
        log_w = log_w - logsumexp(log_w)
        ess_trace.append(ess(log_w))
        a, c = s.velocity_coeffs(t)
        return a * x + c * weighted_conditional_mean(s, t, x, z, log_w, chunk=512)

    samples = euler_flow(cfg, x0, velocity)
    return McOdeResult(samples, np.array(ess_trace))
