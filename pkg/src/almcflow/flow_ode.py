"""Probability-flow ODE driven by an importance-weighted velocity estimate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import STREAM_FLOW_INIT, Ensemble, RngStream, normalize_log_weights
from .interpolant import InterpolantSchedule


class VelocityDegeneracyError(FloatingPointError):
    """Every kernel responsibility underflowed, so the velocity ratio is 0/0."""

    def __init__(self, message, t=None, norm=None, step=None, particle=None):
        super().__init__(message)
        self.t = t
        self.norm = norm
        self.step = step
        self.particle = particle


@dataclass
class FlowConfig:
    schedule: InterpolantSchedule = field(default_factory=InterpolantSchedule)
    M: int = 100
    N: int = 1000
    epsilon: float = 1e-2
    T0: float | None = None
    T_end: float | None = None

    def __post_init__(self):
        self.schedule = InterpolantSchedule(self.schedule)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.T0 is None:
            self.T0 = self.epsilon
        if self.T_end is None:
            self.T_end = 1.0 - self.epsilon
        if not 0.0 < self.T0 < self.T_end < 1.0:
            raise ValueError(f"need 0 < T0 < T_end < 1, got {self.T0}, {self.T_end}")
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be positive")

    @property
    def h(self) -> float:
        return (self.T_end - self.T0) / self.M

    def grid(self) -> np.ndarray:
        return self.T0 + self.h * np.arange(self.M + 1)


def kernel_responsibilities(s: InterpolantSchedule, t, x, particles, log_w, chunk=1024):
    """Normalized ``log g(t, x_j, y_i) + log w_i`` over particles ``i`` for each query ``x_j``.

    Returns an (m, n) array of log-responsibilities. Rows with no finite entry
    are left as ``-inf``; callers decide how to report them.
    """
    alpha, beta, _, _ = s.eval(t)
    y = beta * particles
    y_sq = np.sum(y * y, axis=1)
    scale = 1.0 / (2.0 * alpha * alpha)
    out = np.empty((x.shape[0], particles.shape[0]))
    for lo in range(0, x.shape[0], chunk):
        xs = x[lo : lo + chunk]
        sq = np.sum(xs * xs, axis=1)[:, None] - 2.0 * xs @ y.T + y_sq[None, :]
        np.maximum(sq, 0.0, out=sq)
        logits = log_w[None, :] - scale * sq
        with np.errstate(invalid="ignore"):
            out[lo : lo + chunk] = logits - logsumexp(logits, axis=1, keepdims=True)
    return out


def weighted_conditional_mean(s, t, x, positions, log_w, chunk=1024):
    """Importance-weighted estimate of ``E[x1 | x_t = x]`` for each row of ``x``.

    Raises :class:`VelocityDegeneracyError` when every responsibility of a
    query point underflows.
    """
    alpha, beta, _, _ = s.eval(t)
    y = beta * positions
    y_sq = np.sum(y * y, axis=1)
    scale = 1.0 / (2.0 * alpha * alpha)
    out = np.empty_like(x)
    for lo in range(0, x.shape[0], chunk):
        xs = x[lo : lo + chunk]
        with np.errstate(over="ignore", invalid="ignore"):
            sq = np.sum(xs * xs, axis=1)[:, None] - 2.0 * xs @ y.T + y_sq[None, :]
            np.maximum(sq, 0.0, out=sq)
            logits = log_w[None, :] - scale * sq
            norm = logsumexp(logits, axis=1, keepdims=True)
        bad = ~np.isfinite(norm[:, 0])
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise VelocityDegeneracyError(
                f"velocity estimate degenerate at t={t:.6g}, |x|={np.linalg.norm(xs[j]):.6g}",
                t=float(t),
                norm=float(np.linalg.norm(xs[j])),
                particle=lo + j,
            )
        resp = np.exp(logits - norm)
        out[lo : lo + chunk] = resp @ positions
    return out


def estimate_velocity(s, t, x, particles: Ensemble):
    """``v_hat(t, x) = (alpha'/alpha) x + c(t) sum_i r_i x_i`` with ``r_i ∝ g(t, x, x_i) w_i``."""
    s = InterpolantSchedule(s)
    a, c = s.velocity_coeffs(t)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    cond = weighted_conditional_mean(s, t, xb, particles.positions, particles.log_weights)
    v = a * xb + c * cond
    return v[0] if single else v


def euler_flow(cfg: FlowConfig, x0, velocity):
    """Euler integration of ``dx/dt = velocity(t, x)`` on the grid ``t_m = T0 + m h``.

    ``velocity(t, x)`` acts on the full (N, d) batch; degeneracy errors are
    tagged with the step index before being re-raised.
    """
    x = np.array(x0, dtype=float, copy=True)
    h = cfg.h
    for m, t in enumerate(cfg.grid()[:-1]):
        try:
            v = velocity(t, x)
        except VelocityDegeneracyError as err:
            err.step = m
            raise
        x = x + h * v
    return x


def run_flow(cfg: FlowConfig, particles: Ensemble, rng: RngStream, velocity=None):
    """Transport ``N`` fresh N(0, I) draws along the estimated flow; returns (N, d) samples.

    ``velocity`` may replace the particle estimator (e.g. with an exact field).
    """
    d = particles.d
    x0 = rng.child(STREAM_FLOW_INIT).generator().standard_normal((cfg.N, d))
    if velocity is None:
        pos = particles.positions
        log_w = normalize_log_weights(particles.log_weights)
        s = cfg.schedule

        def velocity(t, x):
            a, c = s.velocity_coeffs(t)
            return a * x + c * weighted_conditional_mean(s, t, x, pos, log_w)

    return euler_flow(cfg, x0, velocity)
