"""Annealed unadjusted Langevin particles with importance weights.

The chain runs ULA under the geometric path
``pi_k ∝ N(0, I)^(1 - lambda_k) * rho^lambda_k``, i.e. potentials
``V_k(x) = (1 - lambda_k) |x|^2 / 2 - lambda_k log rho(x)``. Particles carry
either Jarzynski path weights (reverse-ULA backward kernel) or marginal
weights ``exp(-V_k) / p_hat_k`` built from a kernel estimate of the forward
density, and are resampled whenever the ESS drops below a threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import (
    STREAM_INIT,
    STREAM_RESAMPLE,
    STREAM_SUBSAMPLE,
    STREAM_ULA,
    DegenerateWeightsError,
    Ensemble,
    NumericalError,
    RngStream,
    ess,
    systematic_counts,
    normalized_weights,
)
from .target import TargetModel

log = logging.getLogger(__name__)

# n * m above which marginal weights are only refreshed every `weight_stride` steps
MARGINAL_FULL_BUDGET = 10**7


@dataclass(frozen=True)
class AnnealPath:
    """Step sizes ``deltas[k-1] = delta_k`` (k = 1..K) and fractions ``lambdas[k] = lambda_k``."""

    deltas: np.ndarray
    lambdas: np.ndarray
    schedule_kind: str = "linear"

    def __post_init__(self):
        deltas = np.asarray(self.deltas, dtype=float)
        lambdas = np.asarray(self.lambdas, dtype=float)
        if deltas.ndim != 1 or deltas.size < 1:
            raise ValueError("need at least one annealing step")
        if lambdas.shape != (deltas.size + 1,):
            raise ValueError(f"expected {deltas.size + 1} lambdas, got {lambdas.shape}")
        if np.any(deltas <= 0) or not np.all(np.isfinite(deltas)):
            raise ValueError("step sizes must be positive")
        if lambdas[0] != 0.0 or lambdas[-1] > 1.0 or np.any(np.diff(lambdas) < 0) or lambdas.min() < 0:
            raise ValueError("lambdas must start at 0, be nondecreasing and stay <= 1")
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "lambdas", lambdas)

    @property
    def K(self) -> int:
        return self.deltas.size

    def delta(self, k: int) -> float:
        self._check_step(k)
        return float(self.deltas[k - 1])

    def lam(self, k: int) -> float:
        if not 0 <= k <= self.K:
            raise ValueError(f"step {k} outside [0, {self.K}]")
        return float(self.lambdas[k])

    def _check_step(self, k):
        if not 1 <= k <= self.K:
            raise ValueError(f"transition index {k} outside [1, {self.K}]")

    @staticmethod
    def _linear_deltas(K, start, end):
        if K == 1:
            return np.array([float(start)])
        return np.linspace(start, end, K)

    @classmethod
    def linear(cls, K: int, delta_start: float, delta_end: float | None = None, lambda_end: float = 1.0):
        """Linear ramps: ``lambda_k = lambda_end * k / K``, deltas linear from start to end."""
        delta_end = delta_start if delta_end is None else delta_end
        lambdas = lambda_end * np.arange(K + 1) / K
        return cls(cls._linear_deltas(K, delta_start, delta_end), lambdas, "linear")

    @classmethod
    def exp_saturating(cls, K: int, rate: float, delta_start: float, delta_end: float | None = None):
        """``lambda(t) = 1 - exp(-rate t)`` on ``t_k = k / K``; the last value is clamped to 1."""
        delta_end = delta_start if delta_end is None else delta_end
        t = np.arange(K + 1) / K
        lambdas = 1.0 - np.exp(-rate * t)
        lambdas[-1] = 1.0
        return cls(cls._linear_deltas(K, delta_start, delta_end), lambdas, f"exp_saturating({rate:g})")

    @classmethod
    def static(cls, K: int, delta: float, lam: float):
        """Constant potential after an initial jump to ``lam`` (used by identity checks)."""
        lambdas = np.full(K + 1, float(lam))
        lambdas[0] = 0.0
        return cls(np.full(K, float(delta)), lambdas, "static")


@dataclass(frozen=True)
class Jarzynski:
    name = "jarzynski"


@dataclass(frozen=True)
class Marginal:
    """Optimal-marginal weights from an ``m``-particle forward-density estimate."""

    m: int = 2048
    name = "marginal"


def parse_weight_mode(spec, n=None):
    if isinstance(spec, (Jarzynski, Marginal)):
        return spec
    text = str(spec).strip().lower()
    if text == "jarzynski":
        return Jarzynski()
    if text.startswith("marginal"):
        m = 2048
        if ":" in text:
            m = int(text.split(":", 1)[1])
        if n is not None:
            m = min(m, n)
        return Marginal(m)
    raise ValueError(f"unknown weight mode {spec!r}")


def _batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _check_finite(arr, what, step=None):
    bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        where = f" at step {step}" if step is not None else ""
        raise NumericalError(f"non-finite {what} for particle {i}{where}", particle=i, step=step)


def _drift_from_grad(lam, x, grad_logp):
    return (1.0 - lam) * x - lam * grad_logp


def annealed_grad(path: AnnealPath, k: int, target: TargetModel, x):
    """``grad V_k(x) = (1 - lambda_k) x - lambda_k grad log rho(x)``."""
    xb, single = _batch(x)
    lam = path.lam(k)
    if lam == 0.0:
        out = xb.copy()
    else:
        g = target.grad_log_density(xb)
        _check_finite(g, "target gradient")
        out = _drift_from_grad(lam, xb, g)
    return out[0] if single else out


def annealed_potential(path: AnnealPath, k: int, target: TargetModel, x):
    """``V_k(x) = (1 - lambda_k) |x|^2 / 2 - lambda_k log rho(x)``."""
    xb, single = _batch(x)
    lam = path.lam(k)
    out = 0.5 * (1.0 - lam) * np.sum(xb * xb, axis=1)
    if lam != 0.0:
        out = out - lam * target.log_density(xb)
    return float(out[0]) if single else out


def ula_step(path: AnnealPath, k: int, target: TargetModel, e: Ensemble, rng: RngStream | None = None, noise=None):
    """One Euler–Maruyama move ``x - delta_k grad V_k(x) + sqrt(2 delta_k) eps``.

    ``noise`` overrides the Gaussian draws (pass zeros for the deterministic drift).
    """
    delta = path.delta(k)
    if noise is None:
        noise = rng.generator().standard_normal(e.positions.shape)
    x = e.positions - delta * annealed_grad(path, k, target, e.positions) + np.sqrt(2.0 * delta) * noise
    _check_finite(x, "position", step=k)
    return Ensemble(x, e.log_weights, e.step_index + 1)


def _log_gauss_transition(delta, mean, x_next):
    d = x_next.shape[-1]
    diff = x_next - mean
    return -np.sum(diff * diff, axis=-1) / (4.0 * delta) - 0.5 * d * np.log(4.0 * np.pi * delta)


def log_transition_density(path: AnnealPath, k: int, target: TargetModel, x_prev, x_next):
    """Log of the ULA kernel ``N(x_next; x_prev - delta_k grad V_k(x_prev), 2 delta_k I)``."""
    xp, single_prev = _batch(x_prev)
    xn, single_next = _batch(x_next)
    delta = path.delta(k)
    mean = xp - delta * annealed_grad(path, k, target, xp)
    out = _log_gauss_transition(delta, mean, xn)
    return float(out[0]) if single_prev and single_next else out


def reference_subsample(n: int, m: int, rng: RngStream | None):
    if not 1 <= m <= n:
        raise ValueError(f"reference size m={m} must lie in [1, {n}]")
    if m == n:
        return np.arange(n)
    if rng is None:
        rng = RngStream(0, (STREAM_SUBSAMPLE,))
    return np.sort(rng.generator().choice(n, size=m, replace=False))


def _log_kernel_mixture(delta, means, x, chunk=2048):
    """``log (1/m) sum_i N(x; means_i, 2 delta I)`` for each row of ``x``."""
    m, d = means.shape
    const = -0.5 * d * np.log(4.0 * np.pi * delta) - np.log(m)
    mean_sq = np.sum(means * means, axis=1)
    out = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], chunk):
        xs = x[lo : lo + chunk]
        sq = np.sum(xs * xs, axis=1)[:, None] - 2.0 * xs @ means.T + mean_sq[None, :]
        np.maximum(sq, 0.0, out=sq)
        out[lo : lo + chunk] = logsumexp(-sq / (4.0 * delta), axis=1) + const
    return out


def log_forward_density_estimate(path, k, target, prev: Ensemble, x, m: int | None = None, rng: RngStream | None = None):
    """Kernel estimate ``log (1/m) sum_i mu_k(x_{k-1}^(i), x)`` of the forward marginal.

    With ``m < n`` a seeded subsample of the previous particles is used.
    """
    xb, single = _batch(x)
    m = prev.n if m is None else m
    idx = reference_subsample(prev.n, m, rng)
    ref = prev.positions[idx]
    delta = path.delta(k)
    means = ref - delta * annealed_grad(path, k, target, ref)
    out = _log_kernel_mixture(delta, means, xb)
    if not np.isfinite(out).all():
        raise NumericalError(f"forward density estimate degenerate at step {k}", step=k)
    return float(out[0]) if single else out


def marginal_log_weights(path, k, target, cur: Ensemble, prev: Ensemble, m: int | None = None, rng=None, log_forward_density=None):
    """``log w = -V_k(x) - log p_hat_k(x)`` for every current particle.

    ``log_forward_density`` replaces the kernel estimate with an exact
    forward marginal when one is available.
    """
    if log_forward_density is None:
        log_p = log_forward_density_estimate(path, k, target, prev, cur.positions, m, rng)
    else:
        log_p = np.asarray(log_forward_density(cur.positions), dtype=float)
    return -annealed_potential(path, k, target, cur.positions) - log_p


def jarzynski_log_weight_update(path, k, target, x_prev, x_next, A_prev):
    """``A_k = A_{k-1} + V_{k-1}(x_{k-1}) - V_k(x_k) + log nu_k(x_k, x_{k-1}) - log mu_k(x_{k-1}, x_k)``.

    The backward kernel ``nu_k`` is the reverse ULA move under the same
    potential. Gaussian normalizers cancel and are skipped.
    """
    xp, single = _batch(x_prev)
    xn, _ = _batch(x_next)
    delta = path.delta(k)
    fwd = xn - xp + delta * annealed_grad(path, k, target, xp)
    bwd = xp - xn + delta * annealed_grad(path, k, target, xn)
    log_ratio = (np.sum(fwd * fwd, axis=1) - np.sum(bwd * bwd, axis=1)) / (4.0 * delta)
    inc = annealed_potential(path, k - 1, target, xp) - annealed_potential(path, k, target, xn) + log_ratio
    out = np.asarray(A_prev, dtype=float) + (inc[0] if single else inc)
    return float(out) if single else out


@dataclass
class AlmcConfig:
    n: int
    path: AnnealPath
    target: TargetModel
    weight_mode: object = field(default_factory=Jarzynski)
    ess_threshold: float | None = None  # defaults to n / 2
    seed: int = 0
    weight_stride: int = 10
    resample_method: str = "systematic"


@dataclass
class AlmcResult:
    ensemble: Ensemble
    diagnostics: list
    log_z: float
    n_resamples: int

    def ess_trace(self):
        return np.array([row["ess"] if row["ess"] is not None else np.nan for row in self.diagnostics])

    def write_diagnostics(self, path):
        with open(path, "w") as fh:
            for row in self.diagnostics:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


class _TargetCache:
    """log rho and grad log rho at the current positions, so each step costs one target call."""

    def __init__(self, target, x):
        self.target = target
        self.update(x)

    def update(self, x):
        both = getattr(self.target, "log_density_and_grad", None)
        if both is not None:
            self.logp, self.grad = both(x)
        else:
            self.logp = self.target.log_density(x)
            self.grad = self.target.grad_log_density(x)

    def take(self, idx):
        self.logp = self.logp[idx]
        self.grad = self.grad[idx]

    def potential(self, lam, x):
        return 0.5 * (1.0 - lam) * np.sum(x * x, axis=1) - lam * self.logp

    def drift(self, lam, x):
        return _drift_from_grad(lam, x, self.grad)


def _resample_indices(lw, gen, method):
    w = normalized_weights(lw)
    n = w.size
    if method == "systematic":
        return np.repeat(np.arange(n), systematic_counts(w, gen.random()))
    if method == "multinomial":
        return np.sort(gen.choice(n, size=n, p=w / w.sum()))
    raise ValueError(f"unknown resampling method {method!r}")


def run_almc(cfg: AlmcConfig) -> AlmcResult:
    """Anneal ``n`` particles from N(0, I) to the target and return the weighted ensemble."""
    path, target, n = cfg.path, cfg.target, int(cfg.n)
    d = target.dim
    mode = parse_weight_mode(cfg.weight_mode, n)
    threshold = n / 2.0 if cfg.ess_threshold is None else float(cfg.ess_threshold)
    if not 1.0 <= threshold <= n:
        raise ValueError(f"ESS threshold {threshold} outside [1, {n}]")
    root = RngStream(cfg.seed)

    x = root.child(STREAM_INIT).generator().standard_normal((n, d))
    cache = _TargetCache(target, x)
    _check_finite(cache.grad, "target gradient", step=0)
    lw = np.zeros(n)
    log_z_acc = 0.0  # log prod of mean weights at past resampling events
    base_lse = np.log(n)  # logsumexp of the weights right after the last reset
    log_z0 = 0.5 * d * np.log(2.0 * np.pi)
    marginal_every = 1
    if isinstance(mode, Marginal) and n * mode.m > MARGINAL_FULL_BUDGET:
        marginal_every = max(1, int(cfg.weight_stride))

    diagnostics = [
        {"step": 0, "ess": float(n), "resampled": False, "lambda": path.lam(0), "delta": None, "log_z_estimate": log_z0}
    ]
    n_resamples = 0
    for k in range(1, path.K + 1):
        lam_prev, lam = path.lam(k - 1), path.lam(k)
        delta = path.delta(k)
        x_prev = x
        drift_prev = cache.drift(lam, x_prev)
        v_prev = cache.potential(lam_prev, x_prev)  # V_{k-1}(x_{k-1})
        eps = root.child(STREAM_ULA, k).generator().standard_normal((n, d))
        x = x_prev - delta * drift_prev + np.sqrt(2.0 * delta) * eps
        _check_finite(x, "position", step=k)
        cache.update(x)
        _check_finite(cache.grad, "target gradient", step=k)

        evaluated = True
        if isinstance(mode, Jarzynski):
            fwd = x - x_prev + delta * drift_prev
            bwd = x_prev - x + delta * cache.drift(lam, x)
            with np.errstate(over="ignore", invalid="ignore"):
                log_ratio = (np.sum(fwd * fwd, axis=1) - np.sum(bwd * bwd, axis=1)) / (4.0 * delta)
                lw = lw + v_prev - cache.potential(lam, x) + log_ratio
            if not np.isfinite(lw).any() or np.isnan(lw).any():
                raise NumericalError(f"Jarzynski weights degenerate at step {k}", step=k)
            log_z = log_z0 + log_z_acc + logsumexp(lw) - base_lse
        elif k % marginal_every == 0 or k == path.K:
            idx = reference_subsample(n, mode.m, root.child(STREAM_SUBSAMPLE, k))
            means = x_prev[idx] - delta * drift_prev[idx]
            log_p = _log_kernel_mixture(delta, means, x)
            lw = -cache.potential(lam, x) - log_p
            if not np.isfinite(lw).any() or np.isnan(lw).any():
                raise NumericalError(f"marginal weights degenerate at step {k}", step=k)
            log_z = float(logsumexp(lw) - np.log(n))
        else:
            evaluated = False
            lw = np.zeros(n)
            log_z = None

        cur_ess = ess(lw) if evaluated else None
        resampled = False
        if evaluated and cur_ess < threshold:
            gen = root.child(STREAM_RESAMPLE, k).generator()
            if isinstance(mode, Jarzynski):
                log_z_acc += logsumexp(lw) - base_lse
            idx = _resample_indices(lw, gen, cfg.resample_method)
            x = x[idx]
            cache.take(idx)
            lw = np.full(n, -np.log(n))
            base_lse = 0.0
            resampled = True
            n_resamples += 1
        diagnostics.append(
            {
                "step": k,
                "ess": cur_ess,
                "resampled": resampled,
                "lambda": lam,
                "delta": delta,
                "log_z_estimate": None if log_z is None else float(log_z),
            }
        )

    final = Ensemble(x, lw, path.K)
    return AlmcResult(final, diagnostics, float(diagnostics[-1]["log_z_estimate"]), n_resamples)
