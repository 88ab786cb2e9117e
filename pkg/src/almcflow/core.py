"""Particle ensembles, log-domain weight arithmetic, ESS and resampling."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

# Stream tags keep the draws of different algorithm phases disjoint.
STREAM_INIT = 0
STREAM_ULA = 1
STREAM_RESAMPLE = 2
STREAM_SUBSAMPLE = 3
STREAM_FLOW_INIT = 4
STREAM_MC_ODE = 5
STREAM_HMC = 6
STREAM_METRICS = 7
STREAM_REFERENCE = 8


class DegenerateWeightsError(ValueError):
    """All weights are zero (or NaN), so nothing can be normalized."""


class NumericalError(FloatingPointError):
    """A particle position or gradient became non-finite."""

    def __init__(self, message, particle=None, step=None):
        super().__init__(message)
        self.particle = particle
        self.step = step


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    ``stream_id`` is a tuple of non-negative ints, e.g. ``(STREAM_ULA, k)``.
    The same key always yields the same draws, independent of how many
    other streams were consumed before it.
    """

    seed: int
    stream_id: tuple = ()

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, tuple(self.stream_id) + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed) % 2**64, spawn_key=tuple(int(k) for k in self.stream_id)
        )
        return np.random.Generator(np.random.PCG64(ss))


def _check_log_weights(lw) -> np.ndarray:
    lw = np.asarray(lw, dtype=float)
    if lw.ndim != 1 or lw.size == 0:
        raise DegenerateWeightsError("log-weights must be a non-empty 1-d array")
    if np.isnan(lw).any():
        raise DegenerateWeightsError("log-weights contain NaN")
    if np.isposinf(lw).any():
        raise DegenerateWeightsError("log-weights contain +inf")
    if not np.isfinite(lw).any():
        raise DegenerateWeightsError("all log-weights are -inf")
    return lw


def normalize_log_weights(lw) -> np.ndarray:
    """Return ``lw - logsumexp(lw)`` so that the weights sum to one."""
    lw = _check_log_weights(lw)
    return lw - logsumexp(lw)


def normalized_weights(lw) -> np.ndarray:
    return np.exp(normalize_log_weights(lw))


def ess(lw) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2`` computed from log-weights."""
    lw = _check_log_weights(lw)
    value = float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))
    # rounding can push the value a hair outside [1, n]
    return min(max(value, 1.0), float(lw.size))


@dataclass(frozen=True)
class Ensemble:
    """Weighted particle cloud: ``positions`` is (n, d), ``log_weights`` is (n,)."""

    positions: np.ndarray
    log_weights: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        lw = np.asarray(self.log_weights, dtype=float)
        if pos.ndim != 2 or pos.shape[0] < 1 or pos.shape[1] < 1:
            raise ValueError(f"positions must be (n, d) with n, d >= 1, got {pos.shape}")
        if lw.shape != (pos.shape[0],):
            raise ValueError(f"log_weights shape {lw.shape} does not match n={pos.shape[0]}")
        bad = ~np.isfinite(pos).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NumericalError(f"non-finite position for particle {i}", particle=i, step=self.step_index)
        _check_log_weights(lw)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "log_weights", lw)
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @classmethod
    def unweighted(cls, positions, step_index: int = 0) -> "Ensemble":
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        return cls(positions, np.zeros(positions.shape[0]), step_index)

    def weights(self) -> np.ndarray:
        return normalized_weights(self.log_weights)

    def ess(self) -> float:
        return ess(self.log_weights)

    def weighted_mean(self) -> np.ndarray:
        return self.weights() @ self.positions

    def with_positions(self, positions, step_index=None) -> "Ensemble":
        return replace(
            self,
            positions=positions,
            step_index=self.step_index if step_index is None else step_index,
        )

    def with_log_weights(self, log_weights) -> "Ensemble":
        return replace(self, log_weights=log_weights)


def systematic_counts(weights: np.ndarray, u: float) -> np.ndarray:
    """Copy counts of systematic resampling with offset ``u`` in [0, 1)."""
    n = weights.size
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    points = (np.arange(n) + u) / n
    idx = np.searchsorted(cdf, points, side="right")
    return np.bincount(np.minimum(idx, n - 1), minlength=n)


def resample(e: Ensemble, rng: RngStream, method: str = "systematic") -> Ensemble:
    """Draw ``n`` particles proportionally to their weights; reset weights to ``1/n``.

    ``method`` is ``"systematic"`` (one uniform offset) or ``"multinomial"``.
    """
    w = e.weights()
    n = e.n
    gen = rng.generator()
    if method == "systematic":
        counts = systematic_counts(w, gen.random())
        idx = np.repeat(np.arange(n), counts)
    elif method == "multinomial":
        idx = np.sort(gen.choice(n, size=n, p=w / w.sum()))
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    return Ensemble(e.positions[idx], np.full(n, -np.log(n)), e.step_index)


def save_ensemble(e: Ensemble, path, seed=None) -> None:
    """Write ``<path>`` as CSV plus a ``<path>.json`` sidecar with ``{n, d, step_index, seed}``."""
    path = Path(path)
    header = ["particle"] + [f"coord_{j}" for j in range(e.d)] + ["log_weight"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(e.n):
            writer.writerow([i] + [repr(float(v)) for v in e.positions[i]] + [repr(float(e.log_weights[i]))])
    meta = {"n": e.n, "d": e.d, "step_index": int(e.step_index), "seed": seed}
    path.with_name(path.name + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_ensemble(path) -> Ensemble:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 2
    data = np.array([[float(v) for v in row[1:]] for row in body])
    meta_path = path.with_name(path.name + ".json")
    step = 0
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        step = int(meta.get("step_index", 0))
        if meta.get("d") not in (None, d) or meta.get("n") not in (None, len(body)):
            raise ValueError(f"sidecar {meta_path} disagrees with CSV shape")
    return Ensemble(data[:, :d].reshape(len(body), d), data[:, d], step)


def save_samples(samples, path, seed=None, step_index: int = 0) -> None:
    """Unweighted samples in the ensemble CSV format (all log-weights zero)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    save_ensemble(Ensemble.unweighted(samples, step_index), path, seed=seed)
