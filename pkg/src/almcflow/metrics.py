"""Sample-quality metrics: moment errors, energy distance, MMD, sliced Wasserstein, KSD."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .core import NumericalError, RngStream

# Conventions recorded alongside every report.
CONVENTIONS = {
    "energy_distance": "V-statistic, Euclidean",
    "mmd_rbf": "biased V-statistic, sqrt of clamped MMD^2, median heuristic on pooled sample (<=4096 pts)",
    "sliced_wasserstein": "Wasserstein-1 between projected empirical laws",
    "ksd": "IMQ kernel (1 + |x - y|^2)^(-1/2); u = off-diagonal mean, v = full mean",
}


class BandwidthError(ValueError):
    """Pooled sample has zero median distance, so the RBF bandwidth is undefined."""


def _pair(X, Y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.size == 0 or Y.size == 0:
        raise ValueError("empty sample")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return X, Y


def _canonical(X):
    return X[np.lexsort(X.T[::-1])]


def _canonical_pair(X, Y):
    """Rows sorted and the pair put in a fixed order, so sums do not depend on
    sample order or on which argument came first."""
    X, Y = _canonical(X), _canonical(Y)
    if (len(X), X.tobytes()) > (len(Y), Y.tobytes()):
        X, Y = Y, X
    return X, Y


def l2_moment_errors(X, Y):
    """``(|mean X - mean Y|, ||E_X[x x^T] - E_Y[y y^T]||_F)``."""
    X, Y = _pair(X, Y)
    X, Y = _canonical(X), _canonical(Y)
    mean_err = float(np.linalg.norm(X.mean(0) - Y.mean(0)))
    second = X.T @ X / len(X) - Y.T @ Y / len(Y)
    return mean_err, float(np.linalg.norm(second))


def _mean_cross_distance(X, Y, chunk=2048):
    total = 0.0
    for lo in range(0, len(X), chunk):
        total += cdist(X[lo : lo + chunk], Y).sum()
    return total / (len(X) * len(Y))


def _mean_self_distance(X):
    # pdist covers i < j; the V-statistic counts both orders and the zero diagonal
    return 2.0 * pdist(X).sum() / (len(X) ** 2) if len(X) > 1 else 0.0


def energy_distance(X, Y):
    """``2 E|x - y| - E|x - x'| - E|y - y'|`` (V-statistic)."""
    X, Y = _canonical_pair(*_pair(X, Y))
    value = 2.0 * _mean_cross_distance(X, Y) - _mean_self_distance(X) - _mean_self_distance(Y)
    return max(value, 0.0)


def median_bandwidth(X, Y, max_points=4096):
    """Median pairwise distance over the pooled sample (deterministic thinning above ``max_points``)."""
    Z = np.concatenate([X, Y])
    if len(Z) > max_points:
        Z = Z[np.linspace(0, len(Z) - 1, max_points).astype(int)]
    h = float(np.median(pdist(Z)))
    if not h > 0:
        raise BandwidthError("all pooled points coincide; median bandwidth is zero")
    return h


def _rbf_mean(X, Y, h, chunk=2048):
    total = 0.0
    for lo in range(0, len(X), chunk):
        sq = cdist(X[lo : lo + chunk], Y, "sqeuclidean")
        total += np.exp(-sq / (2.0 * h * h)).sum()
    return total / (len(X) * len(Y))


def mmd_rbf(X, Y, bandwidth=None):
    """Biased MMD with ``k(a, b) = exp(-|a - b|^2 / (2 h^2))``, ``h`` from the median heuristic."""
    X, Y = _canonical_pair(*_pair(X, Y))
    h = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    mmd2 = _rbf_mean(X, X, h) + _rbf_mean(Y, Y, h) - 2.0 * _rbf_mean(X, Y, h)
    return math.sqrt(max(mmd2, 0.0))


def wasserstein1_1d(a, b):
    """W1 between two 1-d empirical laws via the quantile coupling."""
    a = np.sort(a)
    b = np.sort(b)
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    # integrate |F_a^{-1}(q) - F_b^{-1}(q)| over the merged quantile grid
    qa = np.arange(1, len(a) + 1) / len(a)
    qb = np.arange(1, len(b) + 1) / len(b)
    q = np.union1d(qa, qb)
    widths = np.diff(np.concatenate([[0.0], q]))
    ia = np.minimum(np.searchsorted(qa, q, side="left"), len(a) - 1)
    ib = np.minimum(np.searchsorted(qb, q, side="left"), len(b) - 1)
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))


def random_directions(d, n_proj, rng: RngStream):
    theta = rng.generator().standard_normal((n_proj, d))
    return theta / np.linalg.norm(theta, axis=1, keepdims=True)


def sliced_wasserstein(X, Y, n_proj=200, rng: RngStream | None = None, directions=None):
    """Mean W1 between projections of X and Y onto ``n_proj`` uniform unit directions."""
    X, Y = _pair(X, Y)
    if directions is None:
        if n_proj < 1:
            raise ValueError("n_proj must be >= 1")
        directions = random_directions(X.shape[1], n_proj, rng if rng is not None else RngStream(0))
    X, Y = _canonical_pair(X, Y)
    px = X @ directions.T
    py = Y @ directions.T
    if len(X) == len(Y):
        return float(np.mean(np.abs(np.sort(px, axis=0) - np.sort(py, axis=0))))
    return float(np.mean([wasserstein1_1d(px[:, j], py[:, j]) for j in range(len(directions))]))


def imq_stein_matrix(X, scores, Y=None, scores_y=None):
    """Stein kernel block ``u_p(x_i, y_j)`` for the IMQ kernel ``(1 + r^2)^(-1/2)``.

    With ``Y`` omitted the block is square over ``X`` itself.
    """
    if Y is None:
        Y, scores_y = X, scores
    d = X.shape[1]
    r2 = np.maximum(np.sum(X * X, axis=1)[:, None] + np.sum(Y * Y, axis=1)[None, :] - 2.0 * X @ Y.T, 0.0)
    if Y is X:
        np.fill_diagonal(r2, 0.0)
    base = 1.0 + r2
    k = base**-0.5
    k3 = base**-1.5
    k5 = base**-2.5
    # s(x)^T (x - y) and s(y)^T (y - x)
    sx_diff = np.sum(scores * X, axis=1)[:, None] - scores @ Y.T
    sy_diff = np.sum(scores_y * Y, axis=1)[None, :] - X @ scores_y.T
    # grad_y k = (x - y) k^3, grad_x k = -(x - y) k^3
    return (scores @ scores_y.T) * k + (sx_diff + sy_diff) * k3 + d * k3 - 3.0 * r2 * k5


def ksd_imq(X, target, chunk=1024):
    """``(u_stat, v_stat)`` of the kernelized Stein discrepancy with the IMQ kernel."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m = len(X)
    if m < 2:
        raise ValueError("KSD needs at least two samples")
    scores = np.asarray(target.grad_log_density(X), dtype=float)
    bad = ~np.isfinite(scores).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"non-finite score at sample {i}", particle=i)
    order = np.lexsort(X.T[::-1])
    X, scores = X[order], scores[order]
    # on the diagonal r = 0, so u_p(x, x) = |s(x)|^2 + d
    diag = np.sum(scores * scores, axis=1) + X.shape[1]
    total = 0.0
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        block = imq_stein_matrix(X[lo:hi], scores[lo:hi], X, scores)
        idx = np.arange(hi - lo)
        block[idx, lo + idx] = diag[lo:hi]
        total += block.sum()
    return float((total - diag.sum()) / (m * (m - 1))), float(total / (m * m))


@dataclass
class MetricReport:
    mean_err: float | None = None
    second_moment_err: float | None = None
    energy_distance: float | None = None
    mmd_rbf: float | None = None
    sliced_wasserstein: float | None = None
    ksd_u: float | None = None
    ksd_v: float | None = None
    acceptance_rate: float | None = None
    runtime_seconds: float = 0.0
    undefined: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def to_dict(self):
        return asdict(self)


def compare_samples(X, Y, rng: RngStream, n_proj=200):
    """The five two-sample metrics as a dict.

    MMD is ``None`` when the median bandwidth is zero (e.g. a chain that never
    moved makes up most of the pooled sample).
    """
    mean_err, second_err = l2_moment_errors(X, Y)
    try:
        mmd = mmd_rbf(X, Y)
    except BandwidthError:
        mmd = None
    return {
        "mean_err": mean_err,
        "second_moment_err": second_err,
        "energy_distance": energy_distance(X, Y),
        "mmd_rbf": mmd,
        "sliced_wasserstein": sliced_wasserstein(X, Y, n_proj, rng),
    }
