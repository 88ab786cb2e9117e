"""Target densities: Gaussian mixtures and the discretized Allen–Cahn field."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp, softmax

from .interpolant import InterpolantSchedule

# Means of the 20-component benchmark mixture, mu_i = (x_i, y_i).
KOU20_MEANS = np.array(
    [
        [2.18, 5.76], [8.67, 9.59], [4.24, 8.48], [8.41, 1.68], [3.93, 8.82],
        [3.25, 3.47], [1.70, 0.50], [4.59, 5.60], [6.91, 5.81], [6.87, 5.40],
        [5.41, 2.65], [2.70, 7.88], [4.98, 3.70], [1.14, 2.39], [8.33, 9.50],
        [4.93, 1.50], [1.83, 0.09], [2.26, 0.31], [5.54, 6.86], [1.69, 8.11],
    ]
)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x2, single


class TargetModel:
    """Unnormalized log-density with gradient.

    Subclasses implement the batched ``_log_density`` / ``_grad`` on (m, d)
    arrays; the public methods also accept a single d-vector.
    """

    dim: int

    def log_density(self, x):
        x2, single = _as_batch(x, self.dim)
        out = self._log_density(x2)
        return float(out[0]) if single else out

    def grad_log_density(self, x):
        x2, single = _as_batch(x, self.dim)
        out = self._grad(x2)
        return out[0] if single else out

    def log_density_and_grad(self, x):
        """Both quantities for an (m, d) batch; subclasses may share work."""
        return self._log_density(x), self._grad(x)

    # alias used by callers that want the unnormalized form explicitly
    def log_density_unnorm(self, x):
        return self.log_density(x)

    def _log_density(self, x):
        raise NotImplementedError

    def _grad(self, x):
        raise NotImplementedError


class GaussianMixture(TargetModel):
    """Isotropic Gaussian mixture; ``log_density`` is exactly normalized."""

    def __init__(self, means, sigmas, weights=None):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        n_comp, dim = means.shape
        sigmas = np.broadcast_to(np.asarray(sigmas, dtype=float), (n_comp,)).copy()
        if weights is None:
            weights = np.full(n_comp, 1.0 / n_comp)
        weights = np.broadcast_to(np.asarray(weights, dtype=float), (n_comp,)).copy()
        if np.any(sigmas <= 0):
            raise ValueError("mixture sigmas must be positive")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        self.means = means
        self.sigmas = sigmas
        self.weights = weights
        self.dim = dim

    def __repr__(self):
        return f"GaussianMixture(components={len(self.weights)}, dim={self.dim})"

    @property
    def n_components(self):
        return len(self.weights)

    def component_log_joint(self, x):
        """``log w_i + log N(x; mu_i, sigma_i^2 I)`` as an (m, I) array."""
        diff = x[:, None, :] - self.means[None, :, :]
        sq = np.einsum("mid,mid->mi", diff, diff)
        var = self.sigmas**2
        return np.log(self.weights) - 0.5 * sq / var - 0.5 * self.dim * np.log(2.0 * np.pi * var)

    def _log_density(self, x):
        return logsumexp(self.component_log_joint(x), axis=1)

    def _grad(self, x):
        resp = softmax(self.component_log_joint(x), axis=1)
        scaled = resp / self.sigmas**2
        return scaled @ self.means - scaled.sum(axis=1, keepdims=True) * x

    def log_density_and_grad(self, x):
        joint = self.component_log_joint(x)
        logp = logsumexp(joint, axis=1)
        scaled = np.exp(joint - logp[:, None]) / self.sigmas**2
        return logp, scaled @ self.means - scaled.sum(axis=1, keepdims=True) * x

    def sample(self, m, rng):
        """``m`` exact draws; ``rng`` is a ``numpy.random.Generator``."""
        comp = rng.choice(self.n_components, size=m, p=self.weights)
        noise = rng.standard_normal((m, self.dim))
        return self.means[comp] + self.sigmas[comp, None] * noise

    def exact_velocity(self, s, t, x):
        """Closed-form velocity field of the interpolant flow toward this mixture."""
        s = InterpolantSchedule(s)
        a, c = s.velocity_coeffs(t)
        alpha, beta, _, _ = s.eval(t)
        x2, single = _as_batch(x, self.dim)
        var_i = beta**2 * self.sigmas**2 + alpha**2
        diff = x2[:, None, :] - beta * self.means[None, :, :]
        sq = np.einsum("mid,mid->mi", diff, diff)
        log_r = np.log(self.weights) - 0.5 * sq / var_i - 0.5 * self.dim * np.log(var_i)
        resp = softmax(log_r, axis=1)
        # posterior mean of x1 within component i
        post = (beta * self.sigmas[None, :, None] ** 2 * x2[:, None, :] + alpha**2 * self.means[None]) / var_i[None, :, None]
        cond_mean = np.einsum("mi,mid->md", resp, post)
        v = a * x2 + c * cond_mean
        return v[0] if single else v


def gmm_log_density(g: GaussianMixture, x):
    return g.log_density(x)


def gmm_sample_exact(g: GaussianMixture, m: int, rng):
    return g.sample(m, rng)


def gmm_exact_velocity(g: GaussianMixture, s, t, x):
    return g.exact_velocity(s, t, x)


def kou20() -> GaussianMixture:
    """20-component 2-d benchmark mixture, sigma = 0.1, equal weights."""
    return GaussianMixture(KOU20_MEANS, 0.1, np.full(20, 0.05))


def gmm100d5(dim: int = 100) -> GaussianMixture:
    """Five well-separated modes in the first two coordinates; variance 0.1."""
    corners = np.array([[10, 10], [15, 15], [5, 15], [15, 5], [5, 5]], dtype=float)
    means = np.zeros((5, dim))
    means[:, :2] = corners
    return GaussianMixture(means, np.sqrt(0.1), np.full(5, 0.2))


def standard_gaussian(dim: int) -> GaussianMixture:
    return GaussianMixture(np.zeros((1, dim)), 1.0, [1.0])


class AllenCahn1D(TargetModel):
    """Discretized Allen–Cahn Gibbs density with zero Dirichlet boundaries.

    log mu(x) = -beta * ( a / (2 ds) * sum_{i=1}^{d+1} (x_i - x_{i-1})^2
                          + b ds / 4 * sum_{i=1}^{d} (1 - x_i^2)^2 ),  ds = 1/d,
    with x_0 = x_{d+1} = 0. Unnormalized.
    """

    def __init__(self, d: int = 64, a: float = 0.1, b: float = 10.0, beta: float = 20.0):
        if d < 1 or a <= 0 or b <= 0 or beta <= 0:
            raise ValueError("Allen-Cahn needs d >= 1 and positive a, b, beta")
        self.dim = int(d)
        self.a = float(a)
        self.b = float(b)
        self.beta = float(beta)
        self.ds = 1.0 / self.dim

    def __repr__(self):
        return f"AllenCahn1D(d={self.dim}, a={self.a}, b={self.b}, beta={self.beta})"

    def _padded(self, x):
        return np.pad(x, ((0, 0), (1, 1)))

    def _log_density(self, x):
        jumps = np.diff(self._padded(x), axis=1)
        grad_term = self.a / (2.0 * self.ds) * np.sum(jumps**2, axis=1)
        quartic = self.b * self.ds / 4.0 * np.sum((1.0 - x**2) ** 2, axis=1)
        return -self.beta * (grad_term + quartic)

    def _grad(self, x):
        p = self._padded(x)
        lap = 2.0 * x - p[:, :-2] - p[:, 2:]
        return -self.beta * (self.a / self.ds * lap - self.b * self.ds * x * (1.0 - x**2))


def allen_cahn_log_density(t: AllenCahn1D, x):
    return t.log_density(x)


def allen_cahn_grad(t: AllenCahn1D, x):
    return t.grad_log_density(x)
