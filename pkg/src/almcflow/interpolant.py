"""Interpolant schedules alpha(t), beta(t) for x_t = alpha(t) z + beta(t) x1."""

from __future__ import annotations

import enum

import numpy as np


class SingularityError(ValueError):
    """The velocity coefficients blow up at the endpoints t = 0 and t = 1."""


class InterpolantKind(str, enum.Enum):
    LINEAR = "linear"
    FOLLMER = "follmer"
    TRIG = "trig"


_ALIASES = {
    "linear": InterpolantKind.LINEAR,
    "follmer": InterpolantKind.FOLLMER,
    "föllmer": InterpolantKind.FOLLMER,
    "trig": InterpolantKind.TRIG,
    "trigonometric": InterpolantKind.TRIG,
}


class InterpolantSchedule:
    """One of the three standard interpolants; Föllmer is the default."""

    def __init__(self, kind="follmer"):
        if isinstance(kind, InterpolantSchedule):
            kind = kind.kind
        if not isinstance(kind, InterpolantKind):
            try:
                kind = _ALIASES[str(kind).lower()]
            except KeyError:
                raise ValueError(f"unknown interpolant {kind!r}; expected linear, follmer or trig") from None
        self.kind = kind

    def __repr__(self):
        return f"InterpolantSchedule({self.kind.value!r})"

    def __eq__(self, other):
        return isinstance(other, InterpolantSchedule) and other.kind == self.kind

    def __hash__(self):
        return hash(self.kind)

    def eval(self, t):
        """Return ``(alpha, beta, alpha_dot, beta_dot)`` at time ``t`` in [0, 1].

        Föllmer has ``alpha_dot(1) = -inf``.
        """
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t={t} outside [0, 1]")
        if self.kind is InterpolantKind.LINEAR:
            return 1.0 - t, t, -1.0, 1.0
        if self.kind is InterpolantKind.FOLLMER:
            alpha = np.sqrt(1.0 - t * t)
            alpha_dot = -t / alpha if alpha > 0 else -np.inf
            return float(alpha), t, float(alpha_dot), 1.0
        half_pi = 0.5 * np.pi
        return (
            float(np.cos(half_pi * t)),
            float(np.sin(half_pi * t)),
            float(-half_pi * np.sin(half_pi * t)),
            float(half_pi * np.cos(half_pi * t)),
        )

    def velocity_coeffs(self, t):
        """Coefficients ``(a, c)`` with ``v(t, x) = a x + c E[x1 | x_t = x]``."""
        t = float(t)
        if not 0.0 < t < 1.0:
            raise SingularityError(f"velocity coefficients are singular at t={t}; stay inside (0, 1)")
        alpha, beta, alpha_dot, beta_dot = self.eval(t)
        a = alpha_dot / alpha
        return a, beta_dot - a * beta

    def log_bridge_kernel(self, t, x, y):
        """``-||x - beta(t) y||^2 / (2 alpha(t)^2)``; broadcasts over leading axes."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape[-1:] != y.shape[-1:]:
            raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
        alpha, beta, _, _ = self.eval(t)
        diff = x - beta * y
        return -np.sum(diff * diff, axis=-1) / (2.0 * alpha * alpha)


def schedule(kind="follmer") -> InterpolantSchedule:
    return InterpolantSchedule(kind)
