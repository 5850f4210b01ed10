"""Measurement-driven parameter update.

On each measurement step the squared output residual is differentiated in
theta, scaled by the identity or a regularized Gauss-Newton matrix, stepped,
and projected back onto the positive orthant. Off the measurement calendar
the update is the identity.
"""

from dataclasses import dataclass

import numpy as np

from .model import ModelSpec, project_positive
from .timegrid import TimeStructure


@dataclass(frozen=True)
class EstimatorConfig:
    alpha: float | tuple = 1.0       # constant step size, or one per measurement slot
    gamma: float = 1e-8              # Gauss-Newton regularization
    epsilon: float = 1e-12           # positive-orthant floor for theta
    mode: str = "gauss_newton"       # or "identity"
    backtrack: bool = True           # halve alpha until the residual does not increase
    max_backtrack: int = 20
    mask: tuple | None = None        # optional 0/1 per-component fit mask

    def __post_init__(self):
        if self.mode not in ("identity", "gauss_newton"):
            raise ValueError(f"unknown scaling mode {self.mode!r}")
        alphas = (self.alpha,) if np.isscalar(self.alpha) else tuple(self.alpha)
        if not alphas or not all(a > 0 for a in alphas):
            raise ValueError("alpha must be positive")
        if not np.isscalar(self.alpha):
            object.__setattr__(self, "alpha", alphas)
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def alpha_at(self, ts: TimeStructure, t: int) -> float:
        """Step size for measurement time t (schedules index the sorted
        calendar; a short schedule keeps reusing its last entry)."""
        if np.isscalar(self.alpha):
            return float(self.alpha)
        slot = ts.meas_sorted().index(t)
        return float(self.alpha[min(slot, len(self.alpha) - 1)])


def residual_sq(spec: ModelSpec, y, x, theta, t: int) -> float:
    r = np.asarray(y, dtype=float) - spec.h(t, x, theta)
    return float(r @ r)


def residual_gradient(spec: ModelSpec, ts: TimeStructure, y, x, theta_hat, t: int) -> np.ndarray:
    """Gradient of ||y - h(x; theta)||^2 at theta_hat: -2 dh/dth^T residual."""
    if not ts.has_measurement(t):
        raise ValueError(f"t={t} is not on the measurement calendar")
    y = np.asarray(y, dtype=float)
    r = y - spec.h(t, x, theta_hat)
    return -2.0 * spec.dhdth(t, x, theta_hat).T @ r


def scaling_matrix(spec: ModelSpec, x, theta_hat, t: int, config: EstimatorConfig) -> np.ndarray:
    """Identity, or the regularized Gauss-Newton matrix 2 J^T J + gamma I."""
    if config.mode == "identity":
        return np.eye(spec.p)
    j = spec.dhdth(t, x, theta_hat)
    return 2.0 * j.T @ j + config.gamma * np.eye(spec.p)


def update(spec: ModelSpec, ts: TimeStructure, y, x, theta_hat, t: int,
           config: EstimatorConfig) -> np.ndarray:
    """One estimator step at time t; identity off the measurement calendar."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    if t == ts.n_steps:
        raise ValueError("parameter updates are defined for t < N only")
    if not ts.has_measurement(t):
        return theta_hat.copy()
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite measurement")

    grad = residual_gradient(spec, ts, y, x, theta_hat, t)
    if config.mask is not None:
        grad = grad * np.asarray(config.mask, dtype=float)
    direction = np.linalg.solve(scaling_matrix(spec, x, theta_hat, t, config), grad)
    if config.mask is not None:
        direction = direction * np.asarray(config.mask, dtype=float)

    def candidate(alpha):
        return project_positive(theta_hat - alpha * direction, config.epsilon)

    alpha = config.alpha_at(ts, t)
    if not config.backtrack:
        return candidate(alpha)

    base = residual_sq(spec, y, x, theta_hat, t)
    for _ in range(config.max_backtrack + 1):
        theta_new = candidate(alpha)
        if residual_sq(spec, y, x, theta_new, t) <= base:
            return theta_new
        alpha *= 0.5
    return theta_hat.copy()
