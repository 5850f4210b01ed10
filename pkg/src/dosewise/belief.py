"""Weighted-particle beliefs over the augmented state.

Prediction pushes every particle through one draw of the state-transition
kernel and leaves the weights alone; the Bayes update additionally reweights
by the observation density of the arriving measurement and resamples when the
effective sample size collapses. Weights are kept in log space throughout.
"""

from dataclasses import dataclass

import numpy as np

from .augmented import AugmentedDynamics, AugmentedParticles, AugmentedState
from .model import project_positive


class DegenerateUpdateError(RuntimeError):
    """Every particle got zero likelihood; carries the best log-likelihood seen."""

    def __init__(self, max_loglik: float):
        super().__init__(f"belief update degenerated (max log-likelihood {max_loglik:.3g}); "
                         "widen the measurement noise or re-seed")
        self.max_loglik = max_loglik


def _logsumexp(a: np.ndarray) -> float:
    hi = np.max(a)
    if not np.isfinite(hi):
        return float(hi)
    return float(hi + np.log(np.sum(np.exp(a - hi))))


@dataclass
class ParticleBelief:
    particles: object            # adapter-owned container (len / select)
    log_weights: np.ndarray      # normalized: logsumexp == 0

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if len(self.particles) != self.log_weights.shape[0]:
            raise ValueError("one weight per particle required")
        if self.log_weights.shape[0] < 1:
            raise ValueError("at least one particle required")

    @classmethod
    def from_unnormalized(cls, particles, log_weights) -> "ParticleBelief":
        lw = np.asarray(log_weights, dtype=float)
        norm = _logsumexp(lw)
        if not np.isfinite(norm):
            raise DegenerateUpdateError(float(np.max(lw)))
        return cls(particles, lw - norm)

    @classmethod
    def uniform(cls, particles) -> "ParticleBelief":
        k = len(particles)
        if k < 1:
            raise ValueError("at least one particle required")
        return cls(particles, np.full(k, -np.log(k)))

    @property
    def n(self) -> int:
        return self.log_weights.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.sum(w * w))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-variance resampling: K evenly spaced quantiles with one random shift."""
    k = weights.shape[0]
    positions = (rng.random() + np.arange(k)) / k
    return np.searchsorted(np.cumsum(weights), positions).clip(0, k - 1)


def maybe_resample(belief: ParticleBelief, rng: np.random.Generator,
                   threshold: float = 0.5) -> ParticleBelief:
    if belief.ess >= threshold * belief.n:
        return belief
    idx = systematic_resample(belief.weights, rng)
    return ParticleBelief.uniform(belief.particles.select(idx))


# -- kernel-facing operations ----------------------------------------------


def sample_transition(dyn: AugmentedDynamics, chi: AugmentedState, u, t: int,
                      rng: np.random.Generator) -> AugmentedState:
    """One draw of the augmented state-transition kernel.

    On measurement steps the joint process/measurement noise is drawn and the
    full transition (including the estimator fed by the imagined measurement)
    applies; elsewhere only process noise is drawn and the measurement-free
    transition applies.
    """
    if dyn.ts.has_measurement(t) and t != dyn.ts.n_steps:
        d, w = dyn.noise.sample_joint(rng)
        return dyn.step(chi, u, d, w, t)
    d = dyn.noise.sample_process(rng)
    return dyn.step_no_meas(chi, u, d, t)


def observation_logdensity(dyn: AugmentedDynamics, y, chi: AugmentedState, t: int) -> float:
    """Log-density of the measurement given the augmented state (Gaussian shift)."""
    if not dyn.ts.has_measurement(t):
        dyn.off_calendar_queries += 1
        raise ValueError(f"no observation density off the measurement calendar (t={t})")
    resid = np.asarray(y, dtype=float) - dyn.spec.h(t, chi.x, chi.theta_hat)
    return float(dyn.noise.logpdf_measure(resid))


def predict(dyn: AugmentedDynamics, belief: ParticleBelief, u, t: int,
            rng: np.random.Generator) -> ParticleBelief:
    """Prediction-only belief step (valid when no measurement arrives at t+1)."""
    if dyn.ts.has_measurement(t + 1):
        raise ValueError(f"measurement scheduled at t+1={t + 1}; use bayes_update")
    pts = dyn.transition_batch(belief.particles, u, t, rng)
    return ParticleBelief(pts, belief.log_weights.copy())


def bayes_update(dyn: AugmentedDynamics, belief: ParticleBelief, u, y_next, t: int,
                 rng: np.random.Generator, resample_threshold: float = 0.5) -> ParticleBelief:
    """Propagate, reweight by the arriving measurement, normalize, maybe resample."""
    if not dyn.ts.has_measurement(t + 1) or t + 1 == 0:
        raise ValueError(f"no measurement scheduled at t+1={t + 1}")
    pts = dyn.transition_batch(belief.particles, u, t, rng)
    loglik = dyn.observation_logdensity_batch(y_next, pts, t + 1)
    out = ParticleBelief.from_unnormalized(pts, belief.log_weights + loglik)
    return maybe_resample(out, rng, resample_threshold)


def initial_belief(dyn: AugmentedDynamics, sampler, y0, rng: np.random.Generator,
                   n_particles: int, resample_threshold: float = 0.5) -> ParticleBelief:
    """i.i.d. prior particles; conditioned on the baseline measurement if given."""
    pts = sampler(rng, n_particles)
    belief = ParticleBelief.uniform(pts)
    if y0 is None:
        return belief
    if not dyn.ts.has_measurement(0):
        raise ValueError("baseline measurement given but 0 is not on the calendar")
    loglik = dyn.observation_logdensity_batch(y0, pts, 0)
    belief = ParticleBelief.from_unnormalized(pts, belief.log_weights + loglik)
    return maybe_resample(belief, rng, resample_threshold)


@dataclass(frozen=True)
class AugmentedPrior:
    """Default prior over the augmented state: truncated Gaussian around the
    equilibrium state, zero sensitivity, a point mass at the initial estimate
    (optionally jittered)."""
    x0_mean: np.ndarray
    x0_rel_sd: float
    theta0: np.ndarray
    theta_rel_sd: float = 0.0    # optional estimate jitter across particles
    floor: float = 1e-12

    def sample(self, rng: np.random.Generator, k: int) -> AugmentedParticles:
        x0 = np.asarray(self.x0_mean, dtype=float)
        n = x0.shape[0]
        p = np.asarray(self.theta0, dtype=float).shape[0]
        sd = self.x0_rel_sd * x0
        x = x0[None, :] + rng.standard_normal((k, n)) * sd[None, :]
        for _ in range(100):
            bad = (x <= 0.0) & (sd[None, :] > 0.0)
            if not bad.any():
                break
            x[bad] = (x0[None, :] + rng.standard_normal((k, n)) * sd[None, :])[bad]
        x = np.where((x <= 0.0) & (sd[None, :] > 0.0), self.floor, x)
        x[:, sd == 0.0] = x0[sd == 0.0]
        theta = np.tile(np.asarray(self.theta0, dtype=float), (k, 1))
        if self.theta_rel_sd > 0.0:
            theta = theta * np.exp(rng.standard_normal((k, p)) * self.theta_rel_sd)
            theta = project_positive(theta, self.floor)
        return AugmentedParticles(x=x, xi=np.zeros((k, n, p)), theta=theta)


def belief_summary(belief: ParticleBelief, top_k: int = 10) -> dict:
    """JSON-ready snapshot: moments plus the heaviest particles."""
    pts = belief.particles
    w = belief.weights
    x_mean = w @ pts.x
    th_mean = w @ pts.theta
    x_var = w @ (pts.x - x_mean) ** 2
    order = np.argsort(w)[::-1][:top_k]
    anc = pts.theta[:, -1] * pts.x[:, -1]
    qs = weighted_quantiles(anc, w, (0.1, 0.5, 0.9))
    return {
        "n_particles": int(belief.n),
        "ess": float(belief.ess),
        "x_mean": [float(v) for v in x_mean],
        "x_sd": [float(v) for v in np.sqrt(np.maximum(x_var, 0.0))],
        "theta_mean": [float(v) for v in th_mean],
        "anc_quantiles": {"q10": qs[0], "q50": qs[1], "q90": qs[2]},
        "top_particles": [
            {"weight": float(w[i]),
             "x": [float(v) for v in pts.x[i]],
             "theta": [float(v) for v in pts.theta[i]]}
            for i in order
        ],
    }


def weighted_quantiles(values: np.ndarray, weights: np.ndarray, qs) -> list:
    """Step-function quantiles of a weighted sample."""
    order = np.argsort(values)
    v = values[order]
    cw = np.cumsum(weights[order])
    cw = cw / cw[-1]
    return [float(v[np.searchsorted(cw, q, side="left").clip(0, len(v) - 1)]) for q in qs]
