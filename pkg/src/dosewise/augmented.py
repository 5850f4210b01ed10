"""Augmented controller state (model state, sensitivity, parameter estimate)
and its dynamics, plus plant simulation and the closed-loop harness.

The augmented output map returns the predicted measurement plus noise on the
measurement calendar and a fixed dummy vector elsewhere; the dummy never
influences the next augmented state. The augmented transition stacks the
state step, the sensitivity recursion and the parameter update; off the
measurement calendar the parameter estimate is carried through unchanged.

Batch variants operate on struct-of-array particle sets and use the compiled
kernels for the concrete 8-compartment model; generic model specs fall back
to per-row loops.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, rng as rngmod
from .estimator import EstimatorConfig, residual_sq, update
from .model import LeukemiaModel, NoiseModel
from .sensitivity import (CostSpec, output_sensitivity, propagate_sensitivity,
                          stage_cost, terminal_cost)
from .timegrid import TimeStructure

log = logging.getLogger("dosewise.augmented")


@dataclass(frozen=True)
class AugmentedState:
    x: np.ndarray          # (n,) positive model state
    xi: np.ndarray         # (n, p) state sensitivity
    theta_hat: np.ndarray  # (p,) current parameter estimate

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        object.__setattr__(self, "theta_hat", np.asarray(self.theta_hat, dtype=float))
        if self.xi.shape != (self.x.shape[0], self.theta_hat.shape[0]):
            raise ValueError("xi shape must be (n, p)")


@dataclass
class AugmentedParticles:
    """Struct-of-arrays particle set."""
    x: np.ndarray       # (K, n)
    xi: np.ndarray      # (K, n, p)
    theta: np.ndarray   # (K, p)

    def __len__(self):
        return self.x.shape[0]

    def select(self, idx) -> "AugmentedParticles":
        return AugmentedParticles(self.x[idx].copy(), self.xi[idx].copy(),
                                  self.theta[idx].copy())

    def copy(self) -> "AugmentedParticles":
        return AugmentedParticles(self.x.copy(), self.xi.copy(), self.theta.copy())


class AugmentedDynamics:
    """Bundles model, calendars, noise and estimator into one transition law."""

    def __init__(self, model, ts: TimeStructure, noise: NoiseModel,
                 est: EstimatorConfig, cost: CostSpec | None = None):
        if isinstance(model, LeukemiaModel):
            self.model = model
            self.spec = model.spec()
            self._params = _kernels.pack_params(model)
        else:
            self.model = None
            self.spec = model
            self._params = None
        self.ts = ts
        self.noise = noise
        self.est = est
        self.cost = cost
        self.dummy_output = np.zeros(self.spec.m)
        # instrumentation: observation-density queries off the calendar (must stay 0)
        self.off_calendar_queries = 0

    # -- single-state ops -----------------------------------------------------

    def output(self, chi: AugmentedState, w, t: int) -> np.ndarray:
        """Predicted measurement plus noise on the calendar; dummy elsewhere."""
        if self.ts.has_measurement(t):
            return self.spec.h(t, chi.x, chi.theta_hat) + np.asarray(w, dtype=float)
        return self.dummy_output.copy()

    def step_with_output(self, chi: AugmentedState, u, d, y, t: int) -> AugmentedState:
        """Stacked transition fed with a concrete measurement vector y."""
        x2 = self.spec.f(t, chi.x, u, d, chi.theta_hat)
        xi2 = propagate_sensitivity(self.spec, chi.xi, chi.x, u, d, chi.theta_hat, t)
        th2 = update(self.spec, self.ts, y, chi.x, chi.theta_hat, t, self.est)
        return AugmentedState(x2, xi2, th2)

    def step(self, chi: AugmentedState, u, d, w, t: int) -> AugmentedState:
        """Transition driven by measurement noise w (composed through output)."""
        return self.step_with_output(chi, u, d, self.output(chi, w, t), t)

    def step_no_meas(self, chi: AugmentedState, u, d, t: int) -> AugmentedState:
        """Measurement-free transition; the estimate is carried unchanged."""
        if self.ts.has_measurement(t):
            raise ValueError(f"t={t} has a measurement; use step()")
        x2 = self.spec.f(t, chi.x, u, d, chi.theta_hat)
        xi2 = propagate_sensitivity(self.spec, chi.xi, chi.x, u, d, chi.theta_hat, t)
        return AugmentedState(x2, xi2, chi.theta_hat.copy())

    def stage_cost(self, chi: AugmentedState, u, t: int) -> float:
        return stage_cost(self.spec, self.ts, chi.x, chi.xi, chi.theta_hat, u, t, self.cost)

    def terminal_cost(self, chi: AugmentedState) -> float:
        return terminal_cost(self.spec, self.ts, chi.x, chi.xi, chi.theta_hat, self.cost)

    # -- batch ops --------------------------------------------------------

    def output_batch(self, pts: AugmentedParticles, t: int) -> np.ndarray:
        """Noise-free predicted measurements h(x; theta), row per particle."""
        if self.model is not None:
            x8 = pts.x[:, 7]
            return np.stack([x8, pts.theta[:, 7] * x8], axis=1)
        return np.stack([self.spec.h(t, pts.x[k], pts.theta[k]) for k in range(len(pts))])

    def observation_logdensity_batch(self, y, pts: AugmentedParticles, t: int) -> np.ndarray:
        if not self.ts.has_measurement(t):
            self.off_calendar_queries += 1
            raise ValueError(f"no observation density off the measurement calendar (t={t})")
        resid = np.asarray(y, dtype=float)[None, :] - self.output_batch(pts, t)
        return self.noise.logpdf_measure(resid)

    def step_batch(self, pts: AugmentedParticles, u, d, t: int) -> AugmentedParticles:
        """(x, xi) step for every particle; theta untouched (caller handles it)."""
        if self.model is not None:
            x2, xi2 = _kernels.step_sens_batch(pts.x, pts.xi, u, d, pts.theta, self._params)
        else:
            k = len(pts)
            uu = np.broadcast_to(np.asarray(u, dtype=float), (k,))
            dd = np.zeros_like(pts.x) if d is None else np.broadcast_to(
                np.asarray(d, dtype=float), pts.x.shape)
            x2 = np.empty_like(pts.x)
            xi2 = np.empty_like(pts.xi)
            for i in range(k):
                x2[i] = self.spec.f(t, pts.x[i], uu[i], dd[i], pts.theta[i])
                xi2[i] = propagate_sensitivity(self.spec, pts.xi[i], pts.x[i], uu[i],
                                               dd[i], pts.theta[i], t)
        return AugmentedParticles(x2, xi2, pts.theta.copy())

    def theta_update_batch(self, y, pts: AugmentedParticles, t: int) -> np.ndarray:
        """Vectorized estimator step; y is (m,) shared or (K, m) per particle."""
        if not self.ts.has_measurement(t) or t == self.ts.n_steps:
            return pts.theta.copy()
        y = np.asarray(y, dtype=float)
        yk = np.broadcast_to(y, (len(pts), self.spec.m))
        if self.model is None:
            out = np.empty_like(pts.theta)
            for i in range(len(pts)):
                out[i] = update(self.spec, self.ts, yk[i], pts.x[i], pts.theta[i],
                                t, self.est)
            return out
        return self._theta_update_leukemia(yk, pts.x, pts.theta,
                                           self.est.alpha_at(self.ts, t))

    def _theta_update_leukemia(self, yk, X, TH, alpha0: float) -> np.ndarray:
        est = self.est
        x8 = X[:, 7]
        fr = TH[:, 7]
        r1 = yk[:, 0] - x8
        r2 = yk[:, 1] - fr * x8
        grad = -2.0 * x8 * r2                       # only the fraction slot is nonzero
        if est.mask is not None and not est.mask[7]:
            grad = np.zeros_like(grad)
        if est.mode == "identity":
            direction = grad
        else:
            direction = grad / (2.0 * x8 * x8 + est.gamma)
        base = r1 * r1 + r2 * r2
        alpha = np.full_like(grad, alpha0)
        out = TH.copy()
        if not est.backtrack:
            out[:, 7] = np.maximum(TH[:, 7] - alpha0 * direction, est.epsilon)
            return np.maximum(out, est.epsilon)
        done = np.zeros(len(x8), dtype=bool)
        cand = TH[:, 7].copy()
        for _ in range(est.max_backtrack + 1):
            trial = np.maximum(TH[:, 7] - alpha * direction, est.epsilon)
            val = r1 * r1 + (yk[:, 1] - trial * x8) ** 2
            accept = (~done) & (val <= base)
            cand[accept] = trial[accept]
            done |= accept
            if done.all():
                break
            alpha[~done] *= 0.5
        out[:, 7] = np.where(done, cand, TH[:, 7])
        return np.maximum(out, est.epsilon)

    def transition_batch(self, pts: AugmentedParticles, u, t: int,
                         rng: np.random.Generator) -> AugmentedParticles:
        """One draw of the state-transition kernel for every particle.

        On measurement steps each particle imagines its own measurement
        (fresh joint process/measurement noise); elsewhere only process noise
        is drawn and the estimate is untouched.
        """
        k = len(pts)
        if self.ts.has_measurement(t) and t != self.ts.n_steps:
            d, w = self.noise.sample_joint(rng, size=k)
            y = self.output_batch(pts, t) + w
            theta2 = self.theta_update_batch_rows(y, pts, t)
        else:
            d = self.noise.sample_process(rng, size=k)
            theta2 = pts.theta.copy()
        stepped = self.step_batch(pts, u, d, t)
        return AugmentedParticles(stepped.x, stepped.xi, theta2)

    def theta_update_batch_rows(self, y_rows, pts: AugmentedParticles, t: int) -> np.ndarray:
        """Like theta_update_batch with one measurement row per particle."""
        y_rows = np.asarray(y_rows, dtype=float)
        if not self.ts.has_measurement(t) or t == self.ts.n_steps:
            return pts.theta.copy()
        if self.model is None:
            out = np.empty_like(pts.theta)
            for i in range(len(pts)):
                out[i] = update(self.spec, self.ts, y_rows[i], pts.x[i], pts.theta[i],
                                t, self.est)
            return out
        return self._theta_update_leukemia(y_rows, pts.x, pts.theta,
                                           self.est.alpha_at(self.ts, t))

    def stage_cost_batch(self, pts: AugmentedParticles, u, t: int) -> np.ndarray:
        """Stage cost per particle (performance + info term on the calendar)."""
        perf = self._perf_batch(pts, u)
        if self.ts.has_measurement(t) and t != self.ts.n_steps:
            perf = perf + self.cost.lam_info * self.info_cost_batch(pts, t)
        return perf

    def terminal_cost_batch(self, pts: AugmentedParticles) -> np.ndarray:
        perf = self._perf_batch(pts, 0.0)
        if self.ts.has_measurement(self.ts.n_steps):
            perf = perf + self.cost.lam_info * self.info_cost_batch(pts, self.ts.n_steps)
        return perf

    def _perf_batch(self, pts: AugmentedParticles, u) -> np.ndarray:
        c = self.cost
        anc = pts.theta[:, -1] * pts.x[:, -1]
        zeta = (anc - c.band_lo) * (anc - c.band_hi)
        u2 = np.broadcast_to(np.asarray(u, dtype=float) ** 2, anc.shape)
        return (zeta - c.lam_dose * u2) / (c.n_steps + 1)

    def fim_trace_batch(self, pts: AugmentedParticles, t: int) -> np.ndarray:
        """trace of the per-measurement information matrix, per particle."""
        if self.model is not None:
            xi8 = pts.xi[:, 7, :]
            fr = pts.theta[:, 7]
            x8 = pts.x[:, 7]
            return ((1.0 + fr**2) * np.sum(xi8 * xi8, axis=1)
                    + 2.0 * fr * x8 * xi8[:, 7] + x8 * x8)
        out = np.empty(len(pts))
        for i in range(len(pts)):
            m = output_sensitivity(self.spec, self.ts, pts.x[i], pts.xi[i],
                                   pts.theta[i], t)
            out[i] = np.sum(m * m)
        return out

    def info_cost_batch(self, pts: AugmentedParticles, t: int) -> np.ndarray:
        return -np.minimum(self.fim_trace_batch(pts, t), self.cost.trace_cap)


# -- plant + closed loop --------------------------------------------------


@dataclass
class PlantTrace:
    """Ground-truth trajectory generated with the true parameters."""
    x: np.ndarray                 # (N+1, n)
    y: dict                       # measurement index -> (m,)
    theta_true: np.ndarray
    seed: int


@dataclass
class Trajectory:
    """Controller-side augmented trajectory with costs and measurements."""
    ts: TimeStructure
    seed: int
    x: np.ndarray                 # (N+1, n) augmented-model states
    xi: np.ndarray                # (N+1, n, p)
    theta_hat: np.ndarray         # (N+1, p)
    u: np.ndarray                 # (N,)
    y: dict                       # measurement index -> (m,)
    stage_costs: np.ndarray       # (N,)
    terminal_cost: float
    theta_true: np.ndarray | None = None
    plant_x: np.ndarray | None = None   # (N+1, n) if a separate plant ran
    clamp_warnings: int = 0
    residuals: list = field(default_factory=list)   # (t, ||y - h||^2) pairs

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.stage_costs) + self.terminal_cost)


def simulate_plant(model, ts: TimeStructure, theta_true, regimen_fn, noise: NoiseModel,
                   seed: int, x0) -> PlantTrace:
    """Ground-truth rollout: x under the true parameters, y = h + w on the calendar."""
    spec = model.spec() if isinstance(model, LeukemiaModel) else model
    rng_d = rngmod.stream(seed, rngmod.PLANT_PROCESS)
    rng_w = rngmod.stream(seed, rngmod.PLANT_MEASURE)
    n = spec.n
    xs = np.empty((ts.n_steps + 1, n))
    xs[0] = np.asarray(x0, dtype=float)
    ys = {}
    for t in range(ts.n_steps + 1):
        if ts.has_measurement(t):
            w = noise.sample_measure(rng_w)
            ys[t] = spec.h(t, xs[t], theta_true) + w
        if t == ts.n_steps:
            break
        d = noise.sample_process(rng_d)
        u = float(regimen_fn(t))
        xs[t + 1] = spec.f(t, xs[t], u, d, theta_true)
    return PlantTrace(x=xs, y=ys, theta_true=np.asarray(theta_true, dtype=float), seed=seed)


def simulate_closed_loop(dyn: AugmentedDynamics, chi0: AugmentedState, policy,
                         seed: int, theta_true=None, plant_x0=None,
                         plant_noise: NoiseModel | None = None) -> Trajectory:
    """Run a dosing policy against a plant.

    The plant evolves under `theta_true` (defaults to the initial estimate)
    and produces the measurements; the controller state evolves under the
    augmented dynamics fed with those measurements (no process noise on the
    controller side: it tracks the noise-free model prediction).
    """
    ts = dyn.ts
    spec = dyn.spec
    theta_true = chi0.theta_hat.copy() if theta_true is None else np.asarray(theta_true, dtype=float)
    plant_x0 = chi0.x.copy() if plant_x0 is None else np.asarray(plant_x0, dtype=float)
    noise = plant_noise if plant_noise is not None else dyn.noise

    rng_d = rngmod.stream(seed, rngmod.PLANT_PROCESS)
    rng_w = rngmod.stream(seed, rngmod.PLANT_MEASURE)

    n, p = spec.n, spec.p
    xs = np.empty((ts.n_steps + 1, n))
    xis = np.empty((ts.n_steps + 1, n, p))
    ths = np.empty((ts.n_steps + 1, p))
    us = np.empty(ts.n_steps)
    plant = np.empty((ts.n_steps + 1, n))
    costs = np.empty(ts.n_steps)
    ys = {}
    residuals = []
    clamps = 0

    chi = chi0
    x_true = plant_x0
    for t in range(ts.n_steps + 1):
        xs[t], xis[t], ths[t] = chi.x, chi.xi, chi.theta_hat
        plant[t] = x_true
        y_t = None
        if ts.has_measurement(t):
            w = noise.sample_measure(rng_w)
            y_t = spec.h(t, x_true, theta_true) + w
            ys[t] = y_t
            residuals.append((t, residual_sq(spec, y_t, chi.x, chi.theta_hat, t)))
            policy.notify_measurement(t, y_t, chi)
        if t == ts.n_steps:
            break
        u = float(policy.dose(t, chi))
        if not ts.is_decision(t):
            u = ts.u_default
        elif u < 0.0 or u > spec.u_max:
            clamps += 1
            u = min(max(u, 0.0), spec.u_max)
        us[t] = u
        policy.observe_step(t, u)
        costs[t] = dyn.stage_cost(chi, u, t)
        if ts.has_measurement(t):
            chi = dyn.step_with_output(chi, u, None, y_t, t)
        else:
            chi = dyn.step_no_meas(chi, u, None, t)
        d_true = noise.sample_process(rng_d)
        x_true = spec.f(t, x_true, u, d_true, theta_true)

    term = dyn.terminal_cost(chi)
    if clamps:
        log.warning("policy emitted %d out-of-bounds doses (clamped)", clamps)
    return Trajectory(ts=ts, seed=seed, x=xs, xi=xis, theta_hat=ths, u=us, y=ys,
                      stage_costs=costs, terminal_cost=term, theta_true=theta_true,
                      plant_x=plant, clamp_warnings=clamps, residuals=residuals)


def band_violation_hours(trace_x, theta_true, cost: CostSpec, delta_days: float) -> float:
    """Hours the plant's true neutrophil count spends outside the band."""
    anc = np.asarray(theta_true)[-1] * np.asarray(trace_x)[:, -1]
    outside = (anc < cost.band_lo) | (anc > cost.band_hi)
    return float(np.sum(outside)) * delta_days * 24.0
