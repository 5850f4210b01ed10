"""Forward sensitivity propagation, information matrices, and stage costs.

The state-sensitivity matrix xi_t = dx_t/dtheta is propagated along the
trajectory with the model Jacobians; the information gained by a measurement
is the Gram matrix of the total output derivative dh/dtheta. Stage costs
combine a band-deviation/dose performance term with a capped negative-trace
information term on measurement steps.
"""

from dataclasses import dataclass

import numpy as np

from .model import ModelSpec
from .timegrid import TimeStructure


@dataclass(frozen=True)
class CostSpec:
    """Weights for the combined performance + information objective.

    zeta(x) = (fr*x8 - band_lo)*(fr*x8 - band_hi) rewards neutrophil counts
    inside [band_lo, band_hi]; lam_dose rewards dose intensity; lam_info
    weights the capped information term -min(trace, trace_cap) on
    measurement steps.
    """
    lam_info: float          # > 0 information weight
    trace_cap: float         # > 0 cap keeping the info cost bounded below
    lam_dose: float          # >= 0 dose-reward weight
    band_lo: float = 1e9
    band_hi: float = 2e9
    n_steps: int = 504       # normalizer 1/(N+1) for the performance term

    def __post_init__(self):
        if not (self.trace_cap > 0 and np.isfinite(self.trace_cap)):
            raise ValueError("trace_cap must be positive and finite")
        if not self.band_lo < self.band_hi:
            raise ValueError("band_lo must be below band_hi")
        if self.lam_info < 0 or self.lam_dose < 0:
            raise ValueError("weights must be nonnegative")


def propagate_sensitivity(spec: ModelSpec, xi, x, u, d, theta_hat, t: int) -> np.ndarray:
    """One step of the sensitivity recursion: dfdx * xi + dfdth."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (spec.n, spec.p):
        raise ValueError(f"xi must have shape {(spec.n, spec.p)}, got {xi.shape}")
    return spec.dfdx(t, x, u, d, theta_hat) @ xi + spec.dfdth(t, x, u, d, theta_hat)


def output_sensitivity(spec: ModelSpec, ts: TimeStructure, x, xi, theta_hat, t: int) -> np.ndarray:
    """Total derivative of the predicted measurement w.r.t. the parameters."""
    if not ts.has_measurement(t):
        raise ValueError(f"t={t} is not on the measurement calendar")
    xi = np.asarray(xi, dtype=float)
    return spec.dhdx(t, x, theta_hat) @ xi + spec.dhdth(t, x, theta_hat)


def fim_term(spec: ModelSpec, ts: TimeStructure, x, xi, theta_hat, t: int) -> np.ndarray:
    """Per-measurement information matrix: Gram of the output sensitivity."""
    m = output_sensitivity(spec, ts, x, xi, theta_hat, t)
    return m.T @ m


def total_fim(spec: ModelSpec, ts: TimeStructure, states_by_time: dict) -> np.ndarray:
    """Sum of the per-measurement terms over the whole calendar.

    `states_by_time` maps each measurement index to (x, xi, theta_hat).
    """
    missing = sorted(set(ts.t_meas) - set(states_by_time))
    if missing:
        raise ValueError(f"missing augmented states for measurement times {missing}")
    out = np.zeros((spec.p, spec.p))
    for t in ts.meas_sorted():
        x, xi, th = states_by_time[t]
        out += fim_term(spec, ts, x, xi, th, t)
    return out


def info_cost(spec: ModelSpec, ts: TimeStructure, x, xi, theta_hat, t: int,
              cost: CostSpec) -> float:
    """-min(trace of the information term, cap); always in [-cap, 0]."""
    tr = float(np.trace(fim_term(spec, ts, x, xi, theta_hat, t)))
    return -min(tr, cost.trace_cap)


def band_penalty(x8: float, theta_hat, cost: CostSpec) -> float:
    """Convex quadratic in the neutrophil count, negative inside the band."""
    anc = theta_hat[-1] * x8
    return (anc - cost.band_lo) * (anc - cost.band_hi)


def performance_cost(x, u, theta_hat, cost: CostSpec) -> float:
    x = np.asarray(x, dtype=float)
    return (band_penalty(x[-1], theta_hat, cost) - cost.lam_dose * float(u) ** 2) / (cost.n_steps + 1)


def stage_cost(spec: ModelSpec, ts: TimeStructure, x, xi, theta_hat, u, t: int,
               cost: CostSpec) -> float:
    """Performance cost; plus the weighted information term on measurement steps."""
    val = performance_cost(x, u, theta_hat, cost)
    if ts.has_measurement(t) and t != ts.n_steps:
        val += cost.lam_info * info_cost(spec, ts, x, xi, theta_hat, t, cost)
    return val


def terminal_cost(spec: ModelSpec, ts: TimeStructure, x, xi, theta_hat,
                  cost: CostSpec) -> float:
    x = np.asarray(x, dtype=float)
    val = band_penalty(x[-1], theta_hat, cost) / (cost.n_steps + 1)
    if ts.has_measurement(ts.n_steps):
        val += cost.lam_info * info_cost(spec, ts, x, xi, theta_hat, ts.n_steps, cost)
    return val


def stage_cost_lower_bound(cost: CostSpec, u_max: float) -> float:
    """Explicit bound: stage_cost >= (zeta_min - lam_dose*u_max^2)/(N+1) - lam_info*cap."""
    zeta_min = -((cost.band_hi - cost.band_lo) / 2.0) ** 2
    return (zeta_min - cost.lam_dose * u_max**2) / (cost.n_steps + 1) - cost.lam_info * cost.trace_cap
