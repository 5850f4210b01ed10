"""Versioned JSON configuration: model constants, calendars, noise scales,
cost weights, estimator and filter settings, optimizer grid.

`default_config()` builds the shipped configuration: transit/death rates are
calibrated so the tabulated drug-free state is an exact equilibrium, and the
cost weights are derived from the nominal no-drug trajectory (information
trace at the day-7 measurement) so the defaults are reproducible rather than
hand-tuned magic numbers.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .augmented import AugmentedDynamics
from .belief import AugmentedPrior
from .estimator import EstimatorConfig
from .model import (THETA0_DEFAULT, X0_DEFAULT, LeukemiaModel, NoiseModel,
                    RateBlock, calibrate_equilibrium)
from .sensitivity import CostSpec
from .timegrid import TimeStructure, hourly_cycle

SCHEMA_VERSION = 1


def canonical_json(payload) -> str:
    """Deterministic serialization: sorted keys, shortest round-trip floats."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(payload: dict) -> str:
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


@dataclass
class AppConfig:
    raw: dict

    def __post_init__(self):
        if self.raw.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.raw.get('schema_version')}")

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def model(self) -> LeukemiaModel:
        m = self.raw["model"]
        r = m["rates"]
        return LeukemiaModel(
            delta=m["delta"], epsilon=m["epsilon"], beta=m["beta"],
            rates=RateBlock(
                k_absorb=r["k_absorb"], k_elim_plasma=r["k_elim_plasma"],
                k_elim_metab=r["k_elim_metab"], k_transit=tuple(r["k_transit"]),
                k_death=r["k_death"], kappa_vol=r["kappa_vol"],
            ),
            bsa_m2=m["bsa_m2"], nominal_dose_mg_per_m2=m["nominal_dose_mg_per_m2"],
            dose_to_gut=m["dose_to_gut"],
        )

    def time_structure(self) -> TimeStructure:
        t = self.raw["time"]
        return TimeStructure(n_steps=t["n_steps"], delta=t["delta"],
                             t_meas=frozenset(t["t_meas"]), t_dec=frozenset(t["t_dec"]),
                             u_default=t["u_default"])

    def noise(self) -> NoiseModel:
        n = self.raw["noise"]
        return NoiseModel.diagonal(np.asarray(n["sd_process"]), np.asarray(n["sd_measure"]))

    def x0(self) -> np.ndarray:
        return np.asarray(self.raw["x0"], dtype=float)

    def theta0(self) -> np.ndarray:
        return np.asarray(self.raw["theta0"], dtype=float)

    def estimator(self) -> EstimatorConfig:
        e = self.raw["estimator"]
        return EstimatorConfig(
            alpha=e["alpha"], gamma=e["gamma"], epsilon=e["epsilon"], mode=e["mode"],
            backtrack=e["backtrack"], max_backtrack=e["max_backtrack"],
            mask=tuple(e["mask"]) if e.get("mask") else None,
        )

    def cost(self) -> CostSpec:
        c = self.raw["cost"]
        return CostSpec(lam_info=c["lam_info"], trace_cap=c["trace_cap"],
                        lam_dose=c["lam_dose"], band_lo=c["band"][0],
                        band_hi=c["band"][1], n_steps=self.raw["time"]["n_steps"])

    def prior(self, theta0=None) -> AugmentedPrior:
        f = self.raw["filter"]
        return AugmentedPrior(
            x0_mean=self.x0(), x0_rel_sd=f["prior_rel_sd"],
            theta0=self.theta0() if theta0 is None else np.asarray(theta0, dtype=float),
            theta_rel_sd=f.get("theta_prior_rel_sd", 0.0),
        )

    def dynamics(self) -> AugmentedDynamics:
        return AugmentedDynamics(self.model(), self.time_structure(), self.noise(),
                                 self.estimator(), self.cost())

    def filter_opts(self) -> dict:
        return dict(self.raw["filter"])

    def optimizer_opts(self) -> dict:
        return dict(self.raw["optimizer"])

    def dump(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "AppConfig":
        with open(path) as fh:
            return cls(json.load(fh))


def nominal_info_trace(model: LeukemiaModel, x0, theta, n_steps: int) -> float:
    """trace of the measurement-information term after a drug-free noise-free
    sensitivity propagation of `n_steps` steps."""
    x = np.asarray(x0, dtype=float)[None, :].copy()
    xi = np.zeros((1, model.n, model.p))
    th = np.asarray(theta, dtype=float)[None, :]
    params = _kernels.pack_params(model)
    for _ in range(n_steps):
        x, xi = _kernels.step_sens_batch(x, xi, 0.0, np.zeros_like(x), th, params)
    fr = th[0, 7]
    xi8 = xi[0, 7, :]
    return float((1.0 + fr**2) * xi8 @ xi8 + 2.0 * fr * x[0, 7] * xi8[7] + x[0, 7] ** 2)


def default_config(bsa_m2: float = 1.73, n_particles: int = 1024,
                   n_scenarios: int = 500) -> AppConfig:
    ts = hourly_cycle()
    x0 = X0_DEFAULT.copy()
    theta0 = THETA0_DEFAULT.copy()
    rates = calibrate_equilibrium(x0, theta0)
    model = LeukemiaModel(rates=rates, bsa_m2=bsa_m2)

    day7 = 7 * 24
    trace_day7 = nominal_info_trace(model, x0, theta0, day7)
    band = (1e9, 2e9)
    anc0 = theta0[7] * x0[7]
    zeta_typ = abs((anc0 - band[0]) * (anc0 - band[1]))
    lam_info = 0.1 * zeta_typ / (ts.n_steps + 1) / trace_day7
    lam_dose = 0.1 * zeta_typ / model.u_max**2
    gamma = 1e-8 * 2.0 * x0[7] ** 2

    sd_process = 1e-3 * x0
    sd_measure = 0.05 * np.array([x0[7], theta0[7] * x0[7]])

    raw = {
        "schema_version": SCHEMA_VERSION,
        "model": {
            "delta": model.delta, "epsilon": model.epsilon, "beta": model.beta,
            "bsa_m2": model.bsa_m2,
            "nominal_dose_mg_per_m2": model.nominal_dose_mg_per_m2,
            "dose_to_gut": model.dose_to_gut,
            "rates": model.rates.as_dict(),
        },
        "x0": [float(v) for v in x0],
        "theta0": [float(v) for v in theta0],
        "time": {
            "n_steps": ts.n_steps, "delta": ts.delta,
            "t_meas": sorted(ts.t_meas), "t_dec": sorted(ts.t_dec),
            "u_default": ts.u_default,
        },
        "noise": {
            "sd_process": [float(v) for v in sd_process],
            "sd_measure": [float(v) for v in sd_measure],
        },
        "cost": {
            "lam_info": lam_info, "trace_cap": 1e3 * trace_day7,
            "lam_dose": lam_dose, "band": [band[0], band[1]],
        },
        "estimator": {
            "alpha": 1.0, "gamma": gamma, "epsilon": 1e-12, "mode": "gauss_newton",
            "backtrack": True, "max_backtrack": 20, "mask": None,
        },
        "filter": {
            "n_particles": n_particles, "resample_threshold": 0.5,
            "prior_rel_sd": 0.05, "theta_prior_rel_sd": 0.0,
            "fraction_from_baseline": True,
        },
        "optimizer": {
            "levels": [0.0, 0.25, 0.5, 1.0, 1.5, 2.0],
            "day_blocks": [[0, 7], [7, 14]],
            "n_scenarios": n_scenarios,
            "scenario_mode": "augmented",
        },
    }
    return AppConfig(raw)
