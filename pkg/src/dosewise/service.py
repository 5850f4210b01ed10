"""Session-oriented HTTP API for the clinician console.

Sessions hold a patient's measurement log, the current particle belief,
the running parameter estimate and a decision log. Posting a measurement
replays the belief recursion from scratch over the full log (same code path
as the CLI `filter` command, same seed), so an exported session replayed
through the CLI reproduces the same belief summary exactly.

Run with:  python -m dosewise.service  (or uvicorn dosewise.service:app)
"""

import json
import os
import threading
import uuid
import zlib
from datetime import datetime, timezone

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import rng as rngmod
from .augmented import AugmentedState
from .belief import DegenerateUpdateError, belief_summary, weighted_quantiles
from .cli import _nominal_regimen, _run_filter
from .config import SCHEMA_VERSION, default_config
from .estimator import residual_sq
from .policy import DoseRegimen, candidate_grid, optimize_regimen
from .sensitivity import propagate_sensitivity

API_SCHEMA_VERSION = 1


# -- request/response models --------------------------------------------------


class CreateSession(BaseModel):
    bsa_m2: float = Field(default=1.73, gt=0.5, lt=3.5)
    seed: int = Field(default=0, ge=0, lt=2**63)
    n_particles: int = Field(default=512, ge=8, le=200000)
    theta0_overrides: dict[str, float] | None = None
    zero_noise_demo: bool = False


class Measurement(BaseModel):
    day: int = Field(ge=0)
    wbc: float = Field(gt=0, description="mature white cells per liter")
    anc: float = Field(gt=0, description="neutrophils per liter")
    retry_token: str | None = None


class ForecastRequest(BaseModel):
    regimen: list[float] = Field(min_length=1, max_length=31)
    retry_token: str | None = None


class OptimizeRequest(BaseModel):
    n_scenarios: int = Field(default=300, ge=8, le=20000)
    retry_token: str | None = None


class Decision(BaseModel):
    regimen: list[float] = Field(min_length=1, max_length=31)
    note: str = ""
    retry_token: str | None = None


THETA_NAMES = ("conversion_vmax", "conversion_km", "prolif_max",
               "feedback_steepness", "feedback_scale", "drug_effect_max",
               "drug_effect_km", "neutrophil_fraction")


class Session:
    def __init__(self, sid: str, req: CreateSession):
        self.id = sid
        self.lock = threading.Lock()
        cfg = default_config(bsa_m2=req.bsa_m2, n_particles=req.n_particles)
        if req.theta0_overrides:
            theta = list(cfg.raw["theta0"])
            for name, value in req.theta0_overrides.items():
                if name not in THETA_NAMES:
                    raise HTTPException(422, f"unknown parameter {name!r}")
                theta[THETA_NAMES.index(name)] = float(value)
            cfg.raw["theta0"] = theta
        if req.zero_noise_demo:
            cfg.raw["noise"]["sd_process"] = [0.0] * 8
            cfg.raw["noise"]["sd_measure"] = [1e-9, 1e-9]
            cfg.raw["filter"]["prior_rel_sd"] = 0.0
        self.config = cfg
        self.seed = req.seed
        self.n_particles = req.n_particles
        self.dyn = cfg.dynamics()
        self.measurements: list[dict] = []       # {day, wbc, anc}
        self.decisions: list[dict] = []
        self.created = datetime.now(timezone.utc).isoformat()
        self.updated = self.created
        self.retry_cache: dict[str, dict] = {}
        self.jobs: dict[str, dict] = {}
        # point estimate track (certainty-equivalent replay)
        self.theta_hat = cfg.theta0()
        self.residuals: list[dict] = []
        self.belief = None
        self.belief_t = 0
        self._refresh_belief()

    # -- internals --------------------------------------------------------

    def _meas_tuples(self):
        return [(m["day"] * 24, np.array([m["wbc"], m["anc"]]))
                for m in self.measurements]

    def _refresh_belief(self):
        self.belief, _, self.belief_t = _run_filter(
            self.config, self.dyn, self._meas_tuples(), self.seed, self.n_particles,
            regimen=self.current_regimen())

    def _refit_point_estimate(self):
        """Replay the point estimator over the measurement log."""
        dyn = self.dyn
        ts = dyn.ts
        regimen = self.current_regimen()
        chi = AugmentedState(self.config.x0(), np.zeros((8, 8)), self.config.theta0())
        meas_at = dict(self._meas_tuples())
        if 0 in meas_at and self.config.filter_opts().get("fraction_from_baseline", True):
            y0 = meas_at[0]
            th = chi.theta_hat.copy()
            th[-1] = float(np.clip(y0[1] / y0[0], 1e-6, 1 - 1e-6))
            chi = AugmentedState(chi.x, chi.xi, th)
        residuals = []
        last_t = max(meas_at) if meas_at else 0
        for t in range(min(last_t + 1, ts.n_steps)):
            u = regimen.u_at(t, ts)
            if t in meas_at:
                y = meas_at[t]
                residuals.append({"day": t // 24,
                                  "sq_residual": residual_sq(dyn.spec, y, chi.x,
                                                             chi.theta_hat, t)})
                chi = dyn.step_with_output(chi, u, None, y, t)
            else:
                xi2 = propagate_sensitivity(dyn.spec, chi.xi, chi.x, u, None,
                                            chi.theta_hat, t)
                chi = AugmentedState(dyn.spec.f(t, chi.x, u, None, chi.theta_hat),
                                     xi2, chi.theta_hat)
        if meas_at:
            self.theta_hat = chi.theta_hat
        self.residuals = residuals

    def current_regimen(self) -> DoseRegimen:
        if self.decisions:
            daily = list(self.decisions[-1]["regimen"])
            n_days = int(np.ceil(self.dyn.ts.n_steps / 24))
            daily = (daily + [0.0] * n_days)[:n_days]
            return DoseRegimen(daily=tuple(daily))
        return _nominal_regimen(self.dyn.model, self.dyn.ts)

    def forecast(self, regimen_days: list[float]) -> dict:
        """Per-day 10/50/90 bands of mature counts and neutrophils under a
        regimen, marginalizing future measurements."""
        ts = self.dyn.ts
        n_days = int(np.ceil(ts.n_steps / 24))
        daily = (list(regimen_days) + [0.0] * n_days)[:n_days]
        u_max = self.dyn.spec.u_max
        daily = [min(max(float(v), 0.0), u_max) for v in daily]
        reg = DoseRegimen(daily=tuple(daily))
        key = zlib.crc32(json.dumps(daily).encode())
        r = rngmod.stream(self.seed, rngmod.SCENARIO, self.belief_t, key)
        pts = self.belief.particles.copy()
        w = self.belief.weights
        days, wbc_bands, anc_bands = [], [], []

        def record(t):
            x8 = pts.x[:, 7]
            anc = pts.theta[:, 7] * x8
            days.append(t // 24)
            wbc_bands.append(weighted_quantiles(x8, w, (0.1, 0.5, 0.9)))
            anc_bands.append(weighted_quantiles(anc, w, (0.1, 0.5, 0.9)))

        record(self.belief_t)
        for t in range(self.belief_t, ts.n_steps):
            pts = self.dyn.transition_batch(pts, reg.u_at(t, ts), t, r)
            if (t + 1) % 24 == 0 or t + 1 == ts.n_steps:
                record(t + 1)
        return {
            "from_day": self.belief_t // 24,
            "days": days,
            "wbc": [{"q10": b[0], "q50": b[1], "q90": b[2]} for b in wbc_bands],
            "anc": [{"q10": b[0], "q50": b[1], "q90": b[2]} for b in anc_bands],
            "band": [self.dyn.cost.band_lo, self.dyn.cost.band_hi],
            "regimen": daily,
        }

    def start_optimize(self, req: OptimizeRequest) -> str:
        job_id = uuid.uuid4().hex[:12]
        self.jobs[job_id] = {"status": "running", "result": None, "error": None}

        belief = self.belief
        t_now = self.belief_t

        def work():
            try:
                opts = self.config.optimizer_opts()
                future_blocks = [tuple(b) for b in opts["day_blocks"]
                                 if b[1] * 24 > t_now]
                if not future_blocks:
                    raise RuntimeError("no free dose days remain in this cycle")
                cands = candidate_grid(self.dyn.model, self.dyn.ts,
                                       levels=tuple(opts["levels"]),
                                       day_blocks=future_blocks)
                best, est, table = optimize_regimen(
                    self.dyn, belief, cands, t0=t_now,
                    n_scenarios=req.n_scenarios, seed=self.seed,
                    scenario_mode=opts["scenario_mode"])
                nominal = _nominal_regimen(self.dyn.model, self.dyn.ts)
                nom_row = next((row for row in table
                                if row["doses"] == nominal.as_list()), None)
                self.jobs[job_id].update(status="done", result={
                    "winner": {"doses": best.as_list(), "mean_cost": est.value,
                               "se": est.se},
                    "nominal": nom_row,
                    "candidates": table,
                    "from_day": t_now // 24,
                    "n_scenarios": req.n_scenarios,
                })
            except Exception as exc:  # surfaced through the poll endpoint
                self.jobs[job_id].update(status="error", error=str(exc))

        threading.Thread(target=work, daemon=True).start()
        return job_id

    def summary(self) -> dict:
        return {
            "session_id": self.id,
            "schema_version": API_SCHEMA_VERSION,
            "config_hash": self.config.hash,
            "seed": self.seed,
            "created": self.created,
            "updated": self.updated,
            "bsa_m2": self.config.raw["model"]["bsa_m2"],
            "nominal_daily_dose_mg": self.dyn.model.nominal_dose,
            "u_max_mg": self.dyn.model.u_max,
            "band": [self.dyn.cost.band_lo, self.dyn.cost.band_hi],
            "measurements": self.measurements,
            "decisions": self.decisions,
            "theta_hat": {name: float(v) for name, v in zip(THETA_NAMES, self.theta_hat)},
            "residuals": self.residuals,
            "belief": belief_summary(self.belief),
            "belief_day": self.belief_t // 24,
            "current_regimen": self.current_regimen().as_list(),
        }

    def export(self) -> dict:
        return {
            "schema_version": API_SCHEMA_VERSION,
            "session": self.summary(),
            "config": self.config.raw,
            "replay": {
                "seed": self.seed,
                "n_particles": self.n_particles,
                "regimen": self.current_regimen().as_list(),
                "note": "dosewise filter --measurements <this log> --seed <seed> "
                        "--regimen <this regimen> reproduces the belief summary",
            },
        }


# -- application --------------------------------------------------------------


def create_app(snapshot_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="dosewise session service", version="0.1.0")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    sessions: dict[str, Session] = {}
    store_lock = threading.Lock()

    def get_session(sid: str) -> Session:
        s = sessions.get(sid)
        if s is None:
            raise HTTPException(404, f"unknown session {sid}")
        return s

    def snapshot(s: Session):
        if snapshot_dir:
            os.makedirs(snapshot_dir, exist_ok=True)
            with open(os.path.join(snapshot_dir, f"{s.id}.json"), "w") as fh:
                json.dump(s.export(), fh, indent=2, sort_keys=True)

    @app.exception_handler(DegenerateUpdateError)
    async def degenerate_handler(request, exc):
        return JSONResponse(status_code=500, content={
            "error": "numerical", "message": str(exc),
            "max_loglik": exc.max_loglik})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "schema_version": API_SCHEMA_VERSION}

    @app.get("/schema")
    def schema():
        return {
            "schema_version": API_SCHEMA_VERSION,
            "config_schema_version": SCHEMA_VERSION,
            "requests": {
                "create_session": CreateSession.model_json_schema(),
                "measurement": Measurement.model_json_schema(),
                "forecast": ForecastRequest.model_json_schema(),
                "optimize": OptimizeRequest.model_json_schema(),
                "decision": Decision.model_json_schema(),
            },
        }

    @app.post("/sessions", status_code=201)
    def create_session(req: CreateSession):
        sid = uuid.uuid4().hex[:12]
        s = Session(sid, req)
        with store_lock:
            sessions[sid] = s
        snapshot(s)
        return s.summary()

    @app.get("/sessions/{sid}")
    def get_summary(sid: str):
        return get_session(sid).summary()

    @app.post("/sessions/{sid}/measurements")
    def post_measurement(sid: str, req: Measurement):
        s = get_session(sid)
        with s.lock:
            if req.retry_token and req.retry_token in s.retry_cache:
                return s.retry_cache[req.retry_token]
            t = req.day * 24
            if not s.dyn.ts.has_measurement(t):
                raise HTTPException(422, f"day {req.day} is not on the measurement "
                                         f"calendar {sorted(s.dyn.ts.t_meas)}")
            if s.measurements and req.day <= s.measurements[-1]["day"]:
                raise HTTPException(409, f"measurement days must increase "
                                         f"(last was {s.measurements[-1]['day']})")
            s.measurements.append({"day": req.day, "wbc": req.wbc, "anc": req.anc})
            s._refit_point_estimate()
            s._refresh_belief()
            s.updated = datetime.now(timezone.utc).isoformat()
            out = {
                "theta_hat": {n: float(v) for n, v in zip(THETA_NAMES, s.theta_hat)},
                "belief": belief_summary(s.belief),
                "belief_day": s.belief_t // 24,
                "residuals": s.residuals,
            }
            if req.retry_token:
                s.retry_cache[req.retry_token] = out
        snapshot(s)
        return out

    @app.post("/sessions/{sid}/forecast")
    def forecast(sid: str, req: ForecastRequest):
        s = get_session(sid)
        with s.lock:
            return s.forecast(req.regimen)

    @app.post("/sessions/{sid}/optimize", status_code=202)
    def optimize(sid: str, req: OptimizeRequest):
        s = get_session(sid)
        with s.lock:
            if req.retry_token and req.retry_token in s.retry_cache:
                return s.retry_cache[req.retry_token]
            job_id = s.start_optimize(req)
            out = {"job_id": job_id, "poll": f"/sessions/{sid}/jobs/{job_id}"}
            if req.retry_token:
                s.retry_cache[req.retry_token] = out
        return out

    @app.get("/sessions/{sid}/jobs/{job_id}")
    def job_status(sid: str, job_id: str):
        s = get_session(sid)
        job = s.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        return job

    @app.post("/sessions/{sid}/decisions")
    def record_decision(sid: str, req: Decision):
        s = get_session(sid)
        with s.lock:
            if req.retry_token and req.retry_token in s.retry_cache:
                return s.retry_cache[req.retry_token]
            u_max = s.dyn.spec.u_max
            if any(d < 0 or d > u_max for d in req.regimen):
                raise HTTPException(422, f"doses must lie in [0, {u_max}] mg/day")
            entry = {"regimen": [float(v) for v in req.regimen], "note": req.note,
                     "recorded": datetime.now(timezone.utc).isoformat(),
                     "index": len(s.decisions)}
            s.decisions.append(entry)
            s.updated = entry["recorded"]
            out = {"acknowledged": True, "decision": entry}
            if req.retry_token:
                s.retry_cache[req.retry_token] = out
        snapshot(s)
        return out

    @app.get("/sessions/{sid}/export")
    def export(sid: str):
        return get_session(sid).export()

    return app


app = create_app(os.environ.get("DOSEWISE_SESSION_DIR"))


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host=os.environ.get("DOSEWISE_HOST", "127.0.0.1"),
                port=int(os.environ.get("DOSEWISE_PORT", "8754")), log_level="warning")
