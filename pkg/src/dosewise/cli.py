"""Batch command-line interface.

Subcommands: simulate, calibrate, fit, filter, optimize, evaluate, toy-dp,
validate. Every artifact embeds the config hash and master seed; rerunning a
command with the same (config, seed) reproduces the artifact byte for byte.

Exit codes: 0 ok, 1 validation failure, 2 bad configuration/input,
3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import artifacts, rng as rngmod
from .augmented import (AugmentedState, band_violation_hours, simulate_closed_loop)
from .belief import (DegenerateUpdateError, ParticleBelief, bayes_update,
                     belief_summary, initial_belief, predict)
from .config import AppConfig, default_config
from .estimator import residual_sq, update as estimator_update
from .model import CalibrationError
from .policy import (DoseRegimen, ReactiveBaselinePolicy, RecedingHorizonPolicy,
                     RegimenPolicy, brute_force_policy_enum, candidate_grid,
                     dp_solve_finite, optimize_regimen)
from .sensitivity import propagate_sensitivity
from .toys import validation_toys

log = logging.getLogger("dosewise.cli")


class ConfigError(RuntimeError):
    pass


def _load_config(args) -> AppConfig:
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        try:
            return AppConfig.load(args.config)
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
    return default_config()


def _load_measurements(path, ts):
    if not os.path.exists(path):
        raise ConfigError(f"measurements file not found: {path}")
    with open(path) as fh:
        rows = json.load(fh)
    out = []
    seen = set()
    for row in rows:
        try:
            day, wbc, anc = int(row["day"]), float(row["wbc"]), float(row["anc"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad measurement row {row!r}: {exc}") from exc
        t = day * 24
        if not ts.has_measurement(t):
            raise ConfigError(f"day {day} is not on the measurement calendar")
        if day in seen:
            raise ConfigError(f"duplicate measurement day {day}")
        seen.add(day)
        out.append((t, np.array([wbc, anc])))
    return sorted(out)


def _nominal_regimen(model, ts) -> DoseRegimen:
    n_days = int(np.ceil(ts.n_steps / 24))
    nominal = model.nominal_dose
    daily = tuple(nominal if ts.is_decision(d * 24) else ts.u_default
                  for d in range(n_days))
    return DoseRegimen(daily=daily)


def _regimen_from_arg(arg, model, ts) -> DoseRegimen:
    if arg == "nominal":
        return _nominal_regimen(model, ts)
    if arg == "zero":
        return DoseRegimen(daily=tuple([0.0] * int(np.ceil(ts.n_steps / 24))))
    try:
        daily = [float(v) for v in json.loads(arg)]
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"regimen must be 'nominal', 'zero' or a JSON list: {exc}")
    n_days = int(np.ceil(ts.n_steps / 24))
    if len(daily) < n_days:
        daily = daily + [0.0] * (n_days - len(daily))
    return DoseRegimen(daily=tuple(daily[:n_days]))


# ---------------------------------------------------------------------------


def cmd_calibrate(args):
    cfg = default_config(bsa_m2=args.bsa)
    text = cfg.dump() + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "model.json")
        with open(path, "w") as fh:
            fh.write(text)
        print(f"wrote {path} (config_hash={cfg.hash})")
    else:
        sys.stdout.write(text)
    return 0


def cmd_simulate(args):
    cfg = _load_config(args)
    dyn = cfg.dynamics()
    model, ts = dyn.model, dyn.ts
    regimen = _regimen_from_arg(args.regimen, model, ts)
    theta_true = cfg.theta0()
    chi0 = AugmentedState(cfg.x0(), np.zeros((model.n, model.p)), cfg.theta0())
    traj = simulate_closed_loop(dyn, chi0, RegimenPolicy(regimen, ts),
                                seed=args.seed, theta_true=theta_true)
    os.makedirs(args.out, exist_ok=True)
    if args.format == "csv":
        path = os.path.join(args.out, "trajectory.csv")
        artifacts.write_trajectory_csv(path, traj, cfg.hash)
    else:
        path = os.path.join(args.out, "trajectory.json")
        artifacts.write_json(path, artifacts.envelope(
            cfg.hash, args.seed, "simulate",
            {"regimen": regimen.as_list(), **artifacts.trajectory_json(traj)}))
    print(f"wrote {path} (total_cost={traj.total_cost:.6g})")
    return 0


def cmd_fit(args):
    cfg = _load_config(args)
    dyn = cfg.dynamics()
    ts = dyn.ts
    meas = _load_measurements(args.measurements, ts)
    meas_at = dict(meas)
    regimen = _regimen_from_arg(args.regimen, dyn.model, ts)

    chi = AugmentedState(cfg.x0(), np.zeros((dyn.model.n, dyn.model.p)), cfg.theta0())
    theta_traj = [{"t_hours": 0, "theta_hat": [float(v) for v in chi.theta_hat]}]
    residuals = []
    last_t = max(meas_at) if meas_at else 0
    for t in range(min(last_t + 1, ts.n_steps)):
        u = regimen.u_at(t, ts)
        if t in meas_at:
            y = meas_at[t]
            residuals.append({"t_hours": t,
                              "sq_residual": residual_sq(dyn.spec, y, chi.x,
                                                         chi.theta_hat, t)})
            th2 = estimator_update(dyn.spec, ts, y, chi.x, chi.theta_hat, t, dyn.est)
            chi = dyn.step_with_output(chi, u, None, y, t)
            theta_traj.append({"t_hours": t + 1, "theta_hat": [float(v) for v in th2]})
        elif ts.has_measurement(t):
            # calendar slot without recorded data: no estimate update
            xi2 = propagate_sensitivity(dyn.spec, chi.xi, chi.x, u, None,
                                        chi.theta_hat, t)
            chi = AugmentedState(dyn.spec.f(t, chi.x, u, None, chi.theta_hat),
                                 xi2, chi.theta_hat)
        else:
            chi = dyn.step_no_meas(chi, u, None, t)
    payload = artifacts.envelope(cfg.hash, args.seed, "fit", {
        "theta_names": ["conversion_vmax", "conversion_km", "prolif_max",
                        "feedback_steepness", "feedback_scale", "drug_effect_max",
                        "drug_effect_km", "neutrophil_fraction"],
        "theta_trajectory": theta_traj,
        "residual_history": residuals,
        "theta_final": theta_traj[-1]["theta_hat"],
    })
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "fit.json")
    artifacts.write_json(path, payload)
    print(f"wrote {path}")
    return 0


def _run_filter(cfg, dyn, measurements, seed, n_particles, regimen=None):
    """Replay the belief recursion along the calendar with given measurements.

    `regimen` is the dose schedule assumed for the transitions between
    measurements (nominal when not given).
    """
    ts = dyn.ts
    fopts = cfg.filter_opts()
    thresh = fopts["resample_threshold"]
    meas_at = dict(measurements)
    r = rngmod.stream(seed, rngmod.FILTER)

    theta0 = cfg.theta0()
    if 0 in meas_at and fopts.get("fraction_from_baseline", True):
        y0 = meas_at[0]
        if y0[0] > 0:
            theta0 = theta0.copy()
            theta0[-1] = float(np.clip(y0[1] / y0[0], 1e-6, 1 - 1e-6))
    prior = cfg.prior(theta0=theta0)
    belief = initial_belief(dyn, prior.sample, meas_at.get(0), r, n_particles,
                            resample_threshold=thresh)
    snapshots = [{"t_hours": 0, **belief_summary(belief)}]
    if not meas_at:
        return belief, snapshots, 0
    if regimen is None:
        regimen = _nominal_regimen(dyn.model, ts)
    last_t = max(meas_at)
    for t in range(min(last_t, ts.n_steps)):
        u = regimen.u_at(t, ts)
        if ts.has_measurement(t + 1) and (t + 1) in meas_at:
            belief = bayes_update(dyn, belief, u, meas_at[t + 1], t, r, thresh)
            snapshots.append({"t_hours": t + 1, **belief_summary(belief)})
        elif ts.has_measurement(t + 1):
            # calendar slot without data: prediction-only through the slot
            pts = dyn.transition_batch(belief.particles, u, t, r)
            belief = ParticleBelief(pts, belief.log_weights.copy())
        else:
            belief = predict(dyn, belief, u, t, r)
    return belief, snapshots, last_t


def cmd_filter(args):
    cfg = _load_config(args)
    dyn = cfg.dynamics()
    meas = _load_measurements(args.measurements, dyn.ts)
    n_particles = args.particles or cfg.filter_opts()["n_particles"]
    regimen = _regimen_from_arg(args.regimen, dyn.model, dyn.ts)
    belief, snapshots, _ = _run_filter(cfg, dyn, meas, args.seed, n_particles,
                                       regimen=regimen)
    payload = artifacts.envelope(cfg.hash, args.seed, "filter", {
        "n_particles": int(n_particles),
        "measurements": [{"t_hours": int(t), "y": [float(v) for v in y]}
                         for t, y in meas],
        "snapshots": snapshots,
    })
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "filter.json")
    artifacts.write_json(path, payload)
    print(f"wrote {path} (final ESS={belief.ess:.1f})")
    return 0


def cmd_optimize(args):
    cfg = _load_config(args)
    dyn = cfg.dynamics()
    opts = cfg.optimizer_opts()
    n_scen = args.scenarios or opts["n_scenarios"]
    n_particles = args.particles or cfg.filter_opts()["n_particles"]
    meas = _load_measurements(args.measurements, dyn.ts) if args.measurements else []
    belief, _, t_now = _run_filter(cfg, dyn, meas, args.seed, n_particles)
    cands = candidate_grid(dyn.model, dyn.ts, levels=tuple(opts["levels"]),
                           day_blocks=tuple(tuple(b) for b in opts["day_blocks"]))
    best, est, table = optimize_regimen(dyn, belief, cands, t0=t_now,
                                        n_scenarios=n_scen, seed=args.seed,
                                        scenario_mode=opts["scenario_mode"])
    nominal = _nominal_regimen(dyn.model, dyn.ts)
    nominal_row = next((r for r in table if r["doses"] == nominal.as_list()), None)
    payload = artifacts.envelope(cfg.hash, args.seed, "optimize", {
        "t_start_hours": int(t_now),
        "n_scenarios": int(n_scen),
        "winner": {"doses": best.as_list(), "mean_cost": est.value, "se": est.se},
        "nominal": nominal_row,
        "candidates": table,
    })
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "optimize.json")
    artifacts.write_json(path, payload)
    print(f"wrote {path} (winner cost={est.value:.6g} +/- {est.se:.2g})")
    return 0


def _perturbed_theta(theta0, rng):
    th = theta0 * rng.uniform(0.8, 1.2, size=theta0.shape)
    th[-1] = float(np.clip(th[-1], 0.05, 0.95))
    return th


def _evaluate_patient(cfg, policy_name, patient_seed, n_scenarios, n_particles):
    dyn = cfg.dynamics()
    ts, model = dyn.ts, dyn.model
    theta0, x0 = cfg.theta0(), cfg.x0()
    r_patient = rngmod.stream(patient_seed, rngmod.PRIOR)
    theta_true = _perturbed_theta(theta0, r_patient)
    chi0 = AugmentedState(x0, np.zeros((model.n, model.p)), theta0)
    band = (dyn.cost.band_lo, dyn.cost.band_hi)
    opts = cfg.optimizer_opts()
    if policy_name == "baseline":
        policy = ReactiveBaselinePolicy(model, ts, band)
    elif policy_name == "nominal":
        policy = RegimenPolicy(_nominal_regimen(model, ts), ts)
    elif policy_name == "optimized":
        policy = RecedingHorizonPolicy(
            dyn, cfg.prior(), n_particles=n_particles,
            levels=tuple(opts["levels"]),
            day_blocks=tuple(tuple(b) for b in opts["day_blocks"]),
            n_scenarios=n_scenarios, seed=patient_seed,
            fraction_from_baseline=cfg.filter_opts().get("fraction_from_baseline", True))
    else:
        raise ConfigError(f"unknown policy {policy_name!r}")
    traj = simulate_closed_loop(dyn, chi0, policy, seed=patient_seed,
                                theta_true=theta_true)
    hours = band_violation_hours(traj.plant_x, theta_true, dyn.cost, ts.delta)
    return {
        "patient_seed": int(patient_seed),
        "theta_true": [float(v) for v in theta_true],
        "band_violation_hours": hours,
        "controller_cost": traj.total_cost,
        "total_dose_mg": float(np.sum(traj.u) / 24.0),
    }


def cmd_evaluate(args):
    cfg = _load_config(args)
    n_scen = args.scenarios or 300
    n_particles = args.particles or 512
    policies = [args.policy] if args.policy != "both" else ["baseline", "optimized"]
    results = {}
    for pol in policies:
        seeds = [args.seed + 1000 * i for i in range(args.patients)]
        runner = lambda s: _evaluate_patient(cfg, pol, s, n_scen, n_particles)
        if args.threads > 1:
            with ThreadPoolExecutor(max_workers=args.threads) as ex:
                rows = list(ex.map(runner, seeds))
        else:
            rows = [runner(s) for s in seeds]
        results[pol] = rows
        mean_h = float(np.mean([r["band_violation_hours"] for r in rows]))
        log.info("policy=%s mean band-violation hours=%.2f", pol, mean_h)
    payload = artifacts.envelope(cfg.hash, args.seed, "evaluate", {
        "patients": args.patients,
        "n_scenarios": int(n_scen),
        "policies": {
            pol: {
                "per_patient": rows,
                "mean_band_violation_hours": float(np.mean(
                    [r["band_violation_hours"] for r in rows])),
                "mean_controller_cost": float(np.mean(
                    [r["controller_cost"] for r in rows])),
            } for pol, rows in results.items()
        },
    })
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "evaluate.json")
    artifacts.write_json(path, payload)
    for pol, rows in results.items():
        print(f"{pol}: mean band-violation hours = "
              f"{np.mean([r['band_violation_hours'] for r in rows]):.2f}, "
              f"mean cost = {np.mean([r['controller_cost'] for r in rows]):.6g}")
    print(f"wrote {path}")
    return 0


def cmd_toy_dp(args):
    rows = []
    print(f"{'toy':>3s} {'S':>2s} {'A':>2s} {'N':>2s} {'J0 (grid)':>14s} "
          f"{'J0 (enum)':>14s} {'|diff|':>10s} {'policies':>9s}")
    for i, toy in enumerate(validation_toys()):
        dp = dp_solve_finite(toy, args.grid)
        enum_val, meta = brute_force_policy_enum(toy)
        diff = abs(dp.value_from_prior() - enum_val)
        rows.append({"toy": i, "n_states": toy.n_states, "n_actions": toy.n_actions,
                     "horizon": toy.horizon, "j0_grid": dp.value_from_prior(),
                     "j0_enum": enum_val, "abs_diff": diff,
                     "n_policies": meta["n_policies"]})
        print(f"{i:>3d} {toy.n_states:>2d} {toy.n_actions:>2d} {toy.horizon:>2d} "
              f"{dp.value_from_prior():>14.9f} {enum_val:>14.9f} {diff:>10.2e} "
              f"{meta['n_policies']:>9d}")
    worst = max(r["abs_diff"] for r in rows)
    ok = worst < 1e-6
    print(f"worst |diff| = {worst:.2e} ({'OK' if ok else 'FAIL'} at 1e-6, grid={args.grid})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "toy_dp.json")
        artifacts.write_json(path, artifacts.envelope(
            "builtin-toys", args.seed, "toy-dp",
            {"grid": args.grid, "rows": rows, "worst_abs_diff": worst}))
        print(f"wrote {path}")
    return 0 if ok else 1


def cmd_validate(args):
    from .validation import run_validation

    cfg = _load_config(args)
    report = run_validation(cfg, quick=args.quick,
                            n_particles=args.particles or (20000 if args.quick else 100000))
    failures = [c for c in report["checks"] if not c["passed"]]
    for c in report["checks"]:
        rt = f" [{c['runtime_s']:.1f}s]" if "runtime_s" in c else ""
        print(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: {c['detail']}{rt}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "validate.json")
        # wall-clock times are stripped so the artifact is reproducible
        clean = {"passed": report["passed"], "checks": [
            {k: v for k, v in c.items() if k != "runtime_s"}
            for c in report["checks"]]}
        artifacts.write_json(path, artifacts.envelope(cfg.hash, args.seed,
                                                      "validate", clean))
        print(f"wrote {path}")
    return 1 if failures else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dosewise",
        description="Sensitivity-aware dose planning under partial observability")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="model configuration JSON")
        p.add_argument("--seed", type=lambda v: int(v) % 2**64, default=0,
                       help="master seed (unsigned 64-bit)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--particles", type=int, default=None)
        p.add_argument("--scenarios", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("calibrate", help="emit the calibrated default config")
    p.add_argument("--bsa", type=float, default=1.73, help="body surface area, m^2")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("simulate", help="closed-loop simulation under a fixed regimen")
    common(p)
    p.add_argument("--regimen", default="nominal",
                   help="'nominal', 'zero', or JSON list of daily doses (mg/day)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("fit", help="point-estimate replay over recorded measurements")
    common(p)
    p.add_argument("--measurements", required=True,
                   help="JSON list of {day, wbc, anc}")
    p.add_argument("--regimen", default="nominal")
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("filter", help="particle belief replay over measurements")
    common(p)
    p.add_argument("--measurements", required=True)
    p.add_argument("--regimen", default="nominal",
                   help="doses assumed between measurements")
    p.set_defaults(fn=cmd_filter)

    p = sub.add_parser("optimize", help="candidate-regimen search from the current belief")
    common(p)
    p.add_argument("--measurements", default=None)
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("evaluate", help="closed-loop benchmark on synthetic patients")
    common(p)
    p.add_argument("--policy", choices=("baseline", "nominal", "optimized", "both"),
                   default="both")
    p.add_argument("--patients", type=int, default=10)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("toy-dp", help="grid recursion vs enumeration on builtin toys")
    p.add_argument("--grid", type=int, default=201)
    p.add_argument("--seed", type=lambda v: int(v) % 2**64, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_toy_dp)

    p = sub.add_parser("validate", help="run the numerical oracle suite")
    common(p)
    p.add_argument("--quick", action="store_true",
                   help="smaller particle counts and fewer toys")
    p.set_defaults(fn=cmd_validate)

    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DOSEWISE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        json.dump({"error": "config", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except (DegenerateUpdateError, CalibrationError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        json.dump({"error": "numerical", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
