"""Numerical oracle suite behind `dosewise validate`.

Four independent cross-checks: model Jacobians against central finite
differences, the sensitivity recursion against frozen-noise trajectory
differencing, the particle filter against the exact discrete filter, and the
belief-grid value recursion against brute-force policy enumeration.
"""

import time

import numpy as np

from . import _kernels, rng as rngmod
from .policy import brute_force_policy_enum, dp_solve_finite
from .sensitivity import propagate_sensitivity
from .toys import (ToyFilter, exact_filter_step, exact_initial_belief, random_toy,
                   simulate_toy, tv_norm, validation_toys)


def _rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))
                 / max(np.linalg.norm(np.asarray(b)), 1e-300))


def check_jacobians(cfg, n_points=100, tol=1e-5, seed=1234):
    model = cfg.model()
    rng = np.random.default_rng(seed)
    scale = np.array([1e8, 7e7, 1e2, 1e11, 1e11, 1e11, 1e11, 1e9])
    theta0 = cfg.theta0()
    worst = 0.0
    for _ in range(n_points):
        x = scale * np.exp(rng.uniform(-1, 1, 8))
        u = rng.uniform(0, model.u_max)
        d = rng.normal(scale=1e-3 * scale)
        th = theta0 * np.exp(rng.uniform(-0.3, 0.3, 8))
        th[-1] = float(np.clip(th[-1], 0.05, 0.95))

        hx = 6e-6 * np.abs(x)
        fd = np.empty((8, 8))
        for i in range(8):
            xp, xm = x.copy(), x.copy()
            xp[i] += hx[i]
            xm[i] -= hx[i]
            fd[:, i] = (model.step(xp, u, d, th) - model.step(xm, u, d, th)) / (2 * hx[i])
        worst = max(worst, _rel(model.step_dx(x, u, d, th), fd))

        ht = 6e-6 * th
        fd_t = np.empty((8, 8))
        for j in range(8):
            tp, tm = th.copy(), th.copy()
            tp[j] += ht[j]
            tm[j] -= ht[j]
            fd_t[:, j] = (model.step(x, u, d, tp) - model.step(x, u, d, tm)) / (2 * ht[j])
        worst = max(worst, _rel(model.step_dtheta(x, u, d, th), fd_t))
    return {"name": "jacobians_vs_fd", "passed": bool(worst < tol),
            "detail": f"worst rel err {worst:.3e} over {n_points} points (tol {tol:g})"}


def check_sensitivity(cfg, tol=1e-4, seed=77):
    model = cfg.model()
    ts = cfg.time_structure()
    theta0, x0 = cfg.theta0(), cfg.x0()
    rng = np.random.default_rng(seed)
    d_seq = rng.normal(scale=1e-3 * np.maximum(x0, 0.0), size=(ts.n_steps, 8))
    nominal = model.nominal_dose
    u_of_t = lambda t: nominal if ts.is_decision(t) else ts.u_default

    t_start = time.perf_counter()
    p = len(theta0)
    params = _kernels.pack_params(model)
    deltas = 1e-4 * theta0
    thetas = np.empty((2 * p, p))
    for j in range(p):
        thetas[2 * j] = theta0
        thetas[2 * j, j] += deltas[j]
        thetas[2 * j + 1] = theta0
        thetas[2 * j + 1, j] -= deltas[j]
    xs = np.tile(x0, (2 * p, 1))

    spec = model.spec()
    x = x0.copy()
    xi = np.zeros((8, p))
    worst = 0.0
    for t in range(ts.n_steps):
        u = u_of_t(t)
        xi = propagate_sensitivity(spec, xi, x, u, d_seq[t], theta0, t)
        x = spec.f(t, x, u, d_seq[t], theta0)
        xs = _kernels.step_batch(xs, u, np.tile(d_seq[t], (2 * p, 1)), thetas, params)
        xi_fd = (xs[0::2] - xs[1::2]).T / (2.0 * deltas)[None, :]
        worst = max(worst, _rel(xi, xi_fd))
    runtime = time.perf_counter() - t_start
    return {"name": "sensitivity_vs_frozen_noise_fd",
            "passed": bool(worst < tol and runtime < 60.0),
            "detail": f"max rel err {worst:.3e} over {ts.n_steps} steps (tol {tol:g})",
            "runtime_s": runtime}


def check_filter_tv(n_particles=100000, n_toys=20, tol=None, seed=3001):
    if tol is None:
        # 0.02 is calibrated for 1e5 particles; Monte-Carlo noise scales with
        # 1/sqrt(n), so smaller runs get a proportionally wider band
        tol = 0.02 * max(1.0, np.sqrt(100000.0 / n_particles))
    rng = np.random.default_rng(seed)
    t_start = time.perf_counter()
    worst = 0.0
    ran = 0
    while ran < n_toys:
        toy = random_toy(rng, n_states=int(rng.integers(2, 4)), n_actions=2,
                         n_obs=2, horizon=int(rng.integers(3, 6)))
        actions = [int(rng.integers(toy.n_actions)) for _ in range(toy.horizon)]
        try:
            _, ys = simulate_toy(toy, lambda t: actions[t], rng)
            f = ToyFilter(toy)
            z = exact_initial_belief(toy, ys.get(0))
            pb = f.initial_belief(ys.get(0), rngmod.stream(seed + ran, 0), n_particles)
            for t in range(toy.horizon):
                u = toy.action_at(t, actions[t])
                z = exact_filter_step(toy, z, u, ys.get(t + 1), t)
                if (t + 1) in toy.t_meas:
                    pb = f.bayes_update(pb, u, ys[t + 1],
                                        t, rngmod.stream(seed + ran, t + 1))
                else:
                    pb = f.predict(pb, u, t, rngmod.stream(seed + ran, t + 1))
                worst = max(worst, tv_norm(f.histogram(pb), z))
        except Exception:
            continue
        ran += 1
    runtime = time.perf_counter() - t_start
    return {"name": "particle_vs_exact_filter_tv",
            "passed": bool(worst < tol and runtime < 300.0),
            "detail": f"worst TV {worst:.4f} over {n_toys} toys at {n_particles} "
                      f"particles (tol {tol:.3g})",
            "runtime_s": runtime}


def check_dp(grid=201, tol=1e-6):
    worst = 0.0
    for toy in validation_toys():
        dp = dp_solve_finite(toy, grid)
        enum_val, _ = brute_force_policy_enum(toy)
        worst = max(worst, abs(dp.value_from_prior() - enum_val))
    return {"name": "grid_recursion_vs_enumeration",
            "passed": bool(worst < tol),
            "detail": f"worst |diff| {worst:.3e} at grid {grid} (tol {tol:g})"}


def run_validation(cfg, quick=False, n_particles=100000):
    checks = [
        check_jacobians(cfg, n_points=25 if quick else 100),
        check_sensitivity(cfg),
        check_filter_tv(n_particles=n_particles, n_toys=5 if quick else 20),
        check_dp(grid=101 if quick else 201),
    ]
    return {"checks": checks, "passed": all(c["passed"] for c in checks)}
