"""Belief-space planning: expected costs, exact grid value recursion on finite
toys, brute-force policy enumeration, Monte-Carlo rollouts, candidate-regimen
optimization with common random numbers, and the reactive dose-adjustment
baseline.

The value recursion follows the two belief-transition branches: when a
measurement arrives, the next belief is a random posterior indexed by the
measurement; when none arrives, the next belief is the deterministic
prediction. Off the decision calendar the control is pinned to the default,
so the recursion evaluates (rather than minimizes) at those stages.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .augmented import AugmentedDynamics, AugmentedParticles
from .belief import (DegenerateUpdateError, ParticleBelief, bayes_update,
                     predict)
from .toys import (FiniteToyPOMDP, ImpossibleObservationError,
                   exact_filter_step, exact_initial_belief)


class TooLargeError(RuntimeError):
    """Enumeration guard tripped."""


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    se: float
    evaluations: int
    excluded: int = 0

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("value must be finite")
        if self.se < 0:
            raise ValueError("standard error must be nonnegative")


# ---------------------------------------------------------------------------
# simplex grid + Freudenthal interpolation
# ---------------------------------------------------------------------------


def simplex_grid(n_states: int, resolution: int) -> np.ndarray:
    """All compositions of (resolution-1) into n_states parts, as integers."""
    if resolution < 2:
        raise ValueError("grid resolution must be >= 2")
    m = resolution - 1

    def compositions(total, parts):
        if parts == 1:
            yield (total,)
            return
        for head in range(total + 1):
            for rest in compositions(total - head, parts - 1):
                yield (head,) + rest

    return np.array(list(compositions(m, n_states)), dtype=np.int64)


class SimplexInterpolator:
    """Barycentric interpolation on the Freudenthal triangulation of the grid.

    Reproduces linear functions exactly, which is what makes the grid
    recursion exact wherever the value function has no kink inside a cell.
    """

    def __init__(self, n_states: int, resolution: int):
        self.s = n_states
        self.m = resolution - 1
        self.nodes = simplex_grid(n_states, resolution)
        base = (self.m + 1) ** np.arange(n_states, dtype=np.int64)
        keys = self.nodes @ base
        order = np.argsort(keys)
        self._sorted_keys = keys[order]
        self._order = order
        self._base = base

    @property
    def node_beliefs(self) -> np.ndarray:
        return self.nodes / float(self.m)

    def node_index(self, comps: np.ndarray) -> np.ndarray:
        keys = comps @ self._base
        pos = np.searchsorted(self._sorted_keys, keys)
        return self._order[pos]

    def weights(self, z: np.ndarray):
        """Vertex indices and barycentric weights for each row of z (B, S)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        z = np.clip(z, 0.0, None)
        z = z / z.sum(axis=1, keepdims=True)
        b, s = z.shape
        # staircase coordinates x_j = m * sum_{i>=j} z_i, non-increasing
        x = self.m * np.cumsum(z[:, ::-1], axis=1)[:, ::-1]
        x[:, 0] = self.m
        v = np.floor(x)
        v = np.minimum(v, self.m)
        v = np.minimum.accumulate(v, axis=1)
        d = np.clip(x - v, 0.0, 1.0)
        d[:, 0] = 0.0
        vert_idx = np.empty((b, s), dtype=np.int64)
        wts = np.empty((b, s))
        if s == 1:
            vert_idx[:, 0] = self.node_index(v.astype(np.int64))
            wts[:, 0] = 1.0
            return vert_idx, wts
        order = np.argsort(-d[:, 1:], axis=1, kind="stable") + 1
        dsort = np.take_along_axis(d, order, axis=1)
        wts[:, 0] = 1.0 - dsort[:, 0]
        wts[:, 1:s - 1] = dsort[:, :s - 2] - dsort[:, 1:s - 1]
        wts[:, s - 1] = dsort[:, s - 2]
        vertex = v.astype(np.int64).copy()
        comp = np.empty_like(vertex)
        rows = np.arange(b)
        for k in range(s):
            if k > 0:
                vertex[rows, order[:, k - 1]] += 1
            comp[:, :s - 1] = vertex[:, :s - 1] - vertex[:, 1:]
            comp[:, s - 1] = vertex[:, s - 1]
            valid = (comp >= 0).all(axis=1)
            if not valid.all():
                bad = ~valid
                if np.any(wts[bad, k] > 1e-9):
                    raise RuntimeError("invalid interpolation vertex with weight > 0")
                wts[bad, k] = 0.0
                comp[bad] = 0
            vert_idx[:, k] = self.node_index(comp)
        return vert_idx, wts

    def interp(self, values: np.ndarray, z: np.ndarray) -> np.ndarray:
        idx, w = self.weights(z)
        return np.sum(values[idx] * w, axis=1)


# ---------------------------------------------------------------------------
# exact grid recursion on finite toys
# ---------------------------------------------------------------------------


@dataclass
class PolicyTable:
    """Greedy actions at grid nodes per decision stage; default elsewhere."""
    toy: FiniteToyPOMDP
    interp: SimplexInterpolator
    actions: dict                      # t -> (n_nodes,) int array
    u_default: int

    def action(self, t: int, z) -> int:
        if t not in self.toy.t_dec:
            return self.u_default
        idx, w = self.interp.weights(np.atleast_2d(z))
        best = idx[0][np.argmax(w[0])]
        return int(self.actions[t][best])


@dataclass
class DPResult:
    toy: FiniteToyPOMDP
    resolution: int
    interp: SimplexInterpolator
    values: list                       # t -> (n_nodes,) arrays, t = 0..N
    policy: PolicyTable

    def value_at(self, t: int, z) -> float:
        return float(self.interp.interp(self.values[t], np.atleast_2d(z))[0])

    def backup(self, t: int, z: np.ndarray):
        """One exact Bellman step at an arbitrary belief using the stored J_{t+1}."""
        toy = self.toy
        z = np.asarray(z, dtype=float)
        actions = range(toy.n_actions) if t in toy.t_dec else [toy.u_default]
        best, best_u = np.inf, toy.u_default
        for u in actions:
            val = float(z @ toy.stage_cost[t, :, u])
            pred = z @ toy.transition[u]
            if (t + 1) in toy.t_meas:
                for y in range(toy.n_obs):
                    post = pred * toy.observation[:, y]
                    py = post.sum()
                    if py <= 0.0:
                        continue
                    val += py * self.value_at(t + 1, post / py)
            else:
                val += self.value_at(t + 1, pred)
            if val < best:
                best, best_u = val, u
        return best, best_u

    def value_from_prior(self, p0=None) -> float:
        """Optimal expected total cost starting from the prior, including the
        baseline conditioning when the calendar starts with a measurement."""
        toy = self.toy
        p0 = toy.p0 if p0 is None else np.asarray(p0, dtype=float)
        if 0 not in toy.t_meas:
            return self.backup(0, p0)[0]
        total = 0.0
        for y in range(toy.n_obs):
            post = p0 * toy.observation[:, y]
            py = post.sum()
            if py > 0.0:
                total += py * self.backup(0, post / py)[0]
        return total


def dp_solve_finite(toy: FiniteToyPOMDP, resolution: int) -> DPResult:
    """Backward value recursion on the belief simplex grid."""
    interp = SimplexInterpolator(toy.n_states, resolution)
    zs = interp.node_beliefs                     # (n_nodes, S)
    n_nodes = zs.shape[0]
    n = toy.horizon
    values = [None] * (n + 1)
    values[n] = zs @ toy.terminal_cost
    actions_tbl = {}
    for t in range(n - 1, -1, -1):
        act_list = list(range(toy.n_actions)) if t in toy.t_dec else [toy.u_default]
        vals_u = np.empty((len(act_list), n_nodes))
        for i, u in enumerate(act_list):
            stage = zs @ toy.stage_cost[t, :, u]
            pred = zs @ toy.transition[u]
            if (t + 1) in toy.t_meas:
                cont = np.zeros(n_nodes)
                for y in range(toy.n_obs):
                    post = pred * toy.observation[None, :, y]
                    py = post.sum(axis=1)
                    ok = py > 0.0
                    if ok.any():
                        vals = interp.interp(values[t + 1], post[ok] / py[ok, None])
                        cont[ok] += py[ok] * vals
            else:
                cont = interp.interp(values[t + 1], pred)
            vals_u[i] = stage + cont
        values[t] = vals_u.min(axis=0)
        if t in toy.t_dec:
            actions_tbl[t] = np.array(act_list, dtype=np.int64)[vals_u.argmin(axis=0)]
    pol = PolicyTable(toy=toy, interp=interp, actions=actions_tbl, u_default=toy.u_default)
    return DPResult(toy=toy, resolution=resolution, interp=interp, values=values, policy=pol)


# ---------------------------------------------------------------------------
# brute-force enumeration over history-dependent policies
# ---------------------------------------------------------------------------


def _history_nodes(toy: FiniteToyPOMDP):
    """Observation-history prefixes available at each stage."""
    hist = [()] if 0 not in toy.t_meas else [(y,) for y in range(toy.n_obs)]
    at_stage = {}
    for t in range(toy.horizon):
        at_stage[t] = list(hist)
        if (t + 1) in toy.t_meas:
            hist = [h + (y,) for h in hist for y in range(toy.n_obs)]
    return at_stage


def brute_force_policy_enum(toy: FiniteToyPOMDP, guard: int = 1_000_000):
    """Exact optimum by exhausting deterministic history-dependent policies.

    Each policy is evaluated in closed form by propagating unnormalized
    history-conditioned state distributions, so the only approximation
    anywhere is none.
    """
    at_stage = _history_nodes(toy)
    slots = [(t, h) for t in sorted(toy.t_dec) for h in at_stage[t]]
    n_policies = toy.n_actions ** len(slots)
    if n_policies > guard:
        raise TooLargeError(f"{n_policies} policies exceed the {guard} guard")
    slot_index = {s: i for i, s in enumerate(slots)}

    if 0 in toy.t_meas:
        init = {(y,): toy.p0 * toy.observation[:, y] for y in range(toy.n_obs)}
    else:
        init = {(): toy.p0.copy()}

    best = np.inf
    best_assign = None
    for assign in itertools.product(range(toy.n_actions), repeat=len(slots)):
        total = 0.0
        branches = {h: b.copy() for h, b in init.items()}
        for t in range(toy.horizon):
            nxt = {}
            for hist, b in branches.items():
                u = assign[slot_index[(t, hist)]] if t in toy.t_dec else toy.u_default
                total += float(b @ toy.stage_cost[t, :, u])
                b2 = b @ toy.transition[u]
                if (t + 1) in toy.t_meas:
                    for y in range(toy.n_obs):
                        nxt[hist + (y,)] = b2 * toy.observation[:, y]
                else:
                    nxt[hist] = b2
            branches = nxt
        total += sum(float(b @ toy.terminal_cost) for b in branches.values())
        if total < best:
            best, best_assign = total, assign
    return best, {"n_policies": n_policies, "assignment": best_assign, "slots": slots}


# ---------------------------------------------------------------------------
# rollout environments
# ---------------------------------------------------------------------------


class ToyBeliefEnv:
    """Exact belief dynamics of a finite toy, for Monte-Carlo rollouts."""

    def __init__(self, toy: FiniteToyPOMDP):
        self.toy = toy
        self.ts = toy.time_structure()

    def initial(self, rng):
        if 0 in self.toy.t_meas:
            pred = self.toy.p0
            py = pred @ self.toy.observation
            y0 = int(rng.choice(self.toy.n_obs, p=py / py.sum()))
            return exact_initial_belief(self.toy, y0)
        return exact_initial_belief(self.toy, None)

    def expected_stage_cost(self, z, u, t):
        return float(np.asarray(z) @ self.toy.stage_cost[t, :, int(u)])

    def expected_terminal_cost(self, z):
        return float(np.asarray(z) @ self.toy.terminal_cost)

    def sample_measurement(self, z, u, t, rng):
        pred = np.asarray(z) @ self.toy.transition[int(u)]
        py = pred @ self.toy.observation
        return int(rng.choice(self.toy.n_obs, p=py / py.sum()))

    def predict(self, z, u, t, rng):
        return exact_filter_step(self.toy, z, int(u), None, t)

    def bayes_update(self, z, u, y, t, rng):
        return exact_filter_step(self.toy, z, int(u), y, t)

    def clamp(self, u, t):
        return int(u)


class ParticleBeliefEnv:
    """Particle-belief dynamics of the augmented system, same protocol."""

    def __init__(self, dyn: AugmentedDynamics, resample_threshold: float = 0.5):
        self.dyn = dyn
        self.ts = dyn.ts
        self.resample_threshold = resample_threshold

    def expected_stage_cost(self, belief: ParticleBelief, u, t):
        return float(belief.weights @ self.dyn.stage_cost_batch(belief.particles, u, t))

    def expected_terminal_cost(self, belief: ParticleBelief):
        return float(belief.weights @ self.dyn.terminal_cost_batch(belief.particles))

    def sample_measurement(self, belief: ParticleBelief, u, t, rng):
        i = int(rng.choice(belief.n, p=belief.weights))
        one = belief.particles.select(np.array([i]))
        nxt = self.dyn.transition_batch(one, u, t, rng)
        return self.dyn.output_batch(nxt, t + 1)[0] + self.dyn.noise.sample_measure(rng)

    def predict(self, belief, u, t, rng):
        return predict(self.dyn, belief, u, t, rng)

    def bayes_update(self, belief, u, y, t, rng):
        return bayes_update(self.dyn, belief, u, y, t, rng, self.resample_threshold)

    def clamp(self, u, t):
        return float(min(max(float(u), 0.0), self.dyn.spec.u_max))


def expected_stage_cost(env, belief, u, t) -> float:
    return env.expected_stage_cost(belief, u, t)


def rollout_value(env, belief0, policy_fn, t0: int, n_scenarios: int,
                  rng: np.random.Generator) -> ValueEstimate:
    """Mean +/- se of the total belief-space cost under a policy.

    Each scenario samples a measurement sequence from the belief dynamics and
    applies the prediction/update recursion along the way. Scenarios whose
    update degenerates are excluded and counted.
    """
    if n_scenarios < 1:
        raise ValueError("n_scenarios must be >= 1")
    ts = env.ts
    totals = []
    excluded = 0
    for _ in range(n_scenarios):
        srng = np.random.Generator(np.random.Philox(rng.bit_generator.seed_seq.spawn(1)[0]))
        z = belief0
        total = 0.0
        try:
            for t in range(t0, ts.n_steps):
                u = env.clamp(policy_fn(t, z), t)
                if not ts.is_decision(t):
                    u = type(u)(ts.u_default)
                total += env.expected_stage_cost(z, u, t)
                if ts.has_measurement(t + 1):
                    y = env.sample_measurement(z, u, t, srng)
                    z = env.bayes_update(z, u, y, t, srng)
                else:
                    z = env.predict(z, u, t, srng)
            total += env.expected_terminal_cost(z)
        except (DegenerateUpdateError, ImpossibleObservationError):
            excluded += 1
            continue
        totals.append(total)
    if not totals:
        raise DegenerateUpdateError(float("-inf"))
    totals = np.asarray(totals)
    se = float(totals.std(ddof=1) / np.sqrt(len(totals))) if len(totals) > 1 else 0.0
    return ValueEstimate(value=float(totals.mean()), se=se,
                         evaluations=len(totals), excluded=excluded)


# ---------------------------------------------------------------------------
# dose regimens and candidate optimization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DoseRegimen:
    """Daily doses (mg/day) over the cycle; zero off the decision calendar."""
    daily: tuple                      # one entry per calendar day
    steps_per_day: int = 24

    def u_at(self, t: int, ts) -> float:
        if not ts.is_decision(t):
            return ts.u_default
        return float(self.daily[t // self.steps_per_day])

    @property
    def total(self) -> float:
        return float(sum(self.daily))

    def as_list(self) -> list:
        return [float(v) for v in self.daily]


def candidate_grid(model, ts, levels=(0.0, 0.25, 0.5, 1.0, 1.5, 2.0),
                   day_blocks=((0, 7), (7, 14)), locked: dict | None = None,
                   free_days: bool = False) -> list:
    """Block-tied candidate regimens: every combination of level per block.

    `locked` maps block index -> fixed level for receding-horizon re-runs;
    `free_days=True` expands to one block per day (use small level sets).
    """
    n_days = int(np.ceil(ts.n_steps / 24))
    nominal = model.nominal_dose
    blocks = [(d, d + 1) for d in range(max(b for _, b in day_blocks))] if free_days else list(day_blocks)
    locked = locked or {}
    free_idx = [i for i in range(len(blocks)) if i not in locked]
    n_cand = len(levels) ** len(free_idx)
    if n_cand > 100_000:
        raise TooLargeError(f"{n_cand} candidates; shrink the level set or use blocks")
    out = []
    for combo in itertools.product(levels, repeat=len(free_idx)):
        level_of = dict(zip(free_idx, combo))
        level_of.update(locked)
        daily = [0.0] * n_days
        for i, (lo, hi) in enumerate(blocks):
            for day in range(lo, min(hi, n_days)):
                daily[day] = level_of[i] * nominal
        out.append(DoseRegimen(daily=tuple(daily)))
    return out


def _crn_package(dyn: AugmentedDynamics, belief: ParticleBelief, t0: int,
                 n_scenarios: int, seed: int):
    """Pre-drawn randomness shared by every candidate (common random numbers)."""
    ts = dyn.ts
    n = dyn.spec.n
    s = n_scenarios
    r = rngmod.stream(seed, rngmod.SCENARIO)
    idx = r.choice(belief.n, size=s, p=belief.weights)
    d_all = np.empty((ts.n_steps - t0, s, n))
    w_meas = {}
    for t in range(t0, ts.n_steps):
        if ts.has_measurement(t) and t != ts.n_steps:
            d, w = dyn.noise.sample_joint(r, size=s)
            w_meas[t] = w
        else:
            d = dyn.noise.sample_process(r, size=s)
        d_all[t - t0] = d
    return {"idx": idx, "d": d_all, "w": w_meas}


def _regimen_components(dyn: AugmentedDynamics, belief: ParticleBelief,
                        regimen: DoseRegimen, t0: int, crn: dict):
    """Per-scenario performance cost, capped info cost, raw trace sums, and
    believed band-violation hours.

    One augmented trajectory per scenario (the open-loop expectation of the
    belief-space cost equals the expectation over augmented trajectories).
    """
    ts = dyn.ts
    cost = dyn.cost
    hours_per_step = ts.delta * 24.0
    pts = belief.particles.select(crn["idx"])
    x, xi, th = pts.x, pts.xi, pts.theta
    s = x.shape[0]
    perf = np.zeros(s)
    info = np.zeros(s)
    traces = np.zeros(s)
    violation_hours = np.zeros(s)

    def outside(xx, tt):
        anc = tt[:, -1] * xx[:, -1]
        return ((anc < cost.band_lo) | (anc > cost.band_hi)) * hours_per_step

    for t in range(t0, ts.n_steps):
        u = regimen.u_at(t, ts)
        pts_t = AugmentedParticles(x, xi, th)
        perf += dyn._perf_batch(pts_t, u)
        violation_hours += outside(x, th)
        if ts.has_measurement(t):
            tr = dyn.fim_trace_batch(pts_t, t)
            traces += tr
            if t != ts.n_steps:
                info += -np.minimum(tr, dyn.cost.trace_cap)
        if ts.has_measurement(t) and t != ts.n_steps:
            y = dyn.output_batch(pts_t, t) + crn["w"][t]
            th = dyn.theta_update_batch_rows(y, pts_t, t)
        x, xi = _kernels_step(dyn, x, xi, th, u, crn["d"][t - t0], t)
    pts_n = AugmentedParticles(x, xi, th)
    perf += dyn._perf_batch(pts_n, 0.0)
    violation_hours += outside(x, th)
    if ts.has_measurement(ts.n_steps):
        tr = dyn.fim_trace_batch(pts_n, ts.n_steps)
        traces += tr
        info += -np.minimum(tr, dyn.cost.trace_cap)
    return perf, info, traces, violation_hours


def _kernels_step(dyn: AugmentedDynamics, x, xi, th, u, d, t):
    stepped = dyn.step_batch(AugmentedParticles(x, xi, th), u, d, t)
    return stepped.x, stepped.xi


def evaluate_candidates(dyn: AugmentedDynamics, belief: ParticleBelief,
                        candidates: list, t0: int, n_scenarios: int, seed: int,
                        scenario_mode: str = "augmented") -> list:
    """Common-random-number table of per-candidate cost components."""
    if not candidates:
        raise ValueError("empty candidate set")
    table = []
    if scenario_mode == "augmented":
        crn = _crn_package(dyn, belief, t0, n_scenarios, seed)
        for reg in candidates:
            perf, info, traces, hours = _regimen_components(dyn, belief, reg, t0, crn)
            combined = perf + dyn.cost.lam_info * info
            table.append({
                "doses": reg.as_list(), "total_dose": reg.total,
                "mean_cost": float(combined.mean()),
                "se": float(combined.std(ddof=1) / np.sqrt(len(combined))) if len(combined) > 1 else 0.0,
                "mean_perf": float(perf.mean()),
                "mean_info": float(info.mean()),
                "mean_trace_sum": float(traces.mean()),
                "mean_band_violation_hours": float(hours.mean()),
                "evaluations": int(len(perf)), "excluded": 0,
            })
    elif scenario_mode == "belief":
        env = ParticleBeliefEnv(dyn)
        for reg in candidates:
            # identical stream for every candidate: common random numbers
            r = rngmod.stream(seed, rngmod.SCENARIO)
            est = rollout_value(env, belief, lambda t, z, reg=reg: reg.u_at(t, dyn.ts),
                                t0, n_scenarios, r)
            table.append({
                "doses": reg.as_list(), "total_dose": reg.total,
                "mean_cost": est.value, "se": est.se,
                "mean_perf": None, "mean_info": None,
                "mean_trace_sum": None, "mean_band_violation_hours": None,
                "evaluations": est.evaluations, "excluded": est.excluded,
            })
    else:
        raise ValueError(f"unknown scenario_mode {scenario_mode!r}")
    return table


def select_argmin(table: list, lam_info: float | None = None) -> int:
    """Index of the best candidate; ties broken by total dose, then doses.

    With `lam_info` given, the combined objective is recomputed from the
    stored components, so one table serves any information weight.
    """
    def key(i):
        row = table[i]
        if lam_info is None or row.get("mean_perf") is None:
            cost = row["mean_cost"]
        else:
            cost = row["mean_perf"] + lam_info * row["mean_info"]
        return (cost, row["total_dose"], tuple(row["doses"]))

    return min(range(len(table)), key=key)


def optimize_regimen(dyn: AugmentedDynamics, belief: ParticleBelief, candidates: list,
                     t0: int = 0, n_scenarios: int = 500, seed: int = 0,
                     scenario_mode: str = "augmented"):
    """Exhaustive candidate search under common random numbers.

    Returns (best regimen, its ValueEstimate, the full candidate table).
    """
    table = evaluate_candidates(dyn, belief, candidates, t0, n_scenarios, seed,
                                scenario_mode)
    best = select_argmin(table)
    row = table[best]
    est = ValueEstimate(value=row["mean_cost"], se=row["se"],
                        evaluations=row["evaluations"], excluded=row["excluded"])
    return candidates[best], est, table


def baseline_reactive(anc: float, current_daily_dose: float, band, u_max: float) -> float:
    """The +/-20 percent reactive adjustment: low counts reduce the dose,
    high counts increase it, inside the band nothing changes; clamped."""
    if anc <= 0 or current_daily_dose < 0:
        raise ValueError("inputs must be positive")
    lo, hi = band
    dose = current_daily_dose
    if anc < lo:
        dose = 0.8 * current_daily_dose
    elif anc > hi:
        dose = 1.2 * current_daily_dose
    return float(min(max(dose, 0.0), u_max))


# ---------------------------------------------------------------------------
# dosing policies for the closed-loop harness
# ---------------------------------------------------------------------------


class DosingPolicy:
    """Protocol: dose() on decision steps; hooks for measurements and steps."""

    def dose(self, t: int, chi) -> float:
        raise NotImplementedError

    def notify_measurement(self, t: int, y, chi):
        pass

    def observe_step(self, t: int, u: float):
        pass


class RegimenPolicy(DosingPolicy):
    def __init__(self, regimen: DoseRegimen, ts):
        self.regimen = regimen
        self.ts = ts

    def dose(self, t, chi):
        return self.regimen.u_at(t, self.ts)


class ReactiveBaselinePolicy(DosingPolicy):
    """Nominal daily dose, adjusted +/-20 percent at each measurement."""

    def __init__(self, model, ts, band):
        self.ts = ts
        self.level = model.nominal_dose
        self.band = band
        self.u_max = model.u_max

    def notify_measurement(self, t, y, chi):
        self.level = baseline_reactive(float(np.asarray(y)[1]), self.level,
                                       self.band, self.u_max)

    def dose(self, t, chi):
        return self.level if self.ts.is_decision(t) else self.ts.u_default


class RecedingHorizonPolicy(DosingPolicy):
    """Re-optimizes the remaining daily doses at each measurement.

    Maintains its own particle belief: prediction every step, Bayes update at
    measurements, candidate re-optimization right after each update. The
    baseline measurement also pins the neutrophil-fraction estimate
    (second output over first).
    """

    def __init__(self, dyn: AugmentedDynamics, prior, n_particles: int,
                 levels, day_blocks, n_scenarios: int, seed: int,
                 fraction_from_baseline: bool = True):
        self.dyn = dyn
        self.prior = prior
        self.n_particles = n_particles
        self.levels = tuple(levels)
        self.day_blocks = tuple(tuple(b) for b in day_blocks)
        self.n_scenarios = n_scenarios
        self.seed = seed
        self.fraction_from_baseline = fraction_from_baseline
        self.rng = rngmod.stream(seed, rngmod.FILTER)
        self.belief = None
        self.pending = None          # (t, u) transition awaiting its measurement
        nominal = dyn.model.nominal_dose if dyn.model is not None else 0.0
        n_days = int(np.ceil(dyn.ts.n_steps / 24))
        self.regimen = DoseRegimen(tuple(
            nominal if dyn.ts.is_decision(d * 24) else dyn.ts.u_default
            for d in range(n_days)))
        self._reopt_count = 0

    def _ensure_belief(self):
        if self.belief is None:
            from .belief import ParticleBelief
            self.belief = ParticleBelief.uniform(self.prior.sample(self.rng, self.n_particles))

    def notify_measurement(self, t, y, chi):
        from . import belief as beliefmod
        y = np.asarray(y, dtype=float)
        if t == 0:
            prior = self.prior
            if self.fraction_from_baseline and y[0] > 0:
                frac = float(np.clip(y[1] / y[0], 1e-6, 1.0 - 1e-6))
                theta0 = np.asarray(prior.theta0, dtype=float).copy()
                theta0[-1] = frac
                from dataclasses import replace as _replace
                prior = _replace(prior, theta0=theta0)
            self.belief = beliefmod.initial_belief(
                self.dyn, prior.sample, y, self.rng, self.n_particles)
        else:
            self._ensure_belief()
            if self.pending is not None:
                t_pend, u_pend = self.pending
                self.belief = beliefmod.bayes_update(self.dyn, self.belief, u_pend,
                                                     y, t_pend, self.rng)
                self.pending = None
        self._reoptimize(t)

    def observe_step(self, t, u):
        self._ensure_belief()
        from . import belief as beliefmod
        if self.dyn.ts.has_measurement(t + 1):
            self.pending = (t, u)
        else:
            self.belief = beliefmod.predict(self.dyn, self.belief, u, t, self.rng)

    def _reoptimize(self, t):
        ts = self.dyn.ts
        if t >= ts.n_steps:
            return
        nominal = self.dyn.model.nominal_dose
        future_blocks = []
        locked = {}
        for lo, hi in self.day_blocks:
            if hi * 24 <= t:
                continue                          # fully executed already
            if lo * 24 < t:                       # started: its level is committed
                locked[len(future_blocks)] = self.regimen.daily[lo] / nominal
            future_blocks.append((lo, hi))
        if not future_blocks:
            return
        cands = candidate_grid(self.dyn.model, ts, levels=self.levels,
                               day_blocks=future_blocks, locked=locked or None)
        best, _, _ = optimize_regimen(self.dyn, self.belief, cands, t0=t,
                                      n_scenarios=self.n_scenarios,
                                      seed=self.seed + 7919 * self._reopt_count)
        daily = list(best.daily)
        for d in range(min(t // 24, len(daily))):
            daily[d] = self.regimen.daily[d]      # keep the executed past
        self.regimen = DoseRegimen(tuple(daily))
        self._reopt_count += 1

    def dose(self, t, chi):
        return self.regimen.u_at(t, self.dyn.ts)
