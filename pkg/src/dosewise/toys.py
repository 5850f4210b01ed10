"""Small finite-state partially observed control problems.

These are the exactly-solvable substrate for validating the particle filter
(against the exact discrete filter) and the belief-space value recursion
(against brute-force policy enumeration). Measurement and decision calendars
are arbitrary subsets, so both the measurement-present and measurement-absent
belief transitions get exercised.
"""

from dataclasses import dataclass

import numpy as np

from .belief import ParticleBelief, maybe_resample
from .timegrid import TimeStructure


class ImpossibleObservationError(RuntimeError):
    """The observed symbol has zero probability under the predicted belief."""


@dataclass(frozen=True)
class FiniteToyPOMDP:
    transition: np.ndarray      # (A, S, S) row-stochastic
    observation: np.ndarray     # (S, Y) row-stochastic
    stage_cost: np.ndarray      # (N, S, A)
    terminal_cost: np.ndarray   # (S,)
    t_meas: frozenset           # subset of {0..N}
    t_dec: frozenset            # subset of {0..N-1}
    p0: np.ndarray              # (S,)
    u_default: int = 0

    def __post_init__(self):
        tr = np.asarray(self.transition, dtype=float)
        ob = np.asarray(self.observation, dtype=float)
        sc = np.asarray(self.stage_cost, dtype=float)
        tc = np.asarray(self.terminal_cost, dtype=float)
        p0 = np.asarray(self.p0, dtype=float)
        object.__setattr__(self, "transition", tr)
        object.__setattr__(self, "observation", ob)
        object.__setattr__(self, "stage_cost", sc)
        object.__setattr__(self, "terminal_cost", tc)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "t_meas", frozenset(int(t) for t in self.t_meas))
        object.__setattr__(self, "t_dec", frozenset(int(t) for t in self.t_dec))
        s = tr.shape[1]
        if tr.shape != (tr.shape[0], s, s):
            raise ValueError("transition must be (A, S, S)")
        if ob.shape[0] != s or sc.shape[1:] != (s, tr.shape[0]) or tc.shape != (s,):
            raise ValueError("inconsistent toy shapes")
        for name, rows in (("transition", tr.reshape(-1, s)), ("observation", ob),
                           ("p0", p0[None, :])):
            if np.any(rows < 0) or not np.allclose(rows.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError(f"{name} rows must be probability vectors")
        if not self.t_meas:
            raise ValueError("measurement calendar must be non-empty")

    @property
    def n_states(self) -> int:
        return self.transition.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[0]

    @property
    def n_obs(self) -> int:
        return self.observation.shape[1]

    @property
    def horizon(self) -> int:
        return self.stage_cost.shape[0]

    def time_structure(self) -> TimeStructure:
        return TimeStructure(n_steps=self.horizon, delta=1.0, t_meas=self.t_meas,
                             t_dec=self.t_dec if self.t_dec else frozenset({0}),
                             u_default=float(self.u_default))

    def action_at(self, t: int, chosen: int) -> int:
        return int(chosen) if t in self.t_dec else self.u_default


def exact_initial_belief(toy: FiniteToyPOMDP, y0=None) -> np.ndarray:
    """Prior, conditioned on the baseline observation when the calendar has one."""
    if 0 in toy.t_meas and y0 is not None:
        post = toy.p0 * toy.observation[:, int(y0)]
        norm = post.sum()
        if norm <= 0.0:
            raise ImpossibleObservationError(f"baseline observation {y0} impossible")
        return post / norm
    return toy.p0.copy()


def exact_filter_step(toy: FiniteToyPOMDP, belief: np.ndarray, u: int, y, t: int) -> np.ndarray:
    """Exact belief transition t -> t+1: matrix prediction, then Bayes if a
    measurement arrives at t+1."""
    belief = np.asarray(belief, dtype=float)
    pred = belief @ toy.transition[int(u)]
    if (t + 1) in toy.t_meas:
        if y is None:
            raise ValueError(f"measurement expected at t+1={t + 1}")
        post = pred * toy.observation[:, int(y)]
        norm = post.sum()
        if norm <= 0.0:
            raise ImpossibleObservationError(f"observation {y} impossible at t+1={t + 1}")
        return post / norm
    if y is not None:
        raise ValueError(f"no measurement scheduled at t+1={t + 1}")
    return pred


def simulate_toy(toy: FiniteToyPOMDP, action_fn, rng: np.random.Generator):
    """Sample one state path and its observations; returns (states, {t: y})."""
    s = int(rng.choice(toy.n_states, p=toy.p0))
    states = [s]
    ys = {}
    if 0 in toy.t_meas:
        ys[0] = int(rng.choice(toy.n_obs, p=toy.observation[s]))
    for t in range(toy.horizon):
        u = toy.action_at(t, action_fn(t))
        s = int(rng.choice(toy.n_states, p=toy.transition[u, s]))
        states.append(s)
        if (t + 1) in toy.t_meas:
            ys[t + 1] = int(rng.choice(toy.n_obs, p=toy.observation[s]))
    return states, ys


# -- particle-filter adapter -------------------------------------------------


class ToyParticles:
    """Integer-state particle container."""

    def __init__(self, states: np.ndarray):
        self.states = np.asarray(states, dtype=np.int64)

    def __len__(self):
        return self.states.shape[0]

    def select(self, idx) -> "ToyParticles":
        return ToyParticles(self.states[idx].copy())


class ToyFilter:
    """Particle prediction/update for a finite toy, mirroring the exact filter."""

    def __init__(self, toy: FiniteToyPOMDP):
        self.toy = toy
        self._cum = np.cumsum(toy.transition, axis=2)

    def sample_prior(self, rng: np.random.Generator, k: int) -> ParticleBelief:
        states = rng.choice(self.toy.n_states, size=k, p=self.toy.p0)
        return ParticleBelief.uniform(ToyParticles(states))

    def _propagate(self, pts: ToyParticles, u: int, rng: np.random.Generator) -> ToyParticles:
        rows = self._cum[int(u)][pts.states]          # (K, S) cumulative rows
        draws = rng.random(len(pts))
        return ToyParticles((rows > draws[:, None]).argmax(axis=1))

    def predict(self, belief: ParticleBelief, u: int, t: int,
                rng: np.random.Generator) -> ParticleBelief:
        if (t + 1) in self.toy.t_meas:
            raise ValueError(f"measurement scheduled at t+1={t + 1}; use bayes_update")
        return ParticleBelief(self._propagate(belief.particles, u, rng),
                              belief.log_weights.copy())

    def bayes_update(self, belief: ParticleBelief, u: int, y: int, t: int,
                     rng: np.random.Generator, resample_threshold: float = 0.5) -> ParticleBelief:
        if (t + 1) not in self.toy.t_meas:
            raise ValueError(f"no measurement scheduled at t+1={t + 1}")
        pts = self._propagate(belief.particles, u, rng)
        with np.errstate(divide="ignore"):
            loglik = np.log(self.toy.observation[pts.states, int(y)])
        out = ParticleBelief.from_unnormalized(pts, belief.log_weights + loglik)
        return maybe_resample(out, rng, resample_threshold)

    def initial_belief(self, y0, rng: np.random.Generator, k: int,
                       resample_threshold: float = 0.5) -> ParticleBelief:
        belief = self.sample_prior(rng, k)
        if y0 is None:
            return belief
        with np.errstate(divide="ignore"):
            loglik = np.log(self.toy.observation[belief.particles.states, int(y0)])
        belief = ParticleBelief.from_unnormalized(belief.particles,
                                                  belief.log_weights + loglik)
        return maybe_resample(belief, rng, resample_threshold)

    def histogram(self, belief: ParticleBelief) -> np.ndarray:
        return np.bincount(belief.particles.states, weights=belief.weights,
                           minlength=self.toy.n_states)


def tv_norm(p: np.ndarray, q: np.ndarray) -> float:
    """Total-variation norm sum_i |p_i - q_i| (twice the sup-distance)."""
    return float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def validation_toys() -> list:
    """Fixed instances for the value-recursion acceptance checks.

    Mixed measurement calendars (exercising the posterior branch and the
    prediction-only branch), stages off the decision calendar forcing the
    default action, and a baseline measurement in half of them.
    """
    specs = [
        # (seed, n_states, n_actions, n_obs, horizon, t_meas, t_dec)
        (101, 2, 2, 2, 3, {1, 3}, {0, 1, 2}),
        (202, 2, 2, 2, 3, {0, 2}, {0, 2}),
        (303, 3, 2, 2, 3, {0, 1, 2, 3}, {0, 1}),
        (404, 3, 3, 2, 2, {2}, {0}),
        (505, 2, 2, 2, 3, {3}, {0, 1}),
        (606, 3, 2, 2, 3, {1}, {1, 2}),
    ]
    out = []
    for seed, s, a, y, n, t_meas, t_dec in specs:
        rng = np.random.default_rng(seed)
        toy = random_toy(rng, n_states=s, n_actions=a, n_obs=y, horizon=n)
        out.append(FiniteToyPOMDP(
            transition=toy.transition, observation=toy.observation,
            stage_cost=toy.stage_cost, terminal_cost=toy.terminal_cost,
            t_meas=frozenset(t_meas), t_dec=frozenset(t_dec), p0=toy.p0))
    return out


def random_toy(rng: np.random.Generator, n_states=2, n_actions=2, n_obs=2,
               horizon=4, obs_sharpness=3.0, include_t0_meas=None) -> FiniteToyPOMDP:
    """Random instance with a mixed measurement calendar.

    `obs_sharpness` > 1 biases observation rows away from uniform so
    measurements actually move the belief.
    """
    transition = rng.dirichlet(np.ones(n_states), size=(n_actions, n_states))
    observation = rng.dirichlet(np.full(n_obs, 1.0 / obs_sharpness), size=n_states)
    observation = 0.95 * observation + 0.05 / n_obs   # keep densities positive
    stage_cost = rng.uniform(0.0, 1.0, size=(horizon, n_states, n_actions))
    terminal_cost = rng.uniform(0.0, 1.0, size=n_states)
    if include_t0_meas is None:
        include_t0_meas = bool(rng.integers(2))
    candidates = list(range(1, horizon + 1))
    rng.shuffle(candidates)
    n_meas = int(rng.integers(1, max(2, len(candidates))))
    t_meas = set(candidates[:n_meas])
    if include_t0_meas:
        t_meas.add(0)
    if not t_meas:
        t_meas = {horizon}
    # leave at least one interior step without a measurement when possible
    if len(t_meas) >= horizon + 1:
        t_meas.discard(1)
    n_dec = int(rng.integers(1, horizon + 1))
    t_dec = set(int(v) for v in rng.choice(horizon, size=n_dec, replace=False))
    return FiniteToyPOMDP(
        transition=transition, observation=observation, stage_cost=stage_cost,
        terminal_cost=terminal_cost, t_meas=frozenset(t_meas), t_dec=frozenset(t_dec),
        p0=rng.dirichlet(np.ones(n_states)),
    )
