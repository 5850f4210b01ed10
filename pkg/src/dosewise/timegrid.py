"""Discrete time structure: the state grid and the two sparse calendars.

States evolve on t = 0..N-1 (N steps of length `delta` days). Measurements
exist only on `t_meas` (a subset of 0..N), decisions only on `t_dec`
(a subset of 0..N-1); off the decision calendar the control is pinned to
`u_default`.
"""

from dataclasses import dataclass, field


@dataclass(frozen=True)
class TimeStructure:
    n_steps: int                      # N
    delta: float                      # step length in days
    t_meas: frozenset = field(default_factory=frozenset)   # measurement indices in {0..N}
    t_dec: frozenset = field(default_factory=frozenset)    # decision indices in {0..N-1}
    u_default: float = 0.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        t_meas = frozenset(int(t) for t in self.t_meas)
        t_dec = frozenset(int(t) for t in self.t_dec)
        object.__setattr__(self, "t_meas", t_meas)
        object.__setattr__(self, "t_dec", t_dec)
        if not t_meas:
            raise ValueError("measurement calendar must be non-empty")
        if not t_dec:
            raise ValueError("decision calendar must be non-empty")
        if any(t < 0 or t > self.n_steps for t in t_meas):
            raise ValueError("t_meas must lie in {0..N}")
        if any(t < 0 or t >= self.n_steps for t in t_dec):
            raise ValueError("t_dec must lie in {0..N-1}")

    @property
    def horizon(self) -> int:
        return self.n_steps

    def has_measurement(self, t: int) -> bool:
        return t in self.t_meas

    def is_decision(self, t: int) -> bool:
        return t in self.t_dec

    def meas_sorted(self) -> list:
        return sorted(self.t_meas)


def hourly_cycle(cycle_days: int = 21, meas_days=(0, 7, 14), dose_days: int = 14,
                 u_default: float = 0.0) -> TimeStructure:
    """Hourly grid for one treatment cycle: N = 24*cycle_days steps, weekly
    measurements, doses free on the first `dose_days` days."""
    n = 24 * cycle_days
    return TimeStructure(
        n_steps=n,
        delta=1.0 / 24.0,
        t_meas=frozenset(24 * d for d in meas_days),
        t_dec=frozenset(range(24 * dose_days)),
        u_default=u_default,
    )
