"""Drug/white-blood-cell dynamics: generic model interface plus the concrete
8-compartment instance.

State layout of the concrete model (0-based):

    x[0]  drug amount in the gut                     [pmol]
    x[1]  drug amount in the plasma                  [pmol]
    x[2]  active-metabolite concentration in RBCs    [pmol per 8e8 RBCs]
    x[3]  proliferating white-cell concentration     [cells/kg]
    x[4:7] maturing white cells, stages 1..3         [cells/kg]
    x[7]  mature white-cell concentration            [cells/L]

One step of length `delta` days applies a smooth positive floor to an Euler
update of the drift

    fbar(x, u) = A x + B u + fhat(x)

where A collects linear rates (absorption, eliminations, maturation transit,
mature-cell death with a kg->L volume conversion on the last transfer), B
feeds the oral dose (mg/day) into the gut compartment, and fhat holds the two
nonlinearities: saturable conversion of plasma drug into the active
metabolite, and proliferation regulated by mature-cell feedback and slowed by
the metabolite.

Parameter vector theta (all strictly positive):

    theta[0] conversion_vmax      [pmol/day]
    theta[1] conversion_km        [pmol]
    theta[2] prolif_max           [1/day]
    theta[3] feedback_steepness   [-]
    theta[4] feedback_scale       [cells/L]
    theta[5] drug_effect_max      [1/day]
    theta[6] drug_effect_km       [pmol per 8e8 RBCs]
    theta[7] neutrophil_fraction  in (0,1); only enters the output map

The measured outputs are y = (x[7], neutrophil_fraction * x[7]): mature white
cells and neutrophils per liter of blood.
"""

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

N_STATE = 8
N_OUT = 2
N_THETA = 8

# oral dose unit chain: mg -> pmol (molar mass 152.177 g/mol)
PMOL_PER_MG = 1e9 / 152.177

# drug-free initial/equilibrium state (amounts/concentrations per the layout above)
X0_DEFAULT = np.array([0.0, 0.0, 0.0, 1.20e11, 1.20e11, 1.20e11, 1.20e11, 2.85e9])

# initial parameter estimates; neutrophil fraction defaults to 0.5 until a
# baseline measurement pins it down (y2/y1 at day 0)
THETA0_DEFAULT = np.array([39.4, 15.11, 0.3287, 0.4386, 8.2e9, 0.0782, 84.0, 0.5])

THETA_NAMES = (
    "conversion_vmax", "conversion_km", "prolif_max", "feedback_steepness",
    "feedback_scale", "drug_effect_max", "drug_effect_km", "neutrophil_fraction",
)


class CalibrationError(RuntimeError):
    """No positive rate assignment makes the requested state an equilibrium."""


def validate_theta(theta, neutrophil_fraction_index: int | None = N_THETA - 1) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    if np.any(theta <= 0.0):
        raise ValueError("theta components must be strictly positive")
    if neutrophil_fraction_index is not None and theta.shape[-1] > neutrophil_fraction_index:
        fr = theta[..., neutrophil_fraction_index]
        if np.any(fr >= 1.0):
            raise ValueError("neutrophil fraction must lie in (0, 1)")
    return theta


def project_positive(v, epsilon: float) -> np.ndarray:
    """Componentwise max(v_i, epsilon); the hard positive floor."""
    if not epsilon > 0.0:
        raise ValueError("epsilon must be positive")
    return np.maximum(np.asarray(v, dtype=float), epsilon)


def smooth_project(v, epsilon: float, beta: float) -> np.ndarray:
    """Smooth positive floor: log-sum-exp blend of v_i and epsilon.

    Satisfies max(v_i, eps) <= out_i <= max(v_i, eps) + log(2)/beta and is
    evaluated with a shift so large |beta*v_i| cannot overflow.
    """
    if not epsilon > 0.0:
        raise ValueError("epsilon must be positive")
    if not beta >= 1.0:
        raise ValueError("beta must be >= 1")
    v = np.asarray(v, dtype=float)
    hi = np.maximum(v, epsilon)
    lo = np.minimum(v, epsilon)
    return hi + np.log1p(np.exp(beta * (lo - hi))) / beta


def smooth_project_slope(v, epsilon: float, beta: float) -> np.ndarray:
    """d smooth_project / d v, componentwise (a logistic in beta*(v-eps))."""
    v = np.asarray(v, dtype=float)
    d = beta * (v - epsilon)
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class RateBlock:
    """Linear rates of the drift (all 1/day except kappa_vol, kg/L)."""
    k_absorb: float = 4.8        # gut -> plasma
    k_elim_plasma: float = 8.0   # plasma drug elimination
    k_elim_metab: float = 0.1    # metabolite elimination
    k_transit: tuple = (0.2, 0.2, 0.2, 0.2)   # out-rates of compartments 3..6
    k_death: float = 0.2         # mature-cell death
    kappa_vol: float = float(X0_DEFAULT[7] / X0_DEFAULT[6])  # cells/kg -> cells/L

    def as_dict(self) -> dict:
        return {
            "k_absorb": self.k_absorb,
            "k_elim_plasma": self.k_elim_plasma,
            "k_elim_metab": self.k_elim_metab,
            "k_transit": list(self.k_transit),
            "k_death": self.k_death,
            "kappa_vol": self.kappa_vol,
        }


@dataclass(frozen=True)
class ModelSpec:
    """Generic discrete-time model: dynamics, output map and their Jacobians.

    All callables are pure. Jacobians must agree with central finite
    differences (exercised in the test-suite at relative tolerance 1e-5).
    """
    n: int
    m: int
    p: int
    f: Callable      # (t, x, u, d, theta) -> next state (n,)
    h: Callable      # (t, x, theta) -> output (m,)
    dfdx: Callable   # (t, x, u, d, theta) -> (n, n)
    dfdth: Callable  # (t, x, u, d, theta) -> (n, p)
    dhdx: Callable   # (t, x, theta) -> (m, n)
    dhdth: Callable  # (t, x, theta) -> (m, p)
    u_max: float = np.inf


class LeukemiaModel:
    """Concrete 8-compartment instance with smooth positive floor."""

    n = N_STATE
    m = N_OUT
    p = N_THETA

    def __init__(self, delta: float = 1.0 / 24.0, epsilon: float = 1e-6,
                 beta: float = 50.0, rates: RateBlock | None = None,
                 bsa_m2: float = 1.73, nominal_dose_mg_per_m2: float = 50.0,
                 dose_to_gut: float = PMOL_PER_MG):
        self.delta = float(delta)
        self.epsilon = float(epsilon)
        self.beta = float(beta)
        self.rates = rates if rates is not None else RateBlock()
        self.bsa_m2 = float(bsa_m2)
        self.nominal_dose_mg_per_m2 = float(nominal_dose_mg_per_m2)
        self.dose_to_gut = float(dose_to_gut)

    @property
    def nominal_dose(self) -> float:
        """Nominal daily dose in mg/day."""
        return self.nominal_dose_mg_per_m2 * self.bsa_m2

    @property
    def u_max(self) -> float:
        """Maximum permissible daily dose: twice nominal."""
        return 2.0 * self.nominal_dose

    def a_matrix(self) -> np.ndarray:
        r = self.rates
        k3, k4, k5, k6 = r.k_transit
        a = np.zeros((N_STATE, N_STATE))
        a[0, 0] = -r.k_absorb
        a[1, 0] = r.k_absorb
        a[1, 1] = -r.k_elim_plasma
        a[2, 2] = -r.k_elim_metab
        a[3, 3] = -k3
        a[4, 3] = k3
        a[4, 4] = -k4
        a[5, 4] = k4
        a[5, 5] = -k5
        a[6, 5] = k5
        a[6, 6] = -k6
        a[7, 6] = r.kappa_vol * k6
        a[7, 7] = -r.k_death
        return a

    def b_vector(self) -> np.ndarray:
        b = np.zeros(N_STATE)
        b[0] = self.dose_to_gut
        return b

    # -- nonlinear pieces ---------------------------------------------------

    @staticmethod
    def conversion_rate(x, theta):
        """Saturable plasma-drug -> metabolite conversion (enters rows 1-, 2+)."""
        return -theta[0] * x[1] / (theta[1] + x[1])

    @staticmethod
    def prolif_rate(x, theta):
        """Net per-cell proliferation rate: feedback gain minus drug effect."""
        s = (x[7] / theta[4]) ** theta[3]
        return theta[2] / (1.0 + s) - theta[5] * x[2] / (theta[6] + x[2])

    def drift(self, x, u, theta) -> np.ndarray:
        """fbar(x, u) = A x + B u + fhat(x)."""
        x = np.asarray(x, dtype=float)
        out = self.a_matrix() @ x + self.b_vector() * u
        conv = self.conversion_rate(x, theta)
        out[1] += conv
        out[2] -= conv
        out[3] += self.prolif_rate(x, theta) * x[3]
        return out

    def step(self, x, u, d, theta) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = np.zeros(N_STATE) if d is None else np.asarray(d, dtype=float)
        u = float(u)
        if not (np.all(np.isfinite(x)) and np.isfinite(u) and np.all(np.isfinite(d))):
            raise ValueError("non-finite state, control or disturbance")
        z = x + self.delta * self.drift(x, u, theta) + d
        return smooth_project(z, self.epsilon, self.beta)

    def output(self, x, theta) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.array([x[7], theta[7] * x[7]])

    # -- Jacobians ----------------------------------------------------------

    def drift_dx(self, x, u, theta) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        j = self.a_matrix()
        dconv = -theta[0] * theta[1] / (theta[1] + x[1]) ** 2
        j[1, 1] += dconv
        j[2, 1] -= dconv
        s = (x[7] / theta[4]) ** theta[3]
        gain = theta[2] / (1.0 + s)
        drug = theta[5] * x[2] / (theta[6] + x[2])
        j[3, 2] += -x[3] * theta[5] * theta[6] / (theta[6] + x[2]) ** 2
        j[3, 3] += gain - drug
        j[3, 7] += -x[3] * theta[2] * theta[3] * s / (x[7] * (1.0 + s) ** 2)
        return j

    def drift_dtheta(self, x, u, theta) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        j = np.zeros((N_STATE, N_THETA))
        mm = x[1] / (theta[1] + x[1])
        j[1, 0] = -mm
        j[2, 0] = mm
        dkm = theta[0] * x[1] / (theta[1] + x[1]) ** 2
        j[1, 1] = dkm
        j[2, 1] = -dkm
        s = (x[7] / theta[4]) ** theta[3]
        one_s2 = (1.0 + s) ** 2
        j[3, 2] = x[3] / (1.0 + s)
        j[3, 3] = -x[3] * theta[2] * s * np.log(x[7] / theta[4]) / one_s2
        j[3, 4] = x[3] * theta[2] * theta[3] * s / (theta[4] * one_s2)
        j[3, 5] = -x[3] * x[2] / (theta[6] + x[2])
        j[3, 6] = x[3] * theta[5] * x[2] / (theta[6] + x[2]) ** 2
        return j

    def step_dx(self, x, u, d, theta) -> np.ndarray:
        d = np.zeros(N_STATE) if d is None else np.asarray(d, dtype=float)
        z = np.asarray(x, dtype=float) + self.delta * self.drift(x, u, theta) + d
        slope = smooth_project_slope(z, self.epsilon, self.beta)
        return slope[:, None] * (np.eye(N_STATE) + self.delta * self.drift_dx(x, u, theta))

    def step_dtheta(self, x, u, d, theta) -> np.ndarray:
        d = np.zeros(N_STATE) if d is None else np.asarray(d, dtype=float)
        z = np.asarray(x, dtype=float) + self.delta * self.drift(x, u, theta) + d
        slope = smooth_project_slope(z, self.epsilon, self.beta)
        return slope[:, None] * (self.delta * self.drift_dtheta(x, u, theta))

    def output_dx(self, x, theta) -> np.ndarray:
        c = np.zeros((N_OUT, N_STATE))
        c[0, 7] = 1.0
        c[1, 7] = theta[7]
        return c

    def output_dtheta(self, x, theta) -> np.ndarray:
        j = np.zeros((N_OUT, N_THETA))
        j[1, 7] = np.asarray(x, dtype=float)[7]
        return j

    def spec(self) -> ModelSpec:
        return ModelSpec(
            n=self.n, m=self.m, p=self.p,
            f=lambda t, x, u, d, th: self.step(x, u, d, th),
            h=lambda t, x, th: self.output(x, th),
            dfdx=lambda t, x, u, d, th: self.step_dx(x, u, d, th),
            dfdth=lambda t, x, u, d, th: self.step_dtheta(x, u, d, th),
            dhdx=lambda t, x, th: self.output_dx(x, th),
            dhdth=lambda t, x, th: self.output_dtheta(x, th),
            u_max=self.u_max,
        )

    def with_rates(self, rates: RateBlock) -> "LeukemiaModel":
        return LeukemiaModel(
            delta=self.delta, epsilon=self.epsilon, beta=self.beta, rates=rates,
            bsa_m2=self.bsa_m2, nominal_dose_mg_per_m2=self.nominal_dose_mg_per_m2,
            dose_to_gut=self.dose_to_gut,
        )


def calibrate_equilibrium(x0, theta, base: RateBlock | None = None) -> RateBlock:
    """Solve for transit/death rates that make `x0` a drug-free equilibrium.

    Rows 0-2 vanish at x0 whenever the drug compartments are empty, so the
    absorption/elimination rates are taken from `base` unchanged. The
    maturation chain and the mature compartment are balanced exactly:

        k3 = prolif_rate(x0) , k_{i+1} = k_i * x_i / x_{i+1} ,
        k_death = kappa_vol * k6 * x6 / x7 .
    """
    base = base if base is not None else RateBlock()
    x0 = np.asarray(x0, dtype=float)
    theta = validate_theta(theta)
    if np.any(x0[3:] <= 0.0):
        raise CalibrationError("cell compartments of x0 must be positive")
    prolif = LeukemiaModel.prolif_rate(x0, theta)
    if prolif <= 0.0:
        raise CalibrationError("net proliferation at x0 is not positive; "
                               "no positive transit rate balances it")
    k3 = prolif
    k4 = k3 * x0[3] / x0[4]
    k5 = k4 * x0[4] / x0[5]
    k6 = k5 * x0[5] / x0[6]
    k_death = base.kappa_vol * k6 * x0[6] / x0[7]
    return replace(base, k_transit=(k3, k4, k5, k6), k_death=k_death)


@dataclass(frozen=True)
class NoiseModel:
    """Additive Gaussian process and measurement noise.

    The process covariance may be singular (drug compartments carry no noise
    by default); the measurement covariance must be positive definite so the
    observation density exists everywhere.
    """
    sigma_d: np.ndarray          # (n, n) PSD
    sigma_w: np.ndarray          # (m, m) PD
    independent: bool = True     # d and w independent within the joint draw
    _chol_d: np.ndarray = field(init=False, repr=False, compare=False, default=None)
    _chol_w: np.ndarray = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        sd = np.atleast_2d(np.asarray(self.sigma_d, dtype=float))
        sw = np.atleast_2d(np.asarray(self.sigma_w, dtype=float))
        object.__setattr__(self, "sigma_d", sd)
        object.__setattr__(self, "sigma_w", sw)
        if not np.allclose(sd, sd.T):
            raise ValueError("process covariance must be symmetric")
        if not np.allclose(sw, sw.T):
            raise ValueError("measurement covariance must be symmetric")
        evals_d = np.linalg.eigvalsh(sd)
        if evals_d.min() < -1e-12 * max(evals_d.max(), 1.0):
            raise ValueError("process covariance must be positive semidefinite")
        try:
            chol_w = np.linalg.cholesky(sw)
        except np.linalg.LinAlgError as exc:
            raise ValueError("measurement covariance must be positive definite") from exc
        # PSD square root for possibly singular process covariance
        w, v = np.linalg.eigh(sd)
        chol_d = v * np.sqrt(np.clip(w, 0.0, None))
        object.__setattr__(self, "_chol_d", chol_d)
        object.__setattr__(self, "_chol_w", chol_w)

    @classmethod
    def diagonal(cls, sd_d, sd_w) -> "NoiseModel":
        sd_d = np.asarray(sd_d, dtype=float)
        sd_w = np.asarray(sd_w, dtype=float)
        return cls(sigma_d=np.diag(sd_d**2), sigma_w=np.diag(sd_w**2))

    @property
    def n(self) -> int:
        return self.sigma_d.shape[0]

    @property
    def m(self) -> int:
        return self.sigma_w.shape[0]

    def sample_process(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (self.n,) if size is None else (size, self.n)
        return rng.standard_normal(shape) @ self._chol_d.T

    def sample_measure(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (self.m,) if size is None else (size, self.m)
        return rng.standard_normal(shape) @ self._chol_w.T

    def sample_joint(self, rng: np.random.Generator, size: int | None = None):
        """Joint (d, w) draw; with `independent` the marginals factorize, so
        the w-marginal of the joint equals the plain measurement draw."""
        return self.sample_process(rng, size), self.sample_measure(rng, size)

    def logpdf_measure(self, w) -> np.ndarray:
        """Gaussian log-density of measurement noise w (rows if 2-D)."""
        w = np.asarray(w, dtype=float)
        z = np.linalg.solve(self._chol_w, np.atleast_2d(w).T).T
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol_w)))
        val = -0.5 * (self.m * np.log(2.0 * np.pi) + logdet + np.sum(z * z, axis=-1))
        return val[0] if w.ndim == 1 else val
