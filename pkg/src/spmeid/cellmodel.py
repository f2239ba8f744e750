"""Cell properties, identifiable parameters, OCP fits, and observable maps.

Everything in this module is immutable after construction and safe to
share across workers.  The cell is split into

* :class:`CellConfig` -- fixed (non-identified) properties: geometry,
  transport/kinetic constants, open-circuit-potential fits, cutoffs;
* :class:`ParameterSet` -- the 9 identifiable parameters with physical
  box bounds and helpers for the normalized representation used by the
  networks and the optimizer.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import dispatch as dsp
from .errors import ConfigError, PhysicsDomainError

FARADAY = 96485.33212  # C/mol
GAS_CONSTANT = 8.31446261815324  # J/(mol K)

#: Identifiable parameters, in canonical vector order.
PARAM_NAMES = (
    "eps_p", "eps_n", "R_p", "R_n",
    "c_s_p_max", "c_s_n_max", "D_s_p", "D_s_n", "Q_Li",
)

#: Physical box bounds for each identifiable parameter.
PARAM_BOUNDS = {
    "eps_p": (0.137, 0.400),          # positive electrode porosity (-)
    "eps_n": (0.193, 0.570),          # negative electrode porosity (-)
    "R_p": (2.98e-6, 8.63e-6),        # positive particle radius (m)
    "R_n": (7.72e-6, 2.29e-5),        # negative particle radius (m)
    "c_s_p_max": (4.17e4, 6.82e4),    # max solid concentration, positive (mol/m^3)
    "c_s_n_max": (2.92e4, 4.83e4),    # max solid concentration, negative (mol/m^3)
    "D_s_p": (2.97e-14, 8.64e-14),    # solid diffusivity, positive (m^2/s)
    "D_s_n": (4.31e-14, 1.24e-13),    # solid diffusivity, negative (m^2/s)
    "Q_Li": (65.4, 100.0),            # cyclable lithium capacity (A h)
}


# ---------------------------------------------------------------------------
# Open-circuit potential fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OcpFit:
    """Smooth analytic open-circuit-potential fit U(theta).

    ``kind`` is always ``"tanh_sum"``:

        U(t) = a0 + a1*t + e_amp*exp(-e_rate*t)
               + sum_i amp_i * tanh(slope_i * (t - center_i))

    ``coeffs`` is the flat tuple (a0, a1, e_amp, e_rate, amp_0, slope_0,
    center_0, ...).  The form is differentiable everywhere, which the
    Newton stoichiometry solver and the training graphs rely on.
    """

    kind: str
    coeffs: tuple

    def __post_init__(self):
        if self.kind != "tanh_sum":
            raise ConfigError(f"unknown OCP kind {self.kind!r}")
        if len(self.coeffs) < 4 or (len(self.coeffs) - 4) % 3 != 0:
            raise ConfigError("tanh_sum coefficients must be 4 + 3*k values")

    def __call__(self, theta):
        a0, a1, e_amp, e_rate = self.coeffs[:4]
        u = a0 + a1 * theta
        if e_amp != 0.0:
            u = u + e_amp * dsp.exp(-e_rate * theta)
        rest = self.coeffs[4:]
        for i in range(0, len(rest), 3):
            amp, slope, center = rest[i:i + 3]
            u = u + amp * dsp.tanh(slope * (theta - center))
        return u

    def derivative(self, theta):
        """dU/dtheta, analytic (sech^2 = 1 - tanh^2)."""
        a0, a1, e_amp, e_rate = self.coeffs[:4]
        du = a1 + 0.0 * theta
        if e_amp != 0.0:
            du = du - e_amp * e_rate * dsp.exp(-e_rate * theta)
        rest = self.coeffs[4:]
        for i in range(0, len(rest), 3):
            amp, slope, center = rest[i:i + 3]
            th = dsp.tanh(slope * (theta - center))
            du = du + amp * slope * (1.0 - th * th)
        return du


# Layered-oxide style positive electrode: gentle linear slope with two
# sharp, nearly cancelling tanh features around the knee plus a soft step.
_OCP_P_COEFFS = (
    4.4875, -0.8090, 0.0, 1.0,
    -0.0428, 18.5138, 0.5542,
    -17.7326, 15.7890, 0.3117,
    17.5842, 15.9308, 0.3120,
)

# Graphite style negative electrode: decaying exponential at low lithiation
# plus three staging plateaus; every term is strictly decreasing.
_OCP_N_COEFFS = (
    0.2482, 0.0, 1.9793, 39.3631,
    -0.0909, 29.8538, 0.1234,
    -0.04478, 14.9159, 0.2769,
    -0.0205, 30.4444, 0.6103,
)


# ---------------------------------------------------------------------------
# Fixed cell configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellConfig:
    """Non-identified cell properties.

    Units: SI throughout; capacities in the parameter set are A h.
    ``kappa_e`` is the electrolyte conductivity already evaluated at
    ``c_e_typ`` (the voltage expression never queries it elsewhere).
    """

    N: int = 34                 # electrode pairs (-)
    A: float = 0.034            # electrode surface area per pair (m^2)
    L_p: float = 75.6e-6        # positive electrode thickness (m)
    L_sep: float = 12.0e-6      # separator thickness (m)
    L_n: float = 98.0e-6        # negative electrode thickness (m)
    eps_sep: float = 0.47       # separator porosity (-)
    sigma_p: float = 0.18       # positive solid conductivity (S/m)
    sigma_n: float = 215.0      # negative solid conductivity (S/m)
    m_p: float = 1.30e-10       # positive reaction rate constant
    m_n: float = 3.91e-10       # negative reaction rate constant
    E_a_p: float = 17800.0      # positive activation energy (J/mol)
    E_a_n: float = 35000.0      # negative activation energy (J/mol)
    kappa_e: float = 0.95       # electrolyte conductivity at c_e_typ (S/m)
    D_e: float = 3.5e-10        # electrolyte diffusivity (m^2/s)
    beta: float = 1.5           # Bruggeman coefficient (-)
    t_plus: float = 0.26        # transference number (-)
    c_e_typ: float = 1000.0     # typical electrolyte concentration (mol/m^3)
    T: float = 298.15           # operating temperature (K)
    T_ref: float = 298.15       # reference temperature (K)
    V_hi: float = 4.2           # upper cutoff voltage (V)
    V_lo: float = 2.5           # lower cutoff voltage (V)
    F: float = FARADAY
    R: float = GAS_CONSTANT
    ocp_p: OcpFit = field(default_factory=lambda: OcpFit("tanh_sum", _OCP_P_COEFFS))
    ocp_n: OcpFit = field(default_factory=lambda: OcpFit("tanh_sum", _OCP_N_COEFFS))
    # Capacity basis for C-rates and SoH: the 1/3 C discharge capacity of
    # the base parameter set, self-consistent with its own C-rate basis
    # (rounded down so the base cell sits inside the top SoH bin).
    # None means "derive by simulation" (datagen can recalibrate).
    nominal_capacity_ah: float | None = 59.053

    # -- open-circuit potentials -------------------------------------------

    def _fit(self, electrode: str) -> OcpFit:
        if electrode == "p":
            return self.ocp_p
        if electrode == "n":
            return self.ocp_n
        raise PhysicsDomainError(f"unknown electrode {electrode!r}")

    def ocp(self, electrode: str, theta):
        """Open-circuit potential U_k(theta) in volts, theta in (0, 1)."""
        self._check_theta(electrode, theta)
        return self._fit(electrode)(theta)

    def ocp_derivative(self, electrode: str, theta):
        """Analytic dU_k/dtheta in volts."""
        self._check_theta(electrode, theta)
        return self._fit(electrode).derivative(theta)

    @staticmethod
    def _check_theta(electrode, theta):
        vals = getattr(theta, "data", theta)
        vals = np.asarray(vals)
        if np.any(vals <= 0.0) or np.any(vals >= 1.0):
            bad = vals[(vals <= 0.0) | (vals >= 1.0)].ravel()
            raise PhysicsDomainError(
                f"stoichiometry out of (0,1) for electrode {electrode!r}: "
                f"{float(bad[0]):.6g}")

    def ocv(self, theta_p: float, theta_n: float) -> float:
        """Full-cell open-circuit voltage U_p(theta_p) - U_n(theta_n)."""
        return self.ocp("p", theta_p) - self.ocp("n", theta_n)

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        """Check all structural invariants; raises ConfigError on failure."""
        positive = ("A", "L_p", "L_sep", "L_n", "sigma_p", "sigma_n",
                    "m_p", "m_n", "E_a_p", "E_a_n", "kappa_e", "D_e",
                    "c_e_typ", "T", "T_ref")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.N < 1:
            raise ConfigError("N must be a positive count")
        if not 0.0 < self.t_plus < 1.0:
            raise ConfigError("t_plus must lie in (0, 1)")
        if not 0.0 < self.eps_sep < 1.0:
            raise ConfigError("eps_sep must lie in (0, 1)")
        if not self.V_lo < self.V_hi:
            raise ConfigError("V_lo must be below V_hi")

        grid = np.linspace(1e-4, 1.0 - 1e-4, 1000)
        for electrode in ("p", "n"):
            du = self._fit(electrode).derivative(grid)
            if not np.all(du < 0.0):
                raise ConfigError(
                    f"ocp_{electrode} is not strictly decreasing on (0,1)")
        u_p = self._fit("p")(grid)
        u_n = self._fit("n")(grid)
        if u_p.max() - u_n.min() < self.V_hi:
            raise ConfigError("OCP window cannot reach V_hi")
        if u_p.min() - u_n.max() > self.V_lo:
            raise ConfigError("OCP window cannot reach V_lo")

    # -- serialization ------------------------------------------------------

    def to_ini(self) -> str:
        lines = ["[cell]"]
        for f_ in fields(self):
            if f_.name in ("ocp_p", "ocp_n"):
                continue
            value = getattr(self, f_.name)
            if value is None:
                continue
            lines.append(f"{f_.name} = {value!r}")
        for name in ("ocp_p", "ocp_n"):
            fit = getattr(self, name)
            lines.append("")
            lines.append(f"[{name}]")
            lines.append(f"kind = {fit.kind}")
            lines.append("coeffs = " + ", ".join(repr(c) for c in fit.coeffs))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_ini(cls, text: str) -> "CellConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse cell config: {exc}") from exc
        if "cell" not in parser:
            raise ConfigError("cell config is missing the [cell] section")
        kwargs = {}
        known = {f_.name: f_ for f_ in fields(cls)}
        for key, raw in parser["cell"].items():
            if key not in known:
                raise ConfigError(f"unknown cell config key {key!r}")
            kwargs[key] = int(raw) if key == "N" else float(raw)
        for name in ("ocp_p", "ocp_n"):
            if name in parser:
                sec = parser[name]
                coeffs = tuple(float(v) for v in sec["coeffs"].split(","))
                kwargs[name] = OcpFit(sec.get("kind", "tanh_sum"), coeffs)
        return cls(**kwargs)

    def fingerprint(self) -> str:
        """Short stable hash of the full configuration."""
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:12]


def load_cell_config(path) -> CellConfig:
    with io.open(path, "r", encoding="utf-8") as fh:
        return CellConfig.from_ini(fh.read())


# ---------------------------------------------------------------------------
# Identifiable parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterSet:
    """The 9 identified parameters (porosities, radii, max concentrations,
    solid diffusivities, cyclable lithium capacity in A h)."""

    eps_p: float
    eps_n: float
    R_p: float
    R_n: float
    c_s_p_max: float
    c_s_n_max: float
    D_s_p: float
    D_s_n: float
    Q_Li: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, vec) -> "ParameterSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (9,):
            raise ConfigError(f"parameter vector must have shape (9,), got {vec.shape}")
        return cls(**{n: float(v) for n, v in zip(PARAM_NAMES, vec)})

    def in_bounds(self) -> bool:
        return all(PARAM_BOUNDS[n][0] <= getattr(self, n) <= PARAM_BOUNDS[n][1]
                   for n in PARAM_NAMES)

    def clipped(self) -> "ParameterSet":
        """Project onto the physical box bounds."""
        return ParameterSet(**{
            n: float(min(max(getattr(self, n), PARAM_BOUNDS[n][0]), PARAM_BOUNDS[n][1]))
            for n in PARAM_NAMES})

    def validate(self, feasible: bool = True) -> None:
        for n in PARAM_NAMES:
            if getattr(self, n) <= 0:
                raise ConfigError(f"{n} must be strictly positive")
        if feasible and not self.in_bounds():
            bad = [n for n in PARAM_NAMES
                   if not PARAM_BOUNDS[n][0] <= getattr(self, n) <= PARAM_BOUNDS[n][1]]
            raise ConfigError(f"parameters outside physical bounds: {bad}")


def electrode_capacity(lam: ParameterSet, cfg: CellConfig, electrode: str):
    """Electrode capacity Q_k = N A F L_k (1 - eps_k) c_s_k_max in coulombs."""
    if electrode == "p":
        return cfg.N * cfg.A * cfg.F * cfg.L_p * (1.0 - lam.eps_p) * lam.c_s_p_max
    if electrode == "n":
        return cfg.N * cfg.A * cfg.F * cfg.L_n * (1.0 - lam.eps_n) * lam.c_s_n_max
    raise PhysicsDomainError(f"unknown electrode {electrode!r}")


def bounds_arrays() -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([PARAM_BOUNDS[n][0] for n in PARAM_NAMES])
    hi = np.array([PARAM_BOUNDS[n][1] for n in PARAM_NAMES])
    return lo, hi


#: Base ("fresh cell") parameter values the sampling ranges scale from.
BASE_PARAMS = ParameterSet(
    eps_p=0.27,
    eps_n=0.382,
    R_p=5.86e-6,
    R_n=1.53e-5,
    c_s_p_max=5.50e4,
    c_s_n_max=3.88e4,
    D_s_p=5.80e-14,
    D_s_n=8.50e-14,
    Q_Li=87.0,
)


# ---------------------------------------------------------------------------
# Parameter normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamNormalizer:
    """Z-scoring of parameter vectors; statistics come from the training
    split only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != (9,) or std.shape != (9,):
            raise ConfigError("normalizer statistics must be 9-vectors")
        if np.any(std <= 0):
            raise ConfigError("normalizer std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def fit(cls, params: list[ParameterSet]) -> "ParamNormalizer":
        mat = np.stack([p.to_array() for p in params])
        return cls(mean=mat.mean(axis=0), std=mat.std(axis=0))

    def normalize(self, lam) -> np.ndarray:
        vec = lam.to_array() if isinstance(lam, ParameterSet) else np.asarray(lam)
        return (vec - self.mean) / self.std

    def denormalize(self, z) -> ParameterSet:
        return ParameterSet.from_array(np.asarray(z) * self.std + self.mean)

    def denormalize_array(self, z) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean

    def normalized_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = bounds_arrays()
        return (lo - self.mean) / self.std, (hi - self.mean) / self.std


# ---------------------------------------------------------------------------
# Observable map (4-channel normalized outputs -> 6 concentrations)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservableMap:
    """Affine map from the normalized 4-channel sequence y to the six
    concentration observables

        (c_p_surf, c_n_surf, ce_avg_p, ce_avg_n, ce_sqrt_avg_p, ce_sqrt_avg_n).

    Channels: y0, y1 are the surface stoichiometries; y2 is the fraction of
    electrode-region electrolyte lithium on the positive side; y3 the same
    fraction for the square-root average.
    """

    matrix: np.ndarray  # 6x4
    offset: np.ndarray  # 6

    @classmethod
    def build(cls, lam: ParameterSet, cfg: CellConfig) -> "ObservableMap":
        vp = cfg.L_p * lam.eps_p
        vn = cfg.L_n * lam.eps_n
        k_p = (vp + vn) / vp * cfg.c_e_typ
        k_n = (vp + vn) / vn * cfg.c_e_typ
        s_p = (vp + vn) / vp * np.sqrt(cfg.c_e_typ)
        s_n = (vp + vn) / vn * np.sqrt(cfg.c_e_typ)
        matrix = np.zeros((6, 4))
        matrix[0, 0] = lam.c_s_p_max
        matrix[1, 1] = lam.c_s_n_max
        matrix[2, 2] = k_p
        matrix[3, 2] = -k_n
        matrix[4, 3] = s_p
        matrix[5, 3] = -s_n
        offset = np.array([0.0, 0.0, 0.0, k_n, 0.0, s_n])
        return cls(matrix=matrix, offset=offset)

    def apply(self, y: np.ndarray) -> np.ndarray:
        """Map y (4,) or (4, T) to observables (6,) or (6, T)."""
        y = np.asarray(y)
        if y.ndim == 1:
            return self.matrix @ y + self.offset
        return self.matrix @ y + self.offset[:, None]

    def invert_observables(self, c: np.ndarray) -> np.ndarray:
        """Recover y from observables using the positive-side channels
        (the negative-side channels are redundant under the map)."""
        c = np.asarray(c)
        out = np.empty((4,) + c.shape[1:])
        out[0] = c[0] / self.matrix[0, 0]
        out[1] = c[1] / self.matrix[1, 1]
        out[2] = c[2] / self.matrix[2, 2]
        out[3] = c[4] / self.matrix[4, 3]
        return out


def observables_from_y(y, lam, cfg: CellConfig):
    """Evaluate the observable map channelwise.

    ``y`` may be a plain array shaped (4,) or (4, T), or an autodiff tensor
    shaped (..., 4, T); ``lam`` is a :class:`ParameterSet` or a 9-sequence
    whose entries may be tensors.  Returns a 6-tuple of channels in the
    canonical observable order.  Lithium in the electrode-region
    electrolyte is conserved by construction: vp*ce_p + vn*ce_n =
    (vp+vn)*c_e_typ for every y2.
    """
    if isinstance(lam, ParameterSet):
        eps_p, eps_n = lam.eps_p, lam.eps_n
        c_p_max, c_n_max = lam.c_s_p_max, lam.c_s_n_max
    else:
        eps_p, eps_n, c_p_max, c_n_max = lam[0], lam[1], lam[4], lam[5]
    if isinstance(y, np.ndarray):
        channels = (y[..., 0, :], y[..., 1, :], y[..., 2, :], y[..., 3, :]) \
            if y.ndim >= 2 else (y[0], y[1], y[2], y[3])
    else:
        channels = (y[..., 0, :], y[..., 1, :], y[..., 2, :], y[..., 3, :])
    y0, y1, y2, y3 = channels
    vp = cfg.L_p * eps_p
    vn = cfg.L_n * eps_n
    k_p = (vp + vn) / vp * cfg.c_e_typ
    k_n = (vp + vn) / vn * cfg.c_e_typ
    s_p = (vp + vn) / vp * np.sqrt(cfg.c_e_typ)
    s_n = (vp + vn) / vn * np.sqrt(cfg.c_e_typ)
    return (
        c_p_max * y0,
        c_n_max * y1,
        k_p * y2,
        k_n * (1.0 - y2),
        s_p * y3,
        s_n * (1.0 - y3),
    )


def default_cell_config() -> CellConfig:
    cfg = CellConfig()
    cfg.validate()
    return cfg


def with_nominal_capacity(cfg: CellConfig, capacity_ah: float) -> CellConfig:
    return replace(cfg, nominal_capacity_ah=float(capacity_ah))
