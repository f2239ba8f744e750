"""Reference SPMe forward simulator.

One representative particle per electrode (spherical diffusion on
equal-volume finite-volume shells) plus a three-domain electrolyte
(negative electrode / separator / positive electrode) with Bruggeman
corrected diffusivities and uniform volumetric pore-wall sources.  Both
systems are stepped with implicit Euler, so the discrete scheme conserves
lithium exactly up to linear-solver round-off:

* particle totals change by exactly -dt * A_surf * j per step,
* the electrolyte total is constant (sources cancel, zero end fluxes).

The domain order along x is negative electrode (x=0 at the current
collector), separator, positive electrode.  Positive current = discharge.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .cellmodel import CellConfig, ObservableMap, ParameterSet
from .errors import PhysicsDomainError, SimulationError
from .stoichiometry import solve_initial_stoichiometry
from .voltage import voltage

TRAJ_MAGIC = b"SPMETRAJ"
TRAJ_VERSION = 1
CUTOFF_MARGIN = 0.3  # volts beyond the window before a run is aborted


@dataclass(frozen=True)
class SimGrid:
    """Spatial/temporal resolution of the reference solver."""

    n_shell: int = 20   # radial shells per particle
    n_x: int = 20       # electrolyte cells per domain
    dt: float = 1.0     # time step (s)

    def __post_init__(self):
        if self.n_shell < 4 or self.n_x < 4:
            raise ValueError("grid needs at least 4 cells per dimension")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class SimState:
    """Concentration profiles (mol/m^3) and elapsed time (s)."""

    c_s_p: np.ndarray
    c_s_n: np.ndarray
    c_e: np.ndarray
    time: float


@dataclass(frozen=True)
class Trajectory:
    """Time-aligned simulation record.

    ``c`` rows: (c_p_surf, c_n_surf, ce_avg_p, ce_avg_n, ce_sqrt_avg_p,
    ce_sqrt_avg_n); ``y`` is the normalized 4-channel form.  Index k holds
    the state after applying ``I[k]`` for dt seconds.
    """

    t: np.ndarray
    I: np.ndarray
    V: np.ndarray
    c: np.ndarray  # (6, T)
    y: np.ndarray  # (4, T)

    def __len__(self):
        return self.t.size

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        n = self.t.size
        head = TRAJ_MAGIC + struct.pack("<II", TRAJ_VERSION, n)
        parts = [head]
        for arr in (self.t, self.I, self.V, self.y, self.c):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Trajectory":
        if blob[:8] != TRAJ_MAGIC:
            raise ValueError("not a trajectory record (bad magic)")
        version, n = struct.unpack("<II", blob[8:16])
        if version != TRAJ_VERSION:
            raise ValueError(f"unsupported trajectory version {version}")
        offset = 16
        out = {}
        for name, rows in (("t", 1), ("I", 1), ("V", 1), ("y", 4), ("c", 6)):
            count = rows * n
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            out[name] = arr.reshape(rows, n) if rows > 1 else arr.copy()
        return cls(t=out["t"], I=out["I"], V=out["V"], c=out["c"], y=out["y"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Trajectory":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self, path) -> None:
        """12-column CSV (I, V, y0..y3, c0..c5), one row per step."""
        header = "I,V,y0,y1,y2,y3,c0,c1,c2,c3,c4,c5"
        table = np.column_stack([self.I, self.V, self.y.T, self.c.T])
        np.savetxt(path, table, delimiter=",", header=header, comments="")


class _Tridiag:
    """Implicit-Euler step matrix (mass/dt + Laplacian) in banded form."""

    def __init__(self, mass_over_dt: np.ndarray, conduct: np.ndarray):
        # conduct[i] couples cells i-1 and i (size n-1)
        n = mass_over_dt.size
        self.ab = np.zeros((3, n))
        self.ab[0, 1:] = -conduct           # upper diagonal
        self.ab[2, :-1] = -conduct          # lower diagonal
        self.ab[1] = mass_over_dt
        self.ab[1, :-1] += conduct
        self.ab[1, 1:] += conduct
        self.mass_over_dt = mass_over_dt

    def step(self, c: np.ndarray, source: np.ndarray) -> np.ndarray:
        rhs = self.mass_over_dt * c + source
        return solve_banded((1, 1), self.ab, rhs, check_finite=False)


class _ParticleModel:
    """Equal-volume spherical shells for one electrode particle."""

    def __init__(self, radius: float, diffusivity: float, grid: SimGrid):
        n = grid.n_shell
        faces = radius * (np.arange(n + 1) / n) ** (1.0 / 3.0)
        self.shell_volume = (4.0 / 3.0) * np.pi * radius**3 / n
        centroid = ((faces[:-1] ** 3 + faces[1:] ** 3) / 2.0) ** (1.0 / 3.0)
        areas = 4.0 * np.pi * faces[1:-1] ** 2
        conduct = diffusivity * areas / np.diff(centroid)
        mass = np.full(n, self.shell_volume / grid.dt)
        self.surface_area = 4.0 * np.pi * radius**2
        self.matrix = _Tridiag(mass, conduct)

    def step(self, c: np.ndarray, flux_out: float) -> np.ndarray:
        """Advance one dt; ``flux_out`` is the molar flux (mol/m^2/s)
        leaving the particle through its surface."""
        source = np.zeros_like(c)
        source[-1] = -self.surface_area * flux_out
        return self.matrix.step(c, source)


class _ElectrolyteModel:
    """Three porous domains with harmonic-mean interface conductances."""

    def __init__(self, lam: ParameterSet, cfg: CellConfig, grid: SimGrid):
        n = grid.n_x
        widths = np.concatenate([
            np.full(n, cfg.L_n / n),
            np.full(n, cfg.L_sep / n),
            np.full(n, cfg.L_p / n),
        ])
        eps = np.concatenate([
            np.full(n, lam.eps_n),
            np.full(n, cfg.eps_sep),
            np.full(n, lam.eps_p),
        ])
        d_eff = cfg.D_e * eps ** cfg.beta
        # series (harmonic) conductance between adjacent cell centers
        half = widths / (2.0 * d_eff)
        conduct = 1.0 / (half[:-1] + half[1:])
        self.widths = widths
        self.eps = eps
        self.n = n
        self.matrix = _Tridiag(eps * widths / grid.dt, conduct)
        # per-cell source strength multiplying J*(1-t+)/F
        shape = np.concatenate([
            np.full(n, 1.0 / cfg.L_n),
            np.zeros(n),
            np.full(n, -1.0 / cfg.L_p),
        ])
        self.source_shape = shape * widths
        self.slice_n = slice(0, n)
        self.slice_p = slice(2 * n, 3 * n)

    def step(self, c: np.ndarray, j_dens: float, cfg: CellConfig) -> np.ndarray:
        source = j_dens * (1.0 - cfg.t_plus) / cfg.F * self.source_shape
        return self.matrix.step(c, source)

    def total_lithium(self, c: np.ndarray) -> float:
        return float(np.sum(self.eps * self.widths * c))


def initial_state(lam: ParameterSet, cfg: CellConfig, v_init: float,
                  grid: SimGrid) -> SimState:
    """Uniform equilibrium profiles at the given rest voltage."""
    sol = solve_initial_stoichiometry(lam, cfg, v_init)
    return SimState(
        c_s_p=np.full(grid.n_shell, sol.x0_init * lam.c_s_p_max),
        c_s_n=np.full(grid.n_shell, sol.x1_init * lam.c_s_n_max),
        c_e=np.full(3 * grid.n_x, cfg.c_e_typ),
        time=0.0,
    )


def _observables(state: SimState, elec: _ElectrolyteModel) -> np.ndarray:
    ce_n = state.c_e[elec.slice_n]
    ce_p = state.c_e[elec.slice_p]
    return np.array([
        state.c_s_p[-1],
        state.c_s_n[-1],
        float(np.mean(ce_p)),
        float(np.mean(ce_n)),
        float(np.mean(np.sqrt(ce_p))),
        float(np.mean(np.sqrt(ce_n))),
    ])


@dataclass
class SimAudit:
    """Per-step lithium inventories for conservation checks.

    ``solid_p_mol``/``solid_n_mol``: total solid-phase lithium per
    electrode (mol, whole cell); ``electrolyte_mol``: total electrolyte
    lithium (mol, whole cell).  Index 0 is the initial state; index k+1
    the state after step k.
    """

    solid_p_mol: np.ndarray
    solid_n_mol: np.ndarray
    electrolyte_mol: np.ndarray


def simulate(lam: ParameterSet, cfg: CellConfig, current, v_init: float,
             grid: SimGrid | None = None, audit: bool = False):
    """Run the reference solver over a current sequence (A, positive =
    discharge) starting from rest at ``v_init``; returns the Trajectory
    (plus a SimAudit when ``audit=True``).

    Raises SimulationError on cutoff breach (> 0.3 V beyond the window),
    negative concentrations, or electrode saturation, carrying the step
    index.
    """
    grid = grid or SimGrid()
    current = np.asarray(current, dtype=np.float64)
    if not np.all(np.isfinite(current)):
        raise SimulationError("current sequence contains non-finite values")
    state = initial_state(lam, cfg, v_init, grid)

    part_p = _ParticleModel(lam.R_p, lam.D_s_p, grid)
    part_n = _ParticleModel(lam.R_n, lam.D_s_n, grid)
    elec = _ElectrolyteModel(lam, cfg, grid)

    n_steps = current.size
    obs = np.empty((6, n_steps))
    volts = np.empty(n_steps)
    if audit:
        vol_p = cfg.N * cfg.A * cfg.L_p * (1.0 - lam.eps_p)
        vol_n = cfg.N * cfg.A * cfg.L_n * (1.0 - lam.eps_n)
        totals = SimAudit(
            solid_p_mol=np.empty(n_steps + 1),
            solid_n_mol=np.empty(n_steps + 1),
            electrolyte_mol=np.empty(n_steps + 1),
        )

        def record_totals(idx):
            totals.solid_p_mol[idx] = vol_p * state.c_s_p.mean()
            totals.solid_n_mol[idx] = vol_n * state.c_s_n.mean()
            totals.electrolyte_mol[idx] = cfg.N * cfg.A * elec.total_lithium(state.c_e)

        record_totals(0)
    for k in range(n_steps):
        j_dens = current[k] / (cfg.N * cfg.A)
        flux_p = -j_dens / (3.0 * (1.0 - lam.eps_p) / lam.R_p * cfg.F * cfg.L_p)
        flux_n = j_dens / (3.0 * (1.0 - lam.eps_n) / lam.R_n * cfg.F * cfg.L_n)
        state.c_s_p = part_p.step(state.c_s_p, flux_p)
        state.c_s_n = part_n.step(state.c_s_n, flux_n)
        state.c_e = elec.step(state.c_e, j_dens, cfg)
        state.time += grid.dt
        if np.any(state.c_e <= 0.0) or np.any(state.c_s_p < 0.0) \
                or np.any(state.c_s_n < 0.0):
            raise SimulationError("instability, reduce dt", step=k)
        if state.c_s_p[-1] >= lam.c_s_p_max or state.c_s_n[-1] >= lam.c_s_n_max \
                or state.c_s_p[-1] <= 0.0 or state.c_s_n[-1] <= 0.0:
            raise SimulationError("saturated electrode surface", step=k)
        obs[:, k] = _observables(state, elec)
        try:
            volts[k] = voltage(obs[:, k], lam, cfg, current[k]).V
        except PhysicsDomainError as exc:
            raise SimulationError(f"voltage domain failure: {exc}",
                                  step=k) from exc
        if volts[k] < cfg.V_lo - CUTOFF_MARGIN or volts[k] > cfg.V_hi + CUTOFF_MARGIN:
            raise SimulationError("cutoff breach", step=k)
        if audit:
            record_totals(k + 1)

    t = grid.dt * np.arange(1, n_steps + 1)
    y = ObservableMap.build(lam, cfg).invert_observables(obs)
    traj = Trajectory(t=t, I=current.copy(), V=volts, c=obs, y=y)
    return (traj, totals) if audit else traj


def cc_discharge_capacity(lam: ParameterSet, cfg: CellConfig, rate: float,
                          grid: SimGrid | None = None,
                          capacity_basis_ah: float | None = None) -> float:
    """Constant-current discharge capacity (A h) from V_hi down to V_lo.

    ``rate`` is the C-rate relative to ``capacity_basis_ah`` (defaults to
    the config's nominal capacity, falling back to Q_Li).  The final
    partial step is linearly interpolated to the V_lo crossing so the
    result is nearly independent of dt.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    basis = capacity_basis_ah or cfg.nominal_capacity_ah or lam.Q_Li
    amps = rate * basis
    if grid is None:
        grid = SimGrid(dt=float(np.clip(3.0 / rate, 1.0, 30.0)))

    state = initial_state(lam, cfg, cfg.V_hi, grid)
    part_p = _ParticleModel(lam.R_p, lam.D_s_p, grid)
    part_n = _ParticleModel(lam.R_n, lam.D_s_n, grid)
    elec = _ElectrolyteModel(lam, cfg, grid)
    j_dens = amps / (cfg.N * cfg.A)
    flux_p = -j_dens / (3.0 * (1.0 - lam.eps_p) / lam.R_p * cfg.F * cfg.L_p)
    flux_n = j_dens / (3.0 * (1.0 - lam.eps_n) / lam.R_n * cfg.F * cfg.L_n)

    max_steps = int(np.ceil(2.0 / rate * 3600.0 / grid.dt)) + 1
    v_prev = None
    for k in range(max_steps):
        state.c_s_p = part_p.step(state.c_s_p, flux_p)
        state.c_s_n = part_n.step(state.c_s_n, flux_n)
        state.c_e = elec.step(state.c_e, j_dens, cfg)
        if np.any(state.c_e <= 0.0):
            raise SimulationError("instability, reduce dt", step=k)
        if state.c_s_p[-1] >= lam.c_s_p_max or state.c_s_n[-1] <= 0.0:
            # electrode ran out before the voltage cutoff
            return amps * (k * grid.dt) / 3600.0
        obs = _observables(state, elec)
        v = float(voltage(obs, lam, cfg, amps).V)
        if v <= cfg.V_lo:
            frac = 1.0 if v_prev is None else \
                float(np.clip((v_prev - cfg.V_lo) / (v_prev - v), 0.0, 1.0))
            return amps * ((k + frac) * grid.dt) / 3600.0
        v_prev = v
    raise SimulationError("discharge did not reach V_lo within the step cap",
                          step=max_steps)


def electrolyte_total(lam: ParameterSet, cfg: CellConfig, c_e: np.ndarray,
                      grid: SimGrid) -> float:
    """Total electrolyte lithium per unit cell area (mol/m^2)."""
    return _ElectrolyteModel(lam, cfg, grid).total_lithium(c_e)
