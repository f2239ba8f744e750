"""Synthetic dataset factory.

Parameter sets are drawn uniformly inside the physical box (intersected
with the configured scale ranges around the base cell), filtered to be
stoichiometry-feasible, and rejection-filled into uniform state-of-health
bins.  Each accepted set is labeled with M reference simulations under
distinct synthetic drive cycles and initial states of charge.

Current sequences come from a seeded mean-reverting velocity process
mapped through a quadratic vehicle power model with regenerative braking,
which reproduces the spiky, discharge-biased character of EV load
profiles.  Everything is deterministic given the master seed: per-sample
seeds derive from sample indices, never from worker identity, so the
dataset bytes do not depend on the degree of parallelism.
"""

from __future__ import annotations

import concurrent.futures
import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .cellmodel import (BASE_PARAMS, PARAM_BOUNDS, PARAM_NAMES, CellConfig,
                        ParameterSet, ParamNormalizer)
from .errors import ConfigError, SimulationError, StoichiometryError
from .simulator import SimGrid, Trajectory, cc_discharge_capacity, simulate
from .stoichiometry import solve_initial_stoichiometry

#: Parameters whose sampling range is 75-125% of base instead of 50-150%.
_NARROW_RANGE = ("c_s_p_max", "c_s_n_max")


# ---------------------------------------------------------------------------
# Drive-cycle synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriveCycleConfig:
    """Synthetic EV load profile settings."""

    duration: int = 600        # samples (at the dataset cadence, 1 s)
    rest_fraction: float = 0.12
    regen_fraction: float = 0.55   # share of braking power recovered
    peak_c_rate: float = 2.0
    seed: int = 0
    lead_rest: int = 5         # initial rest samples (vehicle starts parked)
    # velocity process (m/s) and power-map coefficients (A per unit)
    v_mean: float = 14.0
    v_theta: float = 0.08
    v_sigma: float = 1.2
    v_max: float = 38.0
    k_lin: float = 0.80        # rolling-resistance-like term, A/(m/s)
    k_quad: float = 0.048      # aero-like term, A/(m/s)^2
    k_accel: float = 4.0       # inertia term, A/((m/s^2)(m/s))


def generate_drive_current(cfg: DriveCycleConfig, seed: int | None = None,
                           nominal_capacity_ah: float = 59.054) -> np.ndarray:
    """Seeded drive-cycle current sequence in amperes (positive =
    discharge).  The profile always contains both signs, respects the
    peak C-rate, and carries a positive net discharge."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n = cfg.duration
    peak_amps = cfg.peak_c_rate * nominal_capacity_ah

    # rest/drive state machine, exponential dwell times
    drive_dwell = 90.0
    rest_dwell = drive_dwell * cfg.rest_fraction / max(1e-9, 1.0 - cfg.rest_fraction)
    moving = np.ones(n, dtype=bool)
    k = cfg.lead_rest
    moving[:k] = False
    state_moving = True
    while k < n:
        dwell = rng.exponential(drive_dwell if state_moving else max(rest_dwell, 1.0))
        span = max(1, int(round(dwell)))
        moving[k:k + span] = state_moving
        k += span
        state_moving = not state_moving

    v = np.zeros(n)
    vel = 0.0
    for i in range(n):
        if moving[i]:
            drift = cfg.v_theta * (cfg.v_mean - vel)
            vel = vel + drift + cfg.v_sigma * rng.standard_normal()
            vel = float(np.clip(vel, 0.0, cfg.v_max))
        else:
            vel = 0.0
        v[i] = vel

    accel = np.diff(v, prepend=v[0])
    power = cfg.k_lin * v + cfg.k_quad * v * v + cfg.k_accel * accel * v
    regen = power < 0.0
    power[regen] *= cfg.regen_fraction
    # light smoothing keeps spikes but removes single-sample chatter
    kernel = np.array([0.25, 0.5, 0.25])
    current = np.convolve(power, kernel, mode="same")
    current[~moving] = 0.0
    current = np.clip(current, -peak_amps, peak_amps)

    if not (np.any(current > 0.0) and np.any(current < 0.0)):
        # extremely short cycles may miss regen; derive a fresh sub-stream
        if cfg.duration >= 32:
            sub = np.random.default_rng(
                np.random.SeedSequence(cfg.seed if seed is None else seed,
                                       spawn_key=(1,)))
            return generate_drive_current(
                replace(cfg, seed=int(sub.integers(2**32))),
                nominal_capacity_ah=nominal_capacity_ah)
    return current


# ---------------------------------------------------------------------------
# Sampling plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPlan:
    """Dataset size and sampling ranges."""

    soh_lo: float = 0.70
    soh_hi: float = 1.05
    bin_width: float = 0.05
    sets_per_bin: int = 30
    val_sets_per_bin: int = 3
    sequences_per_set: int = 10
    seq_len: int = 600
    soc_lo: float = 0.20
    soc_hi: float = 0.90
    scale_lo: float = 0.50
    scale_hi: float = 1.50
    scale_lo_cmax: float = 0.75
    scale_hi_cmax: float = 1.25
    draw_cap_factor: int = 200
    base: ParameterSet = field(default_factory=lambda: BASE_PARAMS)

    def __post_init__(self):
        n = (self.soh_hi - self.soh_lo) / self.bin_width
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("SoH bins must tile the window exactly")
        if not 0 < self.val_sets_per_bin < self.sets_per_bin:
            raise ConfigError("val_sets_per_bin must be in (0, sets_per_bin)")

    @property
    def n_bins(self) -> int:
        return int(round((self.soh_hi - self.soh_lo) / self.bin_width))

    def bin_edges(self) -> np.ndarray:
        return self.soh_lo + self.bin_width * np.arange(self.n_bins + 1)

    def sampling_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Scale range around the base, intersected with the physical box."""
        base = self.base.to_array()
        lo = np.empty(9)
        hi = np.empty(9)
        for i, name in enumerate(PARAM_NAMES):
            s_lo, s_hi = (self.scale_lo_cmax, self.scale_hi_cmax) \
                if name in _NARROW_RANGE else (self.scale_lo, self.scale_hi)
            lo[i] = max(base[i] * s_lo, PARAM_BOUNDS[name][0])
            hi[i] = min(base[i] * s_hi, PARAM_BOUNDS[name][1])
        return lo, hi

    def fingerprint(self) -> str:
        body = ";".join(f"{f_.name}={getattr(self, f_.name)!r}" for f_ in fields(self))
        return hashlib.sha256(body.encode()).hexdigest()[:12]


def state_of_health(lam: ParameterSet, cfg: CellConfig,
                    nominal_ah: float) -> float:
    """Ratio of the 1/3 C discharge capacity to the nominal capacity."""
    cap = cc_discharge_capacity(lam, cfg, 1.0 / 3.0, capacity_basis_ah=nominal_ah)
    return cap / nominal_ah


def _evaluate_draw(args):
    """Worker body for one candidate draw: feasibility + SoH."""
    draw_idx, seed, cell_ini, lo, hi, nominal = args
    cfg = CellConfig.from_ini(cell_ini)
    rng = np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(0xD0, draw_idx)))
    lam = ParameterSet.from_array(rng.uniform(np.asarray(lo), np.asarray(hi)))
    try:
        solve_initial_stoichiometry(lam, cfg, cfg.V_hi)
        solve_initial_stoichiometry(lam, cfg, cfg.V_lo)
        soh = state_of_health(lam, cfg, nominal)
    except (StoichiometryError, SimulationError):
        return None
    return lam, soh


def sample_parameters(plan: SamplingPlan, cfg: CellConfig, seed: int,
                      workers: int = 0) -> list[tuple[ParameterSet, float]]:
    """Rejection-fill every SoH bin with feasible parameter sets.

    Returns (lam, soh) pairs grouped by bin (bin 0 first).  Raises
    ConfigError naming the first bin that cannot be filled within the
    draw cap.  Acceptance depends only on the draw index, so the result
    is independent of the worker count.
    """
    nominal = cfg.nominal_capacity_ah
    if nominal is None:
        nominal = cc_discharge_capacity(plan.base, cfg, 1.0 / 3.0)
    lo, hi = plan.sampling_box()
    edges = plan.bin_edges()
    bins: list[list[tuple[ParameterSet, float]]] = [[] for _ in range(plan.n_bins)]
    target = plan.sets_per_bin
    cap = plan.draw_cap_factor * target * plan.n_bins
    cell_ini = cfg.to_ini()

    def ingest(result) -> bool:
        if result is None:
            return False
        lam, soh = result
        idx = int(np.searchsorted(edges, soh, side="right")) - 1
        if 0 <= idx < plan.n_bins and len(bins[idx]) < target:
            bins[idx].append((lam, soh))
        return all(len(b) >= target for b in bins)

    def job(draw_idx):
        return (draw_idx, seed, cell_ini, tuple(lo), tuple(hi), nominal)

    done = False
    if workers and workers > 1:
        chunk = max(8 * workers, 32)
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            for start in range(0, cap, chunk):
                stop = min(start + chunk, cap)
                for res in pool.map(_evaluate_draw, map(job, range(start, stop)),
                                    chunksize=8):
                    if ingest(res):
                        done = True
                if done:
                    break
    else:
        for draw_idx in range(cap):
            if ingest(_evaluate_draw(job(draw_idx))):
                done = True
                break
    if not done:
        short = next(i for i, b in enumerate(bins) if len(b) < target)
        raise ConfigError(
            f"SoH bin [{edges[short]:.2f}, {edges[short + 1]:.2f}) unfillable: "
            f"{len(bins[short])}/{target} after {cap} draws")
    out = []
    for b in bins:
        out.extend(b)
    return out


# ---------------------------------------------------------------------------
# Dataset building
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    """One labeled sequence on disk."""

    sample_id: int
    set_id: int
    seq_id: int
    split: str
    soh: float
    soc_init: float
    v_init: float
    seed: int
    lam: ParameterSet
    lam_norm: np.ndarray | None = None


@dataclass
class DatasetManifest:
    seed: int
    cell_fingerprint: str
    plan_fingerprint: str
    n_train_sets: int
    n_val_sets: int
    n_train_samples: int
    n_val_samples: int
    n_resampled: int
    normalizer: ParamNormalizer
    bin_occupancy: list[int]

    def write(self, path) -> None:
        lines = [
            "[dataset]",
            f"seed = {self.seed}",
            f"cell_fingerprint = {self.cell_fingerprint}",
            f"plan_fingerprint = {self.plan_fingerprint}",
            f"n_train_sets = {self.n_train_sets}",
            f"n_val_sets = {self.n_val_sets}",
            f"n_train_samples = {self.n_train_samples}",
            f"n_val_samples = {self.n_val_samples}",
            f"n_resampled = {self.n_resampled}",
            "bin_occupancy = " + ", ".join(str(b) for b in self.bin_occupancy),
            "",
            "[normalizer]",
            "mean = " + ", ".join(repr(float(v)) for v in self.normalizer.mean),
            "std = " + ", ".join(repr(float(v)) for v in self.normalizer.std),
            "",
        ]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines))

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_string(fh.read())
        d = parser["dataset"]
        norm = ParamNormalizer(
            mean=np.array([float(v) for v in parser["normalizer"]["mean"].split(",")]),
            std=np.array([float(v) for v in parser["normalizer"]["std"].split(",")]),
        )
        return cls(
            seed=int(d["seed"]),
            cell_fingerprint=d["cell_fingerprint"],
            plan_fingerprint=d["plan_fingerprint"],
            n_train_sets=int(d["n_train_sets"]),
            n_val_sets=int(d["n_val_sets"]),
            n_train_samples=int(d["n_train_samples"]),
            n_val_samples=int(d["n_val_samples"]),
            n_resampled=int(d["n_resampled"]),
            normalizer=norm,
            bin_occupancy=[int(v) for v in d["bin_occupancy"].split(",")],
        )


def _ocv_at_soc(lam: ParameterSet, cfg: CellConfig, soc: float) -> float:
    sol = solve_initial_stoichiometry(lam, cfg, cfg.V_hi)
    theta_p = sol.theta_p_0 + soc * (sol.theta_p_100 - sol.theta_p_0)
    theta_n = sol.theta_n_0 + soc * (sol.theta_n_100 - sol.theta_n_0)
    return float(cfg.ocv(theta_p, theta_n))


def _simulate_sample(args):
    """Worker body: simulate one sequence, retrying with derived seeds."""
    (set_id, seq_id, lam_vec, soh, cell_ini, plan, drive, grid_tuple, seed) = args
    cfg = CellConfig.from_ini(cell_ini)
    lam = ParameterSet.from_array(np.asarray(lam_vec))
    grid = SimGrid(*grid_tuple)
    attempts = 0
    while True:
        ss = np.random.SeedSequence(seed, spawn_key=(set_id, seq_id, attempts))
        rng = np.random.default_rng(ss)
        soc = float(rng.uniform(plan.soc_lo, plan.soc_hi))
        cyc_seed = int(rng.integers(2**31))
        current = generate_drive_current(
            replace(drive, duration=plan.seq_len), seed=cyc_seed,
            nominal_capacity_ah=cfg.nominal_capacity_ah or lam.Q_Li)
        # simulate exactly what the trajectory file will store (float32),
        # so reloading and re-simulating reproduces the labels bit-for-bit
        current = current.astype(np.float32).astype(np.float64)
        v_init = _ocv_at_soc(lam, cfg, soc)
        try:
            traj = simulate(lam, cfg, current, v_init, grid)
        except (SimulationError, StoichiometryError):
            attempts += 1
            if attempts > 50:
                raise
            continue
        record = SampleRecord(
            sample_id=-1, set_id=set_id, seq_id=seq_id, split="",
            soh=soh, soc_init=soc, v_init=v_init, seed=cyc_seed, lam=lam)
        return record, traj, attempts


def _write_sidecar(path, rec: SampleRecord) -> None:
    lines = [
        "[sample]",
        f"sample_id = {rec.sample_id}",
        f"set_id = {rec.set_id}",
        f"seq_id = {rec.seq_id}",
        f"split = {rec.split}",
        f"soh = {float(rec.soh)!r}",
        f"soc_init = {float(rec.soc_init)!r}",
        f"v_init = {float(rec.v_init)!r}",
        f"seed = {rec.seed}",
        "",
        "[params]",
    ]
    vec = rec.lam.to_array()
    lines += [f"{n} = {float(vec[i])!r}" for i, n in enumerate(PARAM_NAMES)]
    lines += ["", "[params_normalized]"]
    lines += [f"{n} = {float(rec.lam_norm[i])!r}" for i, n in enumerate(PARAM_NAMES)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_sidecar(path) -> SampleRecord:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_string(fh.read())
    s = parser["sample"]
    lam = ParameterSet(**{n: float(parser["params"][n]) for n in PARAM_NAMES})
    lam_norm = np.array([float(parser["params_normalized"][n]) for n in PARAM_NAMES])
    return SampleRecord(
        sample_id=int(s["sample_id"]), set_id=int(s["set_id"]),
        seq_id=int(s["seq_id"]), split=s["split"], soh=float(s["soh"]),
        soc_init=float(s["soc_init"]), v_init=float(s["v_init"]),
        seed=int(s["seed"]), lam=lam, lam_norm=lam_norm)


def build_dataset(plan: SamplingPlan, cfg: CellConfig, drive: DriveCycleConfig,
                  grid: SimGrid, seed: int, out_dir, workers: int = 0):
    """Generate, label, normalize, and serialize the full dataset.

    Layout: ``out_dir/manifest``, ``out_dir/{train,val}/sample_NNNNN.traj``
    (binary trajectory) plus ``sample_NNNNN.params`` sidecars.
    """
    os.makedirs(out_dir, exist_ok=True)
    for split in ("train", "val"):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)

    accepted = sample_parameters(plan, cfg, seed, workers=workers)
    edges = plan.bin_edges()
    occupancy = [0] * plan.n_bins
    for _, soh in accepted:
        occupancy[int(np.searchsorted(edges, soh, side="right")) - 1] += 1

    # deterministic validation selection: last val_sets_per_bin of each bin
    split_of_set = {}
    set_rows = []
    for b in range(plan.n_bins):
        bin_sets = accepted[b * plan.sets_per_bin:(b + 1) * plan.sets_per_bin]
        for i, (lam, soh) in enumerate(bin_sets):
            set_id = len(set_rows)
            split = "val" if i >= plan.sets_per_bin - plan.val_sets_per_bin else "train"
            split_of_set[set_id] = split
            set_rows.append((lam, soh))

    cell_ini = cfg.to_ini()
    grid_tuple = (grid.n_shell, grid.n_x, grid.dt)
    jobs = [
        (set_id, seq_id, lam.to_array(), soh, cell_ini, plan, drive,
         grid_tuple, seed)
        for set_id, (lam, soh) in enumerate(set_rows)
        for seq_id in range(plan.sequences_per_set)
    ]

    if workers and workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_sample, jobs, chunksize=8))
    else:
        results = [_simulate_sample(job) for job in jobs]

    train_params = [set_rows[sid][0] for sid, split in split_of_set.items()
                    if split == "train"]
    normalizer = ParamNormalizer.fit(train_params)

    counts = {"train": 0, "val": 0}
    n_resampled = 0
    for sample_id, (rec, traj, attempts) in enumerate(results):
        rec.sample_id = sample_id
        rec.split = split_of_set[rec.set_id]
        rec.lam_norm = normalizer.normalize(rec.lam)
        n_resampled += attempts
        stem = os.path.join(out_dir, rec.split, f"sample_{sample_id:05d}")
        traj.save(stem + ".traj")
        _write_sidecar(stem + ".params", rec)
        counts[rec.split] += 1

    n_val_sets = plan.n_bins * plan.val_sets_per_bin
    manifest = DatasetManifest(
        seed=seed,
        cell_fingerprint=cfg.fingerprint(),
        plan_fingerprint=plan.fingerprint(),
        n_train_sets=len(set_rows) - n_val_sets,
        n_val_sets=n_val_sets,
        n_train_samples=counts["train"],
        n_val_samples=counts["val"],
        n_resampled=n_resampled,
        normalizer=normalizer,
        bin_occupancy=occupancy,
    )
    manifest.write(os.path.join(out_dir, "manifest"))
    return manifest


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

@dataclass
class LoadedSample:
    record: SampleRecord
    trajectory: Trajectory


@dataclass
class LoadedSet:
    """All sequences of one parameter set."""

    set_id: int
    lam: ParameterSet
    lam_norm: np.ndarray
    soh: float
    samples: list[LoadedSample]


def load_split(out_dir, split: str) -> list[LoadedSet]:
    folder = os.path.join(out_dir, split)
    stems = sorted(f[:-5] for f in os.listdir(folder) if f.endswith(".traj"))
    by_set: dict[int, LoadedSet] = {}
    for stem in stems:
        rec = _read_sidecar(os.path.join(folder, stem + ".params"))
        traj = Trajectory.load(os.path.join(folder, stem + ".traj"))
        group = by_set.get(rec.set_id)
        if group is None:
            group = LoadedSet(set_id=rec.set_id, lam=rec.lam,
                              lam_norm=rec.lam_norm, soh=rec.soh, samples=[])
            by_set[rec.set_id] = group
        group.samples.append(LoadedSample(record=rec, trajectory=traj))
    return [by_set[k] for k in sorted(by_set)]


def load_manifest(out_dir) -> DatasetManifest:
    return DatasetManifest.read(os.path.join(out_dir, "manifest"))
