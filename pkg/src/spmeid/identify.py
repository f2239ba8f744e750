"""Fixed-point parameter identification and the benchmark harness.

The loop alternates a forward step (rebuild coulomb-counting inputs for
the current iterate, evaluate the surrogate, compute terminal voltages)
with an update step (the update network maps the evaluation context to
the next iterate).  It stops when the worst per-sequence voltage RMSE
drops below the threshold, when it fails to improve for a fixed number of
iterations, or at the iteration cap; the best iterate by worst-sequence
RMSE is returned either way.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cellmodel import CellConfig, ParameterSet, ParamNormalizer
from .datagen import LoadedSet
from .errors import ConfigError, StoichiometryError
from .optimize import CmaResult, cma_minimize
from .punet import (EvaluationContext, RefSequence, UpdateModel, build_context,
                    punet_update, refs_from_set)
from .simulator import SimGrid, simulate
from .surrogate import SurrogateModel, build_model_inputs
from .voltage import voltage_sequence

DELTA_MV_DEFAULT = 5.0
STAGNATION_DEFAULT = 3
MAX_ITER_DEFAULT = 100
INFEASIBLE_PENALTY_MV = 1.0e6


def rmse_mv(v_a, v_b) -> float:
    """Root-mean-square difference in millivolts."""
    v_a = np.asarray(v_a, dtype=np.float64)
    v_b = np.asarray(v_b, dtype=np.float64)
    if v_a.shape != v_b.shape or v_a.size < 1:
        raise ConfigError(f"rmse_mv needs equal nonempty shapes, "
                          f"got {v_a.shape} vs {v_b.shape}")
    return float(np.sqrt(np.mean((v_a - v_b) ** 2)) * 1000.0)


def parameter_mape(lam_est: ParameterSet, lam_true: ParameterSet):
    """Percentage error per parameter and its mean."""
    est = lam_est.to_array()
    true = lam_true.to_array()
    per = 100.0 * np.abs(est - true) / np.abs(true)
    return per, float(per.mean())


@dataclass
class IterationRecord:
    k: int
    lam: ParameterSet
    rmse_mv_per_seq: np.ndarray
    max_rmse_mv: float


@dataclass
class IdentificationRun:
    records: list[IterationRecord] = field(default_factory=list)
    stop_reason: str = ""        # threshold | stagnation | max_iter | infeasible
    wall_time_s: float = 0.0
    eval_count: int = 0
    best_k: int = -1

    @property
    def best(self) -> IterationRecord:
        return self.records[self.best_k]

    @property
    def iterations(self) -> int:
        return len(self.records)

    def to_csv(self, path, header_lines=None) -> None:
        from .cellmodel import PARAM_NAMES
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write("iteration,max_rmse_mv," + ",".join(PARAM_NAMES) + "\n")
            for rec in self.records:
                vec = rec.lam.to_array()
                fh.write(f"{rec.k},{rec.max_rmse_mv!r},"
                         + ",".join(repr(v) for v in vec) + "\n")


def identify(refs: list[RefSequence], surrogate: SurrogateModel,
             update_model: UpdateModel, cell: CellConfig,
             normalizer: ParamNormalizer, delta_mv: float = DELTA_MV_DEFAULT,
             max_iter: int = MAX_ITER_DEFAULT,
             stagnation: int = STAGNATION_DEFAULT,
             lam0: ParameterSet | None = None) -> IdentificationRun:
    """Run the fixed-point loop against M reference sequences.

    The initial iterate is the training-set mean (the normalizer mean)
    unless ``lam0`` is given.  ``delta_mv`` is the worst-sequence RMSE
    stopping threshold in millivolts.
    """
    if len(refs) < 1:
        raise ConfigError("identification needs at least one reference sequence")
    if delta_mv <= 0:
        raise ConfigError("delta_mv must be positive")
    t0 = time.perf_counter()
    lam = lam0 or normalizer.denormalize(np.zeros(9))
    lam_norm = normalizer.normalize(lam)
    run = IdentificationRun()
    best_max = np.inf
    bad_streak = 0

    for k in range(max_iter + 1):
        ctx, lam, lam_norm = _context_with_retry(
            lam, lam_norm, surrogate, cell, refs, run, normalizer)
        if ctx is None:
            run.stop_reason = "infeasible"
            break
        per_seq = np.array([
            rmse_mv(ctx.v_model[i], refs[i].v_ref) for i in range(len(refs))])
        worst = float(per_seq.max())
        run.records.append(IterationRecord(
            k=k, lam=lam, rmse_mv_per_seq=per_seq, max_rmse_mv=worst))
        if worst < best_max:
            best_max = worst
            run.best_k = len(run.records) - 1
            bad_streak = 0
        else:
            bad_streak += 1
        if worst < delta_mv:
            run.stop_reason = "threshold"
            break
        if bad_streak >= stagnation:
            run.stop_reason = "stagnation"
            break
        if k == max_iter:
            run.stop_reason = "max_iter"
            break
        lam, lam_norm, _ = punet_update(ctx, update_model, normalizer)

    run.wall_time_s = time.perf_counter() - t0
    return run


def _context_with_retry(lam, lam_norm, surrogate, cell, refs, run, normalizer):
    """Build the context; on infeasibility project onto the box and retry
    once.  Returns (ctx, lam, lam_norm) with the possibly projected
    iterate, or (None, lam, lam_norm) when both attempts fail."""
    try:
        ctx = build_context(lam, lam_norm, surrogate, cell, refs)
        run.eval_count += 1
        return ctx, lam, lam_norm
    except StoichiometryError:
        pass
    projected = lam.clipped()
    if projected.to_array().tolist() == lam.to_array().tolist():
        return None, lam, lam_norm
    projected_norm = normalizer.normalize(projected)
    try:
        ctx = build_context(projected, projected_norm, surrogate, cell, refs)
    except StoichiometryError:
        return None, lam, lam_norm
    run.eval_count += 1
    return ctx, projected, projected_norm


# ---------------------------------------------------------------------------
# Objectives for the CMA-ES baseline
# ---------------------------------------------------------------------------

def surrogate_objective(refs: list[RefSequence], surrogate: SurrogateModel,
                        cell: CellConfig, normalizer: ParamNormalizer):
    """Worst per-sequence voltage RMSE (mV) as a function of the
    normalized parameter vector; infeasible iterates get a large finite
    penalty scaled by the constraint violation."""

    def objective(z: np.ndarray) -> float:
        lam = normalizer.denormalize(z)
        try:
            ctx = build_context(lam, normalizer.normalize(lam), surrogate,
                                cell, refs)
        except StoichiometryError:
            return INFEASIBLE_PENALTY_MV * (1.0 + float(np.linalg.norm(z)))
        return float(max(rmse_mv(ctx.v_model[i], refs[i].v_ref)
                         for i in range(len(refs))))

    return objective


def simulator_objective(refs: list[RefSequence], cell: CellConfig,
                        normalizer: ParamNormalizer, grid: SimGrid | None = None):
    """Same objective evaluated with the reference simulator."""
    grid = grid or SimGrid()

    def objective(z: np.ndarray) -> float:
        lam = normalizer.denormalize(z)
        worst = 0.0
        for ref in refs:
            try:
                traj = simulate(lam, cell, ref.current, float(ref.v_ref[0]), grid)
            except Exception:
                return INFEASIBLE_PENALTY_MV * (1.0 + float(np.linalg.norm(z)))
            worst = max(worst, rmse_mv(traj.V, ref.v_ref))
        return worst

    return objective


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

@dataclass
class MethodResult:
    method: str
    set_id: int
    wall_time_s: float
    evaluations: int
    reached_target: bool
    final_max_rmse_mv: float
    mape_mean: float
    mape_per_param: np.ndarray


@dataclass
class BenchmarkReport:
    rows: list[MethodResult] = field(default_factory=list)
    surrogate_speedup: float = 0.0
    surrogate_eval_s: float = 0.0
    simulator_eval_s: float = 0.0

    def method_rows(self, method: str) -> list[MethodResult]:
        return [r for r in self.rows if r.method == method]

    def mean(self, method: str, attr: str) -> float:
        rows = self.method_rows(method)
        return float(np.mean([getattr(r, attr) for r in rows])) if rows else np.nan

    def summary_table(self) -> list[dict]:
        base_time = self.mean("cmaes+simulator", "wall_time_s")
        table = []
        for method in ("cmaes+simulator", "cmaes", "punet"):
            rows = self.method_rows(method)
            if not rows:
                continue
            mean_time = self.mean(method, "wall_time_s")
            table.append({
                "method": method,
                "tasks": len(rows),
                "mean_time_s": mean_time,
                "mean_evaluations": self.mean(method, "evaluations"),
                "speedup_vs_baseline": base_time / mean_time
                if np.isfinite(base_time) and mean_time > 0 else float("nan"),
                "mean_mape_pct": self.mean(method, "mape_mean"),
                "mean_final_max_rmse_mv": self.mean(method, "final_max_rmse_mv"),
            })
        return table

    def sample_efficiency(self) -> float:
        """CMA-ES objective evaluations per update-network iteration."""
        cma = self.mean("cmaes", "evaluations")
        pu = self.mean("punet", "evaluations")
        return cma / pu if pu else float("nan")

    def to_csv(self, path, header_lines=None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write("method,set_id,wall_time_s,evaluations,reached_target,"
                     "final_max_rmse_mv,mape_mean\n")
            for r in self.rows:
                fh.write(f"{r.method},{r.set_id},{r.wall_time_s!r},"
                         f"{r.evaluations},{int(r.reached_target)},"
                         f"{r.final_max_rmse_mv!r},{r.mape_mean!r}\n")

    def summary_to_csv(self, path, header_lines=None) -> None:
        table = self.summary_table()
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write("method,tasks,mean_time_s,mean_evaluations,"
                     "speedup_vs_baseline,mean_mape_pct,mean_final_max_rmse_mv\n")
            for row in table:
                fh.write(",".join(repr(row[k]) if not isinstance(row[k], str)
                                  else row[k] for k in (
                    "method", "tasks", "mean_time_s", "mean_evaluations",
                    "speedup_vs_baseline", "mean_mape_pct",
                    "mean_final_max_rmse_mv")) + "\n")
            fh.write(f"# sample_efficiency = {self.sample_efficiency()!r}\n")
            fh.write(f"# surrogate_speedup = {self.surrogate_speedup!r}\n")


def time_forward_evaluation(surrogate: SurrogateModel, cell: CellConfig,
                            group: LoadedSet, grid: SimGrid | None = None,
                            repeats: int = 3):
    """Wall-time ratio simulator/surrogate for one batch of M identical
    sequences (the paper-style forward-evaluation speedup)."""
    grid = grid or SimGrid()
    refs = refs_from_set(group)
    lam, lam_norm = group.lam, group.lam_norm

    t0 = time.perf_counter()
    for _ in range(repeats):
        build_context(lam, lam_norm, surrogate, cell, refs)
    surrogate_s = (time.perf_counter() - t0) / repeats

    t0 = time.perf_counter()
    for _ in range(repeats):
        for ref in refs:
            simulate(lam, cell, ref.current, ref.v_init, grid)
    simulator_s = (time.perf_counter() - t0) / repeats
    return simulator_s / surrogate_s, surrogate_s, simulator_s


def benchmark(val_sets: list[LoadedSet], surrogate: SurrogateModel,
              update_model: UpdateModel, cell: CellConfig,
              normalizer: ParamNormalizer, delta_mv: float = DELTA_MV_DEFAULT,
              cma_budget: int = 1200, cma_seed: int = 0,
              simulator_tasks: int = 2, simulator_budget: int = 250,
              grid: SimGrid | None = None,
              methods=("punet", "cmaes", "cmaes+simulator")) -> BenchmarkReport:
    """Identification comparison across methods on held-out sets."""
    report = BenchmarkReport()
    lo, hi = normalizer.normalized_bounds()

    for task_idx, group in enumerate(val_sets):
        refs = refs_from_set(group)
        if "punet" in methods:
            run = identify(refs, surrogate, update_model, cell, normalizer,
                           delta_mv=delta_mv)
            per, mape_mean = parameter_mape(run.best.lam, group.lam)
            report.rows.append(MethodResult(
                method="punet", set_id=group.set_id,
                wall_time_s=run.wall_time_s, evaluations=run.eval_count,
                reached_target=run.stop_reason == "threshold",
                final_max_rmse_mv=run.best.max_rmse_mv,
                mape_mean=mape_mean, mape_per_param=per))
        if "cmaes" in methods:
            obj = surrogate_objective(refs, surrogate, cell, normalizer)
            t0 = time.perf_counter()
            res = cma_minimize(obj, (lo, hi), budget=cma_budget,
                               target=delta_mv, seed=cma_seed + group.set_id,
                               x0=np.zeros(9), sigma0=0.3)
            wall = time.perf_counter() - t0
            lam_best = normalizer.denormalize(res.best_x)
            per, mape_mean = parameter_mape(lam_best, group.lam)
            report.rows.append(MethodResult(
                method="cmaes", set_id=group.set_id, wall_time_s=wall,
                evaluations=res.evals_to_target or res.evaluations,
                reached_target=res.status == "target",
                final_max_rmse_mv=res.best_f, mape_mean=mape_mean,
                mape_per_param=per))
        if "cmaes+simulator" in methods and task_idx < simulator_tasks:
            obj = simulator_objective(refs, cell, normalizer, grid)
            t0 = time.perf_counter()
            res = cma_minimize(obj, (lo, hi), budget=simulator_budget,
                               target=delta_mv, seed=cma_seed + group.set_id,
                               x0=np.zeros(9), sigma0=0.3)
            wall = time.perf_counter() - t0
            lam_best = normalizer.denormalize(res.best_x)
            per, mape_mean = parameter_mape(lam_best, group.lam)
            report.rows.append(MethodResult(
                method="cmaes+simulator", set_id=group.set_id,
                wall_time_s=wall,
                evaluations=res.evals_to_target or res.evaluations,
                reached_target=res.status == "target",
                final_max_rmse_mv=res.best_f, mape_mean=mape_mean,
                mape_per_param=per))

    ratio, sur_s, sim_s = time_forward_evaluation(
        surrogate, cell, val_sets[0], grid)
    report.surrogate_speedup = ratio
    report.surrogate_eval_s = sur_s
    report.simulator_eval_s = sim_s
    return report
