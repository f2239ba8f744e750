"""Command-line entry point.

Subcommands cover the whole pipeline: ``validate-cell``, ``simulate``,
``gen-data``, ``train-surrogate``, ``train-vt``, ``train-punet``,
``identify``, ``benchmark``.  Every flag can also be supplied through an
environment variable with the ``SPMEID_`` prefix (dashes become
underscores, e.g. ``SPMEID_SEED=7``); explicit flags win.  All artifacts
embed the toolkit version, the seed, and the cell-config fingerprint that
produced them.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .cellmodel import CellConfig, default_cell_config, load_cell_config
from .datagen import (DriveCycleConfig, SamplingPlan, build_dataset,
                      generate_drive_current, load_manifest, load_split)
from .errors import SpmeidError
from .identify import benchmark, identify
from .nn import ENCODER_PRESETS, EncoderConfig
from .punet import PunetTrainConfig, UpdateModel, refs_from_set, train_punet, \
    update_model_from_checkpoint
from .simulator import SimGrid, simulate
from .surrogate import (SurrogateModel, TrainConfig, VTBaseline,
                        evaluate_surrogate, model_from_checkpoint,
                        train_surrogate)

ENV_PREFIX = "SPMEID_"


def _env_default(flag: str, fallback=None):
    return os.environ.get(ENV_PREFIX + flag.upper().replace("-", "_"), fallback)


def repro_header(seed, cfg: CellConfig, extra: dict | None = None) -> list[str]:
    lines = [f"spmeid {__version__}",
             f"seed = {seed}",
             f"cell_config = {cfg.fingerprint()}"]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    return lines


def _write_run_info(out_dir, seed, cfg, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run-info.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(repro_header(seed, cfg, extra)) + "\n")


def _load_cell(args) -> CellConfig:
    if getattr(args, "config", None):
        cfg = load_cell_config(args.config)
        cfg.validate()
        return cfg
    return default_cell_config()


def _encoder_preset(scale: str, causal: bool, max_len: int) -> EncoderConfig:
    preset = ENCODER_PRESETS["large" if scale == "full" else "small"]
    return EncoderConfig(causal=causal, max_len=max_len, **preset)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate_cell(args) -> int:
    cfg = _load_cell(args)
    print(f"cell config ok (fingerprint {cfg.fingerprint()})")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_cell(args)
    from .cellmodel import BASE_PARAMS
    from .datagen import _ocv_at_soc
    drive = DriveCycleConfig(duration=args.duration)
    current = generate_drive_current(drive, seed=args.seed,
                                     nominal_capacity_ah=cfg.nominal_capacity_ah)
    v_init = _ocv_at_soc(BASE_PARAMS, cfg, args.soc)
    traj = simulate(BASE_PARAMS, cfg, current, v_init, SimGrid())
    os.makedirs(args.out, exist_ok=True)
    traj.save(os.path.join(args.out, "trajectory.traj"))
    traj.to_csv(os.path.join(args.out, "trajectory.csv"))
    _write_run_info(args.out, args.seed, cfg,
                    {"soc": args.soc, "duration": args.duration})
    print(f"simulated {len(traj)} steps -> {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_cell(args)
    plan_kwargs = {}
    if args.scale == "full":
        plan_kwargs.update(sets_per_bin=500, val_sets_per_bin=50)
    if args.sets_per_bin:
        plan_kwargs["sets_per_bin"] = args.sets_per_bin
    if args.val_sets_per_bin:
        plan_kwargs["val_sets_per_bin"] = args.val_sets_per_bin
    if args.seq_len:
        plan_kwargs["seq_len"] = args.seq_len
    plan = SamplingPlan(**plan_kwargs)
    drive = DriveCycleConfig(duration=plan.seq_len)
    manifest = build_dataset(plan, cfg, drive, SimGrid(), args.seed, args.out,
                             workers=args.workers)
    _write_run_info(args.out, args.seed, cfg,
                    {"plan": plan.fingerprint(),
                     "train_sets": manifest.n_train_sets,
                     "val_sets": manifest.n_val_sets})
    print(f"dataset: {manifest.n_train_samples} train / "
          f"{manifest.n_val_samples} val samples -> {args.out}")
    return 0


def _train_forward_model(args, kind: str) -> int:
    cfg = _load_cell(args)
    train_sets = load_split(args.data, "train")
    val_sets = load_split(args.data, "val")
    enc = _encoder_preset(args.scale, causal=True,
                          max_len=max(2048, len(train_sets[0].samples[0].trajectory)))
    model = SurrogateModel(enc, seed=args.seed) if kind == "NSPM" \
        else VTBaseline(enc, seed=args.seed)
    tc = TrainConfig(steps=args.steps, batch_size=args.batch_size, seed=args.seed)
    report = train_surrogate(model, train_sets, val_sets, cfg, tc)
    rmse = evaluate_surrogate(model, val_sets, cfg)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    model.save(args.out, extra={"best_step": report.best_step,
                                "cell_config": cfg.fingerprint()})
    head = repro_header(args.seed, cfg, {"kind": kind})
    report.to_csv(args.out + ".train.csv", head)
    rmse.to_csv(args.out + ".val_rmse.csv", head)
    print(f"{kind}: best val loss {report.best_val:.3e} @ step "
          f"{report.best_step}; val voltage RMSE {rmse.summary()}")
    return 0


def cmd_train_surrogate(args) -> int:
    return _train_forward_model(args, "NSPM")


def cmd_train_vt(args) -> int:
    return _train_forward_model(args, "VTBL")


def cmd_train_punet(args) -> int:
    cfg = _load_cell(args)
    train_sets = load_split(args.data, "train")
    val_sets = load_split(args.data, "val")
    manifest = load_manifest(args.data)
    surrogate = model_from_checkpoint(args.surrogate)
    seq_len = len(train_sets[0].samples[0].trajectory)
    ctx_len = seq_len * len(train_sets[0].samples)
    enc = _encoder_preset(args.scale, causal=False, max_len=ctx_len + 64)
    model = UpdateModel(enc, seed=args.seed)
    tc = PunetTrainConfig(steps=args.steps, batch_size=args.batch_size,
                          seed=args.seed)
    report = train_punet(model, surrogate, train_sets, val_sets, cfg,
                         manifest.normalizer, tc)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    model.save(args.out, extra={"cell_config": cfg.fingerprint()})
    report.to_csv(args.out + ".train.csv", repro_header(args.seed, cfg))
    last = report.rows[-1] if report.rows else (0, np.nan, np.nan, np.nan, 0)
    print(f"PUNT: final loss {last[1]:.3e}, val recon L2 {last[2]:.3f}, "
          f"contraction pass rate {last[3]:.2f}")
    return 0


def _require_checkpoints(paths: dict) -> None:
    missing = [f"{name}: {path}" for name, path in paths.items()
               if not path or not os.path.exists(path)]
    if missing:
        raise SpmeidError("missing checkpoints -> " + "; ".join(missing))


def cmd_identify(args) -> int:
    cfg = _load_cell(args)
    _require_checkpoints({"surrogate": args.surrogate, "punet": args.punet})
    surrogate = model_from_checkpoint(args.surrogate)
    update_model = update_model_from_checkpoint(args.punet)
    manifest = load_manifest(args.data)
    val_sets = load_split(args.data, "val")
    group = next((g for g in val_sets if g.set_id == args.set_id), None)
    if group is None:
        raise SpmeidError(f"set_id {args.set_id} not found in the val split "
                          f"(available: {[g.set_id for g in val_sets]})")
    run = identify(refs_from_set(group), surrogate, update_model, cfg,
                   manifest.normalizer, delta_mv=args.delta_mv)
    os.makedirs(args.out, exist_ok=True)
    run.to_csv(os.path.join(args.out, f"identify_set{args.set_id}.csv"),
               repro_header(args.seed, cfg, {"set_id": args.set_id}))
    _write_run_info(args.out, args.seed, cfg, {"set_id": args.set_id})
    best = run.best
    print(f"stop={run.stop_reason} iterations={run.iterations} "
          f"best max RMSE={best.max_rmse_mv:.3f} mV (iteration {best.k})")
    return 0


def cmd_benchmark(args) -> int:
    cfg = _load_cell(args)
    _require_checkpoints({"surrogate": args.surrogate, "punet": args.punet})
    surrogate = model_from_checkpoint(args.surrogate)
    update_model = update_model_from_checkpoint(args.punet)
    manifest = load_manifest(args.data)
    val_sets = load_split(args.data, "val")
    if args.tasks:
        val_sets = val_sets[:args.tasks]
    methods = tuple(args.methods.split(","))
    report = benchmark(val_sets, surrogate, update_model, cfg,
                       manifest.normalizer, cma_budget=args.cma_budget,
                       cma_seed=args.seed, simulator_tasks=args.sim_tasks,
                       methods=methods)
    os.makedirs(args.out, exist_ok=True)
    head = repro_header(args.seed, cfg, {"tasks": len(val_sets)})
    report.to_csv(os.path.join(args.out, "benchmark_tasks.csv"), head)
    report.summary_to_csv(os.path.join(args.out, "benchmark_summary.csv"), head)
    _write_run_info(args.out, args.seed, cfg)
    for row in report.summary_table():
        print(row)
    print(f"sample efficiency (cmaes evals / punet iterations): "
          f"{report.sample_efficiency():.2f}")
    print(f"surrogate forward speedup vs simulator: "
          f"{report.surrogate_speedup:.2f}x")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spmeid",
        description="Battery parameter identification toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", default=_env_default("config"),
                       help="cell config INI (default: built-in cell)")
        p.add_argument("--seed", type=int, default=int(_env_default("seed", 0)),
                       help="master seed recorded in all artifacts")
        p.add_argument("--out", default=_env_default("out", out_default),
                       help="output directory or file")
        p.add_argument("--workers", type=int,
                       default=int(_env_default("workers", os.cpu_count() or 1)),
                       help="parallel workers for data generation")
        p.add_argument("--scale", choices=("desk", "full"),
                       default=_env_default("scale", "desk"),
                       help="desk-scale defaults or full-scale settings")

    p = sub.add_parser("validate-cell", help="check a cell config file")
    common(p)
    p.set_defaults(func=cmd_validate_cell)

    p = sub.add_parser("simulate", help="simulate the base cell on a drive cycle")
    common(p, out_default="run")
    p.add_argument("--cell", default="default", help="base cell selector")
    p.add_argument("--duration", type=int, default=600, help="steps at 1 s")
    p.add_argument("--soc", type=float, default=0.6, help="initial state of charge")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-data", help="generate the labeled dataset")
    common(p, out_default="dataset")
    p.add_argument("--sets-per-bin", type=int, default=0)
    p.add_argument("--val-sets-per-bin", type=int, default=0)
    p.add_argument("--seq-len", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    for name, func in (("train-surrogate", cmd_train_surrogate),
                       ("train-vt", cmd_train_vt)):
        p = sub.add_parser(name, help=f"train the {name.split('-')[1]} model")
        common(p, out_default=f"{name.split('-')[1]}.ckpt")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--steps", type=int, default=4000)
        p.add_argument("--batch-size", type=int, default=8)
        p.set_defaults(func=func)

    p = sub.add_parser("train-punet", help="train the parameter update network")
    common(p, out_default="punet.ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", required=True, help="frozen surrogate checkpoint")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=2)
    p.set_defaults(func=cmd_train_punet)

    p = sub.add_parser("identify", help="fixed-point identification on one set")
    common(p, out_default="run")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--punet", required=True)
    p.add_argument("--set-id", type=int, required=True)
    p.add_argument("--delta-mv", type=float, default=5.0)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("benchmark", help="compare identification methods")
    common(p, out_default="bench")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", default=_env_default("surrogate"))
    p.add_argument("--punet", default=_env_default("punet"))
    p.add_argument("--tasks", type=int, default=0, help="cap on task count")
    p.add_argument("--cma-budget", type=int, default=1200)
    p.add_argument("--sim-tasks", type=int, default=2)
    p.add_argument("--methods", default="punet,cmaes,cmaes+simulator")
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SpmeidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
