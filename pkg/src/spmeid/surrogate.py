"""Neural surrogate of the reference cell model.

The surrogate predicts the normalized 4-channel concentration sequence y
from the coulomb-counting inputs x, the z-scored parameters, and the
current; terminal voltage then comes from the closed-form expression.
A vanilla-transformer baseline ("VT") that regresses the scaled terminal
voltage directly from (parameters, current) is included for head-to-head
comparisons.

Input channel conventions (fixed across the toolkit):

* surrogate: [x(4) | lambda_norm(9) | I/100(1)] -> 14 channels,
* VT baseline: [lambda_norm(9) | I/100(1)] -> 10 channels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cellmodel import CellConfig, ParameterSet, ParamNormalizer
from .datagen import LoadedSet
from .errors import ConfigError
from .nn import (Adam, CosineSchedule, Encoder, EncoderConfig, Linear, Module,
                 Tensor, concat, load_checkpoint, save_checkpoint, train_step)
from .stoichiometry import build_input_sequence, solve_initial_stoichiometry
from .voltage import ClipCounter, scale_voltage, voltage_sequence

CURRENT_SCALE = 100.0  # amperes per unit of the network's current channel


def build_model_inputs(lam: ParameterSet, cfg: CellConfig, current: np.ndarray,
                       v_ref0: float, dt: float) -> np.ndarray:
    """Coulomb-counting channels (4, T) for one sequence; solves the
    initial stoichiometry from the first reference voltage sample."""
    sol = solve_initial_stoichiometry(lam, cfg, v_ref0)
    return build_input_sequence(sol, lam, cfg, current, dt)


class SurrogateModel(Module):
    """Causal encoder from (x, lambda, I) to y in [0,1]^(4xT)."""

    KIND = "NSPM"
    D_IN = 14
    D_OUT = 4

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        if not cfg.causal:
            raise ConfigError("the surrogate encoder must be causal")
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.D_IN, cfg, rng, dtype)
        self.head = Linear(cfg.d_model, self.D_OUT, rng, dtype)
        self.cfg = cfg
        self.seed = seed
        self.clip_counter = ClipCounter()

    # -- input assembly -------------------------------------------------------

    @staticmethod
    def stack_inputs(x: np.ndarray, lam_norm: np.ndarray,
                     current: np.ndarray) -> np.ndarray:
        """(4,T), (9,), (T,) -> (T, 14) float32 (batched variants allowed
        with leading dims (B,4,T), (B,9), (B,T))."""
        x = np.asarray(x, dtype=np.float32)
        lam_norm = np.asarray(lam_norm, dtype=np.float32)
        current = np.asarray(current, dtype=np.float32)
        if x.ndim == 2:
            t = x.shape[1]
            lam_rep = np.repeat(lam_norm[None, :], t, axis=0)
            return np.concatenate(
                [x.T, lam_rep, current[:, None] / CURRENT_SCALE], axis=1)
        b, _, t = x.shape
        lam_rep = np.repeat(lam_norm[:, None, :], t, axis=1)
        return np.concatenate(
            [x.swapaxes(1, 2), lam_rep, current[..., None] / CURRENT_SCALE], axis=2)

    def _forward_stacked(self, inp) -> Tensor:
        if not isinstance(inp, Tensor):
            inp = Tensor(inp)
        return self.head(self.encoder(inp)).sigmoid()

    def forward(self, x, lam_norm, current):
        """y with channels leading: (4, T) for single inputs, (B, 4, T)
        batched.  ``lam_norm`` may be an autodiff tensor, in which case the
        assembly stays on the tape (used by the composed-gradient checks).
        """
        if isinstance(lam_norm, Tensor):
            x_arr = np.asarray(x, dtype=np.float32)
            cur = np.asarray(current, dtype=np.float32)
            single = x_arr.ndim == 2
            if single:
                x_arr, cur = x_arr[None], cur[None]
                lam2 = lam_norm.reshape(1, lam_norm.shape[-1])
            else:
                lam2 = lam_norm
            b, _, t = x_arr.shape
            lam_rep = lam2.reshape(b, 1, 9).broadcast_to((b, t, 9))
            inp = concat([
                Tensor(x_arr.swapaxes(1, 2)),
                lam_rep,
                Tensor(cur[..., None] / CURRENT_SCALE),
            ], axis=2)
            out = self._forward_stacked(inp).swapaxes(1, 2)
            return out[0] if single else out
        stacked = self.stack_inputs(x, lam_norm, current)
        return self._forward_stacked(stacked).swapaxes(-1, -2)

    __call__ = forward

    def predict(self, x, lam_norm, current) -> np.ndarray:
        """Inference-only forward returning plain arrays."""
        return self.forward(x, lam_norm, current).data

    def loss(self, batch) -> Tensor:
        """Mean squared error against the labeled y (batch layout (B,T,C))."""
        inputs, labels = batch
        pred = self._forward_stacked(inputs)
        diff = pred - Tensor._lift(labels, pred)
        return (diff * diff).mean()

    # -- persistence -----------------------------------------------------------

    def header(self) -> dict:
        head = {"seed": self.seed, "step": 0}
        head.update(self.cfg.as_dict())
        return head

    def save(self, path, extra: dict | None = None) -> None:
        head = self.header()
        head.update(extra or {})
        save_checkpoint(path, self.KIND, head, self.named_params())


class VTBaseline(SurrogateModel):
    """Same encoder family, but regresses the scaled terminal voltage
    directly from (lambda, I); trainable weight count stays within 10% of
    the paired surrogate."""

    KIND = "VTBL"
    D_IN = 10
    D_OUT = 1

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        super().__init__(cfg, seed=seed, dtype=dtype)

    @staticmethod
    def stack_inputs(lam_norm: np.ndarray, current: np.ndarray) -> np.ndarray:
        lam_norm = np.asarray(lam_norm, dtype=np.float32)
        current = np.asarray(current, dtype=np.float32)
        if current.ndim == 1:
            t = current.size
            lam_rep = np.repeat(lam_norm[None, :], t, axis=0)
            return np.concatenate([lam_rep, current[:, None] / CURRENT_SCALE], axis=1)
        b, t = current.shape
        lam_rep = np.repeat(lam_norm[:, None, :], t, axis=1)
        return np.concatenate([lam_rep, current[..., None] / CURRENT_SCALE], axis=2)

    def forward(self, lam_norm, current):
        """Scaled voltage, (T,) or (B, T)."""
        stacked = self.stack_inputs(lam_norm, current)
        out = self._forward_stacked(stacked)
        return out[..., 0] if out.data.ndim == 2 else out[:, :, 0]

    __call__ = forward

    def predict(self, lam_norm, current) -> np.ndarray:
        return self.forward(lam_norm, current).data


def model_from_checkpoint(path):
    """Rebuild a surrogate/VT model from an NNCKPT01 file."""
    kind, header, params = load_checkpoint(path)
    cfg = EncoderConfig(
        n_layers=int(header["n_layers"]), n_heads=int(header["n_heads"]),
        d_model=int(header["d_model"]), d_ff=int(header["d_ff"]),
        causal=header["causal"] == "True", max_len=int(header["max_len"]))
    cls = {"NSPM": SurrogateModel, "VTBL": VTBaseline}.get(kind)
    if cls is None:
        raise ConfigError(f"{path}: unexpected model kind {kind!r}")
    model = cls(cfg, seed=int(header.get("seed", 0)))
    model.load_state(params)
    return model


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 8
    lr0: float = 1e-3
    lr_min: float = 1e-5
    seed: int = 0
    val_every: int = 250


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (step, train_loss, val_loss, lr)
    best_step: int = 0
    best_val: float = float("inf")
    wall_time_s: float = 0.0

    def to_csv(self, path, header_lines: list[str] | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write("step,train_loss,val_loss,lr\n")
            for row in self.rows:
                fh.write(",".join(repr(v) for v in row) + "\n")


def _dataset_arrays(sets: list[LoadedSet], cfg: CellConfig, kind: str):
    """Stack per-sample network inputs and labels for a whole split."""
    inputs, labels = [], []
    for group in sets:
        for sample in group.samples:
            traj = sample.trajectory
            current = traj.I.astype(np.float64)
            if kind == "NSPM":
                x = build_model_inputs(group.lam, cfg, current,
                                       float(traj.V[0]), _dt_of(traj))
                inputs.append(SurrogateModel.stack_inputs(
                    x, group.lam_norm, current))
                labels.append(traj.y.T.astype(np.float32))
            else:
                inputs.append(VTBaseline.stack_inputs(group.lam_norm, current))
                labels.append(scale_voltage(
                    traj.V.astype(np.float32), cfg)[:, None])
    return np.stack(inputs), np.stack(labels)


def _dt_of(traj) -> float:
    return float(traj.t[1] - traj.t[0]) if len(traj) > 1 else 1.0


def train_surrogate(model: SurrogateModel, train_sets: list[LoadedSet],
                    val_sets: list[LoadedSet], cell: CellConfig,
                    tc: TrainConfig) -> TrainReport:
    """Optimize the model on the labeled split; retains the best-validation
    weights in place and returns the per-step report."""
    t0 = time.perf_counter()
    x_train, y_train = _dataset_arrays(train_sets, cell, model.KIND)
    x_val, y_val = _dataset_arrays(val_sets, cell, model.KIND)
    rng = np.random.default_rng(tc.seed)
    opt = Adam(model.params(),
               CosineSchedule(tc.lr0, tc.lr_min, total_steps=tc.steps))
    report = TrainReport()
    best_state = {k: v.data.copy() for k, v in model.named_params().items()}
    n = x_train.shape[0]
    order = rng.permutation(n)
    cursor = 0
    for step in range(1, tc.steps + 1):
        if cursor + tc.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + tc.batch_size]
        cursor += tc.batch_size
        loss = train_step(model, (x_train[idx], y_train[idx]), opt)
        if step % tc.val_every == 0 or step == tc.steps:
            val = _eval_loss(model, x_val, y_val)
            report.rows.append((step, loss, val, opt.schedule(opt.step_count)))
            if val < report.best_val:
                report.best_val = val
                report.best_step = step
                best_state = {k: v.data.copy()
                              for k, v in model.named_params().items()}
    model.load_state(best_state)
    report.wall_time_s = time.perf_counter() - t0
    return report


def _eval_loss(model, x_val, y_val, chunk: int = 64) -> float:
    total = 0.0
    count = 0
    for start in range(0, x_val.shape[0], chunk):
        xs = x_val[start:start + chunk]
        pred = model._forward_stacked(xs).data
        total += float(np.sum((pred - y_val[start:start + chunk]) ** 2))
        count += pred.size
    return total / count


# ---------------------------------------------------------------------------
# Evaluation (voltage RMSE reports)
# ---------------------------------------------------------------------------

@dataclass
class RmseReport:
    sample_ids: np.ndarray
    rmse_mv: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.rmse_mv.mean())

    @property
    def p90(self) -> float:
        return float(np.percentile(self.rmse_mv, 90))

    def histogram(self, n_bins: int = 20):
        counts, edges = np.histogram(self.rmse_mv, bins=n_bins)
        return counts, edges

    def cdf_points(self):
        xs = np.sort(self.rmse_mv)
        return xs, np.arange(1, xs.size + 1) / xs.size

    def to_csv(self, path, header_lines: list[str] | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write("sample_id,rmse_mv\n")
            for sid, val in zip(self.sample_ids, self.rmse_mv):
                fh.write(f"{sid},{val!r}\n")

    def summary(self) -> str:
        return (f"samples={self.rmse_mv.size} mean_mv={self.mean:.4f} "
                f"p90_mv={self.p90:.4f} max_mv={float(self.rmse_mv.max()):.4f}")


def evaluate_surrogate(model, sets: list[LoadedSet], cell: CellConfig,
                       batch: int = 64) -> RmseReport:
    """Per-sample terminal-voltage RMSE (mV) of a surrogate or VT model."""
    ids, errs = [], []
    entries = [(g, s) for g in sets for s in g.samples]
    for start in range(0, len(entries), batch):
        chunk = entries[start:start + batch]
        if isinstance(model, VTBaseline):
            stacked = np.stack([
                VTBaseline.stack_inputs(g.lam_norm, s.trajectory.I)
                for g, s in chunk])
            pred = model._forward_stacked(stacked).data[..., 0]
            for (g, s), row in zip(chunk, pred):
                v_pred = row * (cell.V_hi - cell.V_lo) + cell.V_lo
                errs.append(_rmse_mv_np(v_pred, s.trajectory.V))
                ids.append(s.record.sample_id)
        else:
            stacked = np.stack([
                SurrogateModel.stack_inputs(
                    build_model_inputs(g.lam, cell, s.trajectory.I.astype(np.float64),
                                       float(s.trajectory.V[0]), _dt_of(s.trajectory)),
                    g.lam_norm, s.trajectory.I)
                for g, s in chunk])
            y_pred = model._forward_stacked(stacked).data.swapaxes(1, 2)
            for (g, s), y_row in zip(chunk, y_pred):
                v_pred = voltage_sequence(
                    y_row.astype(np.float64), g.lam, cell,
                    s.trajectory.I.astype(np.float64),
                    guard=True, clip_counter=model.clip_counter)
                errs.append(_rmse_mv_np(v_pred, s.trajectory.V))
                ids.append(s.record.sample_id)
    return RmseReport(sample_ids=np.array(ids), rmse_mv=np.array(errs))


def _rmse_mv_np(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.mean((a - b) ** 2)) * 1000.0)
