"""Parameter-update network: the inverse surrogate.

For every reference sequence the evaluation context stacks 16 channels
[V_model_scaled(1) | y(4) | lambda_norm(9) | V_ref_scaled(1) | I/100(1)];
the M per-sequence contexts are concatenated along time into one long
sequence.  A non-causal encoder mean-pools over time and projects to the
9 normalized parameters.

Training draws a perturbation scale sigma^2 ~ U(0,1) per sample, perturbs
the normalized true parameters with N(0, sigma^2 I), rebuilds the context
through the frozen surrogate, and minimizes

    |lam_true - Psi(perturbed context)|^2   (contraction term)
  + |lam_true - Psi(clean context)|^2       (reconstruction term),

which drives the update map to shrink parameter error while keeping the
true parameters a fixed point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cellmodel import CellConfig, ParameterSet, ParamNormalizer
from .datagen import LoadedSet
from .errors import ConfigError, StoichiometryError
from .nn import (Adam, CosineSchedule, Encoder, EncoderConfig, Linear, Module,
                 Tensor, load_checkpoint, save_checkpoint, train_step)
from .surrogate import CURRENT_SCALE, SurrogateModel, build_model_inputs
from .voltage import ClipCounter, scale_voltage, voltage_sequence


@dataclass(frozen=True)
class RefSequence:
    """One reference record for identification: target voltage, applied
    current, and the rest voltage the sequence started from."""

    v_ref: np.ndarray
    current: np.ndarray
    v_init: float
    dt: float = 1.0


def refs_from_set(group: LoadedSet) -> list[RefSequence]:
    return [
        RefSequence(v_ref=s.trajectory.V.astype(np.float64),
                    current=s.trajectory.I.astype(np.float64),
                    v_init=float(s.trajectory.V[0]),
                    dt=float(s.trajectory.t[1] - s.trajectory.t[0])
                    if len(s.trajectory) > 1 else 1.0)
        for s in group.samples
    ]


@dataclass
class EvaluationContext:
    """Concatenated per-sequence channel stacks, (16, M*segment_len)."""

    channels: np.ndarray
    segment_len: int
    n_segments: int
    v_model: np.ndarray   # (M, T) volts
    y_model: np.ndarray   # (M, 4, T)

    @property
    def length(self) -> int:
        return self.channels.shape[1]


N_CONTEXT_CHANNELS = 16


def build_context(lam: ParameterSet, lam_norm: np.ndarray,
                  surrogate: SurrogateModel, cell: CellConfig,
                  refs: list[RefSequence],
                  clip_counter: ClipCounter | None = None) -> EvaluationContext:
    """Forward-evaluate all reference sequences with the surrogate and
    assemble the update network's input.  The coulomb-counting inputs are
    rebuilt from ``lam`` for every call (stoichiometry re-solved), so the
    context always reflects the current iterate.  Raises
    StoichiometryError when ``lam`` admits no initial stoichiometry.
    """
    t_len = refs[0].v_ref.size
    xs = np.empty((len(refs), 4, t_len), dtype=np.float64)
    currents = np.empty((len(refs), t_len), dtype=np.float64)
    for i, ref in enumerate(refs):
        if ref.v_ref.size != t_len:
            raise ConfigError("all reference sequences must share one length")
        xs[i] = build_model_inputs(lam, cell, ref.current, float(ref.v_ref[0]),
                                   ref.dt)
        currents[i] = ref.current
    lam_rep = np.repeat(np.asarray(lam_norm, dtype=np.float64)[None, :],
                        len(refs), axis=0)
    y = surrogate.predict(xs, lam_rep, currents).astype(np.float64)  # (M,4,T)
    v_model = voltage_sequence(y, lam, cell, currents, guard=True,
                               clip_counter=clip_counter)

    segments = []
    for i, ref in enumerate(refs):
        seg = np.empty((N_CONTEXT_CHANNELS, t_len), dtype=np.float32)
        seg[0] = scale_voltage(v_model[i], cell)
        seg[1:5] = y[i]
        seg[5:14] = np.asarray(lam_norm, dtype=np.float32)[:, None]
        seg[14] = scale_voltage(ref.v_ref, cell)
        seg[15] = ref.current / CURRENT_SCALE
        segments.append(seg)
    channels = np.concatenate(segments, axis=1)
    return EvaluationContext(channels=channels, segment_len=t_len,
                             n_segments=len(refs), v_model=v_model, y_model=y)


class UpdateModel(Module):
    """Non-causal encoder, mean-pool over time, head to 9 normalized
    parameters."""

    KIND = "PUNT"
    D_IN = N_CONTEXT_CHANNELS
    D_OUT = 9

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        if cfg.causal:
            raise ConfigError("the update network must not be causal")
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.D_IN, cfg, rng, dtype)
        self.head = Linear(cfg.d_model, self.D_OUT, rng, dtype)
        self.cfg = cfg
        self.seed = seed

    def forward(self, ctx) -> Tensor:
        """(L, 16) or (B, L, 16) -> normalized parameters (9,) or (B, 9)."""
        if not isinstance(ctx, Tensor):
            ctx = Tensor(np.asarray(ctx, dtype=np.float32))
        single = ctx.data.ndim == 2
        if single:
            ctx = ctx.reshape(1, *ctx.shape)
        h = self.encoder(ctx)
        pooled = h.mean(axis=1)  # (B, d_model)
        out = self.head(pooled)
        return out[0] if single else out

    __call__ = forward

    def loss(self, batch) -> Tensor:
        contexts, targets = batch
        pred = self.forward(contexts)
        diff = pred - Tensor._lift(targets, pred)
        return (diff * diff).mean()

    def header(self) -> dict:
        head = {"seed": self.seed, "step": 0}
        head.update(self.cfg.as_dict())
        return head

    def save(self, path, extra: dict | None = None) -> None:
        head = self.header()
        head.update(extra or {})
        save_checkpoint(path, self.KIND, head, self.named_params())


def update_model_from_checkpoint(path) -> UpdateModel:
    kind, header, params = load_checkpoint(path)
    if kind != UpdateModel.KIND:
        raise ConfigError(f"{path}: expected a {UpdateModel.KIND} checkpoint, "
                          f"got {kind!r}")
    cfg = EncoderConfig(
        n_layers=int(header["n_layers"]), n_heads=int(header["n_heads"]),
        d_model=int(header["d_model"]), d_ff=int(header["d_ff"]),
        causal=header["causal"] == "True", max_len=int(header["max_len"]))
    model = UpdateModel(cfg, seed=int(header.get("seed", 0)))
    model.load_state(params)
    return model


def punet_update(ctx: EvaluationContext, model: UpdateModel,
                 normalizer: ParamNormalizer):
    """One parameter update.

    Returns (lam_next, lam_next_norm, n_clipped): the emitted parameters
    are projected onto the physical box and re-normalized so the next
    iterate is always self-consistent.
    """
    z = model.forward(ctx.channels.T).data.astype(np.float64)
    lam_raw = normalizer.denormalize_array(z)
    lam_next = ParameterSet.from_array(lam_raw).clipped()
    n_clipped = int(np.sum(~np.isclose(lam_next.to_array(), lam_raw)))
    return lam_next, normalizer.normalize(lam_next), n_clipped


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PunetTrainConfig:
    steps: int = 500
    batch_size: int = 2
    lr0: float = 1e-3
    lr_min: float = 1e-5
    seed: int = 0
    report_every: int = 50
    audit_draws: int = 16
    audit_sigma: float = 0.5


@dataclass
class PunetReport:
    rows: list = field(default_factory=list)
    # rows: (step, train_loss, val_recon_l2, audit_pass_rate, lr)
    wall_time_s: float = 0.0
    redraws: int = 0

    def to_csv(self, path, header_lines=None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write("step,train_loss,val_recon_l2,audit_pass_rate,lr\n")
            for row in self.rows:
                fh.write(",".join(repr(v) for v in row) + "\n")


def _perturbed_context(group: LoadedSet, surrogate, cell, normalizer, rng,
                       sigma: float | None = None):
    """Draw a perturbed iterate around the true parameters and build its
    context; redraws when the perturbed cell is infeasible."""
    refs = refs_from_set(group)
    redraws = 0
    while True:
        scale = sigma if sigma is not None else np.sqrt(rng.uniform(0.0, 1.0))
        noise = rng.normal(0.0, 1.0, 9) * scale
        lam_norm = group.lam_norm + noise
        lam = normalizer.denormalize(lam_norm).clipped()
        lam_norm = normalizer.normalize(lam)
        try:
            ctx = build_context(lam, lam_norm, surrogate, cell, refs)
            return ctx, lam_norm, redraws
        except StoichiometryError:
            redraws += 1
            if redraws > 20:
                raise


def train_punet(model: UpdateModel, surrogate: SurrogateModel,
                train_sets: list[LoadedSet], val_sets: list[LoadedSet],
                cell: CellConfig, normalizer: ParamNormalizer,
                tc: PunetTrainConfig) -> PunetReport:
    """Two-term (contraction + reconstruction) training against the frozen
    surrogate.  Clean contexts are cached per parameter set; perturbed
    contexts are rebuilt every draw."""
    t0 = time.perf_counter()
    clean = {}
    for group in train_sets:
        clean[group.set_id] = build_context(
            group.lam, group.lam_norm, surrogate, cell,
            refs_from_set(group)).channels.T  # (L, 16)
    val_clean = [
        (group, build_context(group.lam, group.lam_norm, surrogate, cell,
                              refs_from_set(group)).channels.T)
        for group in val_sets
    ]

    rng = np.random.default_rng(tc.seed)
    opt = Adam(model.params(), CosineSchedule(tc.lr0, tc.lr_min, tc.steps))
    report = PunetReport()
    for step in range(1, tc.steps + 1):
        picks = rng.choice(len(train_sets), size=tc.batch_size, replace=False)
        contexts, targets = [], []
        for pick in picks:
            group = train_sets[pick]
            ctx, _, redraws = _perturbed_context(
                group, surrogate, cell, normalizer, rng)
            report.redraws += redraws
            contexts.append(ctx.channels.T)
            targets.append(group.lam_norm)
            contexts.append(clean[group.set_id])
            targets.append(group.lam_norm)
        batch = (np.stack(contexts).astype(np.float32),
                 np.stack(targets).astype(np.float32))
        loss = train_step(model, batch, opt)
        if step % tc.report_every == 0 or step == tc.steps:
            recon = _val_reconstruction(model, val_clean)
            audit = contraction_audit(model, surrogate, val_sets, cell,
                                      normalizer, sigma=tc.audit_sigma,
                                      n_draws=tc.audit_draws,
                                      seed=tc.seed + step)
            report.rows.append((step, loss, recon, audit, opt.schedule(opt.step_count)))
    report.wall_time_s = time.perf_counter() - t0
    return report


def _val_reconstruction(model, val_clean) -> float:
    errs = []
    for group, ctx_t in val_clean:
        z = model.forward(ctx_t).data.astype(np.float64)
        errs.append(float(np.linalg.norm(z - group.lam_norm)))
    return float(np.mean(errs))


def contraction_audit(model: UpdateModel, surrogate: SurrogateModel,
                      val_sets: list[LoadedSet], cell: CellConfig,
                      normalizer: ParamNormalizer, sigma: float = 0.5,
                      n_draws: int = 50, seed: int = 0) -> float:
    """Fraction of perturbed validation draws whose normalized parameter
    error shrinks after one update (strictly)."""
    rng = np.random.default_rng(seed)
    passed = 0
    for draw in range(n_draws):
        group = val_sets[int(rng.integers(len(val_sets)))]
        ctx, lam_norm, _ = _perturbed_context(
            group, surrogate, cell, normalizer, rng, sigma=sigma)
        _, z_next, _ = punet_update(ctx, model, normalizer)
        before = float(np.linalg.norm(lam_norm - group.lam_norm))
        after = float(np.linalg.norm(z_next - group.lam_norm))
        if after < before:
            passed += 1
    return passed / n_draws
