"""CMA-ES baseline for the voltage-matching objective.

Standard (mu/mu_w, lambda) covariance matrix adaptation with rank-1 and
rank-mu updates, cumulative step-size control, box handling by resampling
(up to 10 tries) followed by coordinate clipping, and an eigenvalue floor
that keeps the covariance symmetric positive definite.  Every objective
evaluation is logged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int = 0
    evaluations: int = 0


@dataclass
class CmaResult:
    best_x: np.ndarray
    best_f: float
    status: str                    # "target" | "budget"
    evaluations: int
    evals_to_target: int | None
    history: list = field(default_factory=list)
    # history rows: (eval_index, f, best_so_far, *x)

    def history_to_csv(self, path, header_lines=None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write("evaluation,objective,best_so_far,"
                     + ",".join(f"x{i}" for i in range(self.best_x.size)) + "\n")
            for row in self.history:
                fh.write(",".join(repr(v) for v in row) + "\n")


EIGEN_FLOOR = 1e-12


def default_popsize(n: int) -> int:
    return 4 + int(np.floor(3 * np.log(n)))


def cma_minimize(objective, bounds, budget: int, target: float | None = None,
                 seed: int = 0, x0=None, sigma0: float = 0.3,
                 popsize: int | None = None) -> CmaResult:
    """Minimize ``objective`` over the box ``bounds = (lo, hi)``.

    Stops when the best objective drops below ``target`` ("target") or the
    evaluation ``budget`` is exhausted ("budget"; not an error, the caller
    is benchmarking).  Deterministic for a fixed seed.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    n = lo.size
    popsize = popsize or default_popsize(n)
    if popsize < 2:
        raise ValueError("population size must be >= 2")
    mu = popsize // 2
    raw = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mu_eff = 1.0 / np.sum(weights**2)

    c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, np.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1,
               2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff))
    chi_n = np.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n**2))

    rng = np.random.default_rng(seed)
    mean = np.asarray(x0, dtype=np.float64).copy() if x0 is not None \
        else 0.5 * (lo + hi)
    state = CmaState(mean=mean, sigma=float(sigma0), cov=np.eye(n),
                     p_sigma=np.zeros(n), p_c=np.zeros(n))

    best_x = state.mean.copy()
    best_f = np.inf
    evals_to_target = None
    history = []

    def record(x, f):
        nonlocal best_x, best_f, evals_to_target
        state.evaluations += 1
        if f < best_f:
            best_f = f
            best_x = x.copy()
        if target is not None and evals_to_target is None and best_f < target:
            evals_to_target = state.evaluations
        history.append((state.evaluations, float(f), float(best_f), *x))

    while state.evaluations < budget:
        # eigendecomposition (n is small; refresh every generation)
        vals, vecs = np.linalg.eigh((state.cov + state.cov.T) / 2.0)
        vals = np.maximum(vals, EIGEN_FLOOR)
        state.cov = (vecs * vals) @ vecs.T
        sqrt_vals = np.sqrt(vals)
        inv_sqrt_cov = (vecs / sqrt_vals) @ vecs.T

        zs, xs, fs = [], [], []
        stop = False
        for _ in range(popsize):
            z = rng.standard_normal(n)
            x = state.mean + state.sigma * (vecs @ (sqrt_vals * z))
            for _ in range(10):
                if np.all((x >= lo) & (x <= hi)):
                    break
                z = rng.standard_normal(n)
                x = state.mean + state.sigma * (vecs @ (sqrt_vals * z))
            x = np.clip(x, lo, hi)
            # z consistent with the clipped sample keeps the update stable
            z = (sqrt_vals ** -1) * (vecs.T @ ((x - state.mean) / state.sigma))
            f = float(objective(x))
            record(x, f)
            zs.append(z)
            xs.append(x)
            fs.append(f)
            if state.evaluations >= budget or \
                    (target is not None and best_f < target):
                stop = True
                break
        if stop and len(fs) < mu:
            break

        order = np.argsort(fs, kind="stable")[:mu]
        z_sel = np.stack([zs[i] for i in order])
        x_sel = np.stack([xs[i] for i in order])
        z_mean = weights @ z_sel
        new_mean = weights @ x_sel

        # C^{-1/2} (m_new - m_old)/sigma written in eigenbasis coordinates
        state.p_sigma = (1.0 - c_sigma) * state.p_sigma + \
            np.sqrt(c_sigma * (2.0 - c_sigma) * mu_eff) * (vecs @ z_mean)
        h_sig = float(np.linalg.norm(state.p_sigma)
                      / np.sqrt(1.0 - (1.0 - c_sigma) ** (2 * (state.generation + 1)))
                      < (1.4 + 2.0 / (n + 1.0)) * chi_n)
        y_w = (new_mean - state.mean) / state.sigma
        state.p_c = (1.0 - c_c) * state.p_c + \
            h_sig * np.sqrt(c_c * (2.0 - c_c) * mu_eff) * y_w

        ys = (x_sel - state.mean) / state.sigma
        rank_mu = sum(w * np.outer(y, y) for w, y in zip(weights, ys))
        delta_h = (1.0 - h_sig) * c_c * (2.0 - c_c)
        state.cov = (1.0 - c_1 - c_mu) * state.cov \
            + c_1 * (np.outer(state.p_c, state.p_c) + delta_h * state.cov) \
            + c_mu * rank_mu
        state.sigma *= float(np.exp(
            (c_sigma / d_sigma) * (np.linalg.norm(state.p_sigma) / chi_n - 1.0)))
        state.mean = new_mean
        state.generation += 1

        if target is not None and best_f < target:
            break

    status = "target" if (target is not None and best_f < target) else "budget"
    return CmaResult(best_x=best_x, best_f=float(best_f), status=status,
                     evaluations=state.evaluations,
                     evals_to_target=evals_to_target, history=history)
