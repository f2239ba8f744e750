"""Initial-stoichiometry solve and coulomb-counting input sequences.

The six unknowns are the stoichiometry window limits of both electrodes
(``theta_p_100 < theta_p_0`` and ``theta_n_0 < theta_n_100``; the positive
electrode empties on charge) plus the initial average stoichiometries
``x0(0), x1(0)`` matching the first reference voltage sample.

Sign convention used everywhere in this package: positive current is
discharge.  The positive electrode therefore fills on discharge, so the
running average stoichiometry is

    x0(t) = x0(0) + sum_{tau<=t} I(tau) dtau / Q_p
    x1(t) = x1(0) - sum_{tau<=t} I(tau) dtau / Q_n

with the inclusive prefix sum (index t holds the state after step t, same
as the simulator's trajectory convention).  x0/x1 are deliberately NOT
clamped to [0, 1]; excursions are the signature of an inconsistent
parameter set and are left visible to downstream consumers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cellmodel import CellConfig, ParameterSet, electrode_capacity
from .errors import StoichiometryError

#: Solver tolerances, overridable through the `stoich.*` config keys.
TOL_V = 1e-9       # volts, equations (a), (b), (e)
TOL_Q = 1e-9       # A h, equations (c), (d)
TOL_RATIO = 1e-12  # dimensionless, equation (f)
MAX_ITER = 100
MAX_RESTARTS = 5

_THETA_FLOOR = 1e-4  # Newton iterates are kept inside (floor, 1-floor)


@dataclass(frozen=True)
class StoichSolution:
    """Solved stoichiometry limits and initial averages."""

    x0_init: float        # initial avg stoichiometry, positive particle
    x1_init: float        # initial avg stoichiometry, negative particle
    theta_p_100: float
    theta_p_0: float
    theta_n_100: float
    theta_n_0: float
    residual_norm: float  # max |residual| across the six equations

    def soc(self) -> float:
        """State of charge implied by the initial stoichiometries."""
        return (self.x0_init - self.theta_p_0) / (self.theta_p_100 - self.theta_p_0)


def _residuals(u, lam, cfg, v_init, q_p_ah, q_n_ah):
    tp100, tp0, tn100, tn0, x0, x1 = u
    up = cfg.ocp_p
    un = cfg.ocp_n
    return np.array([
        up(tp100) - un(tn100) - cfg.V_hi,
        up(tp0) - un(tn0) - cfg.V_lo,
        q_p_ah * (tp0 - tp100) - q_n_ah * (tn100 - tn0),
        q_p_ah * tp0 + q_n_ah * tn0 - lam.Q_Li,
        up(x0) - un(x1) - v_init,
        (x0 - tp0) / (tp100 - tp0) - (x1 - tn0) / (tn100 - tn0),
    ])


def _jacobian(u, lam, cfg, q_p_ah, q_n_ah):
    tp100, tp0, tn100, tn0, x0, x1 = u
    dup = cfg.ocp_p.derivative
    dun = cfg.ocp_n.derivative
    jac = np.zeros((6, 6))
    jac[0, 0] = dup(tp100)
    jac[0, 2] = -dun(tn100)
    jac[1, 1] = dup(tp0)
    jac[1, 3] = -dun(tn0)
    jac[2, 0] = -q_p_ah
    jac[2, 1] = q_p_ah
    jac[2, 2] = -q_n_ah
    jac[2, 3] = q_n_ah
    jac[3, 1] = q_p_ah
    jac[3, 3] = q_n_ah
    jac[4, 4] = dup(x0)
    jac[4, 5] = -dun(x1)
    dp = tp100 - tp0
    dn = tn100 - tn0
    jac[5, 0] = -(x0 - tp0) / dp**2
    jac[5, 1] = (x0 - tp100) / dp**2
    jac[5, 2] = (x1 - tn0) / dn**2
    jac[5, 3] = -(x1 - tn100) / dn**2
    jac[5, 4] = 1.0 / dp
    jac[5, 5] = -1.0 / dn
    return jac


def _scaled_error(res):
    """Worst residual relative to its tolerance (>= 1 means unconverged)."""
    tol = np.array([TOL_V, TOL_V, TOL_Q, TOL_Q, TOL_V, TOL_RATIO])
    return float(np.max(np.abs(res) / tol))


def _clamp(u):
    u = u.copy()
    u[:4] = np.clip(u[:4], _THETA_FLOOR, 1.0 - _THETA_FLOOR)
    return u


def solve_initial_stoichiometry(
    lam: ParameterSet,
    cfg: CellConfig,
    v_init: float,
    max_iter: int = MAX_ITER,
    restarts: int = MAX_RESTARTS,
) -> StoichSolution:
    """Newton-Raphson solve of the six stoichiometry equations.

    Raises StoichiometryError ("infeasible parameter set") on divergence
    or singular Jacobian; dataset generation uses that as a rejection
    filter.
    """
    if not cfg.V_lo <= v_init <= cfg.V_hi:
        raise StoichiometryError(
            f"initial voltage {v_init:.4f} V outside cutoff window", cause="v_init")
    q_p_ah = electrode_capacity(lam, cfg, "p") / 3600.0
    q_n_ah = electrode_capacity(lam, cfg, "n") / 3600.0

    soc_guess = (v_init - cfg.V_lo) / (cfg.V_hi - cfg.V_lo)
    base = np.array([
        0.25, 0.85, 0.85, 0.05,
        0.85 + soc_guess * (0.25 - 0.85),
        0.05 + soc_guess * (0.85 - 0.05),
    ])

    last_cause = "divergence"
    for attempt in range(restarts + 1):
        # Deterministic restart policy: shrink the guessed window toward
        # the box center on every retry.
        shrink = 0.5 ** attempt
        u = 0.5 + (base - 0.5) * shrink
        u = _clamp(u)
        res = _residuals(u, lam, cfg, v_init, q_p_ah, q_n_ah)
        err = _scaled_error(res)
        converged = False
        for _ in range(max_iter):
            if err < 1.0:
                converged = True
                break
            jac = _jacobian(u, lam, cfg, q_p_ah, q_n_ah)
            try:
                step = np.linalg.solve(jac, -res)
            except np.linalg.LinAlgError:
                last_cause = "singular-jacobian"
                break
            # Damped update: halve the step while the scaled error grows.
            scale = 1.0
            for _ in range(40):
                u_new = _clamp(u + scale * step)
                res_new = _residuals(u_new, lam, cfg, v_init, q_p_ah, q_n_ah)
                err_new = _scaled_error(res_new)
                if err_new < err or scale < 1e-6:
                    break
                scale *= 0.5
            if not np.all(np.isfinite(res_new)):
                last_cause = "non-finite-residual"
                break
            u, res, err = u_new, res_new, err_new
        if converged or err < 1.0:
            sol = StoichSolution(
                x0_init=float(u[4]), x1_init=float(u[5]),
                theta_p_100=float(u[0]), theta_p_0=float(u[1]),
                theta_n_100=float(u[2]), theta_n_0=float(u[3]),
                residual_norm=float(np.max(np.abs(res))),
            )
            _check_solution(sol)
            return sol
    raise StoichiometryError("infeasible parameter set", cause=last_cause)


_WINDOW_SLACK = 1e-7  # absorbs round-off when v_init sits exactly on a cutoff


def _check_solution(sol: StoichSolution) -> None:
    vals = (sol.theta_p_100, sol.theta_p_0, sol.theta_n_100, sol.theta_n_0,
            sol.x0_init, sol.x1_init)
    if not all(0.0 < v < 1.0 for v in vals):
        raise StoichiometryError("infeasible parameter set", cause="window")
    if not sol.theta_p_100 < sol.theta_p_0:
        raise StoichiometryError("infeasible parameter set", cause="p-window-order")
    if not sol.theta_n_0 < sol.theta_n_100:
        raise StoichiometryError("infeasible parameter set", cause="n-window-order")
    lo, hi = sorted((sol.theta_p_100, sol.theta_p_0))
    if not lo - _WINDOW_SLACK <= sol.x0_init <= hi + _WINDOW_SLACK:
        raise StoichiometryError("infeasible parameter set", cause="x0-outside-window")


def build_input_sequence(
    sol: StoichSolution,
    lam: ParameterSet,
    cfg: CellConfig,
    current: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Coulomb-counting input sequence, shape (4, T).

    Channels: running average stoichiometries of the positive and negative
    particles and the two constant electrolyte fractions
    x2 = x3 = L_p eps_p / (L_p eps_p + L_n eps_n).
    """
    current = np.asarray(current, dtype=np.float64)
    q_p = electrode_capacity(lam, cfg, "p")
    q_n = electrode_capacity(lam, cfg, "n")
    charge = np.cumsum(current) * dt
    frac = cfg.L_p * lam.eps_p / (cfg.L_p * lam.eps_p + cfg.L_n * lam.eps_n)
    x = np.empty((4, current.size), dtype=np.float64)
    x[0] = sol.x0_init + charge / q_p
    x[1] = sol.x1_init - charge / q_n
    x[2] = frac
    x[3] = frac
    return x
