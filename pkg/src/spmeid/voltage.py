"""Closed-form SPMe terminal voltage from the six concentration observables.

The terminal voltage decomposes as

    V = U_eq + eta_r + eta_c + dphi_elec + dphi_solid

with the equilibrium potential difference, the Butler-Volmer reaction
overpotential (asinh form), the electrolyte concentration overpotential,
and the two Ohmic drops.  All terms are written with dispatchable math so
the same code runs on floats, numpy arrays, and autodiff tensors (lambda
entries included), which gives the training graphs exact consistency with
the reference simulator.

Sign convention: positive current is discharge, J = I / (N A).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dispatch as dsp
from .cellmodel import CellConfig, ParameterSet, observables_from_y
from .errors import PhysicsDomainError

GUARD_EPS = 1e-6  # training-time clip band for normalized channels


@dataclass(frozen=True)
class VoltageBreakdown:
    """Terminal voltage and its five components (volts) plus the current
    density J (A/m^2).  ``V`` is the exact sum of the components."""

    U_eq: np.ndarray
    eta_r: np.ndarray
    eta_c: np.ndarray
    dphi_elec: np.ndarray
    dphi_solid: np.ndarray
    J: np.ndarray

    @property
    def V(self):
        return self.U_eq + self.eta_r + self.eta_c + self.dphi_elec + self.dphi_solid


class ClipCounter:
    """Counts guard-band clip events during training-time evaluations."""

    def __init__(self):
        self.calls = 0
        self.clipped_values = 0

    def record(self, n_clipped: int):
        self.calls += 1
        self.clipped_values += int(n_clipped)


def _check_observables(c, lam: ParameterSet):
    names = ("positive", "negative")
    for idx, (surf, cmax) in enumerate(((c[0], lam.c_s_p_max), (c[1], lam.c_s_n_max))):
        surf = np.asarray(getattr(surf, "data", surf))
        if np.any(surf <= 0.0) or np.any(surf >= cmax):
            raise PhysicsDomainError(f"saturated electrode: {names[idx]} "
                                     f"surface concentration outside (0, c_max)")
    for idx in (2, 3, 4, 5):
        vals = np.asarray(getattr(c[idx], "data", c[idx]))
        if np.any(vals <= 0.0):
            raise PhysicsDomainError(f"non-positive electrolyte observable "
                                     f"(channel {idx})")


def _terms(c, lam_parts, cfg: CellConfig, current):
    """Shared implementation; ``c`` is a 6-tuple of channels, ``lam_parts``
    a 9-sequence, both possibly autodiff values."""
    eps_p, eps_n, r_p, r_n = lam_parts[0], lam_parts[1], lam_parts[2], lam_parts[3]
    c_p_max, c_n_max = lam_parts[4], lam_parts[5]
    c_p_surf, c_n_surf, ce_p, ce_n, ce_sq_p, ce_sq_n = c

    j_dens = current / (cfg.N * cfg.A)
    two_rt_f = 2.0 * cfg.R * cfg.T / cfg.F

    theta_p = c_p_surf / c_p_max
    theta_n = c_n_surf / c_n_max
    u_eq = cfg.ocp_p(theta_p) - cfg.ocp_n(theta_n)

    arrhenius_p = np.exp(cfg.E_a_p / cfg.R * (1.0 / cfg.T_ref - 1.0 / cfg.T))
    arrhenius_n = np.exp(cfg.E_a_n / cfg.R * (1.0 / cfg.T_ref - 1.0 / cfg.T))
    j0_p = (cfg.m_p / cfg.L_p) * arrhenius_p * dsp.sqrt(c_p_surf) \
        * dsp.sqrt(c_p_max - c_p_surf) * ce_sq_p
    j0_n = (cfg.m_n / cfg.L_n) * arrhenius_n * dsp.sqrt(c_n_surf) \
        * dsp.sqrt(c_n_max - c_n_surf) * ce_sq_n

    a_p = 3.0 * (1.0 - eps_p) / r_p
    a_n = 3.0 * (1.0 - eps_n) / r_n
    eta_r = two_rt_f * dsp.asinh(-j_dens / (2.0 * a_p * j0_p * cfg.L_p)) \
        - two_rt_f * dsp.asinh(j_dens / (2.0 * a_n * j0_n * cfg.L_n))

    eta_c = (two_rt_f / cfg.c_e_typ) * (1.0 - cfg.t_plus) * (ce_p - ce_n)

    resist_e = (cfg.L_n / (3.0 * eps_n ** cfg.beta)
                + cfg.L_sep / cfg.eps_sep ** cfg.beta
                + cfg.L_p / (3.0 * eps_p ** cfg.beta))
    dphi_elec = j_dens / cfg.kappa_e * resist_e
    dphi_solid = -(j_dens / 3.0) * (cfg.L_p / cfg.sigma_p + cfg.L_n / cfg.sigma_n)

    return u_eq, eta_r, eta_c, dphi_elec, dphi_solid, j_dens


def voltage(c, lam: ParameterSet, cfg: CellConfig, current) -> VoltageBreakdown:
    """Terminal-voltage breakdown for observables ``c`` (6-vector or 6xT)
    at applied current ``current`` (A, scalar or length-T)."""
    c = np.asarray(c, dtype=np.float64)
    channels = tuple(c[i] for i in range(6))
    _check_observables(channels, lam)
    parts = lam.to_array()
    u_eq, eta_r, eta_c, dphi_e, dphi_s, j_dens = _terms(
        channels, parts, cfg, np.asarray(current, dtype=np.float64))
    return VoltageBreakdown(U_eq=u_eq, eta_r=eta_r, eta_c=eta_c,
                            dphi_elec=dphi_e, dphi_solid=dphi_s, J=j_dens)


def voltage_sequence(y, lam, cfg: CellConfig, current,
                     guard: bool = False, clip_counter: ClipCounter | None = None):
    """Voltage sequence from the normalized 4-channel sequence ``y``.

    ``y`` is (4, T) numpy or an autodiff tensor (..., 4, T); ``lam`` a
    ParameterSet or 9-sequence (entries may be tensors); ``current`` a
    length-T array in amperes.  With ``guard=True`` (training only) the
    normalized channels are clipped into [GUARD_EPS, 1-GUARD_EPS] before
    the sqrt/OCP evaluations and the clip events are recorded.
    """
    if guard:
        data = np.asarray(getattr(y, "data", y))
        n_clip = int(np.sum((data < GUARD_EPS) | (data > 1.0 - GUARD_EPS)))
        if clip_counter is not None:
            clip_counter.record(n_clip)
        y = y.clip(GUARD_EPS, 1.0 - GUARD_EPS) if hasattr(y, "clip") and not isinstance(y, np.ndarray) \
            else np.clip(y, GUARD_EPS, 1.0 - GUARD_EPS)
    c = observables_from_y(y, lam, cfg)
    if isinstance(lam, ParameterSet):
        parts = lam.to_array()
    else:
        parts = lam
    if not guard:
        _check_observables(c, _as_param_set(parts))
    u_eq, eta_r, eta_c, dphi_e, dphi_s, _ = _terms(c, parts, cfg, current)
    return u_eq + eta_r + eta_c + dphi_e + dphi_s


def _as_param_set(parts) -> ParameterSet:
    if isinstance(parts, ParameterSet):
        return parts
    vals = [float(np.asarray(getattr(p, "data", p))) for p in parts]
    return ParameterSet.from_array(np.array(vals))


def scale_voltage(v, cfg: CellConfig):
    """Map terminal voltage onto [0, 1] with the cutoffs at the ends."""
    return (v - cfg.V_lo) / (cfg.V_hi - cfg.V_lo)


def unscale_voltage(v_scaled, cfg: CellConfig):
    return v_scaled * (cfg.V_hi - cfg.V_lo) + cfg.V_lo
