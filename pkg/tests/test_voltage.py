import numpy as np
import pytest

from oracles import scalar_voltage
from spmeid.cellmodel import ObservableMap, ParameterSet, observables_from_y
from spmeid.errors import PhysicsDomainError
from spmeid.nn import Tensor
from spmeid.simulator import simulate
from spmeid.voltage import (ClipCounter, GUARD_EPS, scale_voltage,
                            unscale_voltage, voltage, voltage_sequence)


def _random_states(cell, lam, n, seed=0):
    """Random in-domain observable vectors."""
    rng = np.random.default_rng(seed)
    y = rng.uniform(0.05, 0.95, (4, n))
    return np.stack(observables_from_y(y, lam, cell)), y


class TestBreakdown:
    def test_decomposition_sums_exactly(self, cell, base_params):
        c, _ = _random_states(cell, base_params, 32)
        br = voltage(c, base_params, cell, 40.0)
        total = br.U_eq + br.eta_r + br.eta_c + br.dphi_elec + br.dphi_solid
        assert np.array_equal(br.V, total)
        assert np.all(np.isfinite(total))
        assert np.allclose(br.J, 40.0 / (cell.N * cell.A))

    def test_zero_current_equals_ocv(self, cell, base_params):
        y = np.array([0.5, 0.5, 0.5, 0.5])
        c = np.array(observables_from_y(y, base_params, cell))
        c[3] = c[2]  # equal electrolyte averages
        br = voltage(c, base_params, cell, 0.0)
        assert br.eta_r == pytest.approx(0.0, abs=1e-15)
        assert br.eta_c == pytest.approx(0.0, abs=1e-15)
        assert br.dphi_elec == 0.0 and br.dphi_solid == 0.0
        expected = cell.ocv(c[0] / base_params.c_s_p_max,
                            c[1] / base_params.c_s_n_max)
        assert br.V == pytest.approx(expected, abs=1e-12)

    def test_reaction_overpotential_negative_on_discharge(self, cell, base_params):
        c, _ = _random_states(cell, base_params, 1000, seed=3)
        br = voltage(c, base_params, cell, np.full(1000, 25.0))
        assert np.all(br.eta_r < 0.0)

    def test_odd_and_linear_in_current(self, cell, base_params):
        c, _ = _random_states(cell, base_params, 8, seed=4)
        fwd = voltage(c, base_params, cell, 60.0)
        rev = voltage(c, base_params, cell, -60.0)
        assert np.allclose(fwd.eta_r, -rev.eta_r, rtol=1e-12)
        assert np.allclose(fwd.dphi_elec, -rev.dphi_elec, rtol=1e-12)
        assert np.allclose(fwd.dphi_solid, -rev.dphi_solid, rtol=1e-12)
        half = voltage(c, base_params, cell, 30.0)
        assert np.allclose(fwd.dphi_elec, 2.0 * half.dphi_elec, rtol=1e-12)
        assert np.allclose(fwd.dphi_solid, 2.0 * half.dphi_solid, rtol=1e-12)

    def test_higher_conductivity_shrinks_solid_drop(self, cell, base_params):
        import dataclasses
        c, _ = _random_states(cell, base_params, 4, seed=5)
        base = voltage(c, base_params, cell, 50.0)
        better = dataclasses.replace(cell, sigma_p=cell.sigma_p * 3,
                                     sigma_n=cell.sigma_n * 3)
        improved = voltage(c, base_params, better, 50.0)
        assert np.all(np.abs(improved.dphi_solid) < np.abs(base.dphi_solid))

    def test_matches_independent_scalar_implementation(self, cell, base_params):
        c, _ = _random_states(cell, base_params, 50, seed=6)
        br = voltage(c, base_params, cell, 35.0)
        for k in range(50):
            ref = scalar_voltage(c[:, k], base_params, cell, 35.0)
            assert br.V[k] == pytest.approx(ref, abs=1e-12)

    def test_matches_simulator_internal_voltage(self, cell, base_params):
        traj = simulate(base_params, cell, np.full(50, 30.0), 3.8)
        recomputed = voltage(traj.c, base_params, cell, traj.I).V
        assert np.allclose(recomputed, traj.V, atol=1e-12)

    def test_saturated_electrode_raises_with_name(self, cell, base_params):
        c, _ = _random_states(cell, base_params, 1)
        bad = c.copy()
        bad[0] = base_params.c_s_p_max
        with pytest.raises(PhysicsDomainError, match="positive"):
            voltage(bad, base_params, cell, 0.0)
        bad = c.copy()
        bad[1] = 0.0
        with pytest.raises(PhysicsDomainError, match="negative"):
            voltage(bad, base_params, cell, 0.0)

    def test_nonpositive_electrolyte_raises(self, cell, base_params):
        c, _ = _random_states(cell, base_params, 1)
        bad = c.copy()
        bad[4] = 0.0
        with pytest.raises(PhysicsDomainError, match="electrolyte"):
            voltage(bad, base_params, cell, 0.0)


class TestVoltageSequence:
    def test_constant_inputs_give_constant_voltage(self, cell, base_params):
        y = np.tile(np.array([0.5, 0.6, 0.45, 0.45])[:, None], (1, 20))
        v = voltage_sequence(y, base_params, cell, np.full(20, 15.0))
        assert np.ptp(v) == 0.0

    def test_gradient_wrt_y_matches_finite_differences(self, cell, base_params):
        rng = np.random.default_rng(7)
        y0 = rng.uniform(0.2, 0.8, (4, 6))
        current = rng.normal(0.0, 30.0, 6)

        def total(y_arr):
            return np.sum(voltage_sequence(y_arr, base_params, cell, current))

        y_t = Tensor(y0.copy(), requires_grad=True, dtype=np.float64)
        out = voltage_sequence(y_t, base_params, cell, current)
        out.sum().backward()
        grad = y_t.grad

        h = 1e-6
        fd = np.zeros_like(y0)
        for i in range(4):
            for j in range(6):
                up, dn = y0.copy(), y0.copy()
                up[i, j] += h
                dn[i, j] -= h
                fd[i, j] = (total(up) - total(dn)) / (2 * h)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-10)
        assert rel.max() < 1e-4

    def test_scaled_voltage_maps_cutoffs_to_unit_interval(self, cell):
        assert scale_voltage(cell.V_lo, cell) == 0.0
        assert scale_voltage(cell.V_hi, cell) == 1.0
        assert unscale_voltage(0.0, cell) == cell.V_lo
        v = np.linspace(cell.V_lo, cell.V_hi, 11)
        assert np.allclose(unscale_voltage(scale_voltage(v, cell), cell), v)

    def test_guard_band_clips_and_counts(self, cell, base_params):
        y = np.tile(np.array([0.0, 1.0, 0.5, 0.5])[:, None], (1, 10))
        counter = ClipCounter()
        v = voltage_sequence(y, base_params, cell, np.zeros(10),
                             guard=True, clip_counter=counter)
        assert np.all(np.isfinite(v))
        assert counter.calls == 1
        assert counter.clipped_values == 20  # both saturated channels
        # without the guard the same input is a domain error
        with pytest.raises(PhysicsDomainError):
            voltage_sequence(y, base_params, cell, np.zeros(10))

    def test_guard_epsilon_keeps_values_in_open_interval(self):
        assert 0.0 < GUARD_EPS < 1e-3
