import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import stoich_oracle
from spmeid.cellmodel import ParameterSet, default_cell_config, electrode_capacity
from spmeid.errors import StoichiometryError
from spmeid.stoichiometry import (TOL_Q, TOL_RATIO, TOL_V, build_input_sequence,
                                  solve_initial_stoichiometry)


class TestSolve:
    def test_residuals_below_tolerance(self, cell, base_params):
        sol = solve_initial_stoichiometry(base_params, cell, 3.7)
        q_p = electrode_capacity(base_params, cell, "p") / 3600.0
        q_n = electrode_capacity(base_params, cell, "n") / 3600.0
        assert abs(cell.ocv(sol.theta_p_100, sol.theta_n_100) - cell.V_hi) < TOL_V
        assert abs(cell.ocv(sol.theta_p_0, sol.theta_n_0) - cell.V_lo) < TOL_V
        assert abs(cell.ocv(sol.x0_init, sol.x1_init) - 3.7) < TOL_V
        balance = q_p * (sol.theta_p_0 - sol.theta_p_100) \
            - q_n * (sol.theta_n_100 - sol.theta_n_0)
        assert abs(balance) < TOL_Q
        budget = q_p * sol.theta_p_0 + q_n * sol.theta_n_0 - base_params.Q_Li
        assert abs(budget) < TOL_Q
        ratio = (sol.x0_init - sol.theta_p_0) / (sol.theta_p_100 - sol.theta_p_0) \
            - (sol.x1_init - sol.theta_n_0) / (sol.theta_n_100 - sol.theta_n_0)
        assert abs(ratio) < 1e-9  # both sides equal the SoC

    def test_window_ordering(self, cell, feasible_params):
        for lam in feasible_params[:6]:
            sol = solve_initial_stoichiometry(lam, cell, 3.6)
            assert 0 < sol.theta_p_100 < sol.theta_p_0 < 1
            assert 0 < sol.theta_n_0 < sol.theta_n_100 < 1

    def test_full_charge_collapses_to_window_edge(self, cell, base_params):
        sol = solve_initial_stoichiometry(base_params, cell, cell.V_hi)
        assert sol.x0_init == pytest.approx(sol.theta_p_100, abs=1e-9)
        assert sol.x1_init == pytest.approx(sol.theta_n_100, abs=1e-9)
        assert sol.soc() == pytest.approx(1.0, abs=1e-7)

    def test_matches_grid_bisection_oracle(self, cell, feasible_params):
        rng = np.random.default_rng(17)
        for lam in feasible_params[:8]:
            v_init = float(rng.uniform(cell.V_lo + 0.2, cell.V_hi - 0.1))
            sol = solve_initial_stoichiometry(lam, cell, v_init)
            ref = stoich_oracle(lam, cell, v_init)
            assert ref is not None
            for key in ("theta_p_100", "theta_p_0", "theta_n_100",
                        "theta_n_0", "x0_init", "x1_init"):
                assert abs(getattr(sol, key) - ref[key]) < 1e-4, key

    def test_deterministic(self, cell, base_params):
        a = solve_initial_stoichiometry(base_params, cell, 3.3)
        b = solve_initial_stoichiometry(base_params, cell, 3.3)
        assert a == b

    def test_infeasible_parameters_rejected(self, cell):
        # tiny electrodes cannot hold the requested cyclable lithium
        lam = ParameterSet(eps_p=0.40, eps_n=0.57, R_p=5e-6, R_n=1.5e-5,
                           c_s_p_max=4.17e4, c_s_n_max=2.92e4,
                           D_s_p=5e-14, D_s_n=8e-14, Q_Li=100.0)
        with pytest.raises(StoichiometryError, match="infeasible"):
            solve_initial_stoichiometry(lam, cell, 3.7)

    def test_voltage_outside_window_rejected(self, cell, base_params):
        with pytest.raises(StoichiometryError):
            solve_initial_stoichiometry(base_params, cell, cell.V_hi + 0.5)


class TestInputSequence:
    def test_zero_current_keeps_initial_values(self, cell, base_params):
        sol = solve_initial_stoichiometry(base_params, cell, 3.7)
        x = build_input_sequence(sol, base_params, cell, np.zeros(50), 1.0)
        assert np.all(x[0] == sol.x0_init)
        assert np.all(x[1] == sol.x1_init)

    def test_one_c_hour_moves_negative_stoichiometry_by_one(self, cell, base_params):
        sol = solve_initial_stoichiometry(base_params, cell, cell.V_hi)
        q_n = electrode_capacity(base_params, cell, "n")
        current = np.full(3600, q_n / 3600.0)
        x = build_input_sequence(sol, base_params, cell, current, 1.0)
        drop = sol.x1_init - x[1, -1]
        assert drop == pytest.approx(1.0, rel=1e-12)

    def test_electrolyte_channels_constant_and_symmetric(self, cell):
        lam = ParameterSet(eps_p=0.30, eps_n=cell.L_p * 0.30 / cell.L_n,
                           R_p=5e-6, R_n=1.5e-5, c_s_p_max=5.5e4,
                           c_s_n_max=3.88e4, D_s_p=5e-14, D_s_n=8e-14,
                           Q_Li=80.0)
        sol = solve_initial_stoichiometry(lam, cell, 3.7)
        x = build_input_sequence(sol, lam, cell, np.ones(10), 1.0)
        assert np.all(x[2] == 0.5)
        assert np.all(x[3] == 0.5)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_charge_symmetry(self, seed):
        cell = default_cell_config()
        from spmeid.cellmodel import BASE_PARAMS
        sol = solve_initial_stoichiometry(BASE_PARAMS, cell, 3.7)
        rng = np.random.default_rng(seed)
        current = rng.normal(0.0, 30.0, 40)
        fwd = build_input_sequence(sol, BASE_PARAMS, cell, current, 1.0)
        rev = build_input_sequence(sol, BASE_PARAMS, cell, -current, 1.0)
        assert np.allclose(fwd[0] + rev[0], 2.0 * sol.x0_init, rtol=1e-12)
        assert np.allclose(fwd[1] + rev[1], 2.0 * sol.x1_init, rtol=1e-12)

    def test_prefix_sum_recurrence_holds_exactly(self, cell, base_params):
        sol = solve_initial_stoichiometry(base_params, cell, 3.6)
        rng = np.random.default_rng(5)
        current = rng.normal(0.0, 40.0, 64)
        dt = 2.0
        x = build_input_sequence(sol, base_params, cell, current, dt)
        q_p = electrode_capacity(base_params, cell, "p")
        q_n = electrode_capacity(base_params, cell, "n")
        acc = 0.0
        for t in range(current.size):
            acc += current[t] * dt
            assert x[0, t] == sol.x0_init + acc / q_p
            assert x[1, t] == sol.x1_init - acc / q_n
