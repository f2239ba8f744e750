import numpy as np
import pytest

from spmeid.cellmodel import BASE_PARAMS, default_cell_config
from spmeid.datagen import (DriveCycleConfig, SamplingPlan, build_dataset,
                            load_manifest, load_split)
from spmeid.simulator import SimGrid


@pytest.fixture(scope="session")
def cell():
    return default_cell_config()


@pytest.fixture(scope="session")
def base_params():
    return BASE_PARAMS


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """Per-session miniature dataset: 7 bins x 2 sets, 2 sequences of 80
    steps each.  Small enough for unit tests, structurally identical to
    the desk-scale dataset."""
    out = tmp_path_factory.mktemp("micro_dataset")
    plan = SamplingPlan(sets_per_bin=2, val_sets_per_bin=1,
                        sequences_per_set=2, seq_len=80)
    manifest = build_dataset(plan, default_cell_config(),
                             DriveCycleConfig(duration=80), SimGrid(),
                             seed=1234, out_dir=out, workers=2)
    return {
        "dir": out,
        "plan": plan,
        "manifest": manifest,
        "train": load_split(out, "train"),
        "val": load_split(out, "val"),
    }


@pytest.fixture(scope="session")
def feasible_params(cell):
    """A spread of random stoichiometry-feasible parameter sets."""
    from spmeid.errors import StoichiometryError
    from spmeid.stoichiometry import solve_initial_stoichiometry

    plan = SamplingPlan()
    lo, hi = plan.sampling_box()
    rng = np.random.default_rng(99)
    out = []
    while len(out) < 20:
        from spmeid.cellmodel import ParameterSet
        lam = ParameterSet.from_array(rng.uniform(lo, hi))
        try:
            solve_initial_stoichiometry(lam, cell, cell.V_hi)
            solve_initial_stoichiometry(lam, cell, cell.V_lo)
        except StoichiometryError:
            continue
        out.append(lam)
    return out
