import numpy as np
import pytest

from spmeid.optimize import cma_minimize, default_popsize


def sphere(x):
    return float(np.sum(x * x))


def rosenbrock(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


BOUNDS9 = (np.full(9, -5.0), np.full(9, 5.0))


class TestCmaes:
    def test_sphere_reaches_target_within_budget(self):
        res = cma_minimize(sphere, BOUNDS9, budget=3000, target=1e-6, seed=1,
                           x0=np.ones(9))
        assert res.status == "target"
        assert res.best_f < 1e-6
        assert res.evaluations <= 3000

    def test_rosenbrock_best_so_far_non_increasing(self):
        res = cma_minimize(rosenbrock, BOUNDS9, budget=4000, seed=2,
                           x0=np.zeros(9))
        best = [row[2] for row in res.history]
        assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
        assert res.best_f < 1.0

    def test_deterministic_under_seed(self):
        a = cma_minimize(sphere, BOUNDS9, budget=400, seed=7, x0=np.ones(9))
        b = cma_minimize(sphere, BOUNDS9, budget=400, seed=7, x0=np.ones(9))
        assert a.best_f == b.best_f
        assert np.array_equal(a.best_x, b.best_x)
        assert a.history == b.history

    def test_samples_respect_box(self):
        lo, hi = np.full(3, 0.2), np.full(3, 0.8)
        seen = []

        def probe(x):
            seen.append(x.copy())
            return sphere(x - 0.5)

        cma_minimize(probe, (lo, hi), budget=300, seed=3, x0=np.full(3, 0.7),
                     sigma0=0.5)
        stacked = np.stack(seen)
        assert np.all(stacked >= lo - 1e-12) and np.all(stacked <= hi + 1e-12)

    def test_history_logs_every_evaluation(self):
        res = cma_minimize(sphere, BOUNDS9, budget=123, seed=4, x0=np.ones(9))
        assert len(res.history) == res.evaluations
        assert [row[0] for row in res.history] == list(range(1, res.evaluations + 1))

    def test_budget_status_without_target(self):
        res = cma_minimize(sphere, BOUNDS9, budget=50, target=None, seed=5,
                           x0=np.ones(9))
        assert res.status == "budget"
        assert res.evals_to_target is None

    def test_default_popsize_formula(self):
        assert default_popsize(9) == 10

    def test_covariance_stays_positive_definite(self):
        # rough nonconvex objective stresses the covariance update
        def rugged(x):
            return rosenbrock(x) + 5.0 * float(np.sum(np.sin(3.0 * x) ** 2))

        probes = []

        def probe(x):
            probes.append(x)
            return rugged(x)

        res = cma_minimize(probe, BOUNDS9, budget=2000, seed=6, x0=np.ones(9))
        assert np.isfinite(res.best_f)
        assert np.all(np.isfinite(np.stack(probes)))

    def test_history_csv(self, tmp_path):
        res = cma_minimize(sphere, BOUNDS9, budget=60, seed=8, x0=np.ones(9))
        path = tmp_path / "history.csv"
        res.history_to_csv(path, header_lines=["seed = 8"])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "# seed = 8"
        assert lines[1].startswith("evaluation,objective,best_so_far")
        assert len(lines) == 2 + res.evaluations
