import sys

import numpy as np
import pytest

from varjoint.data import SubjectSeries, make_dataset
from varjoint.simulate import setting_truth, simulate_dataset


def toy_series(n_subjects=4, n_obs=30, seed=0, periods=None, outcomes=True):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_subjects):
        t = np.arange(n_obs, dtype=float)
        x = 80.0 + np.sin(t / 5.0 + i) * 3.0 + rng.normal(0.0, 1.0, n_obs)
        y = int(i % 2) if outcomes else None
        out.append(SubjectSeries(f"S{i + 1:02d}", t, x, periods, y))
    return out


@pytest.fixture
def toy_dataset():
    return make_dataset(toy_series(), percentile_step=20.0)


@pytest.fixture(scope="session")
def small_sim():
    truth = setting_truth(1, n_subjects=12, n_obs=80)
    ds, lat = simulate_dataset(truth, np.random.default_rng(11))
    return truth, ds, lat


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        ok, detail = results[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
