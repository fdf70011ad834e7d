import numpy as np
import pytest

from survcate.metalearners import CateConfig
from survcate.nuisance import NuisanceConfig


@pytest.fixture
def small_nuisance():
    return NuisanceConfig(rsf_trees=60, propensity_trees=60)


@pytest.fixture
def small_cate():
    return CateConfig(n_trees=60)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        ok, detail = results[k]
        terminalreporter.write_line(f"ACCEPTANCE {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
