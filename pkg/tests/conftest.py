import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _acceptance_log import DETAILS  # noqa: E402
from leuq.data import SolverConfig, generate_dataset  # noqa: E402
from leuq.model import ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """16x16 grid, d_z=8: small enough for finite-difference checks through the whole model."""
    return ModelConfig(n=16, history=3, bundle=1, d_z=8, channels=4, conv_blocks=2, horizon=3)


@pytest.fixture(scope="session")
def small_dataset():
    """Eight short 16x16 trajectories shared by model, training and CLI tests."""
    cfg = SolverConfig(n=16, dt=1e-2, snapshot_interval=0.5, n_snapshots=12, seed=3)
    return generate_dataset(cfg, 6, 2)


# -- acceptance summary ----------------------------------------------------------

_CRITERIA: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.setdefault(marker.args[0], []).append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        ok = all(outcome == "passed" for _, outcome in results)
        failed = [name for name, outcome in results if outcome != "passed"]
        detail = f"{len(results)} checks" if ok else "failed: " + ", ".join(failed)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        for line in DETAILS.get(n, []):
            terminalreporter.write_line(f"    {line}")
