import shutil

import numpy as np
import pytest

from trajfuse.synthetic import golden_dir


@pytest.fixture
def golden(tmp_path):
    """Copy of the bundled golden scene inputs in a scratch directory."""
    d = tmp_path / "golden"
    shutil.copytree(golden_dir(), d, ignore=shutil.ignore_patterns("expected"))
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
