import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    from focalconvnet.data import synth_dataset

    d = tmp_path_factory.mktemp("synth")
    synth_dataset(d, num_classes=4, per_class=16, size=32, seed=7)
    return d


def pytest_terminal_summary(terminalreporter):
    lines = sys.modules.get("test_acceptance")
    lines = getattr(lines, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
