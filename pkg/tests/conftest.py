import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from breathscan.nn.model import Detector, DetectorConfig  # noqa: E402

# small enough for exhaustive finite differences, same architecture as the desk preset
TINY = DetectorConfig(n_mels=6, n_blocks=1, hidden_size=8, n_heads=2, conv_kernel=3, dropout=0.1,
                      subsample_channels=2, ff_expansion=2, max_rel_distance=3, preset="desk")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    m = Detector(TINY, seed=3, dtype=np.float64)
    m.norm_mean = np.zeros(TINY.input_channels)
    m.norm_std = np.ones(TINY.input_channels)
    return m


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
