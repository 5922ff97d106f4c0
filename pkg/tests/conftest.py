import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uhfsegkit.labels import FS35, LabelMap, as_label_array
from uhfsegkit.grid import VoxelGrid

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def labelmap(data, spacing=(1.0, 1.0, 1.0), convention=FS35) -> LabelMap:
    grid = VoxelGrid.from_spacing(as_label_array(np.asarray(data)), spacing)
    return LabelMap(grid, convention)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, seconds, text in sorted(RESULTS, key=lambda r: int(r[0][2:])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {cid} {text} ({seconds:.1f}s)")
