import pytest

from streamsim.scene import ObservationNoise, generate_scenario, standard_scene_config
from streamsim.simrt import DelayModel

# 30 ms total at d=1: communication 5 ms, backbone 15, neck 5, head 5
SWEEP_BASE = DelayModel.constant(0.005, 0.015, 0.005, 0.005)
NOISE = ObservationNoise(center_sigma=2.0)


@pytest.fixture(scope="session")
def standard_scene():
    return generate_scenario(standard_scene_config(), seed=0)


@pytest.fixture(scope="session")
def short_scene():
    return generate_scenario(standard_scene_config(length=90, num_tracks=6), seed=1)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, text = RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {text}")
