import pytest

from snitchdt.config import derive_seed, scenario_from_dict
from snitchdt.evaluate import calibrate_twins


def make_cfg(attack=None, seed=0, **extra):
    data = {"scenario_id": "t", "attack": attack or {"kind": "none"}, "detectors": ["snitch"], "master_seed": seed}
    data.update(extra)
    return scenario_from_dict(data)


def calibrated(cfg):
    return calibrate_twins(cfg, derive_seed(cfg.master_seed, "calibration"))


@pytest.fixture(scope="session")
def default_twins():
    return calibrated(make_cfg())


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
