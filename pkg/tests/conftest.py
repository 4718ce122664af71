import os

import pytest

from wmpipe.perfmodel import HardwareProfile, WorkloadProfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")

TABLE1_DIT = {2: 63.8, 3: 60.1, 5: 51.5, 6: 31.6}


@pytest.fixture
def hw():
    return HardwareProfile(pi_peak=752e12, bw_hbm=1.6e12, b_link=30e9, s_sram=2 * 1024 * 1024,
                           eta_util=0.4)


@pytest.fixture
def table1():
    return WorkloadProfile(h_heads=30, alpha_ms=74.9, beta_ms=52.7, profiled_dit=dict(TABLE1_DIT),
                           t_vae_single_ms=109.4)


@pytest.fixture
def configs_dir():
    return CONFIGS


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
