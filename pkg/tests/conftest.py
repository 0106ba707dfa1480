import sys

import pytest
from hypothesis import HealthCheck, settings

from deepbow.dataio import PhantomSpec, generate_phantom_dataset

settings.register_profile(
    "suite", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")

TINY_CONFIG = {"cc": ["FA", "MD"], "thalamus": ["FA"]}


@pytest.fixture(scope="session")
def tiny_dataset():
    """12-subject phantom small enough for end-to-end tests."""
    spec = PhantomSpec(
        n_subjects=12, n_patients=7,
        dims={"cc": (24, 24, 2), "thalamus": (20, 20, 2)},
        metric_config={r: list(m) for r, m in TINY_CONFIG.items()},
        seed=11)
    return generate_phantom_dataset(spec)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None) if mod else None
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
