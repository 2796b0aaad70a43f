import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS: dict[str, str] = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion."""
    def record(label, passed, detail, status=None):
        line = f"criterion {label}: {status or ('PASS' if passed else 'FAIL')}  {detail}"
        _VERDICTS[label] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for label in sorted(_VERDICTS, key=lambda s: (len(s), s)):
            terminalreporter.write_line(_VERDICTS[label])
