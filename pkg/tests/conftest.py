import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pose_array(rng, n, trans=10.0, pitch_limit=1.4):
    t = rng.uniform(-trans, trans, (n, 3))
    rx = rng.uniform(-np.pi, np.pi, n)
    ry = rng.uniform(-pitch_limit, pitch_limit, n)
    rz = rng.uniform(-np.pi, np.pi, n)
    return np.column_stack([t, rx, ry, rz])


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; printed again in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line)
        lines.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
