import numpy as np
import pytest

from dualdeform.gscore import Camera, GaussianSet, identity_quats, sh_count


def small_camera(width=16, height=16, f=20.0):
    return Camera(np.eye(3), np.array([0.0, 0.0, 3.0]), f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def random_set(n, seed=0, spread=0.5, scale=(-2.0, -1.2), sh_degree=1, requires_grad=False):
    rng = np.random.default_rng(seed)
    means = rng.uniform(-spread, spread, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    log_scales = rng.uniform(*scale, size=(n, 3))
    logits = rng.uniform(-1.0, 2.0, size=n)
    sh = rng.normal(0.0, 0.4, size=(n, sh_count(sh_degree), 3))
    return GaussianSet.from_arrays(means, quats, log_scales, logits, sh, sh_degree, requires_grad)


@pytest.fixture
def cam16():
    return small_camera()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria outcomes, printed as one line each at the end of the session
ACCEPTANCE = []


def record(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
