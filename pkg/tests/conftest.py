import numpy as np
import pytest

from tsmsfem.fem import assemble
from tsmsfem.mesh import build_mesh_pair, build_periodic_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def line64():
    mesh = build_periodic_mesh(1, [(-np.pi, np.pi)], [64])
    return mesh, assemble(mesh, None, 1.0 / 8.0)


@pytest.fixture(scope="session")
def harmonic_pair():
    """Fine mesh of 256 cells on [-pi, pi], ratio 8, harmonic potential, eps = 1/16."""
    mesh = build_periodic_mesh(1, [(-np.pi, np.pi)], [256])
    pair = build_mesh_pair(mesh, 8)
    ops = assemble(mesh, lambda x: 0.5 * x[:, 0] ** 2, 1.0 / 16.0)
    return pair, ops


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Append ``(label, passed, detail)``; the lines are echoed at the end of the run."""
    return request.config.stash[_ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in lines:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
