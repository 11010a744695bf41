import numpy as np
import pytest

from meshgan.hierarchy import build_hierarchy
from meshgan.mesh import Mesh
from meshgan.synthdata import icosphere, make_template


def equilateral():
    return Mesh(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, np.sqrt(3) / 2, 0.0]]), np.array([[0, 1, 2]]))


def grid_mesh(k=4, size=1.0, jitter=0.0, seed=0):
    """Flat (k+1)x(k+1) grid in the z=0 plane, two triangles per cell."""
    xs = np.linspace(0.0, size, k + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    if jitter:
        rng = np.random.default_rng(seed)
        inner = (X.ravel() > 0) & (X.ravel() < size) & (Y.ravel() > 0) & (Y.ravel() < size)
        v[inner, :2] += rng.uniform(-jitter, jitter, size=(inner.sum(), 2))
    faces = []
    idx = lambda i, j: i * (k + 1) + j  # noqa: E731
    for i in range(k):
        for j in range(k):
            faces.append([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)])
            faces.append([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)])
    return Mesh(v, np.array(faces))


@pytest.fixture(scope="session")
def sphere42():
    return icosphere(1)


@pytest.fixture(scope="session")
def sphere162():
    return icosphere(2)


@pytest.fixture(scope="session")
def template642():
    return make_template(3)


@pytest.fixture(scope="session")
def small_hierarchy():
    """162 -> 41 -> 11 -> 3, small enough for finite-difference checks."""
    return build_hierarchy(make_template(2), levels=3, factor=4)


@pytest.fixture(scope="session")
def hierarchy642(template642):
    return build_hierarchy(template642, levels=4, factor=4)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, ok, detail):
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
