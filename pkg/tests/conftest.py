import numpy as np
import pytest

from sparsecorr.geometry import TriMesh
from sparsecorr.shapes import blob, grid_mesh, icosahedron


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_square():
    v = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    return TriMesh(v, [[0, 1, 2], [0, 2, 3]])


@pytest.fixture
def equilateral():
    v = [[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]]
    return TriMesh(v, [[0, 1, 2]])


@pytest.fixture
def grid5():
    return grid_mesh(5, 5)


@pytest.fixture
def ico():
    return icosahedron()


@pytest.fixture(scope="session")
def small_blob():
    return blob(300, seed=3)


_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record the measured values behind one acceptance line.

    The criterion number comes from the ``acceptance`` marker; the test
    outcome decides PASS or FAIL.
    """
    cid = request.node.get_closest_marker("acceptance").args[0]
    entry = [request.node.name, "did not complete"]
    _CRITERIA.setdefault(cid, []).append(entry)

    def record(detail):
        entry[1] = detail
        print(f"criterion {cid}: {detail}")

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    if rep.when == "call":
        item.stash[_OUTCOME] = rep.passed
    elif rep.when == "setup" and not rep.passed:
        item.stash[_OUTCOME] = False


_OUTCOME = pytest.StashKey[bool]()
_PASSED = {}


def pytest_runtest_teardown(item):
    if "criterion" in getattr(item, "fixturenames", ()):
        _PASSED[item.name] = item.stash.get(_OUTCOME, False)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA):
        for name, detail in _CRITERIA[cid]:
            status = "PASS" if _PASSED.get(name, False) else "FAIL"
            terminalreporter.write_line(f"criterion {cid:>2} {status}  {name}: {detail}")
