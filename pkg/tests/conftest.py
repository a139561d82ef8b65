import math

import numpy as np
import pytest

from eigencharts import assemble_laplacian, build_grid_domain, compute_eigensystem

# criterion number -> list of (label, passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[n]
        ok = all(passed for _, passed, _ in checks)
        parts = "; ".join(f"{label}={'ok' if passed else 'FAIL'} ({detail})" for label, passed, detail in checks)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {parts}")


@pytest.fixture(scope="session")
def record():
    def _record(n, label, passed, detail=""):
        ACCEPTANCE.setdefault(n, []).append((label, bool(passed), detail))
        return bool(passed)

    return _record


def analytic_square_eigenvalues(count):
    """Lowest ``count`` Dirichlet eigenvalues of the unit square, with multiplicity."""
    vals = sorted(math.pi ** 2 * (m * m + n * n) for m in range(1, 40) for n in range(1, 40))
    return np.array(vals[:count])


@pytest.fixture(scope="session")
def square64():
    return build_grid_domain("rectangle", 64, "dirichlet")


@pytest.fixture(scope="session")
def square64_neumann():
    return build_grid_domain("rectangle", 64, "neumann")


@pytest.fixture(scope="session")
def eigs64(square64):
    """Dirichlet square, every eigenpair up to 4000 (about 320 modes)."""
    return compute_eigensystem(assemble_laplacian(square64), threshold=4000.0)


@pytest.fixture(scope="session")
def square16():
    return build_grid_domain("rectangle", 16, "dirichlet")


@pytest.fixture(scope="session")
def eigs16_full(square16):
    return compute_eigensystem(assemble_laplacian(square16), k=square16.n_nodes)


@pytest.fixture(scope="session")
def square65():
    return build_grid_domain("rectangle", 65, "dirichlet")


@pytest.fixture(scope="session")
def eigs65(square65):
    return compute_eigensystem(assemble_laplacian(square65), threshold=450.0)


@pytest.fixture(scope="session")
def square129():
    return build_grid_domain("rectangle", 129, "dirichlet")


@pytest.fixture(scope="session")
def eigs129(square129):
    """Dirichlet square with a node at the centre, every eigenpair up to 4100."""
    return compute_eigensystem(assemble_laplacian(square129), threshold=4100.0)
