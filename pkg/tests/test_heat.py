import math
import warnings

import numpy as np
import pytest

from eigencharts import (
    HeatKernelQuery,
    LocalizationBallError,
    SpectralTailWarning,
    ValidationError,
    assemble_laplacian,
    build_grid_domain,
    compute_eigensystem,
    duhamel_remainder,
    exit_time_tail_mc,
    fit_exit_tail,
    heat_kernel_spectral,
    heat_kernel_timestep,
)
from eigencharts.heat import (
    ExitTailEstimate,
    heat_kernel_closed_form_free,
    heat_kernel_field,
    heat_kernel_free_gradient,
    heat_kernel_matrix,
    localization_ball,
)


def square_kernel_at(x, y, t, terms=20):
    """Dirichlet unit-square kernel on the diagonal from the eigenfunction double sum."""
    m = np.arange(1, terms + 1)
    sx = np.sin(m * np.pi * x) ** 2
    sy = np.sin(m * np.pi * y) ** 2
    decay = np.exp(-np.pi ** 2 * m ** 2 * t)
    return 4.0 * float((decay * sx).sum() * (decay * sy).sum())


def gaussian_walk_exit(R, s, n, dt, seed):
    """Brownian motion with Gaussian increments, monitored every ``dt``."""
    rng = np.random.default_rng(seed)
    pos = np.zeros((n, 2))
    out = np.zeros(n, dtype=bool)
    for _ in range(int(round(s / dt))):
        pos += rng.normal(scale=math.sqrt(2 * dt), size=(n, 2))
        out |= np.einsum("ij,ij->i", pos, pos) > R * R
    return out.mean()


@pytest.fixture(scope="module")
def neumann16():
    dom = build_grid_domain("rectangle", 16, "neumann")
    return dom, compute_eigensystem(assemble_laplacian(dom), k=dom.n_nodes)


def test_neumann_large_time_limit(neumann16):
    dom, eigs = neumann16
    for x, y in [(0, 0), (3, 200), (100, 255)]:
        assert heat_kernel_spectral(eigs, HeatKernelQuery(50.0, x, y)) == pytest.approx(1.0, abs=1e-10)


def test_centre_value_matches_double_sum(eigs64, square64):
    z = square64.node_at((0.5, 0.5))
    x, y = square64.coords[z]
    value = heat_kernel_spectral(eigs64, HeatKernelQuery(0.02, z, z))
    assert value == pytest.approx(square_kernel_at(x, y, 0.02), rel=0.05)


def test_symmetry_exact(eigs64):
    rng = np.random.default_rng(0)
    for x, y in rng.integers(0, eigs64.domain.n_nodes, (20, 2)):
        a = heat_kernel_spectral(eigs64, HeatKernelQuery(0.01, x, y))
        b = heat_kernel_spectral(eigs64, HeatKernelQuery(0.01, y, x))
        assert a == b


def test_truncation_window(eigs64):
    t = 0.01
    q = HeatKernelQuery(t, 100, 2000, truncation=(3.0, 0.5))
    lam = eigs64.eigenvalues
    keep = (lam > 0.5 / t) & (lam <= 3.0 / t)
    V = eigs64.eigenvectors
    expected = float(np.sum(np.exp(-lam[keep] * t) * V[100, keep] * V[2000, keep]))
    assert heat_kernel_spectral(eigs64, q) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValidationError):
        HeatKernelQuery(t, 0, 0, truncation=(1.0, 1.0))
    with pytest.raises(ValidationError):
        HeatKernelQuery(0.0, 0, 0)


def test_tail_warning(eigs64):
    with pytest.warns(SpectralTailWarning, match="spectral tail not negligible"):
        heat_kernel_spectral(eigs64, HeatKernelQuery(1e-4, 10, 10))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        heat_kernel_spectral(eigs64, HeatKernelQuery(0.02, 10, 10))


def test_closed_form_free_kernel():
    value = heat_kernel_closed_form_free((0, 0), (-1, 0), 1.0, 2)
    assert value == pytest.approx(math.exp(-0.25) / (4 * math.pi), rel=1e-15)
    assert value == pytest.approx(0.061975, abs=5e-7)
    for t in (0.1, 1.0, 7.0):
        assert heat_kernel_closed_form_free((0.3, 0.2), (0.3, 0.2), t) == pytest.approx(1 / (4 * math.pi * t))
    assert heat_kernel_closed_form_free((0.0,), (0.0,), 1.0) == pytest.approx((4 * math.pi) ** -0.5)


def test_closed_form_gradient():
    g = heat_kernel_free_gradient((0, 0), (-1, 0), 1.0)
    K = math.exp(-0.25) / (4 * math.pi)
    np.testing.assert_allclose(g, [-0.5 * K, 0.0], rtol=1e-14, atol=1e-18)
    eps = 1e-6
    fd = (heat_kernel_closed_form_free((eps, 0), (-1, 0), 1.0)
          - heat_kernel_closed_form_free((-eps, 0), (-1, 0), 1.0)) / (2 * eps)
    assert g[0] == pytest.approx(fd, rel=1e-8)


def test_timestep_matches_spectral_small_grid():
    dom = build_grid_domain("rectangle", 32)
    op = assemble_laplacian(dom)
    eigs = compute_eigensystem(op, k=dom.n_nodes)
    z = dom.node_at((0.5, 0.5))
    u = heat_kernel_timestep(op, 0.02, z, steps=200)
    f = heat_kernel_field(eigs, 0.02, z)
    assert abs(u[z] / f[z] - 1) < 1e-3
    assert np.max(np.abs(u - f)) < 1e-3 * f[z]


def test_timestep_neumann_mass_conservation(square64_neumann):
    op = assemble_laplacian(square64_neumann)
    _, hist = heat_kernel_timestep(op, 0.01, 500, steps=32, return_history=True)
    masses = np.array([h @ op.mass for h in hist])
    assert np.max(np.abs(masses - 1)) < 1e-8


def test_timestep_concentrates_for_small_time(square16):
    op = assemble_laplacian(square16)
    u = heat_kernel_timestep(op, 1e-4, 37, steps=16)
    assert int(np.argmax(u)) == 37


def test_timestep_validation(square16):
    op = assemble_laplacian(square16)
    with pytest.raises(ValidationError):
        heat_kernel_timestep(op, 0.01, 0, steps=8)
    with pytest.raises(ValidationError):
        heat_kernel_timestep(op, -1.0, 0)


def test_semigroup_dense(eigs16_full):
    Kt = heat_kernel_matrix(eigs16_full, 0.01)
    Ks = heat_kernel_matrix(eigs16_full, 0.02)
    Kts = heat_kernel_matrix(eigs16_full, 0.03)
    composed = Kt @ (eigs16_full.mass[:, None] * Ks)
    assert np.max(np.abs(composed - Kts)) <= 1e-6 * np.max(np.abs(Kts))


def test_cauchy_schwarz(eigs16_full):
    rng = np.random.default_rng(2)
    for t in (0.001, 0.01, 0.1):
        K = heat_kernel_matrix(eigs16_full, t)
        d = np.diag(K)
        z, w = rng.integers(0, len(d), (2, 200))
        assert np.all(K[z, w] <= np.sqrt(d[z] * d[w]) * (1 + 1e-12))


@pytest.fixture(scope="module")
def duhamel32():
    dom = build_grid_domain("rectangle", 32)
    eg = compute_eigensystem(assemble_laplacian(dom), k=dom.n_nodes)
    z = dom.node_at((0.5, 0.5))
    ball = localization_ball(dom, z, 0.25)
    eb = compute_eigensystem(assemble_laplacian(ball), k=ball.n_nodes)
    return dom, eg, eb, z


def test_duhamel_remainder_nonnegative(duhamel32):
    dom, eg, eb, z = duhamel32
    parent = eb.domain.parent_index
    rng = np.random.default_rng(0)
    for t in (0.001, 0.005, 0.02, 0.1):
        for a, b in rng.choice(parent, (10, 2)):
            assert duhamel_remainder(eg, eb, a, b, t).remainder >= -1e-6


def test_duhamel_grows_with_time(duhamel32):
    _, eg, eb, z = duhamel32
    rel = [duhamel_remainder(eg, eb, z, z, t).relative for t in (0.002, 0.004, 0.008)]
    assert rel[0] < 0.05
    assert rel[0] < rel[1] < rel[2]


def test_duhamel_outside_ball(duhamel32):
    dom, eg, eb, z = duhamel32
    with pytest.raises(LocalizationBallError, match="outside localization ball"):
        duhamel_remainder(eg, eb, z, dom.node_at((0.05, 0.05)), 0.01)
    with pytest.raises(ValidationError):
        duhamel_remainder(eg, eg, z, z, 0.01)


@pytest.fixture(scope="module")
def square128():
    return build_grid_domain("rectangle", 128)


def test_exit_single_step_is_zero(square128):
    z = square128.node_at((0.5, 0.5))
    dt = square128.spacing ** 2 / 4
    est = exit_time_tail_mc(square128, z, 0.1, 1.5 * dt, 2000, seed=0)
    assert est.n_steps == 1
    assert est.p_hat == 0.0 and est.ci95 == 0.0


def test_exit_deterministic_and_ci(square128):
    z = square128.node_at((0.5, 0.5))
    a = exit_time_tail_mc(square128, z, 0.1, 0.0025, 5000, seed=4)
    b = exit_time_tail_mc(square128, z, 0.1, 0.0025, 5000, seed=4)
    assert a == b
    assert 0 < a.p_hat < 1
    assert a.ci95 == pytest.approx(1.96 * math.sqrt(a.p_hat * (1 - a.p_hat) / 5000))


def test_exit_matches_gaussian_walker(square128):
    z = square128.node_at((0.5, 0.5))
    dt = square128.spacing ** 2 / 4
    for R, s in ((0.2, 0.01), (0.15, 0.0025)):
        est = exit_time_tail_mc(square128, z, R, s, 20000, seed=1)
        ref = gaussian_walk_exit(R, s, 20000, dt / 2, seed=7)
        assert abs(est.p_hat - ref) < 2 * est.ci95 + 0.01


def test_exit_validation(square128):
    z = square128.node_at((0.5, 0.5))
    with pytest.raises(ValidationError, match="under-resolved"):
        exit_time_tail_mc(square128, z, 2 * square128.spacing, 0.01, 2000)
    with pytest.raises(ValidationError):
        exit_time_tail_mc(square128, z, 0.1, 0.01, 999)
    with pytest.raises(ValidationError):
        exit_time_tail_mc(square128, square128.node_at((0.05, 0.5)), 0.1, 0.01, 2000)


def test_fit_exit_tail_recovers_slope():
    ests = [ExitTailEstimate(R, 0.01, 1000, 0, math.exp(1.0 - 0.25 * R * R / 0.01), 0.0, 1) for R in (0.1, 0.2, 0.3)]
    fit = fit_exit_tail(ests)
    assert fit.slope == pytest.approx(-0.25)
    assert fit.intercept == pytest.approx(1.0)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.M == pytest.approx(2.0)
