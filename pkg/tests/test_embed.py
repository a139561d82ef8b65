import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eigencharts import (
    AnchorPlacementError,
    DegenerateGradientFrameError,
    NoAdmissibleEigenfunctionError,
    NullLocalMassError,
    ResolvedSpectrumError,
    SelectionParams,
    ValidationError,
    assemble_laplacian,
    build_grid_domain,
    candidate_set,
    compute_eigensystem,
    eigen_embedding,
    free_plane_jacobian,
    geodesic_distances,
    heat_triangulation,
    local_ball_average,
    measure_distortion,
    select_eigenfunctions,
)
from eigencharts.embed import (
    _next_direction,
    admissible_candidates,
    ball_mean_squares,
    eigen_clusters,
    fd_gradient,
    free_plane_map,
    random_directions,
)


@pytest.fixture(scope="module")
def centre65(square65):
    return square65.node_at((0.5, 0.5))


@pytest.fixture(scope="module")
def params65(centre65):
    return SelectionParams(z=centre65, rho=0.25, A=0.7, A_prime=0.1)


@pytest.fixture(scope="module")
def sel65(eigs65, params65):
    return select_eigenfunctions(eigs65, params65)


# finite differences ---------------------------------------------------------

def test_fd_gradient_exact_for_linear_fields():
    dom = build_grid_domain("rectangle", 20, "neumann")
    f = 3 * dom.coords[:, 0] - 2 * dom.coords[:, 1]
    z = dom.node_at((0.5, 0.5))
    np.testing.assert_allclose(fd_gradient(dom, f, [z])[0], [3.0, -2.0], rtol=1e-12)
    both = fd_gradient(dom, np.c_[f, 2 * f], [z])
    np.testing.assert_allclose(both[0, :, 1], [6.0, -4.0], rtol=1e-12)


def test_fd_gradient_ghost_closures():
    for bc, sign in (("dirichlet", -1.0), ("neumann", 1.0)):
        dom = build_grid_domain("rectangle", 10, bc)
        f = np.arange(dom.n_nodes, dtype=float) + 1
        corner = 0
        right = dom.neighbor(corner, 0, 1)
        g = fd_gradient(dom, f, [corner])[0]
        assert g[0] == pytest.approx((f[right] - sign * f[corner]) / (2 * dom.spacing))


# gamma ------------------------------------------------------------------------

def test_constant_mode_has_unit_gamma():
    dom = build_grid_domain("rectangle", 24, "neumann")
    eigs = compute_eigensystem(assemble_laplacian(dom), k=3, dense=True)
    avg = local_ball_average(eigs, 0, dom.node_at((0.3, 0.6)), 0.2)
    assert avg.mean_sq == pytest.approx(1.0, abs=1e-10)
    assert avg.gamma == pytest.approx(1.0, abs=1e-10)


def test_gamma_floor_for_every_mode(eigs65, centre65):
    ball = geodesic_distances(eigs65.domain, centre65, 0.0625)
    floor = math.sqrt(ball.volume)
    ms = ball_mean_squares(eigs65, ball.nodes)
    # the ball average of phi_j^2 is at most 1 / vol(B)
    assert np.all(ms ** -0.5 >= floor * (1 - 1e-12))
    avg = local_ball_average(eigs65, 4, centre65, 0.0625)
    assert avg.gamma == pytest.approx(ms[4] ** -0.5, rel=1e-12)


def test_ball_too_small(eigs65, centre65):
    with pytest.raises(ValidationError, match="need >= 20"):
        local_ball_average(eigs65, 0, centre65, 0.02)


def test_null_local_mass(eigs65, centre65):
    V = eigs65.eigenvectors.copy()
    ball = geodesic_distances(eigs65.domain, centre65, 0.1)
    V[ball.nodes, 3] = 0.0
    eigs = dataclasses.replace(eigs65, eigenvectors=V)
    with pytest.raises(NullLocalMassError, match="null local mass"):
        local_ball_average(eigs, 3, centre65, 0.1)


# parameters and candidates ---------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"A": 1.0, "A_prime": 1.0},
    {"A_prime": 0.0},
    {"c0": 0.0},
    {"delta0": 1.5},
    {"t": -1.0},
    {"rule": "random"},
    {"relax_max": -1},
])
def test_selection_params_validation(kwargs):
    with pytest.raises(ValidationError):
        SelectionParams(z=0, rho=0.25, **kwargs)


def test_default_time_and_window():
    sp_ = SelectionParams(z=0, rho=0.25)
    assert sp_.time == pytest.approx(0.04 * 0.25 ** 2)
    assert sp_.window == pytest.approx((0.1 / sp_.time, 10 / sp_.time))
    assert sp_.ball_radius == pytest.approx(0.0625)


def test_empty_when_window_above_spectrum(eigs65, centre65):
    sp_ = SelectionParams(z=centre65, rho=0.25, A=1e4, A_prime=5.0)
    assert candidate_set(eigs65, sp_, (1.0, 0.0)) == []


def test_window_beyond_resolved_spectrum(eigs65, centre65):
    with pytest.raises(ResolvedSpectrumError, match="exceeds resolved spectrum"):
        candidate_set(eigs65, SelectionParams(z=centre65, rho=0.25), (1.0, 0.0))


def _representations(value, h):
    """All (m, n) whose discrete sine-mode eigenvalue equals ``value``.

    sin(m pi x) sin(n pi y) sampled at cell centres is an exact eigenvector of
    the Dirichlet stencil with eigenvalue (4/h^2)(sin^2(m pi h/2) + sin^2(n pi h/2)).
    """
    s = lambda k: math.sin(k * math.pi * h / 2) ** 2  # noqa: E731
    return [(m, n) for m in range(1, 40) for n in range(1, 40)
            if abs(4 / h ** 2 * (s(m) + s(n)) / value - 1) < 1e-6]


def test_candidates_have_nonzero_x_derivative(eigs129, square129):
    z = square129.node_at((0.5, 0.5))
    sp_ = SelectionParams(z=z, rho=0.25, t=0.04 * 0.25 ** 2, A=10, A_prime=0.1)
    cands = candidate_set(eigs129, sp_, (1.0, 0.0))
    assert cands
    lo, hi = sp_.window
    for j in cands:
        lam = eigs129.eigenvalues[j]
        assert lo < lam <= hi
        # d_x sin(m pi x) sin(n pi y) at the centre vanishes unless m is even and n odd
        assert any(m % 2 == 0 and n % 2 == 1 for m, n in _representations(lam, square129.spacing))


@settings(max_examples=10, deadline=None)
@given(st.lists(st.sampled_from([-1.0, 1.0]), min_size=30, max_size=30))
def test_candidates_sign_invariant(eigs65, params65, signs):
    flipped = eigs65.with_signs(np.resize(signs, eigs65.count))
    for p in ((1.0, 0.0), (0.0, 1.0), (0.6, 0.8)):
        assert candidate_set(flipped, params65, p) == candidate_set(eigs65, params65, p)


def test_relaxation_ladder(eigs65, centre65):
    strict = SelectionParams(z=centre65, rho=0.25, A=0.7, A_prime=0.1, c0=1e6, relax_max=0)
    with pytest.raises(NoAdmissibleEigenfunctionError, match="no admissible eigenfunction"):
        admissible_candidates(eigs65, strict, (1.0, 0.0))
    assert candidate_set(eigs65, strict, (1.0, 0.0)) == []


def test_eigen_clusters():
    lam = np.array([1.0, 2.0, 2.0 + 1e-12, 3.0, 5.0, 5.0, 5.0])
    assert eigen_clusters(lam, range(7)) == [(0,), (1, 2), (3,), (4, 5, 6)]


def test_degenerate_gradient_frame():
    with pytest.raises(DegenerateGradientFrameError, match="degenerate gradient frame"):
        _next_direction(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), 3)
    p = _next_direction(np.array([[1.0, 1.0]]), 2)
    assert abs(p @ [1.0, 1.0]) < 1e-12 and np.linalg.norm(p) == pytest.approx(1.0)


# selection ------------------------------------------------------------------------

def test_selection_structure(sel65, eigs65, params65):
    lo, hi = params65.window
    assert len(set(sel65.indices)) == 2
    assert all(lo < lam <= hi for lam in sel65.eigenvalues)
    J = sel65.jacobian
    assert abs(J[0, 1]) < 1e-6 * abs(J[0, 0])
    assert np.all(np.abs(np.diag(J)) * params65.rho >= params65.c0 / 2 ** sel65.relaxations_used)
    assert np.linalg.svd(sel65.directions, compute_uv=False).min() > 1e-6
    assert np.all(sel65.gammas >= math.sqrt(sel65.ball_volume))
    np.testing.assert_array_equal(sel65.directions[0], [1.0, 0.0])


def test_gamma_recomputable(sel65, eigs65, params65):
    ball = geodesic_distances(eigs65.domain, params65.z, params65.ball_radius)
    vals = sel65.vectors(eigs65, ball.nodes)
    mu = eigs65.mass[ball.nodes]
    gam = (mu @ vals ** 2 / mu.sum()) ** -0.5
    np.testing.assert_allclose(gam, sel65.gammas, rtol=1e-10)


def test_jacobian_matches_fd_of_embedding(sel65, eigs65, params65):
    F = eigen_embedding(eigs65, sel65)
    grad = fd_gradient(eigs65.domain, F, [params65.z])[0]
    np.testing.assert_allclose(grad.T @ sel65.directions.T, sel65.jacobian, atol=1e-9)


def test_selection_sign_invariance(sel65, eigs65, params65):
    s = np.where(np.arange(eigs65.count) % 3 == 0, -1.0, 1.0)
    other = select_eigenfunctions(eigs65.with_signs(s), params65)
    assert other.indices == sel65.indices
    np.testing.assert_allclose(other.gammas, sel65.gammas, rtol=1e-12)
    ball = geodesic_distances(eigs65.domain, params65.z, params65.rho / 4)
    a = measure_distortion(eigen_embedding(eigs65, sel65, ball.nodes), ball)
    b = measure_distortion(eigen_embedding(eigs65.with_signs(s), other, ball.nodes), ball)
    assert a.distortion == pytest.approx(b.distortion, rel=1e-12)


def test_selection_basis_invariance(sel65, eigs65, params65):
    # rotate every degenerate eigenspace by a random orthogonal matrix
    V = eigs65.eigenvectors.copy()
    rng = np.random.default_rng(5)
    for c in eigen_clusters(eigs65.eigenvalues, range(eigs65.count)):
        if len(c) > 1:
            Q, _ = np.linalg.qr(rng.standard_normal((len(c), len(c))))
            V[:, list(c)] = V[:, list(c)] @ Q
    other = select_eigenfunctions(dataclasses.replace(eigs65, eigenvectors=V), params65)
    assert other.indices == sel65.indices
    np.testing.assert_allclose(other.gammas, sel65.gammas, rtol=1e-8)


def test_lowest_index_rule(eigs65, params65):
    sp_ = dataclasses.replace(params65, rule="lowest-index")
    sel = select_eigenfunctions(eigs65, sp_)
    first = candidate_set(eigs65, sp_, (1.0, 0.0), level=sel.relaxations_used)
    assert sel.indices[0] == min(first)


def test_selection_d_bounds(sel65, eigs65, params65):
    with pytest.raises(ValidationError):
        select_eigenfunctions(eigs65, params65, d=3)
    one = select_eigenfunctions(eigs65, params65, d=1)
    assert one.indices == sel65.indices[:1]


def test_embedding_determinism_and_linearity(sel65, eigs65, params65):
    z = params65.z
    a = eigen_embedding(eigs65, sel65, [z])
    b = eigen_embedding(eigs65, sel65, [z])
    np.testing.assert_array_equal(a, b)
    doubled = dataclasses.replace(sel65, gammas=2 * sel65.gammas)
    pts = np.arange(0, eigs65.domain.n_nodes, 97)
    np.testing.assert_array_equal(eigen_embedding(eigs65, doubled, pts), 2 * eigen_embedding(eigs65, sel65, pts))


def test_selection_report(sel65):
    d = sel65.to_dict()
    assert d["indices"] == list(sel65.indices)
    assert d["params"]["A"] == 0.7
    assert len(d["clusters"]) == len(d["coefficients"]) == 2


# heat triangulation ----------------------------------------------------------------

def test_free_plane_jacobian():
    J = free_plane_jacobian((0.0, 0.0), [(-1.0, 0.0), (0.0, -1.0)], 1.0)
    entry = 0.5 * math.exp(-0.25) / (4 * math.pi)
    np.testing.assert_allclose(np.abs(np.diag(J)), entry, rtol=1e-12)
    assert abs(J[0, 1]) < 1e-15 and abs(J[1, 0]) < 1e-15
    # the map's finite-difference Jacobian agrees with the closed form
    eps = 1e-5
    cols = [(free_plane_map(np.array([e]), [(-1, 0), (0, -1)], 1.0)[0]
             - free_plane_map(np.array([-np.array(e)]), [(-1, 0), (0, -1)], 1.0)[0]) / (2 * eps)
            for e in ((eps, 0.0), (0.0, eps))]
    np.testing.assert_allclose(np.array(cols).T, J, atol=1e-10)


@pytest.fixture(scope="module")
def tri33():
    dom = build_grid_domain("rectangle", 33)
    eigs = compute_eigensystem(assemble_laplacian(dom), k=dom.n_nodes)
    return dom, eigs, dom.node_at((0.5, 0.5))


def test_triangulation_anchors_in_annulus(tri33):
    dom, eigs, z = tri33
    for seed in range(5):
        tm = heat_triangulation(dom, eigs, z, 0.2, c=0.5, theta=0.05, rng_seed=seed)
        assert all(0.1 <= d <= 0.2 for d in tm.anchor_distances)
        assert np.linalg.eigvalsh(tm.gramian)[0] >= 0.1
        assert tm.t == pytest.approx(0.05 * 0.04)
        assert tm.scale == pytest.approx(0.04)


def test_triangulation_deterministic(tri33):
    dom, eigs, z = tri33
    a = heat_triangulation(dom, eigs, z, 0.2, rng_seed=11)
    b = heat_triangulation(dom, eigs, z, 0.2, rng_seed=11)
    assert a.anchors == b.anchors
    np.testing.assert_array_equal(a.values(), b.values())
    assert a.to_dict() == b.to_dict()


def test_triangulation_injective_small_ball(tri33):
    dom, eigs, z = tri33
    ball = geodesic_distances(dom, z, 0.08)
    tm = heat_triangulation(dom, eigs, z, 0.2, rng_seed=3)
    rep = measure_distortion(tm.values(ball.nodes), ball)
    assert rep.injective


def test_triangulation_preconditions(tri33):
    dom, eigs, z = tri33
    with pytest.raises(ValidationError):
        heat_triangulation(dom, eigs, dom.node_at((0.1, 0.1)), 0.2)
    with pytest.raises(AnchorPlacementError, match="well-spread"):
        random_directions(np.random.default_rng(0), 2, min_gram_eig=1.5)
