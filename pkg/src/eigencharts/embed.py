"""Chart constructions: selected eigenfunctions and heat triangulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AnchorPlacementError,
    DegenerateGradientFrameError,
    NoAdmissibleEigenfunctionError,
    NullLocalMassError,
    ResolvedSpectrumError,
    ValidationError,
)
from .geometry import DIRICHLET, BallPatch, GridDomain, geodesic_distances
from .heat import DELTA1, heat_kernel_field, heat_kernel_free_gradient
from .spectral import EigenSystem

SELECTION_RULES = ("max-gradient", "lowest-index")
MIN_BALL_NODES = 20
# local rms below this fraction of sup|phi| is eigensolver noise, not signal
NULL_MASS_RTOL = 1e-10
# eigenvalues this close (relative) form one eigenspace
CLUSTER_RTOL = 1e-9


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

def fd_gradient(domain: GridDomain, values: np.ndarray, nodes) -> np.ndarray:
    """Central-difference gradient (span 2h) of node fields at ``nodes``.

    ``values`` has shape ``(n,)`` or ``(n, k)``; the result has shape
    ``(len(nodes), d)`` or ``(len(nodes), d, k)``. A missing neighbour is
    replaced by the ghost value of the boundary closure (``-f`` Dirichlet,
    ``f`` Neumann).
    """
    if not isinstance(domain, GridDomain):
        raise ValidationError("finite-difference gradients need a grid domain")
    nodes = np.atleast_1d(np.asarray(nodes, dtype=np.int64))
    f = np.asarray(values, dtype=float)
    single = f.ndim == 1
    if single:
        f = f[:, None]
    shape = np.array(domain.shape)
    sign = -1.0 if domain.bc == DIRICHLET else 1.0
    f0 = f[nodes]
    out = np.empty((len(nodes), domain.dim, f.shape[1]))
    for a in range(domain.dim):
        side = []
        for step in (1, -1):
            tgt = domain.lattice[nodes].copy()
            tgt[:, a] += step
            inb = (tgt[:, a] >= 0) & (tgt[:, a] < shape[a])
            nb = np.full(len(nodes), -1, dtype=np.int64)
            nb[inb] = domain.index[tuple(tgt[inb].T)]
            v = sign * f0
            ok = nb >= 0
            v[ok] = f[nb[ok]]
            side.append(v)
        out[:, a, :] = (side[0] - side[1]) / (2.0 * domain.spacing)
    return out[:, :, 0] if single else out


def directional_derivative(domain: GridDomain, values: np.ndarray, node: int, p) -> np.ndarray:
    grad = fd_gradient(domain, values, [node])[0]
    return np.tensordot(np.asarray(p, dtype=float), grad, axes=(0, 0))


# --------------------------------------------------------------------------
# gamma normalisation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BallAverage:
    mean_sq: float
    gamma: float


def _ball(eigs: EigenSystem, z: int, r: float) -> BallPatch:
    ball = geodesic_distances(eigs.domain, z, r)
    if ball.size < MIN_BALL_NODES:
        raise ValidationError(f"ball B(z, {r:.4g}) has {ball.size} nodes; need >= {MIN_BALL_NODES}")
    return ball


def ball_mean_squares(eigs: EigenSystem, nodes, columns=None) -> np.ndarray:
    """Measure-weighted mean of ``phi_j^2`` over ``nodes`` for every column."""
    mu = eigs.mass[nodes]
    V = eigs.eigenvectors[nodes] if columns is None else eigs.eigenvectors[np.ix_(nodes, columns)]
    return (mu @ V ** 2) / mu.sum()


def local_ball_average(eigs: EigenSystem, j: int, z: int, r: float) -> BallAverage:
    """Mean of ``phi_j^2`` over the geodesic ball ``B(z, r)`` and ``gamma = mean^{-1/2}``."""
    ball = _ball(eigs, z, r)
    mean_sq = float(ball_mean_squares(eigs, ball.nodes, [j])[0])
    if math.sqrt(mean_sq) <= NULL_MASS_RTOL * float(np.max(np.abs(eigs.eigenvectors[:, j]))):
        raise NullLocalMassError(f"gamma undefined: null local mass for eigenfunction {j}")
    return BallAverage(mean_sq, mean_sq ** -0.5)


# --------------------------------------------------------------------------
# eigenfunction selection
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionParams:
    """Parameters of the eigenfunction selection around node ``z``.

    ``t`` defaults to ``(delta1 * rho)^2``. ``rule`` picks among admissible
    indices: ``"max-gradient"`` maximises ``gamma_j |d_p phi_j(z)|``,
    ``"lowest-index"`` takes the smallest admissible index.
    """

    z: int
    rho: float
    A: float = 10.0
    A_prime: float = 0.1
    c0: float = 0.1
    delta0: float = 0.5
    t: Optional[float] = None
    relax_max: int = 3
    rule: str = "max-gradient"

    def __post_init__(self):
        if not 0 < self.A_prime < self.A:
            raise ValidationError(f"selection needs 0 < A' < A (got A={self.A}, A'={self.A_prime})")
        if not self.c0 > 0:
            raise ValidationError("selection needs c0 > 0")
        if not 0 < self.delta0 <= 1:
            raise ValidationError("selection needs 0 < delta0 <= 1")
        if not self.rho > 0:
            raise ValidationError("selection needs rho > 0")
        if self.t is not None and not self.t > 0:
            raise ValidationError("selection needs t > 0")
        if self.relax_max < 0:
            raise ValidationError("relax_max must be >= 0")
        if self.rule not in SELECTION_RULES:
            raise ValidationError(f"rule must be one of {SELECTION_RULES}")

    @property
    def time(self) -> float:
        return (DELTA1 * self.rho) ** 2 if self.t is None else float(self.t)

    @property
    def window(self) -> tuple:
        return self.A_prime / self.time, self.A / self.time

    @property
    def ball_radius(self) -> float:
        return 0.5 * self.delta0 * self.rho

    def to_dict(self) -> dict:
        return {"z": self.z, "rho": self.rho, "A": self.A, "A_prime": self.A_prime, "c0": self.c0,
                "delta0": self.delta0, "t": self.time, "relax_max": self.relax_max, "rule": self.rule}


@dataclass(frozen=True, eq=False)
class EigenSelection:
    """Selected eigenfunctions. Entry ``l`` is ``V[:, clusters[l]] @ coefficients[l]``.

    For a simple eigenvalue the cluster has one member and the coefficient is
    ``+-1``; inside a degenerate cluster it is the unit combination picked by
    the selection. ``indices`` are distinct representatives of the clusters.
    """

    indices: tuple
    eigenvalues: tuple
    directions: np.ndarray
    gammas: np.ndarray
    params: SelectionParams
    relaxations_used: int
    jacobian: np.ndarray
    ball_volume: float
    clusters: tuple = ()
    coefficients: tuple = ()

    def vectors(self, eigs: EigenSystem, points=None) -> np.ndarray:
        V = eigs.eigenvectors if points is None else eigs.eigenvectors[np.asarray(points, dtype=np.int64)]
        return np.stack([V[:, list(c)] @ u for c, u in zip(self.clusters, self.coefficients)], axis=1)

    def to_dict(self) -> dict:
        return {
            "indices": [int(i) for i in self.indices],
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "gammas": [float(g) for g in self.gammas],
            "directions": np.asarray(self.directions, dtype=float).tolist(),
            "relaxations_used": int(self.relaxations_used),
            "jacobian": np.asarray(self.jacobian, dtype=float).tolist(),
            "ball_volume": float(self.ball_volume),
            "clusters": [[int(j) for j in c] for c in self.clusters],
            "coefficients": [np.asarray(u, dtype=float).tolist() for u in self.coefficients],
            "params": self.params.to_dict(),
        }


def _window_indices(eigs: EigenSystem, sp_: SelectionParams) -> np.ndarray:
    lo, hi = sp_.window
    lam = eigs.eigenvalues
    if lo >= lam[-1]:
        return np.array([], dtype=int)
    if hi > eigs.lambda_max_resolved * (1 + 1e-12):
        raise ResolvedSpectrumError(
            f"selection window upper end A/t = {hi:.6g} exceeds resolved spectrum {eigs.lambda_max_resolved:.6g}")
    return np.flatnonzero((lam > lo) & (lam <= hi))


def eigen_clusters(eigenvalues: np.ndarray, indices, rtol: float = CLUSTER_RTOL) -> list:
    """Group consecutive ``indices`` whose eigenvalues agree to ``rtol``."""
    out = []
    for j in indices:
        j = int(j)
        if out and abs(eigenvalues[j] - eigenvalues[out[-1][-1]]) <= rtol * max(abs(eigenvalues[j]), 1.0):
            out[-1].append(j)
        else:
            out.append([j])
    return [tuple(c) for c in out]


@dataclass
class _Candidate:
    cluster: int
    index: int
    coeff: np.ndarray
    grad: np.ndarray
    mean_sq: float
    null: bool


class _SelectionContext:
    """Window clusters, ball and gradients at ``z`` shared by every direction.

    A degenerate cluster is an eigenspace without a preferred basis. Along a
    direction ``p`` it contributes the unit combination whose derivative
    ``d_p`` at ``z`` is largest (the rest of the eigenspace has ``d_p = 0``),
    which makes the selection independent of the solver's basis and signs.
    """

    def __init__(self, eigs: EigenSystem, sp_: SelectionParams):
        self.eigs = eigs
        self.params = sp_
        self.window = _window_indices(eigs, sp_)
        self.ball = _ball(eigs, sp_.z, sp_.ball_radius)
        self.clusters = eigen_clusters(eigs.eigenvalues, self.window)
        self.grads = []
        for c in self.clusters:
            self.grads.append(fd_gradient(eigs.domain, eigs.eigenvectors[:, list(c)], [sp_.z])[0])
        # orthonormal basis (columns) of what is still available in each cluster
        self.free = [np.eye(len(c)) for c in self.clusters]
        self.used = [0] * len(self.clusters)

    def candidates(self, p) -> list:
        p = np.asarray(p, dtype=float)
        V = self.eigs.eigenvectors
        mu = self.eigs.mass[self.ball.nodes]
        out = []
        for k, c in enumerate(self.clusters):
            B = self.free[k]
            if B.shape[1] == 0:
                continue
            a = (p @ self.grads[k]) @ B
            norm = float(np.linalg.norm(a))
            if norm == 0.0:
                continue
            u = B @ (a / norm)
            vals = V[:, list(c)] @ u
            ms = float(mu @ vals[self.ball.nodes] ** 2 / mu.sum())
            null = math.sqrt(ms) <= NULL_MASS_RTOL * float(np.max(np.abs(vals)))
            out.append(_Candidate(k, c[self.used[k]], u, self.grads[k] @ u, ms, null))
        return out

    def admissible(self, p, level: int) -> list:
        """Candidates passing the gradient test at relaxation ``level``."""
        c = self.params.c0 / 2 ** level
        p = np.asarray(p, dtype=float)
        return [cand for cand in self.candidates(p)
                if not cand.null and (self.params.rho / c) * abs(p @ cand.grad) >= math.sqrt(cand.mean_sq)]

    def take(self, cand: _Candidate) -> None:
        B = self.free[cand.cluster]
        # remove the chosen combination from the cluster's free subspace
        rest = B - np.outer(cand.coeff, cand.coeff @ B)
        q, s, _ = np.linalg.svd(rest, full_matrices=False)
        self.free[cand.cluster] = q[:, s > 1e-8]
        self.used[cand.cluster] += 1


def candidate_set(eigs: EigenSystem, sp_: SelectionParams, p, level: int = 0) -> list:
    """Indices with eigenvalue in ``(A'/t, A/t]`` and a large derivative along ``p``.

    The gradient test is ``(rho / c) |d_p phi_j(z)| >= (mean of phi_j^2 over
    B(z, delta0 rho / 2))^{1/2}`` with ``c = c0 / 2^level``. A degenerate
    cluster is represented by its first index. May be empty.
    """
    ctx = _SelectionContext(eigs, sp_)
    return [cand.index for cand in ctx.admissible(p, level)]


def admissible_candidates(eigs: EigenSystem, sp_: SelectionParams, p) -> tuple:
    """Candidate set after the relaxation ladder; returns ``(indices, level)``."""
    ctx = _SelectionContext(eigs, sp_)
    for level in range(sp_.relax_max + 1):
        found = ctx.admissible(p, level)
        if found:
            return [cand.index for cand in found], level
    raise NoAdmissibleEigenfunctionError(f"no admissible eigenfunction for direction p={np.round(p, 6).tolist()}")


def _next_direction(grads: np.ndarray, dim: int) -> np.ndarray:
    """Unit vector orthogonal to the rows of ``grads``, closest to a coordinate axis."""
    _, s, vt = np.linalg.svd(grads)
    k = grads.shape[0]
    if s[-1] <= 1e-12 * s[0]:
        raise DegenerateGradientFrameError("degenerate gradient frame: selected gradients are dependent")
    null = vt[k:]
    proj = null.T @ null  # projector onto the complement
    norms = np.linalg.norm(proj, axis=0)
    axis = int(np.argmax(norms > norms.max() - 1e-12))
    p = proj[:, axis]
    return p / np.linalg.norm(p)


def select_eigenfunctions(eigs: EigenSystem, sp_: SelectionParams, d: Optional[int] = None) -> EigenSelection:
    """Greedy choice of ``d`` eigenfunctions with a lower-triangular Jacobian at ``z``.

    Direction ``p_1`` is the first axis; ``p_{k+1}`` is orthogonal to the
    gradients already chosen. For each direction the admissible set is taken
    at the mildest relaxation level that is non-empty and a candidate is
    picked by ``sp_.rule`` (ties go to the smaller index).
    """
    dim = eigs.dim
    d = dim if d is None else int(d)
    if not 1 <= d <= dim:
        raise ValidationError("d must not exceed the domain dimension")
    ctx = _SelectionContext(eigs, sp_)
    picks, dirs, levels = [], [], []
    for step in range(d):
        if step == 0:
            p = np.zeros(dim)
            p[0] = 1.0
        else:
            p = _next_direction(np.array([c.grad for c in picks]), dim)
        for level in range(sp_.relax_max + 1):
            found = ctx.admissible(p, level)
            if found:
                break
        else:
            raise NoAdmissibleEigenfunctionError(
                f"no admissible eigenfunction for direction p={np.round(p, 6).tolist()}")
        if sp_.rule == "max-gradient":
            score = [abs(p @ c.grad) / math.sqrt(c.mean_sq) for c in found]
            best = found[int(np.argmax(score))]
        else:
            best = found[0]
        ctx.take(best)
        picks.append(best)
        dirs.append(p)
        levels.append(level)
    gammas = np.array([c.mean_sq ** -0.5 for c in picks])
    P = np.array(dirs)
    # J[m, n] = gamma_m d_{p_n} phi_{i_m}(z)
    J = gammas[:, None] * (np.array([c.grad for c in picks]) @ P.T)
    indices = tuple(int(c.index) for c in picks)
    return EigenSelection(indices, tuple(float(eigs.eigenvalues[i]) for i in indices), P, gammas,
                          sp_, max(levels), J, ctx.ball.volume,
                          tuple(ctx.clusters[c.cluster] for c in picks), tuple(c.coeff for c in picks))


def eigen_embedding(eigs: EigenSystem, sel: EigenSelection, points=None) -> np.ndarray:
    """``x -> (gamma_1 phi_{i_1}(x), ..., gamma_d phi_{i_d}(x))`` at node ids ``points``."""
    return sel.vectors(eigs, points) * np.asarray(sel.gammas)


# --------------------------------------------------------------------------
# heat triangulation
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriangulationMap:
    z: int
    rho: float
    anchors: tuple
    directions: np.ndarray
    t: float
    scale: float
    kernel_fields: np.ndarray = field(repr=False)
    seed: int = 0
    anchor_distances: tuple = ()
    draws: int = 1

    @property
    def gramian(self) -> np.ndarray:
        return self.directions @ self.directions.T

    def values(self, nodes=None) -> np.ndarray:
        F = self.scale * self.kernel_fields
        return F if nodes is None else F[np.asarray(nodes, dtype=np.int64)]

    def to_dict(self) -> dict:
        return {
            "z": int(self.z), "rho": float(self.rho), "t": float(self.t), "scale": float(self.scale),
            "seed": int(self.seed), "draws": int(self.draws),
            "anchors": [int(a) for a in self.anchors],
            "anchor_distances": [float(x) for x in self.anchor_distances],
            "directions": self.directions.tolist(),
            "gramian_eigenvalues": np.linalg.eigvalsh(self.gramian).tolist(),
        }


def random_directions(rng, d: int, min_gram_eig: float = 0.1, max_draws: int = 100):
    """Draw ``d`` unit vectors until their Gramian's smallest eigenvalue is large enough."""
    for draw in range(1, max_draws + 1):
        P = rng.standard_normal((d, d))
        P /= np.linalg.norm(P, axis=1, keepdims=True)
        if np.linalg.eigvalsh(P @ P.T)[0] >= min_gram_eig:
            return P, draw
    raise AnchorPlacementError("could not find well-spread directions")


def heat_triangulation(domain: GridDomain, eigs: EigenSystem, z: int, rho: float, c: float = 0.5,
                       theta: float = 0.05, rng_seed: int = 0, acknowledge_tail: bool = False) -> TriangulationMap:
    """Chart ``x -> rho^d (K_t(x, y_1), ..., K_t(x, y_d))`` with ``t = theta rho^2``.

    Anchors ``y_i`` are the nodes nearest to ``z + 1.5 c rho p_i`` for
    seeded random directions ``p_i``; if snapping leaves the annulus
    ``c rho <= d(y_i, z) <= 2 c rho`` the closest annulus node is used.
    """
    d = domain.dim
    zc = domain.coords[z]
    if not domain.lattice_ball_inside(zc, (1 + 2 * c) * rho):
        raise ValidationError("B(z, (1 + 2c) rho) must lie inside the domain")
    rng = np.random.default_rng(rng_seed)
    P, draws = random_directions(rng, d)
    ball = geodesic_distances(domain, z, 2 * c * rho)
    lo, hi = c * rho, 2 * c * rho
    annulus = ball.nodes[(ball.geodesic >= lo) & (ball.geodesic <= hi)]
    if len(annulus) == 0:
        raise AnchorPlacementError("anchor placement failed at resolution: empty annulus")
    geo = dict(zip(ball.nodes.tolist(), ball.geodesic.tolist()))
    anchors, dist = [], []
    for p in P:
        target = zc + 1.5 * c * rho * p
        try:
            y = domain.node_at(target)
        except ValidationError:
            y = -1
        if y < 0 or not lo <= geo.get(y, math.inf) <= hi:
            y = int(annulus[np.argmin(np.linalg.norm(domain.coords[annulus] - target, axis=1))])
        if not lo <= geo[y] <= hi:
            raise AnchorPlacementError("anchor placement failed at resolution")
        anchors.append(int(y))
        dist.append(geo[y])
    t = theta * rho ** 2
    fields = np.stack([heat_kernel_field(eigs, t, y, acknowledge_tail=acknowledge_tail) for y in anchors], axis=1)
    return TriangulationMap(int(z), float(rho), tuple(anchors), P, t, rho ** d, fields, int(rng_seed),
                            tuple(dist), draws)


def free_plane_jacobian(x, anchors: Sequence, t: float) -> np.ndarray:
    """Rows ``grad_x K_t(x, y_i)`` of the Euclidean heat kernel (closed form)."""
    return np.array([heat_kernel_free_gradient(x, y, t) for y in anchors])


def free_plane_map(points: np.ndarray, anchors: Sequence, t: float, rho: float = 1.0) -> np.ndarray:
    """Closed-form triangulation map ``rho^d K_t(x, y_i)`` in Euclidean space."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = pts.shape[1]
    out = np.empty((len(pts), len(anchors)))
    for i, y in enumerate(anchors):
        r2 = np.sum((pts - np.asarray(y, dtype=float)) ** 2, axis=1)
        out[:, i] = (4 * math.pi * t) ** (-d / 2) * np.exp(-r2 / (4 * t))
    return rho ** d * out
