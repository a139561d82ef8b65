"""Laplacian assembly, low-spectrum eigensolves and Weyl counting."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import (
    EigensolverStagnationError,
    EllipticityError,
    ResolvedSpectrumError,
    ValidationError,
)
from .geometry import DIRICHLET, NEUMANN, GridDomain, MetricField, PointCloudGraph

# problems up to this size (or asking for a large fraction of the spectrum)
# go to LAPACK instead of shift-invert Lanczos
DENSE_MAX_NODES = 2500
DENSE_FRACTION = 0.2
DENSE_HARD_LIMIT = 6000


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Stiffness matrix and diagonal mass of a discretised Laplacian.

    The eigenproblem is ``stiffness @ phi = lam * (mass * phi)``; ``mass`` is
    the node measure, so eigenvectors come out orthonormal in ``L^2(mu)``.
    """

    stiffness: sp.csr_matrix
    mass: np.ndarray
    bc: str
    domain: object = field(repr=False)

    @property
    def n(self) -> int:
        return self.stiffness.shape[0]

    def generator(self) -> sp.csr_matrix:
        """``M^{-1} K``, the (positive) Laplacian acting on node values."""
        return (sp.diags(1.0 / self.mass) @ self.stiffness).tocsr()


def assemble_laplacian(domain, metric: Optional[MetricField] = None) -> OperatorMatrix:
    """Divergence-form Laplacian ``-(1/sqrt g) d_j (sqrt g g^ij d_i .)``.

    Axis-aligned fluxes use the harmonic mean of ``sqrt(g) g^aa`` across each
    face; Dirichlet faces get the antisymmetric ghost closure (boundary on the
    cell face), Neumann faces carry no flux. Mixed terms ``g^ab`` are
    discretised on 2x2 plaquettes and require diagonal dominance to keep the
    matrix positive semidefinite.
    """
    if isinstance(domain, PointCloudGraph):
        return OperatorMatrix(domain.stiffness, domain.node_measure.copy(), domain.bc, domain)
    if metric is not None:
        domain = domain.with_metric(metric)
    g_field = domain.metric_field
    bad = g_field.ellipticity_violations()
    if len(bad):
        raise EllipticityError(f"ellipticity violation at node {int(bad[0])} "
                               f"(coords {tuple(np.round(domain.coords[bad[0]], 6))})")
    g = g_field.tensors
    d, h, n = domain.dim, domain.spacing, domain.n_nodes
    sigma = g_field.sqrt_det_g
    off = np.abs(g).sum(axis=2) - 2 * np.abs(np.diagonal(g, axis1=1, axis2=2))
    if d > 1 and np.any(off > 1e-12):
        i = int(np.argmax(off))
        raise ValidationError(f"off-diagonal metric coefficients at node {i} exceed the diagonal; "
                              "the lattice stencil needs a diagonally dominant g^ij")
    scale = domain.total_volume / float(np.sum(h ** d * sigma))
    lat, shape = domain.lattice, np.array(domain.shape)
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    hd2 = h ** (d - 2) * scale
    for a in range(d):
        k = sigma * g[:, a, a]
        for step in (1, -1):
            tgt = lat.copy()
            tgt[:, a] += step
            inb = (tgt[:, a] >= 0) & (tgt[:, a] < shape[a])
            nb = np.full(n, -1, dtype=np.int64)
            nb[inb] = domain.index[tuple(tgt[inb].T)]
            missing = np.flatnonzero(nb < 0)
            if domain.bc == DIRICHLET:
                diag[missing] += 2.0 * k[missing] * hd2
            if step == 1:
                i = np.flatnonzero(nb >= 0)
                j = nb[i]
                w = 2.0 * k[i] * k[j] / (k[i] + k[j]) * hd2
                rows += [i, j, i, j]
                cols += [i, j, j, i]
                vals += [w, w, -w, -w]
    # mixed derivatives on plaquettes
    for a in range(d):
        for b in range(a + 1, d):
            coef = sigma * g[:, a, b]
            if not np.any(coef):
                continue
            corners = []
            for da, db in ((0, 0), (1, 0), (0, 1), (1, 1)):
                tgt = lat.copy()
                tgt[:, a] += da
                tgt[:, b] += db
                inb = np.all(tgt < shape, axis=1)
                nb = np.full(n, -1, dtype=np.int64)
                nb[inb] = domain.index[tuple(tgt[inb].T)]
                corners.append(nb)
            corners = np.stack(corners, axis=1)
            ok = np.all(corners >= 0, axis=1)
            c = corners[ok]
            cp = coef[c].mean(axis=1) * h ** d * scale
            va = np.array([-1.0, 1.0, -1.0, 1.0]) / (2 * h)
            vb = np.array([-1.0, -1.0, 1.0, 1.0]) / (2 * h)
            block = np.outer(va, vb) + np.outer(vb, va)
            for p in range(4):
                for q in range(4):
                    if block[p, q] != 0.0:
                        rows.append(c[:, p])
                        cols.append(c[:, q])
                        vals.append(cp * block[p, q])
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    K = (0.5 * (K + K.T)).tocsr()
    K.sum_duplicates()
    return OperatorMatrix(K, domain.node_measure.copy(), domain.bc, domain)


@lru_cache(maxsize=None)
def _resolution_constant(tolerance: float = 0.05) -> float:
    """``lam * h^2`` at which the 1d stencil underestimates ``k^2`` by ``tolerance``."""
    target = math.sqrt(1.0 - tolerance)
    x = brentq(lambda s: math.sin(s) / s - target, 1e-6, 1.5)
    return 4.0 * x * x


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Ascending eigenvalues with ``mu``-orthonormal eigenvectors (columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: np.ndarray
    bc: str
    domain: object = field(repr=False)
    lambda_max_resolved: float = math.inf
    complete: bool = False

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def phi(self, j: int) -> np.ndarray:
        return self.eigenvectors[:, j]

    def gram(self) -> np.ndarray:
        V = self.eigenvectors
        return V.T @ (self.mass[:, None] * V)

    def truncated(self, k: int) -> "EigenSystem":
        return EigenSystem(self.eigenvalues[:k], self.eigenvectors[:, :k], self.mass, self.bc, self.domain,
                           min(self.lambda_max_resolved, float(self.eigenvalues[k - 1])), k == len(self.mass))

    def with_signs(self, signs) -> "EigenSystem":
        """Copy with eigenvector ``j`` multiplied by ``signs[j]``."""
        s = np.asarray(signs, dtype=float)
        return EigenSystem(self.eigenvalues, self.eigenvectors * s, self.mass, self.bc, self.domain,
                           self.lambda_max_resolved, self.complete)


def _fix_signs(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def _solve(A: sp.csr_matrix, k: int, seed: int, dense: bool, maxiter: Optional[int]):
    n = A.shape[0]
    if dense:
        w, V = sla.eigh(A.toarray(), subset_by_index=[0, k - 1], driver="evr")
        return w, V
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n)
    try:
        w, V = eigsh(A, k=k, sigma=-1.0, which="LM", v0=v0, tol=0.0, maxiter=maxiter)
    except ArpackNoConvergence as exc:
        raise EigensolverStagnationError(
            f"eigensolver stagnated at pair {len(exc.eigenvalues)} of {k}") from exc
    # Rayleigh-Ritz on the orthonormalised block: restores orthogonality inside clusters
    Q, _ = np.linalg.qr(V)
    H = Q.T @ (A @ Q)
    w, Y = np.linalg.eigh(0.5 * (H + H.T))
    return w, Q @ Y


def compute_eigensystem(op: OperatorMatrix, k: Optional[int] = None, threshold: Optional[float] = None,
                        seed: int = 0, dense: Optional[bool] = None, maxiter: Optional[int] = None) -> EigenSystem:
    """Smallest ``k`` eigenpairs, or all eigenpairs with eigenvalue <= ``threshold``.

    The symmetric scaling ``M^{-1/2} K M^{-1/2}`` is solved either densely
    (small problems) or by shift-invert Lanczos with a seeded start vector,
    followed by a Rayleigh-Ritz pass. Eigenvectors are returned
    ``mu``-orthonormal with the sign fixed so the largest entry is positive.
    """
    n = op.n
    if (k is None) == (threshold is None):
        raise ValidationError("give exactly one of k or threshold")
    if k is not None and not 1 <= k <= n:
        raise ValidationError(f"k must lie in [1, {n}]")
    if threshold is not None and not threshold > 0:
        raise ValidationError("threshold must be positive")
    s = 1.0 / np.sqrt(op.mass)
    A = (sp.diags(s) @ op.stiffness @ sp.diags(s)).tocsr()
    A = 0.5 * (A + A.T)

    def use_dense(kk):
        if dense is not None:
            return dense or kk >= n - 1
        return n <= DENSE_MAX_NODES or kk >= n - 1 or (kk > DENSE_FRACTION * n and n <= DENSE_HARD_LIMIT)

    if k is not None:
        w, V = _solve(A, k, seed, use_dense(k), maxiter)
        completeness = float(w[-1]) if k < n else math.inf
    else:
        vol = getattr(op.domain, "physical_volume", 1.0)
        d = op.domain.dim
        weyl = vol * threshold ** (d / 2) * math.pi ** (d / 2) / math.gamma(d / 2 + 1) / (2 * math.pi) ** d
        kk = min(n, int(1.1 * weyl) + 12)
        while True:
            w, V = _solve(A, kk, seed, use_dense(kk), maxiter)
            if w[-1] > threshold or kk >= n:
                break
            kk = min(n, int(1.6 * kk) + 8)
        keep = w <= threshold
        completeness = float(threshold) if kk < n else math.inf
        w, V = w[keep], V[:, keep]
        if len(w) == 0:
            raise ValidationError("no eigenvalues below threshold")
    order = np.argsort(w, kind="stable")
    w, V = w[order], V[:, order]
    phi = _fix_signs(V * s[:, None])
    cap = math.inf
    if isinstance(op.domain, GridDomain):
        cap = _resolution_constant() / op.domain.spacing ** 2 * op.domain.metric_field.c_max
    return EigenSystem(np.asarray(w, dtype=float), phi, op.mass, op.bc, op.domain,
                       lambda_max_resolved=min(cap, completeness), complete=len(w) == n)


@dataclass(frozen=True)
class WeylCount:
    threshold: float
    count: int
    ratio: float


def weyl_count(eigs: EigenSystem, T: float, volume: Optional[float] = None) -> WeylCount:
    """``#{j : 0 < lam_j <= T}`` and the empirical constant ``count / (T^{d/2} volume)``.

    ``volume`` defaults to the physical volume of the domain.
    """
    if T > eigs.lambda_max_resolved * (1 + 1e-12):
        raise ResolvedSpectrumError(
            f"threshold exceeds resolved spectrum: T={T} > {eigs.lambda_max_resolved:.6g}")
    if volume is None:
        volume = getattr(eigs.domain, "physical_volume", 1.0)
    if T <= 0:
        return WeylCount(float(T), 0, 0.0)
    zero = 1e-8 * max(1.0, abs(T))
    lam = eigs.eigenvalues
    count = int(np.count_nonzero((lam > zero) & (lam <= T)))
    return WeylCount(float(T), count, count / (T ** (eigs.dim / 2) * volume))


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

EIGS_MAGIC = b"EIGS"
EIGS_VERSION = 1


def write_eigenvalues_csv(path, eigs: EigenSystem) -> None:
    lines = ["j,lambda"] + [f"{j},{lam!r}" for j, lam in enumerate(eigs.eigenvalues.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def write_eigensystem_binary(path, eigs: EigenSystem) -> None:
    """Little-endian layout:

    ``b"EIGS"``, uint32 version, uint64 n_nodes, uint64 k,
    float64[k] eigenvalues, float64[n_nodes * k] eigenvectors (row = node),
    float64[n_nodes] node measure.
    """
    n, k = eigs.eigenvectors.shape
    with open(path, "wb") as fh:
        fh.write(EIGS_MAGIC)
        fh.write(struct.pack("<IQQ", EIGS_VERSION, n, k))
        fh.write(np.ascontiguousarray(eigs.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(eigs.eigenvectors, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(eigs.mass, dtype="<f8").tobytes())


def read_eigensystem_binary(path):
    """Return ``(eigenvalues, eigenvectors, mass)`` from :func:`write_eigensystem_binary` output."""
    data = Path(path).read_bytes()
    if data[:4] != EIGS_MAGIC:
        raise ValidationError(f"{path}: bad magic")
    version, n, k = struct.unpack_from("<IQQ", data, 4)
    if version != EIGS_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<IQQ")
    lam = np.frombuffer(data, dtype="<f8", count=k, offset=off)
    off += 8 * k
    vec = np.frombuffer(data, dtype="<f8", count=n * k, offset=off).reshape(n, k)
    off += 8 * n * k
    mass = np.frombuffer(data, dtype="<f8", count=n, offset=off)
    return lam.copy(), vec.copy(), mass.copy()
