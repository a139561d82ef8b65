"""Heat kernels: spectral sums, Crank-Nicolson evolution, localisation, exit times."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.sparse.linalg import splu

from .errors import (
    LocalizationBallError,
    SpectralTailWarning,
    TimestepSolverError,
    ValidationError,
)
from .spectral import EigenSystem, OperatorMatrix

# kernel-bound regime: sqrt(t) in (delta1 R/2, delta1 R), |z - w| < delta0 R
DELTA0 = 0.5
DELTA1 = 0.2

MC_BLOCK = 8192


@dataclass(frozen=True)
class HeatKernelQuery:
    """Evaluate ``K_t(x, y)``; ``truncation=(A, A')`` keeps ``lam`` in ``(A'/t, A/t]``."""

    t: float
    x: int
    y: int
    truncation: Optional[tuple] = None

    def __post_init__(self):
        if not self.t > 0:
            raise ValidationError("heat kernel time must be positive")
        if self.truncation is not None:
            A, A_prime = self.truncation
            if not 0 <= A_prime < A:
                raise ValidationError("truncation window needs 0 <= A' < A")


def _spectral_weights(eigs: EigenSystem, t: float, truncation=None) -> np.ndarray:
    lam = eigs.eigenvalues
    w = np.exp(-lam * t)
    if truncation is not None:
        A, A_prime = truncation
        w = np.where((lam > A_prime / t) & (lam <= A / t), w, 0.0)
    return w


def _check_tail(eigs: EigenSystem, t: float, value: float, acknowledge_tail: bool) -> None:
    if eigs.complete:
        return
    lam_last = float(eigs.eigenvalues[-1])
    if not acknowledge_tail and t * lam_last < 25.0:
        warnings.warn(f"spectral tail not negligible: t*lambda_max = {t * lam_last:.3g} < 25",
                      SpectralTailWarning, stacklevel=3)
    tail = math.exp(-lam_last * t) * eigs.count
    if tail > 1e-3 * abs(value):
        warnings.warn(f"spectral tail not negligible: estimate {tail:.3g} vs value {value:.3g}",
                      SpectralTailWarning, stacklevel=3)


def heat_kernel_spectral(eigs: EigenSystem, q: HeatKernelQuery, acknowledge_tail: bool = False) -> float:
    """``sum_j exp(-lam_j t) phi_j(x) phi_j(y)`` over the included eigenpairs.

    Emits :class:`SpectralTailWarning` when the omitted part of an incomplete
    spectrum may matter (full sums only).
    """
    w = _spectral_weights(eigs, q.t, q.truncation)
    V = eigs.eigenvectors
    # symmetric product keeps K(x, y) == K(y, x) bit for bit
    value = float(np.sum(w * (V[q.x] * V[q.y])))
    if q.truncation is None:
        _check_tail(eigs, q.t, value, acknowledge_tail)
    return value


def heat_kernel_field(eigs: EigenSystem, t: float, y: int, truncation=None,
                      acknowledge_tail: bool = False) -> np.ndarray:
    """Node field ``x -> K_t(x, y)``."""
    w = _spectral_weights(eigs, t, truncation)
    V = eigs.eigenvectors
    field = V @ (w * V[y])
    if truncation is None:
        _check_tail(eigs, t, float(field[y]), acknowledge_tail)
    return field


def heat_kernel_matrix(eigs: EigenSystem, t: float) -> np.ndarray:
    """Dense ``K_t`` on all nodes (use on small grids only)."""
    V = eigs.eigenvectors
    return (V * np.exp(-eigs.eigenvalues * t)) @ V.T


def heat_kernel_closed_form_free(x, y, t: float, d: Optional[int] = None) -> float:
    """Euclidean heat kernel ``(4 pi t)^{-d/2} exp(-|x-y|^2 / 4t)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if d is None:
        d = x.size
    r2 = float(np.sum((x - y) ** 2))
    return (4.0 * math.pi * t) ** (-d / 2.0) * math.exp(-r2 / (4.0 * t))


def heat_kernel_free_gradient(x, y, t: float, d: Optional[int] = None) -> np.ndarray:
    """Gradient in ``x`` of the Euclidean heat kernel: ``-(x - y) / 2t * K``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return -(x - y) / (2.0 * t) * heat_kernel_closed_form_free(x, y, t, d)


def heat_kernel_timestep(op: OperatorMatrix, t: float, y: int, steps: int = 400,
                         return_history: bool = False):
    """Crank-Nicolson evolution of a unit point mass at node ``y`` up to time ``t``.

    The initial field is ``delta_y / mu_y`` so that the solution is the
    kernel ``K_t(., y)`` with respect to the node measure. The first two
    steps are replaced by four implicit-Euler half steps (Rannacher start),
    which damps the stiff modes a point source excites; the scheme stays
    second order. ``return_history`` also returns the field after every step.
    """
    if steps < 16:
        raise ValidationError("heat_kernel_timestep needs at least 16 steps")
    if not t > 0:
        raise ValidationError("time must be positive")
    dt = t / steps
    M = sp.diags(op.mass)
    lhs = (M + 0.5 * dt * op.stiffness).tocsc()
    rhs = (M - 0.5 * dt * op.stiffness).tocsr()
    try:
        lu = splu(lhs)
    except RuntimeError as exc:
        raise TimestepSolverError("time-step solver failure at step 0") from exc
    u = np.zeros(op.n)
    u[y] = 1.0 / op.mass[y]
    history = [u.copy()] if return_history else None
    k = 0
    # Rannacher start: implicit Euler with dt/2 shares the CN left-hand side
    for _ in range(4):
        u = lu.solve(op.mass * u)
        k += 0.5
        if history is not None and k == int(k):
            history.append(u.copy())
    for step in range(2, steps):
        u = lu.solve(rhs @ u)
        if not np.all(np.isfinite(u)):
            raise TimestepSolverError(f"time-step solver failure at step {step}")
        if history is not None:
            history.append(u.copy())
    return (u, history) if return_history else u


# --------------------------------------------------------------------------
# localisation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DuhamelRemainder:
    global_kernel: float
    ball_kernel: float
    remainder: float
    relative: float


def localization_ball(domain, center: int, radius: float):
    """Dirichlet sub-domain on the Euclidean ball ``B(center, radius)``."""
    nodes = domain.euclidean_ball(center, radius)
    return domain.restrict(nodes, bc="dirichlet")


def duhamel_remainder(eigs_global: EigenSystem, eigs_ball: EigenSystem, z: int, w: int, t: float) -> DuhamelRemainder:
    """Global kernel minus the ball-Dirichlet kernel at ``(z, w, t)``.

    ``eigs_ball`` must live on a restriction of the global domain (see
    :func:`localization_ball`); ``z`` and ``w`` are global node ids. The
    difference is the re-entry series of the localisation identity and is
    nonnegative up to round-off.
    """
    parent = getattr(eigs_ball.domain, "parent_index", None)
    if parent is None:
        raise ValidationError("eigs_ball must be computed on a restricted sub-domain")
    local = {int(g): i for i, g in enumerate(parent)}
    if int(z) not in local or int(w) not in local:
        raise LocalizationBallError("query outside localization ball")
    k_global = heat_kernel_spectral(eigs_global, HeatKernelQuery(t, z, w))
    k_ball = heat_kernel_spectral(eigs_ball, HeatKernelQuery(t, local[int(z)], local[int(w)]))
    rem = k_global - k_ball
    return DuhamelRemainder(k_global, k_ball, rem, rem / k_global)


# --------------------------------------------------------------------------
# exit times
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExitTailEstimate:
    R: float
    s: float
    n_paths: int
    seed: int
    p_hat: float
    ci95: float
    n_steps: int

    def to_dict(self) -> dict:
        return asdict(self)


def _walk_block(rng, n: int, n_steps: int, dim: int, radius_cells2: float) -> np.ndarray:
    """Whether each of ``n`` lattice walks leaves the ball within ``n_steps``."""
    exited = np.zeros(n, dtype=bool)
    pos = np.zeros((n, dim), dtype=np.int32)
    chunk = 256
    done = 0
    while done < n_steps:
        m = min(chunk, n_steps - done)
        moves = rng.integers(0, 2 * dim, size=(n, m), dtype=np.int8)
        path = np.empty((n, m, dim), dtype=np.int32)
        for a in range(dim):
            step = (moves == 2 * a).astype(np.int32) - (moves == 2 * a + 1).astype(np.int32)
            path[:, :, a] = pos[:, None, a] + np.cumsum(step, axis=1)
        r2 = np.sum(path.astype(np.float64) ** 2, axis=2)
        exited |= np.any(r2 > radius_cells2, axis=1)
        pos = path[:, -1, :]
        done += m
    return exited


def exit_time_tail_mc(domain, z: int, R: float, s: float, n_paths: int = 100_000, seed: int = 0) -> ExitTailEstimate:
    """Monte Carlo estimate of ``P(tau <= s)`` for the exit time from ``B(z, R)``.

    Walkers take nearest-neighbour lattice steps of length ``h`` every
    ``h^2 / 2d``, matching Brownian motion with generator the Laplacian.
    Paths are generated in fixed blocks; block ``b`` draws from the stream
    seeded by ``(seed, b)``, so results do not depend on how blocks are run.
    """
    h, d = domain.spacing, domain.dim
    if R < 4 * h:
        raise ValidationError("ball under-resolved for walkers: R must span at least 4 lattice cells")
    if n_paths < 1000:
        raise ValidationError("exit_time_tail_mc needs at least 1000 paths")
    if not domain.lattice_ball_inside(domain.coords[z], R):
        raise ValidationError("B(z, R) is not inside the domain")
    dt = h * h / (2 * d)
    n_steps = int(math.floor(s / dt + 1e-9))
    exited = 0
    if n_steps > 0:
        r2 = (R / h) ** 2
        for b, start in enumerate(range(0, n_paths, MC_BLOCK)):
            m = min(MC_BLOCK, n_paths - start)
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), b]))
            exited += int(_walk_block(rng, m, n_steps, d, r2).sum())
    p = exited / n_paths
    ci = 1.96 * math.sqrt(p * (1 - p) / n_paths)
    return ExitTailEstimate(float(R), float(s), int(n_paths), int(seed), p, ci, n_steps)


@dataclass(frozen=True)
class ExitTailFit:
    slope: float
    intercept: float
    r_squared: float
    M: float


def fit_exit_tail(estimates: Sequence[ExitTailEstimate]) -> ExitTailFit:
    """Least-squares line ``log p_hat = slope * R^2/s + intercept``.

    ``M`` is read off the Gaussian-type tail ``exp(-R^2 / (2 M s))``.
    """
    x = np.array([e.R ** 2 / e.s for e in estimates])
    p = np.array([e.p_hat for e in estimates])
    if np.any(p <= 0):
        raise ValidationError("cannot fit a tail through a zero exit probability")
    fit = stats.linregress(x, np.log(p))
    M = -1.0 / (2.0 * fit.slope) if fit.slope < 0 else math.inf
    return ExitTailFit(float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2), M)


def write_kernel_csv(path, domain, field: np.ndarray) -> None:
    cols = ["x", "y", "z"][: domain.dim]
    lines = [",".join(cols + ["value"])]
    for c, v in zip(domain.coords.tolist(), field.tolist()):
        lines.append(",".join(repr(a) for a in c) + f",{v!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_mc_report(path, estimate: ExitTailEstimate) -> None:
    Path(path).write_text(json.dumps(estimate.to_dict(), indent=2, sort_keys=True) + "\n")
