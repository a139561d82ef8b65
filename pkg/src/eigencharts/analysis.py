"""Bi-Lipschitz distortion of charts and inequality diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .embed import EigenSelection, ball_mean_squares, fd_gradient
from .errors import ValidationError
from .geometry import BallPatch, geodesic_distances
from .heat import DELTA0, DELTA1, heat_kernel_field
from .spectral import EigenSystem

PAIR_BUDGET = 200_000
DISTORTION_TARGET = 10.0


@dataclass(frozen=True, eq=False)
class DistortionReport:
    lip: float
    lip_inv: float
    distortion: float
    n_pairs: int
    witnesses: dict
    ball: BallPatch = field(repr=False)
    exhaustive: bool = True

    @property
    def injective(self) -> bool:
        return math.isfinite(self.distortion)

    def to_dict(self) -> dict:
        return {
            "lip": _num(self.lip), "lip_inv": _num(self.lip_inv), "distortion": _num(self.distortion),
            "n_pairs": int(self.n_pairs), "exhaustive": bool(self.exhaustive), "injective": self.injective,
            "ball": {"center": int(self.ball.center), "radius": float(self.ball.radius), "nodes": int(self.ball.size)},
            "witnesses": {k: [int(a), int(b)] for k, (a, b) in sorted(self.witnesses.items())},
        }


def _num(x: float):
    """JSON-friendly float (infinity as a string)."""
    return float(x) if math.isfinite(x) else "inf"


def measure_distortion(map_values: np.ndarray, ball: BallPatch, pair_budget: int = PAIR_BUDGET,
                       seed: int = 0, min_separation: Optional[float] = None) -> DistortionReport:
    """``lip * lip_inv`` of a chart over node pairs of ``ball``.

    ``map_values[i]`` is the image of ``ball.nodes[i]``. Pairs closer than
    ``min_separation`` (default two lattice spacings) are skipped. All pairs
    are used when they fit in ``pair_budget``; otherwise a seeded uniform
    sample of that size. Coincident images give infinite distortion.
    """
    F = np.asarray(map_values, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    if ball.size < 10:
        raise ValidationError(f"distortion needs a ball with >= 10 nodes (got {ball.size})")
    if len(F) != ball.size:
        raise ValidationError("map_values must have one row per ball node")
    if pair_budget < 100:
        raise ValidationError("pair_budget must be >= 100")
    if min_separation is None:
        min_separation = 2.0 * getattr(ball.domain, "spacing", 0.0)
    m = ball.size
    exhaustive = m * (m - 1) // 2 <= pair_budget
    if exhaustive:
        D = ball.pairwise_distances()
        ia, ib = np.triu_indices(m, 1)
    else:
        # seeded source rows against all targets keeps the shortest-path work bounded
        rng = np.random.default_rng(seed)
        n_src = min(m, max(1, -(-2 * pair_budget // m)))
        rows = np.sort(rng.choice(m, size=n_src, replace=False))
        D = ball.distances_from(rows)
        src_pos = np.full(m, -1)
        src_pos[rows] = np.arange(n_src)
        r, ib = np.nonzero(np.ones((n_src, m), dtype=bool))
        ia = rows[r]
        # drop self pairs and the second copy of source-source pairs
        ok = (ia != ib) & ((src_pos[ib] < 0) | (ia < ib))
        ia, ib = ia[ok], ib[ok]
    dist = D[ia, ib] if exhaustive else D[src_pos[ia], ib]
    keep = np.isfinite(dist) & (dist >= min_separation * (1 - 1e-12)) & (dist > 0)
    ia, ib, dist = ia[keep], ib[keep], dist[keep]
    if len(dist) == 0:
        raise ValidationError("no admissible pairs in ball")
    if len(dist) > pair_budget:
        pick = np.sort(np.random.default_rng(seed).choice(len(dist), size=pair_budget, replace=False))
        ia, ib, dist = ia[pick], ib[pick], dist[pick]
    dF = np.linalg.norm(F[ia] - F[ib], axis=1)
    pair = lambda k: (int(ball.nodes[ia[k]]), int(ball.nodes[ib[k]]))  # noqa: E731
    up = dF / dist
    k_up = int(np.argmax(up))
    scale = float(np.max(np.abs(F)))
    coincident = dF <= 1e-12 * scale if scale > 0 else np.ones_like(dF, dtype=bool)
    if coincident.any():
        k_dn = int(np.flatnonzero(coincident)[0])
        return DistortionReport(float(up[k_up]), math.inf, math.inf, len(dist),
                                {"lip": pair(k_up), "lip_inv": pair(k_dn)}, ball, exhaustive)
    down = dist / dF
    k_dn = int(np.argmax(down))
    lip, lip_inv = float(up[k_up]), float(down[k_dn])
    return DistortionReport(lip, lip_inv, lip * lip_inv, len(dist),
                            {"lip": pair(k_up), "lip_inv": pair(k_dn)}, ball, exhaustive)


@dataclass(frozen=True, eq=False)
class ThetaCertificate:
    theta: Optional[int]
    radius: Optional[float]
    report: Optional[DistortionReport]
    history: tuple

    @property
    def certified(self) -> bool:
        return self.theta is not None

    def to_dict(self) -> dict:
        return {
            "theta": self.theta, "radius": self.radius,
            "report": None if self.report is None else self.report.to_dict(),
            "history": [{"theta": th, "distortion": _num(dv)} for th, dv in self.history],
        }


def certify_theta(chart: Callable[[np.ndarray], np.ndarray], domain, z: int, rho: float,
                  threshold: float = DISTORTION_TARGET, max_theta: int = 64,
                  pair_budget: int = PAIR_BUDGET, seed: int = 0) -> ThetaCertificate:
    """Smallest power of two ``Theta`` with distortion on ``B(z, rho / Theta)`` at most ``threshold``.

    ``chart`` maps an array of node ids to their images. Stops uncertified
    once the ball holds fewer than ten nodes or ``max_theta`` is passed.
    """
    history = []
    theta = 1
    outer = geodesic_distances(domain, z, rho)
    while theta <= max_theta:
        ball = outer.subball(rho / theta)
        if ball.size < 10:
            break
        report = measure_distortion(chart(ball.nodes), ball, pair_budget, seed)
        history.append((theta, report.distortion))
        if report.distortion <= threshold:
            return ThetaCertificate(theta, rho / theta, report, tuple(history))
        theta *= 2
    return ThetaCertificate(None, None, None, tuple(history))


# --------------------------------------------------------------------------
# selection ledger
# --------------------------------------------------------------------------

def selection_diagnostics(eigs: EigenSystem, sel: EigenSelection, C_count_emp: float,
                          kappa: Optional[float] = None) -> dict:
    """Pass/fail ledger for a selection, with margins; never raises.

    Checks the eigenvalue window, the gamma floor ``sqrt(vol B)``, the gamma
    ceiling ``kappa * sqrt(C_count_emp)`` (recorded only when ``kappa`` is
    None), lower-triangularity and the diagonal floor ``c / rho`` at the
    relaxation level actually used.
    """
    out = {}

    def guarded(name, fn):
        try:
            out[name] = fn()
        except Exception as exc:  # diagnostics must not abort a run
            out[name] = {"pass": False, "error": f"{type(exc).__name__}: {exc}"}

    sp_ = sel.params
    lo, hi = sp_.window

    def window():
        lam = np.asarray(sel.eigenvalues)
        return {"pass": bool(np.all((lam > lo) & (lam <= hi))), "lower": lo, "upper": hi,
                "eigenvalues": lam.tolist(), "margin_low": float(np.min(lam / lo)),
                "margin_high": float(np.min(hi / lam))}

    def floor():
        f = math.sqrt(sel.ball_volume)
        ratio = np.asarray(sel.gammas) / f
        return {"pass": bool(np.all(ratio >= 1 - 1e-9)), "floor": f, "ratios": ratio.tolist(),
                "min_ratio": float(ratio.min())}

    def ceiling():
        ratio = float(np.max(sel.gammas)) / math.sqrt(C_count_emp)
        return {"pass": None if kappa is None else bool(ratio <= kappa), "kappa": kappa,
                "C_count_emp": float(C_count_emp), "ratio": ratio}

    def triangular():
        J = np.asarray(sel.jacobian)
        d = len(sel.indices)
        if J.shape != (d, d):
            raise ValidationError(f"jacobian shape {J.shape} does not match {d} selected indices")
        diag = np.abs(np.diag(J))
        upper = np.abs(np.triu(J, 1))
        rel = float(np.max(upper / diag[:, None])) if J.shape[0] > 1 else 0.0
        return {"pass": bool(rel < 1e-6 and np.all(diag > 0)), "max_upper_over_diag": rel}

    def diagonal():
        c = sp_.c0 / 2 ** sel.relaxations_used
        diag = np.abs(np.diag(np.asarray(sel.jacobian)))
        ratio = diag * sp_.rho / c
        return {"pass": bool(np.all(ratio >= 1 - 1e-9)), "c": c, "min_ratio": float(ratio.min())}

    guarded("window", window)
    guarded("gamma_floor", floor)
    guarded("gamma_ceiling", ceiling)
    guarded("triangularity", triangular)
    guarded("diagonal", diagonal)
    out["all_pass"] = all(v.get("pass") is not False for v in out.values())
    return out


# --------------------------------------------------------------------------
# kernel bounds and sup-norm growth
# --------------------------------------------------------------------------

def regime_probes(domain, z: int, R: float, n: int = 10, delta0: float = DELTA0,
                  delta1: float = DELTA1, spread: float = 1.5, seed: int = 0) -> list:
    """Deterministic ``(w, t)`` pairs with ``sqrt(t)`` in ``(delta1 R / 2, delta1 R)``.

    ``|z - w|`` ranges up to ``spread * sqrt(t)`` and stays below ``delta0 R``.
    """
    rng = np.random.default_rng(seed)
    zc = domain.coords[z]
    probes = []
    for k in range(n):
        frac = (k + 0.5) / n
        sqrt_t = delta1 * R * (0.5 + 0.5 * frac)
        u = rng.standard_normal(domain.dim)
        u /= np.linalg.norm(u)
        r = min(spread * sqrt_t * ((3 * k) % n + 0.5) / n, 0.95 * delta0 * R)
        probes.append((domain.node_at(zc + r * u), sqrt_t ** 2))
    return probes


@dataclass(frozen=True, eq=False)
class KernelDiagnostics:
    rows: list
    growth: list
    summary: dict

    def to_dict(self) -> dict:
        return {"rows": self.rows, "growth": self.growth, "summary": self.summary}


def sup_norm_growth(eigs: EigenSystem, z: int, R: float, count: int = 100, b1: float = 0.5) -> list:
    """Per-eigenfunction growth points against the envelope ``(1 + x)^{1/2 + beta}``.

    ``x = lam_j R^2``; ``local`` is ``max |phi_j|`` on ``B(z, b1 R)`` over the
    root mean square on ``B(z, R)``; ``sup`` is the global maximum.
    """
    beta = math.ceil((eigs.dim - 2) / 4)
    outer = geodesic_distances(eigs.domain, z, R)
    inner = outer.subball(b1 * R)
    idx = np.flatnonzero(eigs.eigenvalues > 1e-8 * max(1.0, float(eigs.eigenvalues[-1])))[:count]
    ms = ball_mean_squares(eigs, outer.nodes, idx)
    V = eigs.eigenvectors[:, idx]
    local = np.max(np.abs(V[inner.nodes]), axis=0) / np.sqrt(np.maximum(ms, 1e-300))
    sup = np.max(np.abs(V), axis=0)
    rows = []
    for k, j in enumerate(idx):
        x = float(eigs.eigenvalues[j] * R * R)
        rows.append({"j": int(j), "lambda": float(eigs.eigenvalues[j]), "x": x, "local": float(local[k]),
                     "sup": float(sup[k]), "envelope": (1 + x) ** (0.5 + beta)})
    return rows


def growth_slope(rows: Sequence[dict]) -> float:
    """Least-squares slope of ``log sup|phi_j|`` against ``log(1 + lam_j)``."""
    if len(rows) < 2:
        return 0.0
    x = np.log1p([r["lambda"] for r in rows])
    y = np.log([r["sup"] for r in rows])
    return float(stats.linregress(x, y).slope)


def kernel_bound_diagnostics(eigs: EigenSystem, z: int, probes: Sequence, R: float,
                             delta0: float = DELTA0, delta1: float = DELTA1,
                             growth_count: int = 100) -> KernelDiagnostics:
    """Normalised kernel values at regime probes plus sup-norm growth points.

    Each row holds ``K_t(z, w) t^{d/2}`` and ``|grad_w K_t(z, w)| t^{d/2 + 1} / R``;
    probes outside the regime are flagged and still computed.
    """
    d = eigs.dim
    domain = eigs.domain
    zc = domain.coords[z]
    rows = []
    fields = {}
    for w, t in probes:
        w = int(w)
        if t not in fields:
            fields[t] = heat_kernel_field(eigs, t, z, acknowledge_tail=True)
        f = fields[t]
        dist = float(np.linalg.norm(domain.coords[w] - zc))
        sqrt_t = math.sqrt(t)
        in_regime = delta1 * R / 2 < sqrt_t < delta1 * R and dist < delta0 * R
        grad = np.linalg.norm(fd_gradient(domain, f, [w])[0])
        rows.append({
            "w": w, "t": float(t), "distance": dist,
            "kernel_scaled": float(f[w] * t ** (d / 2)),
            "gradient_scaled": float(grad * t ** (d / 2 + 1) / R),
            "status": "ok" if in_regime else "out of regime",
        })
    vals = np.array([r["kernel_scaled"] for r in rows if r["status"] == "ok"])
    growth = sup_norm_growth(eigs, z, R, growth_count)
    beta = math.ceil((d - 2) / 4)
    summary = {
        "n_probes": len(rows),
        "n_in_regime": int(len(vals)),
        "all_positive": bool(all(r["kernel_scaled"] > 0 for r in rows)),
        "kernel_ratio": float(vals.max() / vals.min()) if len(vals) and vals.min() > 0 else math.inf,
        "growth_slope": growth_slope(growth),
        "growth_slope_bound": 0.5 + beta + 0.3,
    }
    summary["kernel_ratio"] = _num(summary["kernel_ratio"])
    return KernelDiagnostics(rows, growth, summary)
