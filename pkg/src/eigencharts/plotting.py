"""Report figures rendered to files with the Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_spectrum(path, eigenvalues, weyl_rows=()) -> None:
    """Eigenvalues against index, with the Weyl counts as steps."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    lam = np.asarray(eigenvalues)
    ax.plot(np.arange(len(lam)), lam, ".", ms=3, label="eigenvalues")
    for row in weyl_rows:
        ax.plot(row["count"], row["threshold"], "s", color="C3")
    ax.set_xlabel("index j")
    ax.set_ylabel(r"$\lambda_j$")
    ax.legend(loc="upper left")
    _save(fig, path)


def plot_kernel_probes(path, rows) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    r = np.array([row["distance"] / np.sqrt(row["t"]) for row in rows])
    k = np.array([row["kernel_scaled"] for row in rows])
    ok = np.array([row["status"] == "ok" for row in rows])
    ax.semilogy(r[ok], k[ok], "o", label="in regime")
    if (~ok).any():
        ax.semilogy(r[~ok], k[~ok], "x", label="out of regime")
    ax.set_xlabel(r"$|z-w| / \sqrt{t}$")
    ax.set_ylabel(r"$K_t(z,w)\, t^{d/2}$")
    ax.legend()
    _save(fig, path)


def plot_growth(path, rows) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.array([row["x"] for row in rows])
    ax.loglog(1 + x, [row["sup"] for row in rows], ".", label=r"$\|\varphi_j\|_\infty$")
    ax.loglog(1 + x, [row["local"] for row in rows], ".", label="local ratio")
    ax.loglog(1 + x, [row["envelope"] for row in rows], "-", label="envelope")
    ax.set_xlabel(r"$1 + \lambda_j R^2$")
    ax.legend()
    _save(fig, path)


def plot_chart(path, coords, values, title: str = "") -> None:
    """Ball nodes beside their images, coloured by the first coordinate."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.8))
    c = np.asarray(coords)
    v = np.asarray(values)
    a.scatter(c[:, 0], c[:, 1], c=c[:, 0], s=6, cmap="viridis")
    a.set_aspect("equal")
    a.set_title("ball")
    b.scatter(v[:, 0], v[:, 1] if v.shape[1] > 1 else np.zeros(len(v)), c=c[:, 0], s=6, cmap="viridis")
    b.set_title(title or "image")
    _save(fig, path)


def plot_seed_distortion(path, distortions) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    d = np.asarray(distortions, dtype=float)
    ax.bar(np.arange(len(d)), np.where(np.isfinite(d), d, np.nan))
    ax.set_xlabel("seed")
    ax.set_ylabel("distortion")
    _save(fig, path)
