"""SVG figures rendered from the CSV tables.

Output is deterministic: the SVG id salt is fixed and no date is embedded.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from implab.tables import read_table  # noqa: E402

log = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "implab"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _col(rows, name):
    return np.array([r[name] for r in rows], dtype=np.float64)


def plot_path(rows, path, eps=None):
    fig, ax = plt.subplots(figsize=(4, 3))
    g, e = _col(rows, "gamma"), _col(rows, "test_error")
    ax.plot(g, e, marker="o")
    if eps is not None:
        ax.axhline(min(e[0], e[-1]) + eps, ls=":", c="k", lw=1)
    ax.set_xlabel("interpolation")
    ax.set_ylabel("test error")
    return _save(fig, path)


def plot_matrix(rows, path, eps=None):
    n = int(max(r["i"] for r in rows)) + 1
    M = np.zeros((n, n))
    for r in rows:
        M[int(r["i"]), int(r["j"])] = r["barrier"]
    fig, ax = plt.subplots(figsize=(4, 3.4))
    # darkest end of the colorbar sits at the matching tolerance
    im = ax.imshow(M, cmap="Blues_r", vmin=0.0, vmax=eps if eps else None, origin="upper")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("level")
    ax.set_ylabel("level")
    return _save(fig, path)


def plot_slice(rows, path, threshold=None, anchors=None):
    xs = np.unique(_col(rows, "x"))
    ys = np.unique(_col(rows, "y"))
    Z = np.zeros((ys.size, xs.size))
    xi = {v: i for i, v in enumerate(xs)}
    yi = {v: i for i, v in enumerate(ys)}
    for r in rows:
        Z[yi[r["y"]], xi[r["x"]]] = r["error"]
    fig, ax = plt.subplots(figsize=(4, 3.4))
    cs = ax.contourf(xs, ys, Z, levels=20, cmap="viridis")
    fig.colorbar(cs, ax=ax)
    if threshold is not None and Z.min() < threshold < Z.max():
        ax.contour(xs, ys, Z, levels=[threshold], colors="k", linestyles=":")
    if anchors is not None:
        a = np.asarray(anchors)
        ax.scatter(a[:, 0], a[:, 1], c="w", edgecolors="k", zorder=3)
    return _save(fig, path)


def plot_cdf(rows, path, threshold=None):
    fig, ax = plt.subplots(figsize=(4, 3))
    for variant in sorted({r["variant"] for r in rows}):
        sel = [r for r in rows if r["variant"] == variant]
        levels = sorted({r["level"] for r in sel})
        last = [r for r in sel if r["level"] == levels[-1]]
        ax.step(_col(last, "magnitude"), _col(last, "cdf"), where="post", label=str(variant))
    if threshold is not None:
        ax.axvline(threshold, ls=":", c="k", lw=1)
    ax.set_xlabel("|w| / mean |w|")
    ax.set_ylabel("CDF")
    ax.legend()
    return _save(fig, path)


def plot_phase(rows, path, d_star=None):
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(_col(rows, "d"), _col(rows, "probability"), marker=".")
    if d_star is not None:
        ax.axvline(d_star, ls=":", c="k", lw=1)
    ax.axhline(0.5, ls="--", c="grey", lw=0.8)
    ax.set_xlabel("subspace dimension")
    ax.set_ylabel("intersection probability")
    return _save(fig, path)


def plot_density(rows, path):
    fig, ax = plt.subplots(figsize=(4, 3))
    nodes, w = _col(rows, "node"), _col(rows, "weight")
    ax.vlines(nodes, 0, w)
    ax.set_yscale("log")
    ax.set_xlabel("eigenvalue")
    ax.set_ylabel("weight")
    return _save(fig, path)


def plot_imp(rows, path, threshold=None):
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(_col(rows, "sparsity"), _col(rows, "test_error"), marker="o", gid="series")
    if threshold is not None:
        ax.axhline(threshold, ls=":", c="k", lw=1)
    ax.set_xlabel("sparsity")
    ax.set_ylabel("test error")
    return _save(fig, path)


def plot_robustness(rows, path, eps=None):
    fig, ax = plt.subplots(figsize=(4, 3))
    s = _col(rows, "sparsity")
    ax.plot(s, _col(rows, "imp_barrier"), marker="o", label="IMP")
    ax.plot(s, _col(rows, "perturbed_barrier"), marker="s", label="random perturbation")
    if eps is not None:
        ax.axhline(eps, ls=":", c="k", lw=1)
    ax.set_xlabel("sparsity")
    ax.set_ylabel("error barrier")
    ax.legend()
    return _save(fig, path)


def plot_adaptive(rows, path):
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(_col(rows, "level"), _col(rows, "sparsity"), marker="o")
    ax.set_xlabel("level")
    ax.set_ylabel("sparsity")
    return _save(fig, path)


def plot_random_pruning(rows, path, R_curve=None, f_curve=None):
    """Measured outcomes of random prunings in the (R, ratio) plane: circles match, crosses fail."""
    fig, ax = plt.subplots(figsize=(4, 3))
    hit = [r for r in rows if r["measured_match"]]
    miss = [r for r in rows if not r["measured_match"]]
    if hit:
        ax.scatter(_col(hit, "R"), _col(hit, "ratio"), marker="o", facecolors="none", edgecolors="g")
    if miss:
        ax.scatter(_col(miss, "R"), _col(miss, "ratio"), marker="x", c="r")
    ax.plot(_col(rows, "R"), _col(rows, "f_max"), ls="", marker="_", c="k")
    if R_curve is not None and f_curve is not None:
        ax.plot(R_curve, f_curve, c="k", lw=1)
    ax.set_xlabel("R")
    ax.set_ylabel("pruning ratio")
    return _save(fig, path)


def plot_curvature(rows, path):
    fig, ax = plt.subplots(figsize=(4, 3))
    levels = sorted({r["level"] for r in rows})
    rand = [_col([r for r in rows if r["level"] == L and r["kind"] == "random"], "curvature") for L in levels]
    mag = [_col([r for r in rows if r["level"] == L and r["kind"] == "magnitude"], "curvature") for L in levels]
    if any(v.size for v in rand):
        ax.boxplot([v if v.size else [np.nan] for v in rand], positions=levels)
    ax.plot(levels, [np.median(v) if v.size else np.nan for v in mag], marker="*", ls="", c="r", ms=10)
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_xlabel("level")
    ax.set_ylabel("curvature")
    return _save(fig, path)


_RENDERERS = {
    "path": (plot_path, ("eps",)),
    "matrix": (plot_matrix, ("eps",)),
    "slice": (plot_slice, ("threshold", "anchors")),
    "cdf": (plot_cdf, ("threshold",)),
    "phase": (plot_phase, ("d_star",)),
    "density": (plot_density, ()),
    "imp": (plot_imp, ("threshold",)),
    "robustness": (plot_robustness, ("eps",)),
    "adaptive": (plot_adaptive, ()),
    "random_pruning": (plot_random_pruning, ("R_curve", "f_curve")),
    "curvature": (plot_curvature, ()),
}


def render_plots(csv_path, out_path=None) -> Path | None:
    """Render one table to SVG next to it; empty or unplottable tables are skipped with a warning."""
    meta, rows = read_table(csv_path)
    schema = meta["schema"]
    if not rows:
        log.warning("%s is empty; nothing to plot", csv_path)
        return None
    if schema not in _RENDERERS:
        log.warning("no plot for schema %r", schema)
        return None
    fn, keys = _RENDERERS[schema]
    out = Path(out_path) if out_path else Path(csv_path).with_suffix(".svg")
    kwargs = {k: meta[k] for k in keys if meta.get(k) is not None}
    return fn(rows, out, **kwargs)
