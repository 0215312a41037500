"""Geometry of the error landscape: barriers, pairwise matrices, plane slices,
LCS-set membership, the onset of linear mode connectivity and perturbation robustness."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from implab.data import Dataset
from implab.exceptions import DimensionError
from implab.masks import Mask
from implab.model import Objective, ParamVector
from implab.train import Checkpoint, TrainSchedule, initial_checkpoint, train

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(k / 10 for k in range(11))


class Evaluator:
    """Maps parameters to ``(train loss, test error)``.

    Networks use the full train split for the loss and the full test split
    for the error.  Objectives without data (the quadratic stand-in) report
    their value for both.
    """

    def __init__(self, objective: Objective, dataset: Dataset | None = None):
        self.objective = objective
        self.dataset = dataset
        self.calls = 0

    def __call__(self, params: ParamVector) -> tuple[float, float]:
        self.calls += 1
        if self.dataset is None:
            v = self.objective.forward_loss(params, None)[0]
            return v, v
        loss = self.objective.forward_loss(params, self.dataset.train)[0]
        error = self.objective.forward_loss(params, self.dataset.test)[1]
        return loss, error

    def error(self, params: ParamVector) -> float:
        return self(params)[1]


def _grid(grid) -> np.ndarray:
    g = np.unique(np.concatenate([np.asarray(grid, dtype=np.float64), [0.0, 1.0]]))
    if g[0] < 0 or g[-1] > 1:
        raise ValueError("interpolation grid must lie in [0, 1]")
    return g


def _point(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    # measured from the nearer endpoint so that swapping endpoints mirrors the path
    if gamma == 0:
        return a.copy()
    if gamma == 1:
        return b.copy()
    if gamma <= 0.5:
        return a + gamma * (b - a)
    return b + (1.0 - gamma) * (a - b)


def _chord(ea: float, eb: float, gamma: float) -> float:
    if gamma <= 0.5:
        return ea + gamma * (eb - ea)
    return eb + (1.0 - gamma) * (ea - eb)


@dataclass
class BarrierPath:
    gamma: np.ndarray
    train_loss: np.ndarray
    test_error: np.ndarray
    barrier: float
    raw_barrier: float
    loss_barrier: float

    @property
    def max_error(self) -> float:
        return float(self.test_error.max())

    def rows(self):
        return [dict(gamma=float(g), train_loss=float(l), test_error=float(e))
                for g, l, e in zip(self.gamma, self.train_loss, self.test_error)]


def _excess(values: np.ndarray, gamma: np.ndarray) -> float:
    return float(max(v - _chord(values[0], values[-1], g) for v, g in zip(values, gamma)))


def interpolate_errors(w: ParamVector, w2: ParamVector, evaluate, grid=DEFAULT_GRID) -> BarrierPath:
    """Evaluate the straight segment from ``w`` to ``w2``; every parameter is interpolated.

    ``barrier`` is the largest excess of the test error over the chord
    between the endpoint errors, clamped at zero (``raw_barrier`` keeps the
    sign).  ``loss_barrier`` is the same for the train loss.
    """
    if w.size != w2.size:
        raise DimensionError("endpoints have different dimensions")
    g = _grid(grid)
    a, b = w.values, w2.values
    same = np.array_equal(a, b)
    losses, errors = np.empty(g.size), np.empty(g.size)
    for k, gamma in enumerate(g):
        if same and k:
            losses[k], errors[k] = losses[0], errors[0]
            continue
        losses[k], errors[k] = evaluate(w.replace(_point(a, b, gamma)))
    raw = _excess(errors, g)
    return BarrierPath(g, losses, errors, max(raw, 0.0), raw, max(_excess(losses, g), 0.0))


def error_barrier(w: ParamVector, w2: ParamVector, evaluate, grid=DEFAULT_GRID) -> float:
    return interpolate_errors(w, w2, evaluate, grid).barrier


@dataclass
class BarrierMatrix:
    max_error: np.ndarray
    barrier: np.ndarray
    errors: np.ndarray

    def rows(self, which: str = "barrier"):
        M = self.barrier if which == "barrier" else self.max_error
        n = M.shape[0]
        return [dict(i=i, j=j, barrier=float(M[i, j])) for i in range(n) for j in range(n)]


def barrier_matrix(solutions, evaluate, grid=DEFAULT_GRID) -> BarrierMatrix:
    """Pairwise path statistics between solutions.

    ``max_error[i, j]`` is the largest test error on the segment (its
    diagonal is each solution's own error) and ``barrier[i, j]`` the excess
    over the chord.  Each unordered pair is evaluated once.
    """
    n = len(solutions)
    errors = np.array([evaluate(s)[1] for s in solutions])
    M = np.diag(errors).astype(np.float64)
    B = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            p = interpolate_errors(solutions[i], solutions[j], evaluate, grid)
            M[i, j] = M[j, i] = p.max_error
            B[i, j] = B[j, i] = p.barrier
    return BarrierMatrix(M, B, errors)


def concatenated_path(solutions, evaluate, grid=DEFAULT_GRID) -> list[BarrierPath]:
    """Piecewise-linear path through consecutive solutions (one segment per adjacent pair)."""
    return [interpolate_errors(a, b, evaluate, grid) for a, b in zip(solutions[:-1], solutions[1:])]


# --------------------------------------------------------------------------- #

@dataclass
class PlaneSlice:
    anchors: tuple
    basis: np.ndarray
    anchor_coords: np.ndarray
    x: np.ndarray
    y: np.ndarray
    error: np.ndarray
    anchor_errors: np.ndarray
    threshold: float | None = None

    def rows(self):
        return [dict(x=float(self.x[i]), y=float(self.y[j]), error=float(self.error[j, i]))
                for j in range(self.y.size) for i in range(self.x.size)]


def _closest_in_triangle(p, tri):
    a, b, c = tri
    v0, v1, v2 = b - a, c - a, p - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    if v >= 0 and w >= 0 and v + w <= 1:
        return p
    best, best_d = None, np.inf
    for s, t in ((a, b), (b, c), (c, a)):
        e = t - s
        q = s + np.clip((p - s) @ e / (e @ e), 0.0, 1.0) * e
        dist = (p - q) @ (p - q)
        if dist < best_d:
            best, best_d = q, dist
    return best


def plane_slice(a: ParamVector, b: ParamVector, c: ParamVector, evaluate, resolution: int = 51,
                margin: float = 0.25, threshold: float | None = None, tol: float = 1e-9) -> PlaneSlice:
    """Error on a ``resolution x resolution`` grid in the plane through three anchors.

    The in-plane basis comes from Gram-Schmidt on ``b - a`` and ``c - a``;
    ``a`` sits at the origin.  Outside the anchor triangle only prunable
    coordinates extrapolate: non-prunable ones take the value at the nearest
    point of the triangle.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    u1 = b.values - a.values
    u2 = c.values - a.values
    n1 = np.linalg.norm(u1)
    if n1 == 0:
        raise ValueError("anchors are degenerate: a and b coincide")
    e1 = u1 / n1
    r2 = u2 - (u2 @ e1) * e1
    n2 = np.linalg.norm(r2)
    if n2 <= tol * max(np.linalg.norm(u2), n1):
        raise ValueError("anchors are collinear; they do not span a plane")
    e2 = r2 / n2
    coords = np.array([[0.0, 0.0], [n1, 0.0], [u2 @ e1, n2]])
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = hi - lo
    xs = np.linspace(lo[0] - margin * span[0], hi[0] + margin * span[0], resolution)
    ys = np.linspace(lo[1] - margin * span[1], hi[1] + margin * span[1], resolution)
    fixed = ~a.layout.prunable
    origin = a.values

    def at(p):
        vals = origin + p[0] * e1 + p[1] * e2
        if fixed.any():
            q = _closest_in_triangle(p, coords)
            if q is not p:
                vals[fixed] = (origin + q[0] * e1 + q[1] * e2)[fixed]
        return a.replace(vals)

    err = np.empty((resolution, resolution))
    for j, yv in enumerate(ys):
        for i, xv in enumerate(xs):
            err[j, i] = evaluate(at(np.array([xv, yv])))[1]
    anchor_err = np.array([evaluate(at(p))[1] for p in coords])
    return PlaneSlice((a, b, c), np.stack([e1, e2]), coords, xs, ys, err, anchor_err, threshold)


# --------------------------------------------------------------------------- #

@dataclass
class LcsResult:
    member: bool
    candidate_error: float
    reference_error: float
    barrier: float
    path: BarrierPath = field(repr=False)

    def __bool__(self):
        return self.member


def in_lcs_set(candidate: ParamVector, reference: ParamVector, eps: float, evaluate,
               grid=DEFAULT_GRID) -> LcsResult:
    """Membership in the linearly connected sublevel set anchored at ``reference``.

    Requires ``E(candidate) <= E(reference) + eps`` and an error barrier of at
    most ``eps`` on the segment to the reference.  Membership is always
    judged against the reference alone.
    """
    path = interpolate_errors(reference, candidate, evaluate, grid)
    e_ref, e_cand = path.test_error[0], path.test_error[-1]
    ok = bool(e_cand <= e_ref + eps and path.raw_barrier <= eps)
    return LcsResult(ok, float(e_cand), float(e_ref), path.barrier, path)


def uniform_sphere(dim: int, radius: float, seed) -> np.ndarray:
    """Uniform sample from the sphere of ``radius`` in ``dim`` dimensions."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if radius == 0:
        return np.zeros(dim)
    g = rng.normal(size=dim)
    return g * (radius / np.linalg.norm(g))


NOT_FOUND = None


@dataclass
class OnsetResult:
    tau: int | None
    rows: list
    monotone: bool

    @property
    def found(self) -> bool:
        return self.tau is not NOT_FOUND


def onset_of_lmc(net, dataset: Dataset, schedule: TrainSchedule, candidate_steps, eps: float,
                 mask: Mask | None = None, seed: int = 0, noise_seeds=(1, 2), grid=DEFAULT_GRID,
                 evaluate=None) -> OnsetResult:
    """First candidate rewind step from which independently noised runs stay linearly connected.

    One trajectory from ``seed`` supplies the checkpoints; each candidate is
    trained to ``T`` under every seed in ``noise_seeds`` and the largest
    pairwise barrier is compared against ``eps``.  Returns ``tau=None`` when
    no candidate qualifies.
    """
    if len(noise_seeds) < 2:
        raise ValueError("need at least two noise seeds")
    evaluate = evaluate or Evaluator(net, dataset)
    steps = sorted(int(t) for t in candidate_steps)
    if steps and (steps[0] < 0 or steps[-1] > schedule.total_steps):
        raise ValueError("candidate steps must lie in [0, T]")
    ck = initial_checkpoint(net, seed, data_seed=seed)
    if mask is not None:
        ck = ck.masked(mask)
    rows = []
    for tau in steps:
        ck = train(net, dataset, ck, mask, schedule, tau - ck.step)
        ends = [train(net, dataset, ck, mask, schedule, schedule.total_steps - tau, noise_seed=s).params
                for s in noise_seeds]
        b = max(error_barrier(ends[i], ends[j], evaluate, grid)
                for i in range(len(ends)) for j in range(i + 1, len(ends)))
        rows.append(dict(tau=tau, barrier=b, stable=b < eps))
        log.info("tau=%d barrier=%.5f", tau, b)
    stable = [r["stable"] for r in rows]
    first = next((r["tau"] for r in rows if r["stable"]), NOT_FOUND)
    monotone = True
    if first is not NOT_FOUND:
        k = stable.index(True)
        monotone = all(stable[k:])
        if not monotone:
            log.warning("stability is not monotone past tau=%d", first)
    return OnsetResult(first, rows, monotone)


@dataclass
class RobustnessResult:
    radius: float
    barrier: float
    perturbed: ParamVector = field(repr=False)
    path: BarrierPath = field(repr=False)


def perturbation_robustness(net, dataset: Dataset, pruned_rewind: Checkpoint, mask: Mask, radius: float,
                            schedule: TrainSchedule, reference: ParamVector, seed: int, noise_seed=None,
                            steps: int | None = None, grid=DEFAULT_GRID, evaluate=None) -> RobustnessResult:
    """Train a randomly perturbed copy of the pruned rewind point and measure its barrier to ``reference``.

    The perturbation is uniform on the sphere of ``radius`` inside the
    surviving prunable coordinates of ``mask``; training runs to ``T`` (or
    ``steps``) with ``noise_seed`` so a zero radius reproduces the reference run.
    """
    evaluate = evaluate or Evaluator(net, dataset)
    layout = pruned_rewind.params.layout
    idx = layout.prunable_index[mask.bits]
    v = np.zeros(layout.size)
    v[idx] = uniform_sphere(idx.size, radius, seed)
    start = pruned_rewind.with_params(pruned_rewind.params + v)
    n = schedule.total_steps - start.step if steps is None else steps
    out = train(net, dataset, start, mask, schedule, n, noise_seed=noise_seed).params
    path = interpolate_errors(reference, out, evaluate, grid)
    return RobustnessResult(float(radius), path.barrier, out, path)
