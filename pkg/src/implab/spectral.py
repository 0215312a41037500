"""Hessian spectra, the random-subspace intersection threshold and its Monte Carlo check.

A quadratic well ``0.5 w^T H w`` has an ``eps``-sublevel ellipsoid with
principal radii ``r_i = sqrt(2 eps / lambda_i)``.  A random affine subspace
of dimension ``d`` through a point at distance ``R`` from the minimum hits
that ellipsoid with high probability once ``d`` exceeds

    d* = D - sum_i r_i^2 / (R^2 + r_i^2).

Pruning a fraction ``f`` of ``D`` free weights leaves ``d = (1 - f) D``, so
the same condition caps the ratio at ``f_max = sum_i r_i^2 / (R^2 + r_i^2) / D``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from implab.exceptions import ConfigurationError, DimensionError
from implab.masks import Mask
from implab.model import Batch, Objective, ParamVector

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- #
#                         Stochastic Lanczos quadrature                       #
# --------------------------------------------------------------------------- #

@dataclass
class SpectralDensity:
    """Discrete spectral measure: Ritz ``nodes`` with nonnegative ``weights`` summing to one."""

    nodes: np.ndarray
    weights: np.ndarray
    iterations: int = 0
    probes: int = 1
    dim: int = 0
    truncated: list = field(default_factory=list)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64).ravel()
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if nodes.shape != weights.shape:
            raise DimensionError("nodes and weights must have the same length")
        if np.any(weights < 0):
            raise ValueError("density weights must be nonnegative")
        total = weights.sum()
        if not abs(total - 1.0) <= 1e-10:
            weights = weights / total
        order = np.argsort(nodes, kind="stable")
        self.nodes, self.weights = nodes[order], weights[order]
        if not self.dim:
            self.dim = nodes.size

    def moment(self, k: int = 1) -> float:
        return float(np.sum(self.weights * self.nodes ** k))

    def mass_between(self, lo: float, hi: float) -> float:
        sel = (self.nodes >= lo) & (self.nodes <= hi)
        return float(self.weights[sel].sum())

    def nearest_node(self, x: float) -> float:
        return float(self.nodes[np.argmin(np.abs(self.nodes - x))])

    def smoothed(self, grid, sigma: float) -> np.ndarray:
        """Gaussian-broadened density on ``grid``."""
        grid = np.asarray(grid, dtype=np.float64)
        diff = grid[:, None] - self.nodes[None, :]
        kern = np.exp(-0.5 * (diff / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
        return kern @ self.weights

    def wasserstein_to(self, eigenvalues) -> float:
        from scipy.stats import wasserstein_distance

        return float(wasserstein_distance(self.nodes, np.asarray(eigenvalues), u_weights=self.weights))

    def write_csv(self, path) -> None:
        from implab.tables import write_table

        rows = [dict(node=float(n), weight=float(w)) for n, w in zip(self.nodes, self.weights)]
        write_table(path, "density", rows, dict(dim=self.dim, iterations=self.iterations, probes=self.probes))

    @classmethod
    def read_csv(cls, path) -> "SpectralDensity":
        from implab.tables import read_table

        meta, rows = read_table(path, "density")
        return cls([float(r["node"]) for r in rows], [float(r["weight"]) for r in rows],
                   int(meta.get("iterations", 0)), int(meta.get("probes", 1)), int(meta.get("dim", 0)))


def lanczos(matvec, v0: np.ndarray, iterations: int, reorthogonalize: bool = True, tol: float = 1e-10):
    """Lanczos tridiagonalization started from ``v0``.

    Returns ``(alpha, beta)``; the recursion stops early when ``beta`` falls
    below ``tol`` times the running operator scale (an invariant subspace).
    """
    n = v0.size
    k_max = min(iterations, n)
    Q = np.zeros((k_max, n))
    alpha, beta = [], []
    q = v0 / np.linalg.norm(v0)
    q_prev = np.zeros(n)
    b_prev = 0.0
    scale = 0.0
    for k in range(k_max):
        Q[k] = q
        w = np.asarray(matvec(q), dtype=np.float64)
        a = float(q @ w)
        w = w - a * q - b_prev * q_prev
        if reorthogonalize:
            for _ in range(2):
                w -= Q[:k + 1].T @ (Q[:k + 1] @ w)
        alpha.append(a)
        b = float(np.linalg.norm(w))
        scale = max(scale, abs(a), b)
        if k == k_max - 1:
            break
        if b <= tol * max(scale, 1.0):
            break
        beta.append(b)
        q_prev, q, b_prev = q, w / b, b
    return np.array(alpha), np.array(beta)


def slq(matvec, dim: int, iterations: int = 64, probes: int = 4, seed: int = 0,
        probe: str = "rademacher") -> SpectralDensity:
    """Stochastic Lanczos quadrature estimate of the spectral density of a symmetric operator."""
    if probes < 1:
        raise ConfigurationError("need at least one probe vector")
    if iterations < 1 or iterations > dim:
        raise ConfigurationError(f"iterations must be in [1, {dim}]")
    rng = np.random.default_rng(seed)
    nodes, weights, truncated = [], [], []
    for p in range(probes):
        if probe == "rademacher":
            v = rng.choice([-1.0, 1.0], size=dim)
        else:
            v = rng.normal(size=dim)
        alpha, beta = lanczos(matvec, v, iterations)
        if alpha.size < iterations:
            truncated.append((p, alpha.size))
        if alpha.size == 1:
            theta, vecs = alpha.copy(), np.ones((1, 1))
        else:
            theta, vecs = scipy.linalg.eigh_tridiagonal(alpha, beta)
        nodes.append(theta)
        weights.append(vecs[0] ** 2 / probes)
    return SpectralDensity(np.concatenate(nodes), np.concatenate(weights), iterations, probes, dim, truncated)


def hutchinson_trace(matvec, dim: int, probes: int = 64, seed: int = 1) -> tuple[float, float]:
    """Rademacher trace estimate; returns ``(trace, standard error)``."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(probes):
        v = rng.choice([-1.0, 1.0], size=dim)
        samples.append(float(v @ matvec(v)))
    samples = np.array(samples)
    se = samples.std(ddof=1) / np.sqrt(probes) if probes > 1 else float("inf")
    return float(samples.mean()), float(se)


def masked_hvp(objective: Objective, params: ParamVector, batch: Batch, mask: Mask | None = None):
    """HVP restricted to the surviving prunable coordinates, as a map on compressed vectors."""
    layout = params.layout
    bits = np.ones(layout.n_prunable, dtype=bool) if mask is None else mask.bits
    idx = layout.prunable_index[bits]

    def matvec(u):
        full = np.zeros(layout.size)
        full[idx] = u
        return objective.hessian_vector_product(params, batch, full).values[idx]

    return matvec, idx.size


def slq_density(objective: Objective, params: ParamVector, batch: Batch, mask: Mask | None = None,
                iterations: int = 64, probes: int = 4, seed: int = 0) -> SpectralDensity:
    """Train-loss Hessian density over the axial subspace of ``mask``."""
    matvec, dim = masked_hvp(objective, params, batch, mask)
    if iterations > dim:
        raise ConfigurationError(f"{iterations} Lanczos iterations exceed the surviving dimension {dim}")
    return slq(matvec, dim, iterations, probes, seed)


def direction_curvature(objective: Objective, params: ParamVector, direction, batch: Batch) -> float:
    """Rayleigh quotient ``v^T H v / ||v||^2`` along ``direction``."""
    v = direction.values if isinstance(direction, ParamVector) else np.asarray(direction, dtype=np.float64)
    nv = float(v @ v)
    if nv == 0:
        raise ValueError("direction must be nonzero")
    hv = objective.hessian_vector_product(params, batch, v).values
    return float(v @ hv) / nv


def pruning_taylor(objective: Objective, params: ParamVector, mask: Mask, batch: Batch) -> dict:
    """Second-order estimate of the loss change from zeroing the weights outside ``mask``.

    With ``u = (1 - m) * w`` the change of ``g(m * w)`` is about
    ``-u^T grad + 0.5 u^T H u``.
    """
    u = params.values - mask.apply(params).values
    g = objective.gradient(params, batch).values
    hu = objective.hessian_vector_product(params, batch, u).values
    first, curv = float(u @ g), float(u @ hu)
    return dict(gradient_term=first, curvature_term=curv, predicted_change=-first + 0.5 * curv,
                actual_change=objective.forward_loss(mask.apply(params), batch)[0]
                - objective.forward_loss(params, batch)[0])


# --------------------------------------------------------------------------- #
#                       Intersection threshold (closed form)                  #
# --------------------------------------------------------------------------- #

@dataclass
class QuadraticWell:
    eigenvalues: np.ndarray
    eps: float
    R: float

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64).ravel()
        if self.eps <= 0:
            raise ValueError("sublevel eps must be positive")
        if self.R < 0:
            raise ValueError("offset distance R must be nonnegative")

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    @property
    def radii(self) -> np.ndarray:
        """Principal radii; infinite along flat or negative-curvature directions."""
        lam = self.eigenvalues
        with np.errstate(divide="ignore"):
            return np.where(lam > 0, np.sqrt(2.0 * self.eps / np.where(lam > 0, lam, 1.0)), np.inf)

    @classmethod
    def isotropic(cls, dim: int, radius: float, R: float, eps: float = 0.5) -> "QuadraticWell":
        return cls(np.full(dim, 2.0 * eps / radius ** 2), eps, R)


@dataclass
class ThresholdPrediction:
    d_star: float
    f_max: float
    dim: float
    R: float
    eps: float
    n_nonpositive: float = 0
    caveat: str = ""

    def to_dict(self) -> dict:
        return dict(d_star=self.d_star, f_max=self.f_max, dim=self.dim, R=self.R, eps=self.eps,
                    n_nonpositive=self.n_nonpositive, caveat=self.caveat)


def _hit_fractions(eigenvalues, eps, R, multiplicity=None) -> tuple[np.ndarray, np.ndarray]:
    lam = np.asarray(eigenvalues, dtype=np.float64)
    pos = lam > 0
    frac = np.ones_like(lam)
    if R == 0:
        return frac, ~pos
    r2 = 2.0 * eps / lam[pos]
    frac[pos] = r2 / (R * R + r2)
    return frac, ~pos


def threshold_dimension(well: QuadraticWell) -> ThresholdPrediction:
    """Closed-form intersection threshold ``d* = D - sum r_i^2 / (R^2 + r_i^2)``.

    Non-positive eigenvalues count as infinitely wide directions (term 1) and
    are reported in ``n_nonpositive``.
    """
    frac, nonpos = _hit_fractions(well.eigenvalues, well.eps, well.R)
    D = well.dim
    d_star = float(D - frac.sum()) if well.R > 0 else 0.0
    n_bad = int(nonpos.sum())
    caveat = f"{n_bad} non-positive eigenvalues treated as flat" if n_bad else ""
    return ThresholdPrediction(d_star, 1.0 - d_star / D, D, well.R, well.eps, n_bad, caveat)


def threshold_from_density(density: SpectralDensity, eps: float, R: float, dim: int | None = None) -> ThresholdPrediction:
    """Same threshold with each Ritz node standing for ``weight * dim`` equal eigenvalues."""
    D = density.dim if dim is None else dim
    if eps <= 0:
        raise ValueError("eps must be positive")
    frac, nonpos = _hit_fractions(density.nodes, eps, R)
    kept = float(np.sum(density.weights * frac)) if R > 0 else 1.0
    d_star = D * (1.0 - kept)
    n_bad = float(np.sum(density.weights[nonpos]) * D)
    caveat = f"{n_bad:.1f} (weighted) non-positive eigenvalues treated as flat" if n_bad else ""
    return ThresholdPrediction(d_star, kept, D, R, eps, n_bad, caveat)


def f_max_curve(density: SpectralDensity, eps: float, R_values) -> np.ndarray:
    """Largest pruning ratio predicted to stay connected, for each projection distance."""
    return np.array([threshold_from_density(density, eps, float(R)).f_max for R in np.atleast_1d(R_values)])


@dataclass
class PruningPrediction:
    R_grid: np.ndarray
    f_max_grid: np.ndarray
    ratios: np.ndarray
    R: np.ndarray
    f_max: np.ndarray
    predicted_match: np.ndarray
    boundary_ratio: float

    def rows(self):
        return [dict(ratio=float(f), R=float(r), f_max=float(m), predicted_match=bool(p))
                for f, r, m, p in zip(self.ratios, self.R, self.f_max, self.predicted_match)]


def max_pruning_ratio(density: SpectralDensity, eps_train: float, ratios, R_measured, R_grid=None) -> PruningPrediction:
    """Predict which pruning ratios keep the projection within reach of the sublevel set.

    ``R_measured[i]`` is the projection distance actually produced by pruning a
    fraction ``ratios[i]``.  A ratio is predicted to match when it is below
    ``f_max(R)``; ``boundary_ratio`` is where ``f = f_max(R(f))`` by linear
    interpolation (``nan`` if no crossing).
    """
    if eps_train <= 0:
        raise ValueError("eps_train must be positive; the level is already above the matching loss")
    ratios = np.asarray(ratios, dtype=np.float64)
    R_measured = np.asarray(R_measured, dtype=np.float64)
    fm = f_max_curve(density, eps_train, R_measured)
    if R_grid is None:
        top = max(float(R_measured.max()) if R_measured.size else 1.0, 1e-12) * 2
        R_grid = np.linspace(0.0, top, 101)
    grid_f = f_max_curve(density, eps_train, R_grid)
    gap = fm - ratios
    boundary = float("nan")
    order = np.argsort(ratios)
    for a, b in zip(order[:-1], order[1:]):
        if gap[a] >= 0 > gap[b]:
            boundary = float(ratios[a] + gap[a] / (gap[a] - gap[b]) * (ratios[b] - ratios[a]))
            break
    return PruningPrediction(np.asarray(R_grid), grid_f, ratios, R_measured, fm, ratios < fm, boundary)


@dataclass
class MatchingLossFit:
    slope: float
    intercept: float
    loss_matching: float
    eps_train: float
    residual_std: float
    r_value: float
    n: int
    flagged: bool

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def estimate_matching_loss_threshold(train_losses, test_errors, target_error: float, level_loss: float) -> MatchingLossFit:
    """Fit ``train_loss = a + b * test_error`` over probe prunings.

    ``loss_matching`` is the fitted loss at ``target_error`` and
    ``eps_train = loss_matching - level_loss``.  A nonpositive ``eps_train``
    is flagged: the level already sits above the matching loss.
    """
    from scipy.stats import linregress

    x = np.asarray(test_errors, dtype=np.float64)
    y = np.asarray(train_losses, dtype=np.float64)
    if x.size < 3:
        raise ValueError("need at least three probe prunings for the fit")
    if np.ptp(x) == 0:
        raise ValueError("probe errors have zero variance; the fit is degenerate")
    fit = linregress(x, y)
    resid = y - (fit.intercept + fit.slope * x)
    loss_matching = float(fit.intercept + fit.slope * target_error)
    eps = loss_matching - float(level_loss)
    dof = max(x.size - 2, 1)
    return MatchingLossFit(float(fit.slope), float(fit.intercept), loss_matching, eps,
                           float(np.sqrt(resid @ resid / dof)), float(fit.rvalue), int(x.size), eps <= 0)


# --------------------------------------------------------------------------- #
#                          Monte Carlo intersection oracle                    #
# --------------------------------------------------------------------------- #

@dataclass
class OracleResult:
    probability: float
    hits: int
    trials: int
    rank_deficient: int = 0


def _random_offset(rng, D, R):
    u = rng.normal(size=D)
    return R * u / np.linalg.norm(u)


def _basis(rng, D, d, axial):
    if axial:
        A = np.zeros((D, d))
        A[rng.choice(D, size=d, replace=False), np.arange(d)] = 1.0
        return A
    A = rng.normal(size=(D, d))
    return A / np.linalg.norm(A, axis=0)


def oracle_intersects(well: QuadraticWell, d: int, trials: int = 200, seed: int = 0,
                      axial: bool = False) -> OracleResult:
    """Empirical probability that a random ``d``-dimensional affine subspace hits the sublevel set.

    Each trial draws unit-norm Gaussian columns ``A`` (or ``d`` random
    coordinate axes when ``axial``), an offset ``w0`` at distance ``R`` in a
    uniform direction, and minimizes ``0.5 (w0 + A y)^T H (w0 + A y)`` from
    the normal equations ``A^T H A y = -A^T H w0``.
    """
    lam = well.eigenvalues
    D = lam.size
    if not 0 <= d <= D:
        raise ValueError(f"subspace dimension must be in [0, {D}]")
    if np.any(lam < 0):
        raise ValueError("the oracle needs a positive semidefinite well")
    rng = np.random.default_rng(seed)
    hits = deficient = 0
    for _ in range(trials):
        w0 = _random_offset(rng, D, well.R)
        Hw0 = lam * w0
        value = 0.5 * float(w0 @ Hw0)
        if d:
            A = _basis(rng, D, d, axial)
            G = A.T @ (lam[:, None] * A)
            b = A.T @ Hw0
            y, _, rank, _ = np.linalg.lstsq(G, -b, rcond=None)
            if rank < d:
                deficient += 1
            value = value + float(b @ y) + 0.5 * float(y @ G @ y)
        hits += value <= well.eps
    if deficient:
        log.info("%d of %d trials had a rank-deficient restricted Hessian", deficient, trials)
    return OracleResult(hits / trials, hits, trials, deficient)


@dataclass
class PhaseDiagram:
    d: np.ndarray
    probability: np.ndarray
    trials: int
    crossing: float
    d_star: float

    def rows(self):
        return [dict(d=int(d), probability=float(p), trials=self.trials) for d, p in zip(self.d, self.probability)]


def crossing_point(d, probability, level: float = 0.5) -> float:
    """First ``d`` where the probability reaches ``level``, linearly interpolated."""
    d = np.asarray(d, dtype=np.float64)
    p = np.asarray(probability, dtype=np.float64)
    above = np.flatnonzero(p >= level)
    if above.size == 0:
        return float("nan")
    k = above[0]
    if k == 0:
        return float(d[0])
    p0, p1 = p[k - 1], p[k]
    return float(d[k - 1] + (level - p0) / (p1 - p0) * (d[k] - d[k - 1]))


def phase_diagram(well: QuadraticWell, d_values=None, trials: int = 200, seed: int = 0,
                  axial: bool = False) -> PhaseDiagram:
    """Intersection probability versus subspace dimension, with its 0.5 crossing.

    Every trial draws one full basis and scores all nested prefixes at once:
    after a QR factorization of ``H^{1/2} A`` the residual of the restricted
    least-squares problem for the first ``d`` columns is a running sum, so the
    per-trial hit indicator is monotone in ``d`` by construction.
    """
    lam = well.eigenvalues
    D = lam.size
    if np.any(lam < 0):
        raise ValueError("the oracle needs a positive semidefinite well")
    d_values = np.arange(D + 1) if d_values is None else np.asarray(sorted(set(int(v) for v in d_values)))
    d_max = int(d_values.max())
    sq = np.sqrt(lam)
    rng = np.random.default_rng(seed)
    hits = np.zeros(d_values.size, dtype=np.int64)
    for _ in range(trials):
        w0 = _random_offset(rng, D, well.R)
        z = sq * w0
        total = float(z @ z)
        if d_max:
            B = sq[:, None] * _basis(rng, D, d_max, axial)
            Q, Rr = np.linalg.qr(B)
            # zero diagonal entries of R mark columns adding no new direction
            c = (Q.T @ z) * (np.abs(np.diag(Rr)) > 1e-12 * max(np.abs(Rr).max(), 1e-300))
            explained = np.concatenate([[0.0], np.cumsum(c * c)])
        else:
            explained = np.zeros(1)
        residual = np.maximum(total - explained[d_values], 0.0)
        hits += 0.5 * residual <= well.eps
    prob = hits / trials
    return PhaseDiagram(d_values, prob, trials, crossing_point(d_values, prob), threshold_dimension(well).d_star)
