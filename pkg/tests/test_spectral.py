import numpy as np
import pytest

from implab.masks import Mask
from implab.model import ModelSpec, Network, ParamVector, QuadraticObjective
from implab.spectral import (QuadraticWell, SpectralDensity, crossing_point, direction_curvature,
                             estimate_matching_loss_threshold, f_max_curve, hutchinson_trace, lanczos,
                             max_pruning_ratio, oracle_intersects, phase_diagram, pruning_taylor, slq,
                             slq_density, threshold_dimension, threshold_from_density)


def test_isotropic_threshold_is_half():
    well = QuadraticWell.isotropic(100, radius=2.0, R=2.0)
    assert threshold_dimension(well).d_star == pytest.approx(50.0, abs=1e-12)


def test_zero_offset_threshold():
    assert threshold_dimension(QuadraticWell([1.0, 2.0], 0.5, 0.0)).d_star == 0.0


def test_hand_example():
    pred = threshold_dimension(QuadraticWell([1.0, 1.0, 4.0], 0.5, 1.0))
    assert pred.d_star == pytest.approx(1.8, abs=1e-15)
    assert pred.f_max == pytest.approx(0.4, abs=1e-15)


def test_nonpositive_modes_flagged():
    pred = threshold_dimension(QuadraticWell([1.0, 0.0, -2.0], 0.5, 1.0))
    assert pred.n_nonpositive == 2
    assert pred.d_star == pytest.approx(3 - (0.5 + 1 + 1))
    assert pred.caveat


def test_threshold_monotone_in_R_and_eps():
    lam = np.geomspace(0.1, 100, 40)
    Rs = np.linspace(0.1, 5, 12)
    es = np.linspace(0.05, 2, 12)
    for e in es:
        d = [threshold_dimension(QuadraticWell(lam, e, R)).d_star for R in Rs]
        assert np.all(np.diff(d) > 0)
    for R in Rs:
        d = [threshold_dimension(QuadraticWell(lam, e, R)).d_star for e in es]
        assert np.all(np.diff(d) < 0)


def test_density_threshold_matches_explicit():
    lam = np.array([1.0, 1.0, 4.0, 4.0])
    dens = SpectralDensity([1.0, 4.0], [0.5, 0.5], dim=4)
    a = threshold_from_density(dens, 0.5, 1.3)
    b = threshold_dimension(QuadraticWell(lam, 0.5, 1.3))
    assert a.d_star == pytest.approx(b.d_star, rel=1e-14)


def test_f_max_limits():
    r, R = 1.5, 1.5
    dens = SpectralDensity([2 * 0.5 / r ** 2], [1.0], dim=10)
    assert f_max_curve(dens, 0.5, [R])[0] == pytest.approx(0.5)
    assert f_max_curve(dens, 0.5, [1e8])[0] < 1e-12


def test_oracle_trivial_cases():
    well = QuadraticWell([1.0, 2.0, 3.0, 5.0], 0.5, 0.0)
    for d in range(5):
        assert oracle_intersects(well, d, 50, 0).probability == 1.0
    well = QuadraticWell([1.0, 2.0, 3.0, 5.0], 0.1, 3.0)
    assert oracle_intersects(well, 4, 50, 0).probability == 1.0


def test_oracle_point_case_matches_direct():
    lam = np.array([0.5, 1.0, 8.0])
    well = QuadraticWell(lam, 0.6, 1.0)
    rng = np.random.default_rng(11)
    hits = 0
    for _ in range(400):
        u = rng.normal(size=3)
        w0 = u / np.linalg.norm(u)
        hits += 0.5 * w0 @ (lam * w0) <= 0.6
    assert oracle_intersects(well, 0, 400, 11).hits == hits


def test_phase_diagram_monotone_and_hand_well():
    well = QuadraticWell([1.0, 1.0, 4.0], 0.5, 1.0)
    pd = phase_diagram(well, trials=500, seed=2)
    assert np.all(np.diff(pd.probability) >= 0)
    assert pd.probability[0] == 0.0 and pd.probability[-1] == 1.0


def test_phase_diagram_agrees_with_single_d_oracle():
    lam = np.geomspace(1, 50, 12)
    well = QuadraticWell(lam, 0.5, 2.0)
    pd = phase_diagram(well, d_values=[4, 8], trials=3000, seed=5)
    for d, p in zip(pd.d, pd.probability):
        q = oracle_intersects(well, int(d), 3000, 6).probability
        assert abs(p - q) < 0.05


def test_widening_well_shifts_crossing_down():
    lam = np.geomspace(1, 100, 80)
    c = []
    for eps in (0.5, 2.0, 8.0):
        well = QuadraticWell(lam, eps, 3.0 * np.sqrt(2 * 0.5))
        c.append(phase_diagram(well, trials=200, seed=0).crossing)
    assert c[0] > c[1] > c[2]


def test_isotropic_boundary_point_hits_at_every_d():
    # R = r puts the offset on the sphere itself, so every subspace through it touches the set
    well = QuadraticWell.isotropic(200, radius=1.0, R=1.0)
    pd = phase_diagram(well, d_values=[1, 2, 50, 100], trials=200, seed=0)
    assert threshold_dimension(well).d_star == pytest.approx(100.0)
    assert pd.probability[0] > 0.5 and pd.crossing <= 1.0


@pytest.mark.parametrize("q", [0.3, 1.0, 2.0, 5.0])
def test_isotropic_crossing_is_below_formula(q):
    # exact isotropic threshold is D (1 - r^2 / R^2); the closed form overestimates it, tightly once R >> r
    D = 200
    well = QuadraticWell.isotropic(D, radius=1.0, R=q)
    pd = phase_diagram(well, trials=200, seed=3)
    exact = max(D * (1 - 1 / q ** 2), 0.0)
    d_star = threshold_dimension(well).d_star
    assert pd.crossing <= d_star + 1
    assert abs(pd.crossing - exact) <= max(5.0, 0.1 * exact)
    if q >= 2:
        assert abs(pd.crossing - d_star) <= max(5.0, 0.1 * d_star)


def test_axial_mode_runs():
    well = QuadraticWell(np.geomspace(1, 10, 10), 0.5, 1.0)
    r = oracle_intersects(well, 5, 100, 0, axial=True)
    assert 0.0 <= r.probability <= 1.0


def test_crossing_interpolation():
    assert crossing_point([0, 1, 2], [0.0, 0.25, 0.75]) == pytest.approx(1.5)
    assert crossing_point([0, 1], [0.6, 1.0]) == 0.0
    assert np.isnan(crossing_point([0, 1], [0.1, 0.2]))


# --------------------------------------------------------------------------- #

def test_slq_identity_single_node():
    dens = slq(lambda v: v, 30, 10, 3, 0)
    assert np.allclose(dens.nodes, 1.0) and dens.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert dens.truncated


def test_slq_outlier_and_bulk():
    lam = np.ones(50)
    lam[-1] = 10.0
    dens = slq(lambda v: lam * v, 50, 20, 4, 0)
    assert abs(dens.nearest_node(10.0) - 10.0) <= 1e-6
    assert dens.mass_between(0.5, 1.5) == pytest.approx(49 / 50, abs=0.02)


def test_slq_weights_sorted_and_normalized(rng):
    lam = rng.uniform(0.1, 5, 80)
    dens = slq(lambda v: lam * v, 80, 30, 5, 1)
    assert np.all(np.diff(dens.nodes) >= 0)
    assert abs(dens.weights.sum() - 1) <= 1e-10


def test_slq_wasserstein_shrinks_with_iterations(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(120, 120)))
    lam = np.concatenate([rng.uniform(0, 1, 110), rng.uniform(5, 20, 10)])
    H = Q @ np.diag(lam) @ Q.T
    dist = [slq(lambda v: H @ v, 120, k, 8, 3).wasserstein_to(lam) for k in (4, 16, 64)]
    assert dist[0] > dist[1] > dist[2]
    assert dist[2] < 0.15


def test_first_moment_matches_hutchinson(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(60, 60)))
    H = Q @ np.diag(rng.uniform(0, 3, 60)) @ Q.T
    dens = slq(lambda v: H @ v, 60, 30, 16, 4)
    tr, se = hutchinson_trace(lambda v: H @ v, 60, 200, 9)
    assert abs(dens.moment(1) - tr / 60) <= 3 * se / 60


def test_lanczos_breakdown_truncates():
    alpha, beta = lanczos(lambda v: 2 * v, np.ones(10), 8)
    assert alpha.size == 1 and alpha[0] == pytest.approx(2.0)


def test_slq_density_on_network_support(spirals):
    net = Network(ModelSpec(input_shape=(2,), widths=(6,), n_classes=2, seed=0))
    w = net.init()
    mask = Mask(np.random.default_rng(0).uniform(size=net.layout.n_prunable) < 0.5)
    dens = slq_density(net, mask.apply(w), spirals.train, mask, iterations=mask.n_surviving, probes=2, seed=0)
    idx = net.layout.prunable_index[mask.bits]
    H = np.stack([net.hessian_vector_product(mask.apply(w), spirals.train, np.eye(w.size)[i]).values[idx]
                  for i in idx])
    ev = np.linalg.eigvalsh(0.5 * (H + H.T))
    assert dens.dim == mask.n_surviving
    assert dens.nodes.min() >= ev.min() - 1e-8 and dens.nodes.max() <= ev.max() + 1e-8


def test_density_csv_roundtrip(tmp_path):
    d = SpectralDensity([3.0, 1.0], [0.25, 0.75], 7, 2, 10)
    d.write_csv(tmp_path / "d.csv")
    back = SpectralDensity.read_csv(tmp_path / "d.csv")
    assert np.array_equal(back.nodes, d.nodes) and np.array_equal(back.weights, d.weights)
    assert (back.iterations, back.probes, back.dim) == (7, 2, 10)


# --------------------------------------------------------------------------- #

def test_rayleigh_quotient_toy():
    obj = QuadraticObjective(np.array([1.0, 3.0, 7.0]))
    w = ParamVector.from_array([0.2, 0.1, -0.3])
    assert direction_curvature(obj, w, [0, 1.0, 0], None) == pytest.approx(3.0)
    assert direction_curvature(obj, w, [0, 5.0, 0], None) == pytest.approx(3.0)


def test_rayleigh_within_spectrum(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    lam = rng.uniform(0.5, 4, 8)
    obj = QuadraticObjective(Q @ np.diag(lam) @ Q.T)
    w = ParamVector.from_array(rng.normal(size=8))
    for _ in range(20):
        q = direction_curvature(obj, w, rng.normal(size=8), None)
        assert lam.min() - 1e-12 <= q <= lam.max() + 1e-12


def test_pruning_taylor_exact_on_quadratic(rng):
    lam = rng.uniform(0.5, 2, 6)
    obj = QuadraticObjective(lam, center=rng.normal(size=6))
    w = ParamVector.from_array(rng.normal(size=6))
    mask = Mask(np.array([1, 0, 1, 0, 0, 1], bool))
    t = pruning_taylor(obj, w, mask, None)
    assert t["predicted_change"] == pytest.approx(t["actual_change"], rel=1e-10)


def test_matching_loss_fit_exact_line():
    err = np.array([0.1, 0.2, 0.3, 0.5])
    loss = 0.4 + 2.0 * err
    fit = estimate_matching_loss_threshold(loss, err, 0.15, 0.6)
    assert fit.intercept == pytest.approx(0.4, abs=1e-12) and fit.slope == pytest.approx(2.0, abs=1e-12)
    assert fit.loss_matching == pytest.approx(0.7) and fit.eps_train == pytest.approx(0.1)
    assert not fit.flagged


def test_matching_loss_fit_noisy_recovery(rng):
    err = rng.uniform(0, 1, 200)
    loss = 0.3 + 1.5 * err + rng.normal(0, 0.05, 200)
    fit = estimate_matching_loss_threshold(loss, err, 0.2, 0.1)
    from scipy.stats import linregress

    se = linregress(err, loss).stderr
    assert abs(fit.slope - 1.5) <= 4 * se


def test_matching_loss_fit_flags_and_errors():
    assert estimate_matching_loss_threshold([1, 2, 3], [0.1, 0.2, 0.3], 0.1, 5.0).flagged
    with pytest.raises(ValueError):
        estimate_matching_loss_threshold([1, 2, 3], [0.2, 0.2, 0.2], 0.1, 0.0)


def test_max_pruning_ratio_boundary():
    dens = SpectralDensity([1.0], [1.0], dim=100)
    ratios = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
    R = np.sqrt(ratios) * 2.0
    pred = max_pruning_ratio(dens, 0.5, ratios, R)
    assert list(pred.predicted_match) == list(ratios < pred.f_max)
    assert 0.1 < pred.boundary_ratio < 0.9
    with pytest.raises(ValueError):
        max_pruning_ratio(dens, -1.0, ratios, R)
