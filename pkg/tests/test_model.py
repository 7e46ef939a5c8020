import math

import numpy as np
import pytest
from scipy import integrate, stats
from hypothesis import given, settings, strategies as st

from disagg.errors import ConfigurationError, EvaluationError
from disagg.fields import CovariateStack, MaternParams, make_mock_covariates, matern_cov, simulate_grf
from disagg.geometry import PolygonPartition, make_world
from disagg.lattice import NodeLattice, latent_field_at_pixels
from disagg.model import (
    NUGGET,
    DisaggObjective,
    FitOptions,
    ModelParams,
    PriorSpec,
    fit_map,
    grad_neg_log_posterior,
    lbfgs,
    neg_log_posterior,
    pc_prior_logdensity,
    pc_rho_density,
    pc_sigma_density,
    predict_pixels,
)
from disagg.raster import GridSpec, Raster
from disagg.simulate import aggregate_cases, sample_cases

from _instances import central_differences, column_partition, tiny_instance

LOG_2PI = math.log(2 * math.pi)


# -- latent field projection ---------------------------------------------------

def test_lattice_shape():
    assert NodeLattice(GridSpec(64, 64), 4).size == 19 * 19
    assert NodeLattice(GridSpec(3, 3), 4).size == 9


def test_projection_reproduces_constants():
    g = GridSpec(13, 7)
    lat = NodeLattice(g, 4)
    r = latent_field_at_pixels(np.full(lat.size, 2.5), g, 4)
    assert np.allclose(r.values, 2.5, atol=1e-14, rtol=0)


def test_projection_locality():
    g = GridSpec(24, 24)
    lat = NodeLattice(g, 4)
    k = lat.index(3, 3)
    u = np.zeros(lat.size)
    u[k] = 1.0
    r = latent_field_at_pixels(u, g, 4)
    cx, cy = lat.coords[k]
    X, Y = g.centers()
    support = r.values > 0
    assert support.any()
    assert np.all(np.abs(X[support] - cx) < 4) and np.all(np.abs(Y[support] - cy) < 4)
    peak = np.unravel_index(np.argmax(r.values), r.values.shape)
    assert abs(X[peak] - cx) <= 0.5 and abs(Y[peak] - cy) <= 0.5


def _dense_bilinear(grid, spacing):
    """Independent assembly of the interpolation matrix, pixel by pixel."""
    lat = NodeLattice(grid, spacing)
    A = np.zeros((grid.size, lat.size))
    xs = grid.origin_x + (np.arange(grid.nx) + 0.5) * grid.pixel_size
    ys = grid.origin_y + (np.arange(grid.ny) + 0.5) * grid.pixel_size
    step = spacing * grid.pixel_size
    for r, y in enumerate(ys):
        for c, x in enumerate(xs):
            fx = (x - lat.xs[0]) / step
            fy = (y - lat.ys[0]) / step
            i, j = int(fx), int(fy)
            tx, ty = fx - i, fy - j
            row = r * grid.nx + c
            for di, dj, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                              (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
                A[row, (j + dj) * lat.nx + (i + di)] += w
    return A


def test_projection_matches_dense_oracle():
    g = GridSpec(10, 7, pixel_size=2.0, origin_x=-3.0, origin_y=5.0)
    A = _dense_bilinear(g, 3)
    u = np.random.default_rng(0).normal(size=A.shape[1])
    r = latent_field_at_pixels(u, g, 3)
    assert np.allclose(r.values.ravel(), A @ u, atol=1e-12, rtol=0)
    with pytest.raises(ConfigurationError):
        latent_field_at_pixels(u[:-1], g, 3)


# -- priors ------------------------------------------------------------------------

def test_pc_lambdas():
    pr = PriorSpec()
    assert abs(pr.lambda_rho - 0.010050) < 1e-6
    assert abs(pr.lambda_rho + math.log(0.99)) < 1e-15
    assert abs(pr.lambda_sigma - 0.020101) < 1e-6


def test_pc_quadrature():
    pr = PriorSpec()
    p_rho, _ = integrate.quad(pc_rho_density, 0, 1, args=(pr,), epsabs=1e-13)
    p_sig, _ = integrate.quad(pc_sigma_density, 0.5, np.inf, args=(pr,), epsabs=1e-13)
    assert abs(p_rho - 0.99) < 1e-4
    assert abs(p_sig - 0.99) < 1e-4


def test_pc_logdensity_matches_densities():
    for rho, sigma in ((0.3, 0.1), (2.0, 1.5), (50.0, 4.0)):
        want = math.log(pc_rho_density(rho)) + math.log(pc_sigma_density(sigma))
        assert pc_prior_logdensity(rho, sigma) == pytest.approx(want, rel=1e-12)
    for bad in ((0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)):
        with pytest.raises(ValueError):
            pc_prior_logdensity(*bad)


# -- objective ---------------------------------------------------------------------

def _one_pixel():
    g = GridSpec(1, 1)
    part = PolygonPartition.from_labels(np.zeros((1, 1), int), 1)
    pop = Raster.full(g, 1.0)
    data = aggregate_cases(Raster.full(g, 1.0), pop, part)
    return data, CovariateStack([], [], True), pop


def test_single_pixel_hand_value():
    data, covs, pop = _one_pixel()
    obj = DisaggObjective(data, covs, pop, PriorSpec(), latent=False)
    theta = np.array([0.0])
    eta = obj.polygon_means(obj.pixel_means(theta))
    assert obj.poisson_part(eta) == 1.0
    prior = 0.5 * (0 + 4) ** 2 / 4 + math.log(2) + 0.5 * LOG_2PI
    assert obj.value(theta) == pytest.approx(1.0 + prior, abs=1e-14)


def _oracle_value(params, data, covs, pop, prior, spacing):
    """Straight-line re-implementation: explicit per-pixel loops."""
    grid = pop.grid
    A = _dense_bilinear(grid, spacing)
    lat = NodeLattice(grid, spacing)
    field_ = A @ params.u
    eta = {int(i): 0.0 for i in data.observed}
    for r in range(grid.ny):
        for c in range(grid.nx):
            pid = int(data.partition.labels[r, c])
            if pid not in eta:
                continue
            lin = params.beta0 + field_[r * grid.nx + c]
            for b, layer in zip(params.beta, covs.rasters):
                lin += b * layer.values[r, c]
            eta[pid] += pop.values[r, c] * math.exp(lin)
    val = sum(e - data.counts[i] * math.log(e) for i, e in eta.items())
    S = params.sigma**2 * (matern_cov(lat.distances, MaternParams(params.rho, 1.0)) + NUGGET * np.eye(lat.size))
    _, logdet = np.linalg.slogdet(S)
    val += 0.5 * params.u @ np.linalg.solve(S, params.u) + 0.5 * logdet
    val -= stats.norm.logpdf(params.beta0, prior.beta0_mean, prior.beta0_sd)
    val -= sum(stats.norm.logpdf(b, prior.beta_mean, prior.beta_sd) for b in params.beta)
    lr, ls = prior.lambda_rho, prior.lambda_sigma
    val -= math.log(lr) - 2 * math.log(params.rho) - lr / params.rho + math.log(ls) - ls * params.sigma
    return val


@pytest.mark.parametrize("seed", range(5))
def test_value_matches_oracle(seed):
    data, covs, pop, params = tiny_instance(100 + seed, nx=4, ny=1, n_polygons=2, K=1)
    want = _oracle_value(params, data, covs, pop, PriorSpec(), 4)
    got = neg_log_posterior(params, data, covs, pop)
    assert got == pytest.approx(want, abs=1e-10 * max(1.0, abs(want)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), logc=st.floats(-5, 5))
def test_population_scaling_leaves_eta_unchanged(seed, logc):
    data, covs, pop, params = tiny_instance(seed)
    c = math.exp(logc)
    scaled_pop = Raster(pop.values * c, pop.grid)
    scaled_data = aggregate_cases(
        Raster(np.zeros(pop.grid.shape), pop.grid), scaled_pop, data.partition
    ).with_counts(data.counts)
    o1 = DisaggObjective(data, covs, pop)
    o2 = DisaggObjective(scaled_data, covs, scaled_pop)
    t1 = o1.pack(params)
    t2 = t1.copy()
    t2[0] -= logc
    e1 = o1.polygon_means(o1.pixel_means(t1))
    e2 = o2.polygon_means(o2.pixel_means(t2))
    assert np.allclose(e1, e2, rtol=1e-12)
    assert o1.poisson_part(e1) == pytest.approx(o2.poisson_part(e2), abs=1e-10 * max(1, abs(o1.poisson_part(e1))))


@pytest.mark.parametrize("seed", range(20))
def test_gradient_finite_differences(seed):
    data, covs, pop, params = tiny_instance(seed)
    obj = DisaggObjective(data, covs, pop)
    theta = obj.pack(params)
    g = grad_neg_log_posterior(params, data, covs, pop)
    fd = central_differences(obj.value, theta)
    rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(g)), 1e-8)
    assert rel.max() < 1e-5


def test_value_and_grad_agree_with_value():
    data, covs, pop, params = tiny_instance(7)
    obj = DisaggObjective(data, covs, pop)
    th = obj.pack(params)
    assert obj.value_and_grad(th)[0] == pytest.approx(obj.value(th), rel=1e-13)


def test_beta0_gradient_at_poisson_optimum():
    # covariate-free single polygon with beta0 = log(y / sum p): Poisson score is 0
    g = GridSpec(2, 2)
    part = PolygonPartition.from_labels(np.zeros((2, 2), int), 1)
    pop = Raster(np.array([[10.0, 20.0], [30.0, 40.0]]), g)
    cases = Raster(np.array([[1.0, 2.0], [0.0, 4.0]]), g)
    data = aggregate_cases(cases, pop, part)
    pr = PriorSpec()
    obj = DisaggObjective(data, CovariateStack([], [], True), pop, pr, latent=False)
    b0 = math.log(7.0 / 100.0)
    _, grad = obj.value_and_grad(np.array([b0]))
    assert abs(grad[0] - (b0 - pr.beta0_mean) / pr.beta0_sd**2) < 1e-10


def test_u_gradient_at_zero_is_projected_residual():
    data, covs, pop, params = tiny_instance(3)
    params = ModelParams(params.beta0, params.beta, params.log_rho, math.log(1e4), np.zeros(params.u.size))
    grad = grad_neg_log_posterior(params, data, covs, pop)
    A = _dense_bilinear(pop.grid, 4)
    lab = data.partition.labels.ravel()
    mu = pop.flat * np.exp(params.beta0 + covs.matrix(pop.grid) @ params.beta)
    eta = np.bincount(lab, weights=mu)
    w = mu * (1 - data.counts[lab] / eta[lab])
    K = params.K
    assert np.allclose(grad[3 + K:], A.T @ w, atol=1e-8, rtol=0)


def test_brute_force_convolution():
    g = GridSpec(2, 2)
    part = PolygonPartition.from_labels(np.array([[0, 1], [0, 1]]), 1)
    pop = Raster(np.array([[3.0, 1.5], [2.0, 4.0]]), g)
    cases = Raster(np.array([[2.0, 1.0], [3.0, 5.0]]), g)
    data = aggregate_cases(cases, pop, part)
    lam = np.array([[0.4, 1.1], [0.7, 0.9]])
    layer = Raster(np.log(lam), g)
    covs = CovariateStack(["loglam"], [layer], True)
    obj = DisaggObjective(data, covs, pop, latent=False)
    theta = np.array([0.0, 1.0])
    eta = obj.polygon_means(obj.pixel_means(theta))
    agg = -obj.poisson_part(eta) - sum(math.lgamma(y + 1) for y in data.counts)
    brute = 0.0
    mu = pop.values * lam
    support = np.arange(80)
    for pid in (0, 1):
        pmf = np.array([1.0])
        for m in mu[part.labels == pid]:
            pmf = np.convolve(pmf, stats.poisson.pmf(support, m))
        brute += math.log(pmf[int(data.counts[pid])])
    assert abs(agg - brute) < 1e-8


def test_evaluation_error_names_polygon():
    data, covs, pop, params = tiny_instance(2, n_polygons=2, K=0)
    params = ModelParams(800.0, params.beta, params.log_rho, params.log_sigma, params.u)
    with pytest.raises(EvaluationError) as e:
        neg_log_posterior(params, data, covs, pop)
    assert e.value.polygon_id in data.observed_ids


def test_objective_needs_observed_polygon():
    data, covs, pop, _ = tiny_instance(1)
    with pytest.raises(ValueError):
        DisaggObjective(data.with_observed([]), covs, pop)


# -- optimizer and fitting -------------------------------------------------------------

def test_lbfgs_rosenbrock():
    def fg(x):
        a, b = x
        f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        return f, np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])

    res = lbfgs(fg, [-1.2, 1.0], max_iter=1000, grad_tol=1e-8)
    assert res.converged and np.allclose(res.x, [1, 1], atol=1e-6)
    objs = [h.objective for h in res.history]
    assert all(b <= a for a, b in zip(objs, objs[1:]))


def test_flat_prior_mle_no_field():
    g = GridSpec(3, 2)
    part = PolygonPartition.from_labels(np.zeros((2, 3), int), 1)
    pop = Raster(np.arange(1.0, 7.0).reshape(2, 3) * 100, g)
    cases = Raster(np.array([[3.0, 5.0, 0.0], [7.0, 1.0, 2.0]]), g)
    data = aggregate_cases(cases, pop, part)
    flat = PriorSpec(beta0_sd=1e8)
    fit = fit_map(data, CovariateStack([], [], True), pop, flat, FitOptions(latent=False, grad_tol=1e-9))
    assert abs(fit.params.beta0 - math.log(18.0 / 2100.0)) < 1e-6


def test_returns_immediately_at_stationary_start():
    g = GridSpec(1, 1)
    part = PolygonPartition.from_labels(np.zeros((1, 1), int), 1)
    pop = Raster.full(g, 10 * math.exp(4.0))
    data = aggregate_cases(Raster.full(g, 10.0), pop, part)
    fit = fit_map(data, CovariateStack([], [], True), pop, PriorSpec(), FitOptions(latent=False))
    assert fit.converged and fit.n_iterations == 0


def _recovery_data(seed, beta_true, grid=GridSpec(40, 40), field_sd=0.0):
    world = make_world(grid, (4, 20, 100), 0.0, seed=0)
    part = world.level(3)
    covs = make_mock_covariates(grid, 1, rho_range=(6, 12), seed=seed)
    pop = Raster.full(grid, 500.0)
    eta = -5.0 + beta_true * covs.rasters[0].values
    if field_sd:
        eta = eta + simulate_grf(grid, MaternParams(8.0, field_sd), seed + 1000).values
    cases = sample_cases(Raster(np.exp(eta), grid), pop, seed)
    return aggregate_cases(cases, pop, part), covs, pop


def test_k1_recovery():
    errs = []
    for seed in range(10):
        beta_true = float(np.random.default_rng(seed).normal(0, 0.5))
        data, covs, pop = _recovery_data(seed, beta_true)
        fit = fit_map(data, covs, pop, opts=FitOptions(max_iter=300))
        errs.append(abs(fit.params.beta[0] - beta_true))
    assert np.median(errs) < 0.1


def test_zero_cases_pull_intercept_down():
    data, covs, pop = _recovery_data(1, 0.3)
    data = data.with_counts(np.zeros_like(data.counts))
    fit = fit_map(data, covs, pop, opts=FitOptions(max_iter=200))
    assert fit.params.beta0 < -6
    eta = fit.lambda_pred.values * pop.values
    assert eta.sum() < pop.values.sum() * math.exp(-5)


def test_fit_deterministic_and_consistent():
    data, covs, pop = _recovery_data(2, -0.4, grid=GridSpec(20, 20))
    data = data  # 100 polygons on 20x20 are 2x2 blocks
    a = fit_map(data, covs, pop, opts=FitOptions(max_iter=60))
    b = fit_map(data, covs, pop, opts=FitOptions(max_iter=60))
    assert np.array_equal(a.params.to_vector(), b.params.to_vector())
    assert a.neg_log_posterior == b.neg_log_posterior
    assert np.array_equal(a.lambda_pred.values, b.lambda_pred.values)
    assert a.history == b.history
    objs = [h.objective for h in a.history]
    assert all(y <= x for x, y in zip(objs, objs[1:]))
    if a.converged:
        assert a.grad_norm <= 1e-6
    # the final lambda aggregates to the eta of the final objective evaluation
    obj = DisaggObjective(data, covs, pop)
    eta = obj.polygon_means(obj.pixel_means(obj.pack(a.params)))
    agg = np.bincount(data.partition.labels.ravel(), weights=(a.lambda_pred.values * pop.values).ravel())
    assert np.allclose(agg[data.observed], eta, rtol=1e-12)


def _scaled(data, pop, c):
    pop_c = Raster(pop.values * c, pop.grid)
    zero = Raster(np.zeros(pop.grid.shape), pop.grid)
    return aggregate_cases(zero, pop_c, data.partition).with_counts(data.counts), pop_c


def test_argmax_invariance_under_population_scaling():
    data, covs, pop = _recovery_data(3, 0.5, grid=GridSpec(20, 20), field_sd=0.5)
    c = 1000.0
    data_c, pop_c = _scaled(data, pop, c)
    pr = PriorSpec()
    pr_c = PriorSpec(beta0_mean=pr.beta0_mean - math.log(c))
    opts = FitOptions(latent=False)
    a = fit_map(data, covs, pop, pr, opts)
    b = fit_map(data_c, covs, pop_c, pr_c, opts)
    assert max(a.grad_norm, b.grad_norm) < 1e-3
    assert b.params.beta0 == pytest.approx(a.params.beta0 - math.log(c), abs=1e-6)
    assert np.allclose(a.params.beta, b.params.beta, atol=1e-6)
    assert np.allclose(a.lambda_pred.values * pop.values, b.lambda_pred.values * pop_c.values, rtol=1e-6)


def test_latent_objective_translates_under_scaling():
    # with the field on, the objective surface is just translated along beta0,
    # so the maximizer moves only in beta0
    data, covs, pop = _recovery_data(3, 0.5, grid=GridSpec(20, 20), field_sd=0.5)
    c = 1000.0
    data_c, pop_c = _scaled(data, pop, c)
    pr = PriorSpec()
    pr_c = PriorSpec(beta0_mean=pr.beta0_mean - math.log(c))
    o, o_c = DisaggObjective(data, covs, pop, pr), DisaggObjective(data_c, covs, pop_c, pr_c)
    rng = np.random.default_rng(0)
    for _ in range(5):
        th = o.initial() + rng.normal(0, 0.1, size=o.n_params)
        th_c = th.copy()
        th_c[0] -= math.log(c)
        v, g = o.value_and_grad(th)
        v_c, g_c = o_c.value_and_grad(th_c)
        assert abs(v_c - v) <= 1e-10 * abs(v)
        assert np.allclose(g, g_c, rtol=1e-7, atol=1e-7 * np.abs(g).max())


def test_predict_pixels():
    g = GridSpec(6, 5)
    rng = np.random.default_rng(0)
    raw = Raster(rng.normal(3, 2, size=(5, 6)), g)
    from disagg.fields import standardize

    covs = standardize(CovariateStack(["a"], [raw]))
    M = NodeLattice(g, 4).size
    p0 = ModelParams(-3.0, np.zeros(1), 0.0, 0.0, np.zeros(M))
    out = predict_pixels(p0, covs, Raster.full(g, 2.0))
    assert np.all(out["lambda"].values == math.exp(-3.0))
    assert np.all(out["expected_cases"].values == 2 * math.exp(-3.0))
    p1 = ModelParams(-3.0, np.ones(1), 0.0, 0.0, np.zeros(M))
    loglam = np.log(predict_pixels(p1, covs, Raster.full(g, 1.0))["lambda"].values)
    x = covs.rasters[0].values
    assert abs((loglam.max() - loglam.min()) - (x.max() - x.min())) < 1e-10
    fitted = ModelParams(-3.0, np.ones(1), 0.0, 0.0, np.zeros(M),
                         transform=(("a",), (0.0,), (1.0,)))
    with pytest.raises(ConfigurationError):
        predict_pixels(fitted, covs, Raster.full(g, 1.0))
