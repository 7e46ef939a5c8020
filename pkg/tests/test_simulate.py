import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disagg.errors import (
    ConfigurationError,
    DegeneratePolygonError,
    SimulationError,
    ThresholdExhaustedError,
)
from disagg.fields import CovariateStack, make_mock_covariates, make_population, make_real_covariates
from disagg.geometry import PolygonPartition, make_world
from disagg.raster import GridSpec, Raster
from disagg.simulate import (
    ScenarioSpec,
    aggregate_cases,
    build_risk_surface,
    draw_coefficients,
    draw_intercept,
    sample_cases,
    simulate_surface,
)

G = GridSpec(32, 32)


@pytest.fixture(scope="module")
def stacks():
    real = make_real_covariates(G, 12, seed=4)
    mock = make_mock_covariates(G, 12, seed=5)
    pop = make_population(G, 1e6, 1.0, seed=6)
    return real, mock, pop


def test_scenario_layouts():
    assert [(s.n_observed, s.n_unobserved_real, s.n_unobserved_mock)
            for s in map(ScenarioSpec.from_id, (1, 2, 3))] == [(6, 0, 0), (6, 6, 0), (6, 6, 3)]
    with pytest.raises(ConfigurationError):
        ScenarioSpec.from_id(4)


def test_draw_coefficients():
    assert draw_coefficients(0, 1).shape == (0,)
    b = draw_coefficients(10_000, 1)
    assert 0.45 <= b.std(ddof=1) <= 0.55
    assert -0.02 <= b.mean() <= 0.02
    assert np.array_equal(draw_coefficients(7, 3), draw_coefficients(7, 3))
    with pytest.raises(ValueError):
        draw_coefficients(-1, 0)


def test_draw_intercept():
    draws = np.array([draw_intercept(s) for s in range(10_000)])
    assert draws.min() >= -8 and draws.max() <= -5
    assert abs(draws.mean() + 6.5) < 0.05
    assert draw_intercept(42) == draw_intercept(42)


def test_build_risk_surface_examples():
    g = GridSpec(5, 4)
    empty = CovariateStack([], [], True)
    lam = build_risk_surface(CovariateStack(["z"], [Raster.full(g, 0.0)]), empty, -6.0, [0.0], [])
    assert np.all(lam.values == math.exp(-6))
    ones = CovariateStack(["one"], [Raster.full(g, 1.0)])
    lam = build_risk_surface(ones, empty, -6.0, [1.0], [])
    assert np.allclose(lam.values, math.exp(-5), rtol=1e-15, atol=0)
    with pytest.raises(ValueError):
        build_risk_surface(ones, empty, -6.0, [1.0, 2.0], [])


def test_build_risk_surface_pixel_oracle(stacks):
    real, mock, _ = stacks
    obs, unobs = real.select(range(6)), mock.select(range(3))
    rng = np.random.default_rng(0)
    b_obs, b_unobs = rng.normal(size=6), rng.normal(size=3)
    lam = build_risk_surface(obs, unobs, -6.2, b_obs, b_unobs)
    for y, x in rng.integers(0, 32, size=(25, 2)):
        eta = -6.2
        for b, r in zip(b_obs, obs.rasters):
            eta += b * r.values[y, x]
        for b, r in zip(b_unobs, unobs.rasters):
            eta += b * r.values[y, x]
        assert abs(math.log(lam.values[y, x]) - eta) < 1e-12


def test_sample_cases_examples():
    g = GridSpec(64, 64)
    pop = Raster.full(g, 10.0)
    assert np.all(sample_cases(Raster.full(g, 0.0), pop, 1).values == 0)
    p = pop.values.copy()
    p[3, 4] = 0
    c = sample_cases(Raster.full(g, 0.5), Raster(p, g), 2)
    assert c.values[3, 4] == 0
    means = [sample_cases(Raster.full(g, 0.3), pop, s).values.mean() for s in range(100)]
    assert 2.9 <= np.mean(means) <= 3.1
    bad = Raster.full(g, 0.3)
    bad.values[0, 0] = np.inf
    with pytest.raises(SimulationError):
        sample_cases(bad, pop, 0)


@pytest.mark.parametrize("sid", [1, 2, 3])
def test_simulate_surface_layers(stacks, sid):
    real, mock, pop = stacks
    s = simulate_surface(sid, real, mock, pop, seed=10 + sid)
    spec = ScenarioSpec.from_id(sid)
    assert len(s.observed_stack) == 6
    assert len(s.unobserved_stack) == spec.n_unobserved_real + spec.n_unobserved_mock
    real_obs = set(s.observed_stack.names)
    real_unobs = {n for n in s.unobserved_stack.names if n.startswith("real_")}
    assert not real_obs & real_unobs
    if sid > 1:
        assert real_obs | real_unobs == set(real.names)
    else:
        assert len(s.unobserved_stack) == 0
    # log lambda equals the linear predictor
    eta = s.beta0 + sum(b * r.values for b, r in zip(s.beta_obs, s.observed_stack.rasters))
    eta = eta + sum((b * r.values for b, r in zip(s.beta_unobs, s.unobserved_stack.rasters)), 0.0)
    assert np.allclose(np.log(s.lambda_true.values), eta, atol=1e-12, rtol=0)
    assert np.all(s.lambda_true.values > 0)
    c = s.cases.values
    assert np.all(c >= 0) and np.array_equal(c, np.round(c))
    assert s.total_cases <= 0.05 * pop.values.sum()


def test_simulate_surface_reproducible(stacks):
    real, mock, pop = stacks
    a = simulate_surface(3, real, mock, pop, seed=99)
    b = simulate_surface(3, real, mock, pop, seed=99)
    assert a.beta0 == b.beta0 and np.array_equal(a.beta_obs, b.beta_obs)
    assert np.array_equal(a.cases.values, b.cases.values)
    assert a.observed_stack.names == b.observed_stack.names


def test_threshold_exhaustion(stacks):
    real, mock, pop = stacks
    with pytest.raises(ThresholdExhaustedError) as e:
        simulate_surface(1, real, mock, pop, max_total_cases=0, max_attempts=3, seed=0)
    assert len(e.value.totals) == 3 and all(t > 0 for t in e.value.totals)


def test_threshold_redraws_until_accepted(stacks):
    real, mock, pop = stacks
    first = simulate_surface(2, real, mock, pop, max_total_cases=1e12, seed=5)
    cap = first.total_cases - 1
    s = simulate_surface(2, real, mock, pop, max_total_cases=cap, max_attempts=200, seed=5)
    assert s.attempts > 1 and s.total_cases <= cap
    assert s.attempt_totals[0] == first.total_cases
    assert s.observed_stack.names == first.observed_stack.names


def test_unstandardized_rejected(stacks):
    real, mock, pop = stacks
    raw = CovariateStack(real.names, real.rasters, standardized=False)
    with pytest.raises(ConfigurationError):
        simulate_surface(1, raw, mock, pop)


def test_aggregate_examples():
    g = GridSpec(6, 4)
    one = PolygonPartition.from_labels(np.zeros((4, 6), int), 1)
    rng = np.random.default_rng(3)
    cases = Raster(rng.poisson(2.0, size=(4, 6)).astype(float), g)
    pop = Raster.full(g, 3.0)
    d = aggregate_cases(cases, pop, one)
    assert d.counts[0] == cases.values.sum()
    zero = aggregate_cases(Raster.full(g, 0.0), pop, one)
    assert np.all(zero.counts == 0) and np.all(zero.rates == 0)


def test_aggregate_pixel_loop_oracle():
    w = make_world(GridSpec(16, 16), (2, 4, 16), 0.6, seed=8)
    part = w.level(2)
    rng = np.random.default_rng(1)
    cases = Raster(rng.poisson(4.0, size=(16, 16)).astype(float), w.grid)
    pop = Raster(rng.uniform(1, 50, size=(16, 16)), w.grid)
    d = aggregate_cases(cases, pop, part)
    oracle_c = [0.0] * 4
    oracle_p = [0.0] * 4
    for y in range(16):
        for x in range(16):
            oracle_c[part.labels[y, x]] += cases.values[y, x]
            oracle_p[part.labels[y, x]] += pop.values[y, x]
    assert d.counts.tolist() == oracle_c
    assert np.allclose(d.populations, oracle_p, rtol=1e-14)
    assert np.allclose(d.rates, np.array(oracle_c) / np.array(oracle_p), rtol=1e-14)


def test_aggregate_zero_population_polygon():
    g = GridSpec(2, 1)
    part = PolygonPartition.from_labels(np.array([[0, 1]]), 1)
    pop = Raster(np.array([[1.0, 0.0]]), g)
    cases = Raster(np.zeros((1, 2)), g)
    with pytest.raises(DegeneratePolygonError):
        aggregate_cases(cases, pop, part)
    d = aggregate_cases(cases, pop, part, observed_ids={0})
    assert d.observed.tolist() == [0]
    with pytest.raises(ValueError):
        aggregate_cases(cases, pop, part, observed_ids={2})


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), irr=st.floats(0, 1))
def test_aggregation_conserves_cases(seed, irr):
    w = make_world(GridSpec(12, 12), (1, 4, 16), irr, seed)
    rng = np.random.default_rng(seed)
    cases = Raster(rng.poisson(3.0, size=(12, 12)).astype(float), w.grid)
    pop = Raster(rng.uniform(0.5, 5, size=(12, 12)), w.grid)
    for part in w.partitions:
        d = aggregate_cases(cases, pop, part)
        assert d.counts.sum() == cases.values.sum()
