import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_context, simple_market
from wicproc.demand import (
    ConsumerDraws, DemandContext, DemandError, DemandEstimate, DemandParams, GMMOptions,
    InstrumentSet, InversionError, build_instruments, elasticity_matrix, gmm_estimate,
    invert_shares, iv_regression, make_draws, mean_utility, plain_draws,
    shares_from_delta,
)
from wicproc.synthetic import SyntheticSpec, generate_world


def zero_params(**kw):
    base = dict(alpha=1.0, beta=[0.0, 0.0], delta0=0.0, delta1=0.0, sigma=[0.0, 0.0], pi_income=0.0)
    base.update(kw)
    return DemandParams(**base)


# ---------------------------------------------------------------- params and draws

def test_params_validation():
    with pytest.raises(ValueError):
        zero_params(alpha=0.0)
    with pytest.raises(ValueError):
        zero_params(sigma=[-0.1, 0.0])
    with pytest.raises(ValueError):
        zero_params(sigma=[0.1])


def test_draw_weights_checked():
    with pytest.raises(ValueError):
        ConsumerDraws(np.zeros((2, 2)), np.ones(2), np.array([0.6, 0.6]))
    with pytest.raises(ValueError):
        ConsumerDraws(np.zeros((2, 2)), np.ones(2), np.array([1.5, -0.5]))
    d = make_draws(1000, 3)
    assert abs(d.weights.sum() - 1) < 1e-12
    assert np.all(d.income > 0)


def test_halton_draws_are_standard_normal_ish():
    d = make_draws(4096, 0, halton=True)
    assert abs(d.v[:, 0].mean()) < 0.02
    assert abs(d.v[:, 1].std() - 1) < 0.02


# ---------------------------------------------------------------- mean utility

def test_zero_spillover_makes_winner_irrelevant():
    m = simple_market()
    p = DemandParams(alpha=2.0, beta=[1.0, 0.5], delta0=0.0, delta1=0.0)
    xi = np.linspace(-0.1, 0.1, m.n_products)
    np.testing.assert_array_equal(mean_utility(p, m, xi, None), mean_utility(p, m, xi, "F0"))


def test_spillover_indicator_arithmetic():
    m = simple_market()
    p = DemandParams(alpha=1e-300, beta=[0.0, 0.0], delta0=1.0, delta1=2.0)
    u = mean_utility(p, m, np.zeros(m.n_products), "F1", prices=np.zeros(m.n_products))
    expected = np.zeros(m.n_products)
    for j, prod in enumerate(m.products):
        if prod.firm_id == "F1":
            expected[j] = 3.0 if prod.is_auction_brand else 1.0
    np.testing.assert_array_equal(u, expected)


def test_price_perturbation_shifts_mean_utility_by_alpha():
    m = simple_market(seed=4)
    p = DemandParams(alpha=2.5, beta=[1.0, -0.3], delta0=0.2, delta1=0.4)
    xi = np.zeros(m.n_products)
    base = mean_utility(p, m, xi, "F0")
    bumped = m.prices.copy()
    bumped[2] += 1.0
    diff = mean_utility(p, m, xi, "F0", prices=bumped) - base
    assert diff[2] == pytest.approx(-2.5, abs=1e-12)
    assert np.all(np.delete(diff, 2) == 0)


def test_mean_utility_dimension_errors():
    m = simple_market()
    p = DemandParams(alpha=1.0, beta=[1.0, 0.0])
    with pytest.raises(ValueError):
        mean_utility(p, m, np.zeros(m.n_products - 1))
    with pytest.raises(ValueError):
        mean_utility(DemandParams(alpha=1.0, beta=[1.0]), m, np.zeros(m.n_products))


# ---------------------------------------------------------------- shares

def test_symmetric_plain_logit_shares():
    s = shares_from_delta(np.zeros(3), np.zeros(3), zero_params(), plain_draws())
    np.testing.assert_allclose(s, 0.25, atol=1e-15)


def test_vanishing_utility_gives_vanishing_share():
    p = zero_params()
    for d in (-50.0, -500.0, -1e6):
        s = shares_from_delta(np.array([d]), np.zeros(1), p, plain_draws())
        assert 0.0 <= s[0] < 1e-20


def test_extreme_utilities_do_not_overflow():
    p = zero_params(sigma=[0.5, 1.0])
    d = make_draws(50, 0)
    s = shares_from_delta(np.array([800.0, -800.0]), np.array([1.0, 1.0]), p, d)
    assert np.all(np.isfinite(s))
    assert s[0] == pytest.approx(1.0)


def test_mixed_shares_match_high_draw_oracle():
    """Shares with a finite draw set agree with an independent 10^6-draw average."""
    p = zero_params(alpha=2.0, beta=[1.0, 0.0], sigma=[0.4, 0.8])
    delta = np.array([0.5, -0.2])
    prices = np.array([1.2, 0.9])
    rng = np.random.default_rng(7)
    v = rng.standard_normal((1_000_000, 2))
    a_i = 2.0 - 0.4 * v[:, 0]
    mu = delta[None, :] + 2.0 * prices[None, :] - a_i[:, None] * prices[None, :] + 0.8 * v[:, [1]]
    e = np.exp(mu)
    per = e / (1 + e.sum(axis=1, keepdims=True))
    oracle = per.mean(axis=0)
    se = per.std(axis=0) / 1000.0
    d = make_draws(20000, 99)
    s = shares_from_delta(delta, prices, p, d)
    # two independent Monte Carlo estimates; 20000 draws dominate the error
    assert np.all(np.abs(s - oracle) < 4 * se * np.sqrt(1 + 1_000_000 / 20000))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_shares_and_outside_sum_to_one_per_draw(seed):
    ctx = random_context(seed, n_draws=30)
    probs = ctx.probabilities(ctx.market.prices)
    outside = 1 - probs.sum(axis=1)
    assert np.all(probs > 0)
    assert np.all(outside > 0)
    np.testing.assert_allclose(probs.sum(axis=1) + outside, 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3).filter(lambda c: abs(c) > 1e-3))
def test_shares_depend_on_utility_relative_to_outside(seed, c):
    rng = np.random.default_rng(seed)
    delta = rng.normal(size=4)
    s1 = shares_from_delta(delta, np.ones(4), zero_params(), plain_draws())
    s2 = shares_from_delta(delta + c, np.ones(4), zero_params(), plain_draws())
    assert not np.allclose(s1, s2)
    lr1 = np.log(s1) - np.log1p(-s1.sum())
    lr2 = np.log(s2) - np.log1p(-s2.sum())
    np.testing.assert_allclose(lr2 - lr1, c, atol=1e-9)


# ---------------------------------------------------------------- inversion

def test_plain_logit_inversion_closed_form():
    m = simple_market(n_firms=2, per_firm=1)
    s = np.array([0.2, 0.3])
    d = invert_shares(s, zero_params(), m, None, plain_draws())
    np.testing.assert_allclose(d, np.log(s) - np.log(0.5), atol=1e-15)


def test_round_trip_inversion_recovers_delta():
    ctx = random_context(3, n_draws=300)
    m = ctx.market
    delta_true = mean_utility(ctx.params, m, ctx.xi, None)
    s = shares_from_delta(delta_true, m.prices, ctx.params, ctx.draws)
    d = invert_shares(s, ctx.params, m, None, ctx.draws)
    np.testing.assert_allclose(d, delta_true, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_inversion_is_left_inverse_of_shares(seed):
    ctx = random_context(seed, n_draws=50)
    m = ctx.market
    delta = np.random.default_rng(seed).normal(-1.0, 1.0, m.n_products)
    s = shares_from_delta(delta, m.prices, ctx.params, ctx.draws)
    np.testing.assert_allclose(invert_shares(s, ctx.params, m, None, ctx.draws), delta, atol=1e-9)


@pytest.mark.parametrize("bad", [[0.0, 0.3], [0.6, 0.5], [-0.1, 0.2], [1.0, 0.0]])
def test_inversion_rejects_invalid_shares(bad):
    m = simple_market(n_firms=2, per_firm=1)
    with pytest.raises(ValueError):
        invert_shares(np.array(bad), zero_params(), m, None, plain_draws())


def test_inversion_reports_residual_when_not_converged():
    ctx = random_context(1, n_draws=100)
    m = ctx.market
    s = ctx.shares(m.prices)
    with pytest.raises(InversionError) as err:
        invert_shares(s, ctx.params, m, None, ctx.draws, max_iter=2)
    assert err.value.residual > 0
    assert "residual" in str(err.value)


# ---------------------------------------------------------------- elasticities

def test_plain_logit_elasticities():
    m = simple_market(n_firms=3, per_firm=1, prices=np.ones(3))
    p = DemandParams(alpha=2.0, beta=[2.0, 0.0])
    xi = -m.X[:, 1] * 0.0
    E = elasticity_matrix(p, m, xi, None, plain_draws())
    # beta const 2 with price 1 and alpha 2 gives mean utility 0, so each share is 0.25
    np.testing.assert_allclose(np.diag(E), -1.5, atol=1e-12)
    off = E[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, 0.5, atol=1e-12)


def _fd_elasticity(ctx, h=1e-5):
    p = ctx.market.prices
    s = ctx.shares(p)
    J = p.size
    E = np.empty((J, J))
    for k in range(J):
        up, dn = p.copy(), p.copy()
        up[k] += h
        dn[k] -= h
        E[:, k] = (ctx.shares(up) - ctx.shares(dn)) / (2 * h) * p[k] / s
    return E


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([None, "F0", "F2"]))
def test_elasticity_matches_finite_differences(seed, winner):
    ctx = random_context(seed, n_draws=80, winner=winner)
    E = elasticity_matrix(ctx.params, ctx.market, ctx.xi, winner, ctx.draws)
    np.testing.assert_allclose(E, _fd_elasticity(ctx), rtol=1e-4, atol=1e-8)
    assert np.all(np.diag(E) < 0)


def test_price_jacobian_symmetric():
    ctx = random_context(5, n_draws=100)
    _, D = ctx.shares_and_jacobian(ctx.market.prices)
    np.testing.assert_allclose(D, D.T, atol=1e-14)


def test_zero_share_elasticity_error():
    m = simple_market(n_firms=1, per_firm=1, prices=np.array([1.0]))
    p = DemandParams(alpha=1.0, beta=[-1e4, 0.0])
    with pytest.raises(ValueError):
        elasticity_matrix(p, m, np.zeros(1), None, plain_draws())


# ---------------------------------------------------------------- WIC choice

def test_wic_choice_plain_logit():
    m = simple_market(n_firms=2, per_firm=1, prices=np.ones(2))
    ctx = DemandContext.build(DemandParams(alpha=3.0, beta=[0.0, 0.0]), m, np.zeros(2), plain_draws())
    probs = ctx.wic_choice([0, 1])
    np.testing.assert_allclose(probs, [1 / 3, 1 / 3])
    assert ctx.wic_expected_utility([0]) == pytest.approx(np.log(2))
    assert ctx.wic_expected_utility([]) == 0.0
    np.testing.assert_array_equal(ctx.wic_choice([]), 0.0)


def test_wic_deterministic_choice_picks_best():
    m = simple_market(n_firms=2, per_firm=1, prices=np.ones(2))
    ctx = DemandContext.build(DemandParams(alpha=3.0, beta=[0.0, 0.0]), m, np.array([0.5, 1.0]), plain_draws())
    np.testing.assert_array_equal(ctx.wic_choice([0, 1], deterministic=True), [0.0, 1.0])
    assert ctx.wic_expected_utility([0, 1], deterministic=True) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_wic_utility_monotone_in_availability(seed):
    ctx = random_context(seed, n_draws=40)
    J = ctx.market.n_products
    rng = np.random.default_rng(seed)
    order = rng.permutation(J)
    vals = [ctx.wic_expected_utility(order[:k]) for k in range(J + 1)]
    assert np.all(np.diff(vals) >= -1e-12)
    total = ctx.wic_choice(order).sum()
    assert 0 < total < 1


# ---------------------------------------------------------------- GMM

def test_iv_regression_matches_closed_form_exactly_identified():
    rng = np.random.default_rng(0)
    n = 200
    Z = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    X = np.column_stack([np.ones(n), Z[:, 1] + 0.3 * rng.normal(size=n), Z[:, 2]])
    y = X @ [1.0, -2.0, 0.5] + 0.1 * rng.normal(size=n)
    np.testing.assert_allclose(iv_regression(y, X, Z), np.linalg.solve(Z.T @ X, Z.T @ y), atol=1e-10)


def test_gmm_plain_logit_noiseless_recovers_linear_parameters():
    spec = SyntheticSpec(n_markets=60, sigma_price=0.0, sigma_const=0.0, pi_income=0.0, xi_sd=0.0, n_draws=5)
    world = generate_world(spec, seed=2)
    markets = world.markets
    draws = [plain_draws()] * len(markets)
    inst = build_instruments(markets)
    est = gmm_estimate(markets, inst, draws, spec.demand_params, GMMOptions(nonlinear=()))
    p = est.params
    assert p.alpha == pytest.approx(spec.alpha, abs=1e-8)
    np.testing.assert_allclose(p.beta, spec.beta, atol=1e-8)
    assert p.delta0 == pytest.approx(spec.delta0, abs=1e-8)
    assert p.delta1 == pytest.approx(spec.delta1, abs=1e-8)
    assert max(abs(v) for v in est.xi.values()) < 1e-8


def test_gmm_rank_deficient_instruments():
    world = generate_world(SyntheticSpec(n_markets=5), seed=0)
    markets = world.markets
    n = sum(m.n_products for m in markets)
    const = np.ones((n, 1))
    bad = InstrumentSet(const, np.ones((n, 2)), const)
    with pytest.raises(DemandError):
        gmm_estimate(markets, bad, world.draws, world.demand)


def test_gmm_needs_enough_instruments():
    world = generate_world(SyntheticSpec(n_markets=5), seed=0)
    markets = world.markets
    n = sum(m.n_products for m in markets)
    empty = np.zeros((n, 0))
    with pytest.raises(DemandError):
        gmm_estimate(markets, InstrumentSet(empty, empty, empty), world.draws, world.demand)


def test_spillover_values_irrelevant_without_winner():
    """With no winner in any market, delta0/delta1 used in simulation cannot move the estimates."""
    from dataclasses import replace
    world = generate_world(SyntheticSpec(n_markets=40), seed=5)
    bare = [m.replace(winner=None) for m in world.markets]
    inst = build_instruments(bare)
    outs = []
    for d0, d1 in ((0.0, 0.0), (0.7, 1.9)):
        params = replace(world.demand, delta0=d0, delta1=d1)
        markets = [m.replace(shares=DemandContext.build(params, m, world.xi[i], world.draws[i]).shares(m.prices))
                   for i, m in enumerate(bare)]
        outs.append(gmm_estimate(markets, inst, world.draws, params,
                                 GMMOptions(nonlinear=(), two_step=False)))
    np.testing.assert_array_equal(outs[0].params.beta, outs[1].params.beta)
    assert outs[0].params.alpha == outs[1].params.alpha
    assert outs[1].params.delta0 == 0.0
    assert np.isnan(outs[1].std_errors[outs[1].names.index("delta0")])


def test_gmm_mixed_logit_within_three_standard_errors():
    spec = SyntheticSpec(n_markets=150, n_draws=150)
    world = generate_world(spec, seed=21)
    inst = build_instruments(world.markets)
    init = world.demand.with_theta2([0.5, 0.3, 0.0])
    est = gmm_estimate(world.markets, inst, world.draws, init)
    truth = {"alpha": spec.alpha, "delta0": spec.delta0, "delta1": spec.delta1,
             "sigma_price": spec.sigma_price, "sigma_const": spec.sigma_const, "pi_income": spec.pi_income}
    for name, value in truth.items():
        k = est.names.index(name)
        assert abs(est.estimates[k] - value) <= 3 * est.std_errors[k] + 1e-6, name


@pytest.mark.slow
def test_gmm_mixed_logit_large_sample():
    spec = SyntheticSpec(n_markets=500, n_draws=500)
    world = generate_world(spec, seed=8)
    est = gmm_estimate(world.markets, build_instruments(world.markets), world.draws,
                       world.demand.with_theta2([0.5, 0.3, 0.0]))
    for name in ("alpha", "delta0", "delta1", "sigma_price", "sigma_const", "pi_income"):
        k = est.names.index(name)
        true = getattr(spec, name)
        assert abs(est.estimates[k] - true) <= 3 * est.std_errors[k] + 1e-6, name


def test_estimate_json_round_trip(small_world):
    m = small_world.markets[0]
    est = DemandEstimate(params=small_world.demand, names=["beta_const", "beta_spitup", "beta_prebiotics",
                                                           "alpha", "delta0", "delta1", "sigma_price",
                                                           "sigma_const", "pi_income"],
                         estimates=np.array([1.2, 0.2, 0.3, 2.2, 0.316, 0.9585, 0.3, 0.5, 0.05]),
                         std_errors=np.full(9, 0.01), objective=1.5,
                         xi={(m.market_id, p.product_id): float(x) for p, x in zip(m.products, small_world.xi[0])})
    back = DemandEstimate.from_json(est.to_json())
    assert back.names == est.names
    np.testing.assert_array_equal(back.estimates, est.estimates)
    np.testing.assert_array_equal(back.xi_for(m), small_world.xi[0])
    assert back.params.alpha == 2.2
    with pytest.raises(ValueError):
        DemandEstimate.from_json(json.dumps({"parameters": {}}))
