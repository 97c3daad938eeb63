import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_context
from wicproc.bidding import enumerate_auctions, predict_rebates
from wicproc.counterfactual import (
    CounterfactualError, MarketModel, MechanismConfig, MechanismOutcome, _auction_from_sim, aggregate,
    auction_outcome, compare_levels, compare_mechanisms, complete_rows, consumer_surplus_nonwic,
    consumer_surplus_wic,
    entry_equilibrium, outcomes_from_json, outcomes_to_json, predetermined_scenarios, program_size_sweep,
    run_mechanisms, select_equilibrium, simulate_auction, simulate_predetermined, simulate_voucher,
    solve_scenario,
)
from wicproc.demand import DemandContext, DemandParams, make_draws, plain_draws
from wicproc.market_data import MarketConfig, Product
from wicproc.supply import solve_bertrand, solve_two_step
from wicproc.synthetic import SyntheticSpec, generate_world


def one_product_market(price=1.0, size=1.0, wic=1.0):
    return MarketConfig("solo", "2015-01", [Product("A-0", "A", True, [1.0])], np.array([price]), size, wic, 1.0,
                        {"median_income": 5.0}, {"A": {"distance": 1.0}}, {"A": 1.0}, char_names=("const",))


@pytest.fixture(scope="module")
def world():
    return generate_world(SyntheticSpec(n_markets=6), seed=17)


@pytest.fixture(scope="module")
def models(world):
    return world.market_models()


# ---------------------------------------------------------------- consumer surplus

def test_nonwic_surplus_log_sum_closed_form():
    m = one_product_market(price=1.0)
    p = DemandParams(alpha=1.0, beta=[1.0])
    cs = consumer_surplus_nonwic(p, m, np.zeros(1), m.prices, (), plain_draws(), oz_per_infant=1.0)
    assert cs == pytest.approx(np.log(2), abs=1e-15)


def test_nonwic_surplus_vanishes_at_high_prices():
    m = one_product_market()
    p = DemandParams(alpha=1.0, beta=[1.0])
    vals = [consumer_surplus_nonwic(p, m, np.zeros(1), [q], (), plain_draws(), 1.0) for q in (10, 50, 500)]
    assert vals[-1] < 1e-200
    assert np.all(np.diff(vals) < 0)


def test_nonwic_surplus_matches_high_draw_oracle():
    params = DemandParams(alpha=2.0, beta=[1.5], sigma=[0.2, 0.7])
    m = one_product_market(price=1.1, size=3.0)
    prices = np.array([1.1])
    rng = np.random.default_rng(3)
    v = rng.standard_normal((1_000_000, 2))
    a_i = 2.0 - 0.2 * v[:, 0]
    u = 1.5 - a_i * 1.1 + 0.7 * v[:, 1]
    vals = 3.0 * np.log1p(np.exp(u)) / a_i
    d = make_draws(20000, 8)
    cs = consumer_surplus_nonwic(params, m, np.zeros(1), prices, (), d, oz_per_infant=1.0)
    se = vals.std() * np.sqrt(1 / 20000 + 1 / 1_000_000)
    assert abs(cs - vals.mean()) < 4 * se


def test_nonwic_surplus_rejects_nonpositive_price_coefficient():
    params = DemandParams(alpha=0.5, beta=[1.0], sigma=[1.0, 0.0])
    with pytest.raises(CounterfactualError, match="nonpositive"):
        consumer_surplus_nonwic(params, one_product_market(), np.zeros(1), [1.0], (), make_draws(500, 0), 1.0)


def test_wic_surplus_single_product():
    m = one_product_market(price=3.0)
    p = DemandParams(alpha=2.0, beta=[0.0])
    cs = consumer_surplus_wic(p, m, np.zeros(1), [0], plain_draws(), money_metric_alpha=2.0, oz_per_infant=1.0)
    assert cs == pytest.approx(np.log(2) / 2)
    # default money metric is the mean price coefficient
    assert consumer_surplus_wic(p, m, np.zeros(1), [0], plain_draws(), oz_per_infant=1.0) == pytest.approx(cs)
    assert consumer_surplus_wic(p, m, np.zeros(1), [], plain_draws(), oz_per_infant=1.0) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_wic_surplus_monotone_in_available_set(seed):
    ctx = random_context(seed, n_draws=40)
    m = ctx.market
    rng = np.random.default_rng(seed)
    avail = list(rng.permutation(m.n_products))
    fixed_spill = ("F0",)
    vals = [consumer_surplus_wic(ctx.params, m, ctx.xi, avail[:k], ctx.draws, participants=fixed_spill)
            for k in range(m.n_products + 1)]
    assert np.all(np.diff(vals) >= -1e-9)


def test_wic_consumers_skip_outside_when_a_brand_is_positive():
    m = one_product_market()
    ctx = DemandContext.build(DemandParams(alpha=1.0, beta=[0.3], sigma=[0.0, 0.1]), m, np.zeros(1),
                              make_draws(200, 1))
    assert np.all(ctx.price_free_utility([0]) > 0)
    assert ctx.wic_choice([0], deterministic=True)[0] == 1.0
    assert ctx.wic_choice([0])[0] < 1.0


# ---------------------------------------------------------------- auction

def test_full_rebate_means_zero_expenditure(models):
    md = models[0]
    w = md.market.winner
    cfg = MechanismConfig("auction")
    sc = solve_scenario(md, (w,), cfg)
    out = auction_outcome(md, w, sc.prices[md.market.auction_brand_of(w)], cfg, sc)
    assert out.gexp == 0.0
    assert out.profits[w]["wic"] < 0


def test_auction_deterministic_under_seed(world, models):
    rm = world.rebate_model()
    a = simulate_auction(models[1], rm, 20, seed=4)
    b = simulate_auction(models[1], rm, 20, seed=4)
    assert a.to_dict() == b.to_dict()
    assert a.n_draws == 20 and a.failures == 0


@pytest.fixture(scope="module")
def duopoly():
    spec = SyntheticSpec(n_markets=1, firms=("A", "B"), cost_firm=(0.0, 0.01), rho=(0.03, 0.06),
                         bid_firm_effects=(0.0, 0.0))
    w = generate_world(spec, seed=2)
    return w.market_models()[0], replace(w.rebate_model(), residual_pool=np.array([-0.15, 0.15]))


def test_two_firm_auction_matches_enumeration(duopoly):
    model, rm = duopoly
    cfg = MechanismConfig("auction")
    point = predict_rebates(replace(rm, residual_pool=np.zeros(1)), model.market, 1).point
    wholesale = model.market.wholesale_prices
    manual = []
    for e in itertools.product(rm.residual_pool, repeat=2):
        reb = point * np.exp(e)
        net = {f: wholesale[f] - r for f, r in zip(rm.firms, reb)}
        win = min(sorted(net), key=net.get)
        manual.append(auction_outcome(model, win, reb[rm.firms.index(win)], cfg))
    expected_gexp = np.mean([o.gexp for o in manual])
    assert len({next(iter(o.participation)) for o in manual}) == 2
    exact = _auction_from_sim(model, enumerate_auctions(rm, model.market), cfg)
    assert exact.gexp == pytest.approx(expected_gexp, rel=1e-12)
    assert exact.cs_wic == pytest.approx(np.mean([o.cs_wic for o in manual]), rel=1e-12)
    sim = simulate_auction(model, rm, n_draws=20_000, seed=1)
    assert sim.gexp == pytest.approx(expected_gexp, rel=0.02)


# ---------------------------------------------------------------- voucher

def test_voucher_degenerates_to_bertrand(world):
    spec = replace(world.spec, delta0=0.0, delta1=0.0, delta_c_nonwic=0.0, delta_c_wic=0.0, rho=(0.0, 0.0, 0.0))
    md = replace(world.market_models()[0], demand=spec.demand_params, supply=spec.supply_params)
    v = simulate_voucher(md)
    ctx = DemandContext.build(md.demand, md.market, md.xi, md.draws)
    np.testing.assert_allclose(v.prices, solve_bertrand(md.base_costs, ctx), atol=1e-9)


def test_voucher_beats_auction_for_wic_consumers_and_costs_more(world, models):
    rm = world.rebate_model()
    for md in models[:4]:
        a = simulate_auction(md, rm, 20, seed=0)
        v = simulate_voucher(md)
        assert v.cs_wic >= a.cs_wic
        assert v.gexp > a.gexp
        assert v.participation == frozenset(md.market.firms)


# ---------------------------------------------------------------- entry game

def test_dominant_participation_unique():
    table = {frozenset(): {"A": 0, "B": 0}, frozenset("A"): {"A": 2, "B": 0},
             frozenset("B"): {"A": 0, "B": 2}, frozenset("AB"): {"A": 1, "B": 1}}
    res = entry_equilibrium(table)
    assert res.equilibria == [frozenset("AB")]
    assert res.unique


def test_anti_coordination_two_equilibria():
    table = {frozenset(): {"A": 0, "B": 0}, frozenset("A"): {"A": 2, "B": 0},
             frozenset("B"): {"A": 0, "B": 2}, frozenset("AB"): {"A": -1, "B": -1}}
    res = entry_equilibrium(table)
    assert set(res.equilibria) == {frozenset("A"), frozenset("B")}
    assert not res.unique
    assert select_equilibrium(res) == frozenset("A")


def test_incomplete_table_rejected():
    with pytest.raises(ValueError, match="missing"):
        entry_equilibrium({frozenset(): {"A": 0}}, firms=("A", "B"))
    with pytest.raises(ValueError, match="lacks"):
        entry_equilibrium({frozenset(): {"A": 0}, frozenset("A"): {}}, firms=("A",))


def test_partial_table_checks_only_complete_neighbourhoods():
    table = {frozenset(): {"A": 0, "B": 0}, frozenset("A"): {"A": 2, "B": 0},
             frozenset("AB"): {"A": 1, "B": 1}}
    res = entry_equilibrium(table, ("A", "B"), allow_missing=True)
    # only {A} has both deviations ({} and {A, B}) present
    assert res.equilibria == []
    table[frozenset("AB")] = {"A": 1, "B": -1}
    res = entry_equilibrium(table, ("A", "B"), allow_missing=True)
    assert res.equilibria == [frozenset("A")]
    assert not res.unique


@settings(max_examples=100)
@given(st.lists(st.floats(-5, 5), min_size=24, max_size=24))
def test_equilibria_match_deviation_oracle(payoffs):
    firms = ("A", "B", "C")
    configs = [frozenset(c) for r in range(4) for c in itertools.combinations(firms, r)]
    table = {c: {f: payoffs[3 * i + k] for k, f in enumerate(firms)} for i, c in enumerate(configs)}
    res = entry_equilibrium(table, firms)
    oracle = []
    for c in configs:
        ok = True
        for f in firms:
            dev = c - {f} if f in c else c | {f}
            if table[dev][f] > table[c][f]:
                ok = False
        if ok:
            oracle.append(c)
    assert set(res.equilibria) == set(oracle)
    assert res.unique == (len(oracle) == 1)


# ---------------------------------------------------------------- predetermined rebate

def test_free_money_everyone_participates(models):
    cfg = MechanismConfig("predetermined", rebate_rate=0.0)
    for md in models[:3]:
        out = simulate_predetermined(md, cfg)
        assert out.participation == frozenset(md.market.firms)
        assert out.equilibrium_flags["pure_equilibrium"]


def test_full_rebate_means_no_wic_revenue(models):
    md = models[0]
    cfg = MechanismConfig("predetermined", rebate_rate=1.0)
    outs = predetermined_scenarios(md, cfg)
    assert len(outs) == 8
    for parts, o in outs.items():
        assert o.gexp == 0.0
        sc = solve_scenario(md, tuple(parts), cfg)
        for f in md.market.firms:
            k = md.market.auction_brand_of(f)
            assert o.profits[f]["wic"] == pytest.approx(-sc.costs[k] * sc.wic_quantity[k], rel=1e-12, abs=1e-9)
    chosen = simulate_predetermined(md, cfg)
    assert chosen.gexp == 0.0


def _oracle_predetermined(md: MarketModel, rate: float, oz: float = 400.0):
    """Scripted recomputation of the predetermined mechanism from primitives."""
    m, prm, sp = md.market, md.demand, md.supply
    firms = m.firms
    v = md.draws.v
    w = md.draws.weights
    inc = md.draws.income - w @ md.draws.income
    a_i = prm.alpha - prm.sigma[0] * v[:, 0] - prm.pi_income * inc
    results = {}
    for r in range(len(firms) + 1):
        for parts in itertools.combinations(firms, r):
            n = len(parts)
            spill = np.zeros(m.n_products)
            costs = np.array(md.base_costs, dtype=float)
            for f in parts:
                for j, p in enumerate(m.products):
                    if p.firm_id == f:
                        spill[j] += prm.delta0 / n
                        costs[j] += sp.delta_c_nonwic[f] / n
                        if p.is_auction_brand:
                            spill[j] += prm.delta1 / n
                            costs[j] += sp.delta_c_wic[f] / n
            ctx = DemandContext(prm, m, md.xi, md.draws, spill)
            prices = solve_two_step(costs, ctx, {f: sp.rho[f] for f in parts}, p0=m.prices).prices
            base = m.X @ prm.beta + spill + md.xi
            u = base[None, :] - a_i[:, None] * prices[None, :] + prm.sigma[1] * v[:, [1]]
            e = np.exp(u)
            s = w @ (e / (1 + e.sum(axis=1, keepdims=True)))
            cs_non = m.market_size * oz * (w @ (np.log1p(e.sum(axis=1)) / a_i))
            avail = [m.auction_brand_of(f) for f in parts]
            q = np.zeros(m.n_products)
            cs_wic = 0.0
            if avail:
                ew = np.exp(base[avail][None, :] + prm.sigma[1] * v[:, [1]])
                q[avail] = m.wic_infants * oz * (w @ (ew / (1 + ew.sum(axis=1, keepdims=True))))
                cs_wic = m.wic_infants * oz * (w @ np.log1p(ew.sum(axis=1))) / (w @ a_i)
            profit = {}
            for f in firms:
                own = m.firm_ids == f
                profit[f] = float(((prices - costs) * m.market_size * oz * s)[own].sum()
                                  + ((prices * (1 - rate) - costs) * q)[own].sum())
            results[frozenset(parts)] = dict(gexp=float((1 - rate) * prices @ q), profit=profit,
                                             cs_non=float(cs_non), cs_wic=float(cs_wic))
    eq = [c for c in results if all(results[c]["profit"][f] >= results[c ^ {f}]["profit"][f] for f in firms)]
    chosen = sorted(eq, key=lambda c: (-len(c), sorted(c)))[0]
    return chosen, results[chosen]


@pytest.mark.parametrize("index", [0, 3])
def test_predetermined_matches_scripted_oracle(models, index):
    md = models[index]
    out = simulate_predetermined(md, MechanismConfig("predetermined", rebate_rate=0.55))
    chosen, ref = _oracle_predetermined(md, 0.55)
    assert out.participation == chosen
    assert out.gexp == pytest.approx(ref["gexp"], rel=1e-9, abs=1e-6)
    assert out.cs_nonwic == pytest.approx(ref["cs_non"], rel=1e-9)
    assert out.cs_wic == pytest.approx(ref["cs_wic"], rel=1e-9, abs=1e-6)
    for f in md.market.firms:
        assert out.profits[f]["total"] == pytest.approx(ref["profit"][f], rel=1e-9, abs=1e-6)


def test_nobody_participating_leaves_wic_consumers_outside(models):
    md = models[0]
    outs = predetermined_scenarios(md, MechanismConfig("predetermined"))
    empty = outs[frozenset()]
    assert empty.gexp == 0.0 and empty.cs_wic == 0.0
    assert all(v["wic"] == 0.0 for v in empty.profits.values())


def test_mechanism_config_validation():
    with pytest.raises(ValueError):
        MechanismConfig("lottery")
    with pytest.raises(ValueError):
        MechanismConfig("predetermined", rebate_rate=1.2)
    with pytest.raises(ValueError):
        MechanismConfig("auction", money_metric_alpha=0.0)
    MechanismConfig("predetermined", rebate_rate=1.0)


# ---------------------------------------------------------------- degeneration and accounting

def test_mechanisms_coincide_without_wic_effects(world):
    spec = replace(world.spec, delta0=0.0, delta1=0.0, delta_c_nonwic=0.0, delta_c_wic=0.0, rho=(0.0, 0.0, 0.0))
    md = replace(world.market_models()[2], demand=spec.demand_params, supply=spec.supply_params)
    a = simulate_auction(md, world.rebate_model(), 10, seed=0)
    v = simulate_voucher(md)
    p = simulate_predetermined(md)
    np.testing.assert_allclose(a.prices, v.prices, atol=1e-9)
    np.testing.assert_allclose(p.prices, v.prices, atol=1e-9)
    assert a.cs_nonwic == pytest.approx(v.cs_nonwic, rel=1e-12)
    assert p.cs_nonwic == pytest.approx(v.cs_nonwic, rel=1e-12)


@pytest.fixture(scope="module")
def outcomes(world, models):
    return run_mechanisms(models, world.rebate_model(), n_draws=10, root_seed=3)


def test_aggregate_identities(outcomes, world):
    firms = world.spec.firms
    for kind, outs in outcomes.items():
        lv = aggregate(outs, firms)
        assert lv["CS"] == lv["CS_WIC"] + lv["CS_nonWIC"]
        assert lv["pi_all"] == sum(lv[f"pi_{f}"] for f in firms)
        assert lv["TS"] == lv["CS"] + lv["pi_all"]
        for o in outs:
            assert o.cs_total == o.cs_wic + o.cs_nonwic
            assert o.ts == o.cs_total + o.pi_all


def test_comparison_reflexive(outcomes, world):
    t = compare_mechanisms(outcomes, "auction", "auction", world.spec.firms)
    assert all(v == 0 for v in t.diff.values())
    assert all(v == 0 for v in t.pct_diff.values())


def test_comparison_rows_and_identities(outcomes, world):
    firms = world.spec.firms
    t = compare_mechanisms(outcomes, "voucher", "auction", firms)
    assert t.rows == ("GEXP", "TS", "CS", "pi_all", "CS_WIC", "CS_nonWIC", "pi_MJ", "pi_Nestle", "pi_Abbott")
    for col in (t.base_values, t.alt_values, t.diff):
        assert col["CS"] == col["CS_WIC"] + col["CS_nonWIC"]
        assert col["TS"] == col["CS"] + col["pi_all"]
    assert t.records()[0]["metric"] == "GEXP"


def test_percent_difference_convention():
    firms = ("A",)
    base = {"GEXP": 3.210, "CS_WIC": 1.0, "CS_nonWIC": 2.0, "pi_A": 1.0}
    alt = {"GEXP": 1.140, "CS_WIC": 1.0, "CS_nonWIC": 2.0, "pi_A": 1.0}
    t = compare_levels("no_auction", complete_rows(base, firms), "auction", complete_rows(alt, firms), firms)
    assert t.diff["GEXP"] == pytest.approx(-2.070)
    assert round(100 * t.pct_diff["GEXP"], 1) == -64.5


def test_outcomes_json_round_trip(outcomes, world):
    ids = [m.market_id for m in world.markets]
    back = outcomes_from_json(outcomes_to_json(outcomes, ids))
    for k in outcomes:
        for a, b in zip(outcomes[k], back[k]):
            assert a.to_dict() == b.to_dict()
    assert isinstance(back["voucher"][0], MechanismOutcome)


def test_run_mechanisms_thread_invariant(world, models):
    rm = world.rebate_model()
    one = run_mechanisms(models[:3], rm, n_draws=5, root_seed=1, threads=1)
    many = run_mechanisms(models[:3], rm, n_draws=5, root_seed=1, threads=3)
    for k in one:
        assert [o.to_dict() for o in one[k]] == [o.to_dict() for o in many[k]]


# ---------------------------------------------------------------- program size

def test_program_size_sweep(world, models):
    sw = program_size_sweep(models, world.rebate_model(), scales=(0.9, 1.0, 1.1), n_draws=10, root_seed=3)
    base = run_mechanisms(models, world.rebate_model(), n_draws=10, root_seed=3, mechanisms=("auction",))
    assert sw.levels[1.0] == aggregate(base["auction"], world.spec.firms)
    g = [sw.levels[s]["GEXP"] for s in sw.scales]
    assert g[0] < g[1] < g[2]
    for s in (0.9, 1.1):
        assert abs(sw.levels[s]["CS_nonWIC"] / sw.levels[1.0]["CS_nonWIC"] - 1) < 0.01
    recs = sw.records()
    assert recs[0]["metric"] == "GEXP"
    assert "pct_diff_1.1" in recs[0]
    with pytest.raises(ValueError):
        program_size_sweep(models, world.rebate_model(), scales=(0.0, 1.0))


def test_failed_scenarios_are_counted(world, models, monkeypatch):
    import wicproc.counterfactual as cf

    calls = {"n": 0}
    real = cf.solve_scenario

    def flaky(model, participants, config):
        calls["n"] += 1
        if calls["n"] == 1:
            raise cf.EquilibriumError("forced failure")
        return real(model, participants, config)

    monkeypatch.setattr(cf, "solve_scenario", flaky)
    with pytest.raises(CounterfactualError, match="failed"):
        simulate_auction(models[0], world.rebate_model(), 10, seed=0)
