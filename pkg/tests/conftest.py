import numpy as np
import pytest

from wicproc.demand import DemandContext, DemandParams, make_draws, plain_draws
from wicproc.market_data import MarketConfig, Product
from wicproc.supply import CostObservation, cost_design
from wicproc.synthetic import SyntheticSpec, generate_world


def simple_market(n_firms=3, per_firm=2, prices=None, winner=None, seed=0, market_id="m0",
                  wic_infants=1000.0, market_size=2000.0):
    """Small market with random characteristics [const, x1]."""
    rng = np.random.default_rng(seed)
    firms = [f"F{k}" for k in range(n_firms)]
    products = [Product(f"{f}-{j}", f, j == 0, [1.0, rng.uniform(-1, 1)])
                for f in firms for j in range(per_firm)]
    J = len(products)
    if prices is None:
        prices = rng.uniform(0.8, 1.6, J)
    return MarketConfig(market_id, "2015-01", products, prices, market_size, wic_infants, 3000.0,
                        {"median_income": 5.0}, {f: {"distance": 1.0, "raw_milk": 18.0, "electricity": 10.0}
                                                for f in firms},
                        {f: 1.05 for f in firms}, winner=winner, char_names=("const", "x1"))


def random_context(seed, n_firms=3, per_firm=2, n_draws=200, plain=False, winner=None,
                   alpha=2.0, delta0=0.3, delta1=0.6):
    rng = np.random.default_rng(1000 + seed)
    m = simple_market(n_firms, per_firm, seed=seed, winner=winner)
    params = DemandParams(alpha=alpha, beta=[rng.uniform(0.5, 1.5), rng.uniform(-0.5, 0.5)],
                          delta0=delta0, delta1=delta1,
                          sigma=[0.0, 0.0] if plain else [rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.6)],
                          pi_income=0.0 if plain else rng.uniform(-0.05, 0.05))
    xi = 0.2 * rng.standard_normal(m.n_products)
    draws = plain_draws() if plain else make_draws(n_draws, rng, income_median=5.0)
    return DemandContext.build(params, m, xi, draws, winner=winner)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SyntheticSpec(n_markets=8), seed=11)


FIRMS = ("A", "B", "C")
TRUE_COST = {"constant": 0.3, "B": 0.02, "C": -0.01, "auctionBrand": 0.03, "win": -0.02, "win*B": 0.005,
             "win*C": -0.004, "win*auctionBrand": -0.1, "win*auctionBrand*B": 0.01,
             "win*auctionBrand*C": -0.02, "spitup": 0.04, "distance": 0.05, "milk": 0.01,
             "distance*distance": 0.01, "milk*milk": 0.0002}


def cost_panel(n_markets, noise=0.0, seed=0, winners=FIRMS):
    rng = np.random.default_rng(seed)
    panel = []
    for i in range(n_markets):
        winner = winners[i % len(winners)]
        milk = rng.uniform(15, 22)
        for f in FIRMS:
            dist = rng.uniform(0.2, 1.5)
            for k in range(2):
                obs = CostObservation(f"m{i}", f"{f}-{k}", f, k == 0, f == winner, 0.0,
                                      {"spitup": float(rng.random() < 0.5)}, {"distance": dist, "milk": milk})
                X, names, *_ = cost_design([obs], FIRMS)
                y = float(X[0] @ [TRUE_COST[n] for n in names]) + noise * rng.standard_normal()
                panel.append(CostObservation(**{**obs.__dict__, "cost": y}))
    return panel


# one line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
