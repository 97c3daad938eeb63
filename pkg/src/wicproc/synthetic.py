"""Seeded synthetic markets with a known data-generating process.

Observed prices are post-auction equilibrium prices at the true costs, and
observed shares are the true model's shares at those prices, so every
estimator in the package can be checked against the truth.  Default values
are set so that own-price elasticities, markups and rebate-to-wholesale
ratios are of the same order as those reported for the US infant formula
market.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .bidding import COVARIATES, RebateModel, bid_covariates, determine_winner, model_names
from .demand import ConsumerDraws, DemandContext, DemandParams, make_draws
from .market_data import AuctionRecord, MarketConfig, Product
from .parallel import rng_for
from .supply import SupplyParams, scenario_costs, solve_post_auction

CHAR_NAMES = ("const", "spitup", "prebiotics")
SHIFTERS = ("distance", "raw_milk", "electricity")


@dataclass(frozen=True)
class SyntheticSpec:
    n_markets: int = 20
    firms: tuple[str, ...] = ("MJ", "Nestle", "Abbott")
    products_per_firm: int = 2
    n_draws: int = 200
    # demand
    alpha: float = 2.2
    beta: tuple[float, ...] = (1.2, 0.2, 0.3)
    sigma_price: float = 0.3
    sigma_const: float = 0.5
    pi_income: float = 0.05
    delta0: float = 0.316
    delta1: float = 0.9585
    xi_sd: float = 0.1
    spitup_prob: float = 0.5
    prebiotics_prob: float = 0.5
    # supply
    cost_constant: float = 0.2
    cost_firm: tuple[float, ...] = (0.0, 0.02, 0.04)
    cost_auction_brand: float = 0.03
    cost_chars: tuple[float, ...] = (0.03, 0.05)
    cost_shifters: tuple[float, ...] = (0.05, 0.012, 0.01)
    cost_shifters_sq: tuple[float, ...] = (0.01, 0.0001, 0.0002)
    omega_sd: float = 0.02
    delta_c_nonwic: float = -0.02
    delta_c_wic: float = -0.1265
    rho: tuple[float, ...] = (0.01, 0.11, 0.07)
    # markets
    market_size_range: tuple[float, float] = (5000.0, 50000.0)
    wic_ratio_range: tuple[float, float] = (0.3, 0.6)
    distance_range: tuple[float, float] = (0.2, 1.5)      # thousand miles
    raw_milk_range: tuple[float, float] = (15.0, 22.0)    # $/cwt
    electricity_range: tuple[float, float] = (8.0, 14.0)  # cents/kWh
    income_range: tuple[float, float] = (4.0, 8.0)        # $10k
    # bidding
    wholesale_mean: float = 1.05
    wholesale_sd: float = 0.03
    rebate_ratio: float = 0.82
    bid_coefficients: tuple[float, ...] = (2.143, -0.5, -0.05, 0.05, 0.1, -0.126, 0.05, -0.1, -0.05, 0.1)
    bid_firm_effects: tuple[float, ...] = (0.0, -0.02, 0.01)
    bid_noise_sd: float = 0.03
    contract_lengths: tuple[float, ...] = (2.0, 3.0, 4.0, 5.0)

    def __post_init__(self):
        if self.n_markets < 1:
            raise ValueError("n_markets must be >= 1")
        if len(self.firms) < 1:
            raise ValueError("at least one firm is required")
        if len(set(self.firms)) != len(self.firms):
            raise ValueError("firm identifiers must be unique")
        if self.products_per_firm < 1:
            raise ValueError("products_per_firm must be >= 1")
        nf = len(self.firms)
        for name in ("cost_firm", "rho", "bid_firm_effects"):
            if len(getattr(self, name)) != nf:
                raise ValueError(f"{name} needs one entry per firm")
        if len(self.beta) != len(CHAR_NAMES):
            raise ValueError(f"beta needs {len(CHAR_NAMES)} entries")
        if len(self.bid_coefficients) != len(COVARIATES):
            raise ValueError(f"bid_coefficients needs {len(COVARIATES)} entries")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "SyntheticSpec":
        """Build from string values (as read from a key=value file)."""
        kw = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown synthetic spec key {key!r}")
            default = fields[key].default
            if isinstance(default, tuple):
                parts = [p.strip() for p in str(raw).split(",") if p.strip()]
                kw[key] = tuple(parts) if key == "firms" else tuple(float(p) for p in parts)
            elif isinstance(default, int):
                kw[key] = int(raw)
            else:
                kw[key] = float(raw)
        return cls(**kw)

    @property
    def demand_params(self) -> DemandParams:
        return DemandParams(alpha=self.alpha, beta=np.array(self.beta), delta0=self.delta0,
                            delta1=self.delta1, sigma=[self.sigma_price, self.sigma_const],
                            pi_income=self.pi_income)

    @property
    def supply_params(self) -> SupplyParams:
        return SupplyParams(delta_c_nonwic={f: self.delta_c_nonwic for f in self.firms},
                            delta_c_wic={f: self.delta_c_wic for f in self.firms},
                            rho=dict(zip(self.firms, self.rho)), omega_sd=self.omega_sd)

    def bid_truth(self) -> dict[str, float]:
        """True rebate-model coefficients, constant included."""
        names = model_names(self.firms)
        ref = np.log([self.wholesale_mean, self.wholesale_mean,
                      np.mean(self.distance_range), np.mean(self.distance_range),
                      np.mean(self.income_range), 10000.0, 20000.0,
                      np.mean(self.raw_milk_range), np.mean(self.electricity_range), 3.0])
        const = np.log(self.rebate_ratio * self.wholesale_mean) - np.dot(self.bid_coefficients, ref)
        vals = list(self.bid_coefficients) + [e - self.bid_firm_effects[0] for e in self.bid_firm_effects[1:]]
        vals.append(const + self.bid_firm_effects[0])
        return dict(zip(names, vals))


@dataclass
class World:
    spec: SyntheticSpec
    seed: int
    markets: list[MarketConfig]
    auctions: list[AuctionRecord]
    draws: list[ConsumerDraws]
    xi: list[np.ndarray]
    base_costs: list[np.ndarray]      # costs without WIC-status shifts
    costs: list[np.ndarray]           # costs in the observed (post-auction) state
    bid_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def demand(self) -> DemandParams:
        return self.spec.demand_params

    @property
    def supply(self) -> SupplyParams:
        return self.spec.supply_params

    def context(self, i: int, winner=None) -> DemandContext:
        m = self.markets[i]
        return DemandContext.build(self.demand, m, self.xi[i], self.draws[i],
                                   winner=m.winner if winner is None else winner)

    def rebate_model(self) -> RebateModel:
        """The true bid function with the realised bid shocks as residual pool."""
        truth = self.spec.bid_truth()
        names = tuple(truth)
        return RebateModel(names=names, coefficients=np.array([truth[n] for n in names]),
                           residual_pool=self.bid_residuals, r2=float("nan"), firms=self.spec.firms)

    def market_models(self):
        """True-parameter models for the counterfactual simulations."""
        from .counterfactual import MarketModel
        return [MarketModel(m, self.demand, x, d, b, self.supply)
                for m, x, d, b in zip(self.markets, self.xi, self.draws, self.base_costs)]

    def truth_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "demand": {"alpha": self.spec.alpha, "beta": dict(zip(CHAR_NAMES, self.spec.beta)),
                       "sigma_price": self.spec.sigma_price, "sigma_const": self.spec.sigma_const,
                       "pi_income": self.spec.pi_income, "delta0": self.spec.delta0,
                       "delta1": self.spec.delta1},
            "supply": json.loads(self.supply.to_json()),
            "rebate_model": self.spec.bid_truth(),
            "markets": [{"market_id": m.market_id, "xi": [float(v) for v in x],
                         "base_costs": [float(v) for v in b], "costs": [float(v) for v in c]}
                        for m, x, b, c in zip(self.markets, self.xi, self.base_costs, self.costs)],
        }, indent=1) + "\n"


def _cost_vector(spec: SyntheticSpec, products, shifters, rng) -> np.ndarray:
    out = []
    firm_effect = dict(zip(spec.firms, spec.cost_firm))
    for p in products:
        z = np.array([shifters[p.firm_id][n] for n in SHIFTERS])
        c = (spec.cost_constant + firm_effect[p.firm_id] + spec.cost_auction_brand * p.is_auction_brand
             + np.dot(spec.cost_chars, p.characteristics[1:]) + np.dot(spec.cost_shifters, z)
             + np.dot(spec.cost_shifters_sq, z * z))
        out.append(c)
    return np.array(out) + spec.omega_sd * rng.standard_normal(len(out))


def generate_world(spec: SyntheticSpec | None = None, seed: int = 0) -> World:
    """Markets, auction records and the underlying truth, pure in (spec, seed)."""
    spec = spec or SyntheticSpec()
    rng = rng_for(seed, "generate", 0)
    months = [f"2015-{k:02d}" for k in range(1, 13)]
    wholesale = {mo: {f: spec.wholesale_mean * float(np.exp(spec.wholesale_sd * rng.standard_normal()))
                      for f in spec.firms} for mo in months}
    truth_bid = spec.bid_truth()
    bid_names = tuple(truth_bid)
    bid_coef = np.array([truth_bid[n] for n in bid_names])
    params = spec.demand_params
    supply = spec.supply_params

    markets, auctions, draws_l, xis, base_l, cost_l, resid = [], [], [], [], [], [], []
    for i in range(spec.n_markets):
        mrng = rng_for(seed, "generate", i + 1)
        month = months[i % 12]
        mid = f"M{i:03d}-{month}"
        products = []
        for f in spec.firms:
            for k in range(spec.products_per_firm):
                chars = [1.0, float(mrng.random() < spec.spitup_prob), float(mrng.random() < spec.prebiotics_prob)]
                products.append(Product(f"{f}-{k}", f, k == 0, chars))
        milk = mrng.uniform(*spec.raw_milk_range)
        elec = mrng.uniform(*spec.electricity_range)
        shifters = {f: {"distance": mrng.uniform(*spec.distance_range), "raw_milk": milk, "electricity": elec}
                    for f in spec.firms}
        size = mrng.uniform(*spec.market_size_range)
        wic = size * mrng.uniform(*spec.wic_ratio_range)
        income = mrng.uniform(*spec.income_range)
        demo = {"median_income": income, "labor_participation": mrng.uniform(0.5, 0.7),
                "high_school": mrng.uniform(0.8, 0.95), "white_share": mrng.uniform(0.5, 0.9)}
        xi = spec.xi_sd * mrng.standard_normal(len(products))
        base = _cost_vector(spec, products, shifters, mrng)

        # auction
        pre = MarketConfig(mid, month, products, np.ones(len(products)), size, wic,
                           size * mrng.uniform(1.2, 1.5), demo, shifters, wholesale[month],
                           char_names=CHAR_NAMES)
        length = float(mrng.choice(spec.contract_lengths))
        rebates = {}
        for f in spec.firms:
            x = bid_covariates(pre, f, length)
            e = spec.bid_noise_sd * mrng.standard_normal()
            row = np.concatenate([x, [float(f == g) for g in spec.firms[1:]], [1.0]])
            rebates[f] = float(np.exp(row @ bid_coef + e))
            resid.append(e)
        winner = determine_winner(wholesale[month], rebates).firm
        for f in spec.firms:
            auctions.append(AuctionRecord(mid, f, wholesale[month][f], rebates[f], length, f == winner))

        # equilibrium prices and shares under the true model
        draws = make_draws(spec.n_draws, rng_for(seed, "consumer-draws", i), income_median=income)
        pre = pre.replace(winner=winner)
        ctx = DemandContext.build(params, pre, xi, draws, winner=winner)
        costs = scenario_costs(base, pre, supply, (winner,))
        prices = solve_post_auction(costs, ctx, winner, supply.rho[winner])
        shares = ctx.shares(prices)
        markets.append(pre.replace(prices=prices, shares=shares))
        draws_l.append(draws)
        xis.append(xi)
        base_l.append(base)
        cost_l.append(costs)
    return World(spec, seed, markets, auctions, draws_l, xis, base_l, cost_l, np.array(resid))


def generate_synthetic(spec: SyntheticSpec | None = None, seed: int = 0) -> list[MarketConfig]:
    return generate_world(spec, seed).markets
