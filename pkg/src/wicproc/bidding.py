"""Reduced-form rebate bids and auction outcomes.

Log rebates are linear in the log of each firm's own and rivals' wholesale
prices and plant distances, market demand covariates, input prices and the
contract length, plus firm dummies.  Rival covariates are averaged over the
other firms.  Counterfactual bids add resampled in-sample residuals to the
fitted index; the lowest net price (wholesale minus rebate) wins.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .market_data import AuctionRecord, DataError, MarketConfig
from .supply import CollinearityError, ols

COVARIATES = (
    "log_wholesale", "log_rival_wholesale", "log_distance", "log_rival_distance",
    "log_income", "log_wic_infants", "log_nonwic_infants", "log_raw_milk",
    "log_electricity", "log_contract_length",
)
DEFAULT_CONTRACT_LENGTH = 3.0
TIE_TOL = 1e-12


@dataclass(frozen=True)
class RebateModel:
    names: tuple[str, ...]
    coefficients: np.ndarray
    residual_pool: np.ndarray
    r2: float
    firms: tuple[str, ...]
    std_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # residuals grouped by market, one entry per firm, for joint resampling
    market_residuals: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=float))
        object.__setattr__(self, "residual_pool", np.asarray(self.residual_pool, dtype=float))
        object.__setattr__(self, "std_errors", np.asarray(self.std_errors, dtype=float))

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def to_json(self) -> str:
        return json.dumps({
            "coefficients": {n: float(v) for n, v in zip(self.names, self.coefficients)},
            "std_errors": {n: float(v) for n, v in zip(self.names, self.std_errors)},
            "residual_pool": [float(v) for v in self.residual_pool],
            "r2": float(self.r2), "firms": list(self.firms),
            "market_residuals": [list(r) for r in self.market_residuals]}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RebateModel":
        d = json.loads(text)
        for key in ("coefficients", "residual_pool", "firms"):
            if key not in d:
                raise ValueError(f"rebate model JSON missing {key!r}")
        names = tuple(d["coefficients"])
        return cls(names=names, coefficients=np.array([d["coefficients"][n] for n in names]),
                   residual_pool=np.array(d["residual_pool"]), r2=d.get("r2", np.nan),
                   firms=tuple(d["firms"]),
                   std_errors=np.array([d.get("std_errors", {}).get(n, np.nan) for n in names]),
                   market_residuals=tuple(tuple(r) for r in d.get("market_residuals", ())))


def _log(value: float, what: str, where: str) -> float:
    if not value > 0:
        raise DataError(f"{where}: {what} must be positive to take logs (got {value})")
    return float(np.log(value))


def bid_covariates(market: MarketConfig, firm: str, contract_length: float = DEFAULT_CONTRACT_LENGTH,
                   wholesale: Mapping[str, float] | None = None) -> np.ndarray:
    """The logged covariates of :data:`COVARIATES` for one bidder."""
    where = f"market {market.market_id}, firm {firm}"
    w = dict(market.wholesale_prices if wholesale is None else wholesale)
    rivals = [f for f in market.firms if f != firm]
    if not rivals:
        raise DataError(f"{where}: bidding needs at least one rival")
    dist = {f: market.cost_shifters[f].get("distance", np.nan) for f in market.firms}
    own_z = market.cost_shifters[firm]
    demo = market.demographics
    vals = [
        (w[firm], "wholesale price"),
        (np.mean([w[f] for f in rivals]), "rival wholesale price"),
        (dist[firm], "distance"),
        (np.mean([dist[f] for f in rivals]), "rival distance"),
        (demo.get("median_income", np.nan), "median income"),
        (market.wic_infants, "WIC infants"),
        (market.non_wic_infants, "non-WIC infants"),
        (own_z.get("raw_milk", np.nan), "raw milk price"),
        (own_z.get("electricity", np.nan), "electricity price"),
        (contract_length, "contract length"),
    ]
    return np.array([_log(v, what, where) for v, what in vals])


def _design_row(x: np.ndarray, firm: str, firms: Sequence[str]) -> np.ndarray:
    dummies = [float(firm == f) for f in firms[1:]]
    return np.concatenate([x, dummies, [1.0]])


def model_names(firms: Sequence[str]) -> tuple[str, ...]:
    return COVARIATES + tuple(f"firm_{f}" for f in firms[1:]) + ("constant",)


def fit_rebate_model(records: Sequence[AuctionRecord], markets: Mapping[str, MarketConfig],
                     firms: Sequence[str] | None = None) -> RebateModel:
    """OLS of log rebate on the bid covariates; residuals kept for resampling.

    Records with a zero rebate cannot be logged and raise.
    """
    records = list(records)
    if firms is None:
        firms = tuple(dict.fromkeys(r.firm_id for r in records))
    firms = tuple(firms)
    rows, y, keys = [], [], []
    for r in records:
        if r.market_id not in markets:
            raise DataError(f"auction record {r.market_id}/{r.firm_id}: no such market")
        m = markets[r.market_id]
        where = f"auction record {r.market_id}/{r.firm_id}"
        x = bid_covariates(m, r.firm_id, r.contract_length,
                           wholesale={**m.wholesale_prices, r.firm_id: r.wholesale})
        rows.append(_design_row(x, r.firm_id, firms))
        y.append(_log(r.rebate, "rebate", where))
        keys.append(r.market_id)
    X = np.array(rows)
    y = np.array(y)
    names = model_names(firms)
    if X.shape[0] < 2 * X.shape[1]:
        raise CollinearityError(f"{X.shape[0]} auction records for {X.shape[1]} coefficients; "
                                "need at least two per coefficient")
    coef, se, resid = ols(y, X, names)
    tss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - resid @ resid / tss if tss > 0 else 1.0
    by_market: dict[str, dict[str, float]] = {}
    for k, r, e in zip(keys, records, resid):
        by_market.setdefault(k, {})[r.firm_id] = float(e)
    joint = tuple(tuple(d[f] for f in firms) for d in by_market.values() if all(f in d for f in firms))
    return RebateModel(names=names, coefficients=coef, residual_pool=resid, r2=float(r2),
                       firms=firms, std_errors=se, market_residuals=joint)


def point_rebates(model: RebateModel, market: MarketConfig,
                  contract_length: float = DEFAULT_CONTRACT_LENGTH) -> dict[str, float]:
    """exp of the fitted index for every firm in the model."""
    out = {}
    for f in model.firms:
        x = bid_covariates(market, f, contract_length)
        out[f] = float(np.exp(_design_row(x, f, model.firms) @ model.coefficients))
    return out


class Winner(NamedTuple):
    firm: str
    tie: bool
    net_prices: dict


def determine_winner(wholesale: Mapping[str, float], rebates: Mapping[str, float]) -> Winner:
    """Lowest net price wins; exact ties go to the lexicographically first firm."""
    if not wholesale:
        raise ValueError("no bidders")
    if set(wholesale) != set(rebates):
        raise ValueError("wholesale and rebate maps cover different firms")
    net = {f: wholesale[f] - rebates[f] for f in sorted(wholesale)}
    best = min(net.values())
    tied = [f for f, v in net.items() if v - best <= TIE_TOL]
    return Winner(tied[0], len(tied) > 1, net)


@dataclass(frozen=True)
class AuctionSim:
    firms: tuple[str, ...]
    point: np.ndarray         # (n_firms,)
    rebates: np.ndarray       # (n_draws, n_firms)
    net_prices: np.ndarray    # (n_draws, n_firms)
    winners: tuple[str, ...]
    ties: np.ndarray

    def win_frequencies(self) -> dict[str, float]:
        n = len(self.winners)
        return {f: sum(w == f for w in self.winners) / n for f in self.firms}

    def winner_rebate(self, draw: int) -> float:
        return float(self.rebates[draw, self.firms.index(self.winners[draw])])


def _simulate(model: RebateModel, market: MarketConfig, resid: np.ndarray,
              contract_length: float) -> AuctionSim:
    point = point_rebates(model, market, contract_length)
    firms = model.firms
    pt = np.array([point[f] for f in firms])
    rebates = np.maximum(pt[None, :] * np.exp(resid), 0.0)
    w = np.array([market.wholesale_prices[f] for f in firms])
    winners, ties = [], []
    for row in rebates:
        res = determine_winner(dict(zip(firms, w)), dict(zip(firms, row)))
        winners.append(res.firm)
        ties.append(res.tie)
    return AuctionSim(firms, pt, rebates, w[None, :] - rebates, tuple(winners), np.array(ties))


def predict_rebates(model: RebateModel, market: MarketConfig, n_draws: int = 50, seed=0,
                    joint: bool = False, contract_length: float = DEFAULT_CONTRACT_LENGTH) -> AuctionSim:
    """Point predictions times exp of resampled residuals, then the winner per draw.

    Residuals are drawn independently for each firm by default; ``joint``
    draws one market's residual vector at a time instead.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    rng = np.random.default_rng(seed)
    n_f = len(model.firms)
    if joint:
        pool = np.array(model.market_residuals, dtype=float).reshape(-1, n_f)
        if pool.shape[0] == 0:
            raise ValueError("empty joint residual pool")
        resid = pool[rng.integers(0, pool.shape[0], n_draws)]
    else:
        pool = model.residual_pool
        if pool.size == 0:
            raise ValueError("empty residual pool")
        resid = pool[rng.integers(0, pool.size, (n_draws, n_f))]
    return _simulate(model, market, resid, contract_length)


def enumerate_auctions(model: RebateModel, market: MarketConfig, pool: Sequence[float] | None = None,
                       contract_length: float = DEFAULT_CONTRACT_LENGTH) -> AuctionSim:
    """Every residual combination ``pool ** n_firms``, each equally likely."""
    pool = model.residual_pool if pool is None else np.asarray(pool, dtype=float)
    combos = np.array(list(itertools.product(pool, repeat=len(model.firms))), dtype=float)
    return _simulate(model, market, combos, contract_length)


def auction_table(market_id: str, sim: AuctionSim) -> list[dict]:
    """Rows of (market_id, draw, firm, rebate, net_price, won)."""
    rows = []
    for d in range(len(sim.winners)):
        for k, f in enumerate(sim.firms):
            rows.append({"market_id": market_id, "draw": d, "firm": f,
                         "rebate": float(sim.rebates[d, k]), "net_price": float(sim.net_prices[d, k]),
                         "won": sim.winners[d] == f})
    return rows
