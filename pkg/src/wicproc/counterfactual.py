"""Procurement-mechanism counterfactuals and welfare accounts.

Three ways of supplying WIC formula are simulated market by market:

* ``auction``: simulated rebate bids pick one supplier per draw.
* ``voucher``: every firm's auction brand is available and paid at retail.
* ``predetermined``: firms choose whether to join at a fixed rebate rate,
  and the participation pattern is a pure-strategy equilibrium of the entry
  game.

In every mechanism WIC consumers choose among the brands on offer with no
price sensitivity, so the WIC quantity of each brand is the WIC population
times its price-free choice probability.  WIC status spillovers and cost
savings are split equally among the firms holding it.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .bidding import RebateModel, predict_rebates
from .demand import ConsumerDraws, DemandContext, DemandParams, individual_alpha, mean_utility, \
    spillover_utility, _deviations
from .market_data import MarketConfig
from .parallel import pmap, rng_for
from .supply import OZ_PER_INFANT, EquilibriumError, SupplyParams, firm_profits, scenario_costs, \
    solve_two_step

log = logging.getLogger(__name__)

MECHANISMS = ("auction", "voucher", "predetermined")
MAX_FAILURE_RATE = 0.05


class CounterfactualError(RuntimeError):
    pass


@dataclass(frozen=True)
class MechanismConfig:
    kind: str = "auction"
    rebate_rate: float = 0.55
    spillover_prorate: str = "equal"
    cost_saving_prorate: str = "equal"
    wic_ounces_per_infant: float = OZ_PER_INFANT
    money_metric_alpha: float | None = None    # None: mean price coefficient over draws
    deterministic_wic_choice: bool = False
    equilibrium_selection: str = "max_participation"

    def __post_init__(self):
        if self.kind not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.kind!r}")
        if not 0.0 <= self.rebate_rate <= 1.0:
            raise ValueError("rebate_rate must lie in [0, 1]")
        if self.spillover_prorate != "equal" or self.cost_saving_prorate != "equal":
            raise ValueError("only equal prorating is supported")
        if self.equilibrium_selection not in ("max_participation", "min_participation"):
            raise ValueError("equilibrium_selection must be max_participation or min_participation")
        if self.money_metric_alpha is not None and not self.money_metric_alpha > 0:
            raise ValueError("money_metric_alpha must be > 0")


@dataclass(frozen=True)
class MechanismOutcome:
    kind: str
    gexp: float
    cs_wic: float
    cs_nonwic: float
    profits: Mapping[str, Mapping[str, float]]
    prices: np.ndarray
    participation: frozenset
    equilibrium_flags: Mapping[str, bool] = field(default_factory=dict)
    failures: int = 0
    n_draws: int = 1

    @property
    def cs_total(self) -> float:
        return self.cs_wic + self.cs_nonwic

    @property
    def pi_all(self) -> float:
        return float(sum(v["total"] for v in self.profits.values()))

    @property
    def ts(self) -> float:
        return self.cs_total + self.pi_all

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gexp": self.gexp, "cs_wic": self.cs_wic, "cs_nonwic": self.cs_nonwic,
                "profits": {f: dict(v) for f, v in self.profits.items()},
                "prices": [float(p) for p in self.prices],
                "participation": sorted(self.participation),
                "equilibrium_flags": dict(self.equilibrium_flags),
                "failures": self.failures, "n_draws": self.n_draws}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MechanismOutcome":
        return cls(kind=d["kind"], gexp=d["gexp"], cs_wic=d["cs_wic"], cs_nonwic=d["cs_nonwic"],
                   profits=d["profits"], prices=np.array(d["prices"]),
                   participation=frozenset(d["participation"]),
                   equilibrium_flags=d.get("equilibrium_flags", {}),
                   failures=d.get("failures", 0), n_draws=d.get("n_draws", 1))


@dataclass(frozen=True)
class MarketModel:
    """One market with fitted demand and supply, ready for simulation.

    ``base_costs`` are marginal costs without any WIC-status cost shift.
    """
    market: MarketConfig
    demand: DemandParams
    xi: np.ndarray
    draws: ConsumerDraws
    base_costs: np.ndarray
    supply: SupplyParams

    def context(self, participants=()) -> DemandContext:
        return DemandContext.build(self.demand, self.market, self.xi, self.draws,
                                   participants=tuple(participants))

    def costs(self, participants=()) -> np.ndarray:
        return scenario_costs(self.base_costs, self.market, self.supply, tuple(participants))

    def rho(self, firm: str) -> float:
        return float(self.supply.rho.get(firm, 0.0))

    def scaled(self, wic_scale: float) -> "MarketModel":
        if not wic_scale > 0:
            raise ValueError("scale factors must be positive")
        return replace(self, market=self.market.replace(wic_infants=self.market.wic_infants * wic_scale))


# ----------------------------------------------------------------------
# consumer surplus

def consumer_surplus_nonwic(params: DemandParams, market: MarketConfig, xi, prices, participants,
                            draws: ConsumerDraws, oz_per_infant: float = OZ_PER_INFANT) -> float:
    """Dollar value of the non-WIC choice set: scaled log-sum over draws."""
    alpha_i = individual_alpha(params, draws)
    if np.any(alpha_i <= 0):
        raise CounterfactualError(f"market {market.market_id}: nonpositive individual price "
                                  f"coefficient (min {alpha_i.min():.4g})")
    p = np.asarray(prices, dtype=float)
    if participants is None:
        participants = ()
    elif isinstance(participants, str):
        participants = (participants,)
    spill = spillover_utility(params, market, participants=tuple(participants))
    delta = mean_utility(params, market, xi, prices=p, spill=spill)
    mu = delta[None, :] + _deviations(params, p, draws)
    logsum = np.logaddexp(0.0, special.logsumexp(mu, axis=1))
    return float(market.market_size * oz_per_infant * (draws.weights @ (logsum / alpha_i)))


def consumer_surplus_wic(params: DemandParams, market: MarketConfig, xi, available, draws: ConsumerDraws,
                         money_metric_alpha: float | None = None, participants=None,
                         oz_per_infant: float = OZ_PER_INFANT, deterministic: bool = False) -> float:
    """Dollar value of the WIC choice set for all WIC consumers.

    Utilities drop the price term; the expected maximum over ``available``
    products and the outside good is converted to dollars by dividing by
    ``money_metric_alpha`` (default: mean individual price coefficient).
    With nothing available every WIC consumer takes the outside good.
    """
    available = list(available)
    if participants is None:
        participants = [market.products[j].firm_id for j in available]
    ctx = DemandContext.build(params, market, xi, draws, participants=tuple(dict.fromkeys(participants)))
    mm = money_metric_alpha if money_metric_alpha is not None else float(draws.weights @ individual_alpha(params, draws))
    if not mm > 0:
        raise CounterfactualError("money-metric price coefficient must be positive")
    value = ctx.wic_expected_utility(available, deterministic)
    return float(market.wic_infants * oz_per_infant * value / mm)


# ----------------------------------------------------------------------
# market-level scenario evaluation

@dataclass(frozen=True)
class Scenario:
    """Solved pricing stage for one set of WIC suppliers."""
    participants: tuple[str, ...]
    prices: np.ndarray
    costs: np.ndarray
    shares: np.ndarray
    wic_quantity: np.ndarray
    cs_nonwic: float
    cs_wic: float


def solve_scenario(model: MarketModel, participants: Sequence[str], config: MechanismConfig) -> Scenario:
    m = model.market
    parts = tuple(f for f in m.firms if f in set(participants))
    ctx = model.context(parts)
    costs = model.costs(parts)
    two = solve_two_step(costs, ctx, {f: model.rho(f) for f in parts}, p0=m.prices)
    p = two.prices
    shares = ctx.shares(p)
    oz = config.wic_ounces_per_infant
    available = [m.auction_brand_of(f) for f in parts]
    q = ctx.wic_choice(available, config.deterministic_wic_choice) * m.wic_infants * oz
    mm = config.money_metric_alpha
    if mm is None:
        mm = float(model.draws.weights @ ctx.alpha_i)
    cs_wic = (m.wic_infants * oz * ctx.wic_expected_utility(available, config.deterministic_wic_choice) / mm
              if available else 0.0)
    cs_non = consumer_surplus_nonwic(model.demand, m, model.xi, p, parts, model.draws, oz)
    return Scenario(parts, p, costs, shares, q, cs_non, cs_wic)


def _outcome(kind, model, sc: Scenario, wic_net_price, gexp, config, participation=None, flags=None,
             failures=0, n_draws=1) -> MechanismOutcome:
    prof = firm_profits(sc.prices, sc.costs, sc.shares, model.market, sc.wic_quantity, wic_net_price,
                        config.wic_ounces_per_infant)
    return MechanismOutcome(kind=kind, gexp=float(gexp), cs_wic=sc.cs_wic, cs_nonwic=sc.cs_nonwic,
                            profits=prof, prices=sc.prices,
                            participation=frozenset(sc.participants if participation is None else participation),
                            equilibrium_flags=dict(flags or {}), failures=failures, n_draws=n_draws)


def auction_outcome(model: MarketModel, winner: str, rebate: float, config: MechanismConfig,
                    scenario: Scenario | None = None) -> MechanismOutcome:
    """Outcome when ``winner`` holds the contract at ``rebate`` $/oz."""
    sc = scenario or solve_scenario(model, (winner,), config)
    k = model.market.auction_brand_of(winner)
    net = sc.prices.copy()
    net[k] -= rebate
    gexp = (sc.prices[k] - rebate) * sc.wic_quantity[k]
    return _outcome("auction", model, sc, net, gexp, config)


def _mean_outcomes(kind: str, outs: Sequence[MechanismOutcome], firms, failures: int,
                   flags=None) -> MechanismOutcome:
    n = len(outs)
    profits = {f: {key: float(np.mean([o.profits[f][key] for o in outs])) for key in ("total", "wic", "non_wic")}
               for f in firms}
    winners = [next(iter(o.participation)) for o in outs]
    modal = max(sorted(set(winners)), key=winners.count)
    return MechanismOutcome(kind=kind, gexp=float(np.mean([o.gexp for o in outs])),
                            cs_wic=float(np.mean([o.cs_wic for o in outs])),
                            cs_nonwic=float(np.mean([o.cs_nonwic for o in outs])),
                            profits=profits, prices=np.mean([o.prices for o in outs], axis=0),
                            participation=frozenset([modal]), equilibrium_flags=dict(flags or {}),
                            failures=failures, n_draws=n)


def simulate_auction(model: MarketModel, rebate_model: RebateModel, n_draws: int = 50, seed=0,
                     config: MechanismConfig | None = None, joint: bool = False) -> MechanismOutcome:
    """Draw-averaged auction outcome; the reported participation is the modal winner.

    Prices depend only on who wins, so each winner's pricing stage is solved
    once.  Draws whose equilibrium fails are dropped; more than 5% failures
    raise.
    """
    config = config or MechanismConfig("auction")
    sim = predict_rebates(rebate_model, model.market, n_draws, seed, joint=joint)
    return _auction_from_sim(model, sim, config)


def _auction_from_sim(model, sim, config) -> MechanismOutcome:
    scenarios: dict[str, Scenario | None] = {}
    outs, failures = [], 0
    ties = False
    for d, w in enumerate(sim.winners):
        if w not in scenarios:
            try:
                scenarios[w] = solve_scenario(model, (w,), config)
            except EquilibriumError as exc:
                log.warning("market %s, winner %s: %s", model.market.market_id, w, exc)
                scenarios[w] = None
        if scenarios[w] is None:
            failures += 1
            continue
        ties = ties or bool(sim.ties[d])
        outs.append(auction_outcome(model, w, sim.winner_rebate(d), config, scenarios[w]))
    if failures > MAX_FAILURE_RATE * len(sim.winners) or not outs:
        raise CounterfactualError(f"market {model.market.market_id}: {failures} of {len(sim.winners)} "
                                  "auction draws failed to reach an equilibrium")
    return _mean_outcomes("auction", outs, model.market.firms, failures, {"tie": ties})


def simulate_voucher(model: MarketModel, config: MechanismConfig | None = None) -> MechanismOutcome:
    """All firms supply WIC and are reimbursed at retail."""
    config = config or MechanismConfig("voucher")
    sc = solve_scenario(model, model.market.firms, config)
    gexp = float(sc.prices @ sc.wic_quantity)
    return _outcome("voucher", model, sc, sc.prices, gexp, config)


# ----------------------------------------------------------------------
# entry game

@dataclass(frozen=True)
class EntryResult:
    equilibria: list
    unique: bool
    firms: tuple[str, ...]


def _profile_key(s) -> frozenset:
    return frozenset(s)


def entry_equilibrium(profit_table: Mapping[frozenset, Mapping[str, float]],
                      firms: Sequence[str] | None = None, allow_missing: bool = False) -> EntryResult:
    """All pure-strategy Nash equilibria of the participation game.

    A participation set is an equilibrium when no firm strictly gains by
    switching its own decision.  With ``allow_missing`` absent sets are
    tolerated and only sets whose every unilateral deviation is in the table
    are checked; at least one such set must exist.
    """
    table = {_profile_key(k): v for k, v in profit_table.items()}
    if firms is None:
        firms = sorted(set().union(*table) if table else set())
    firms = tuple(firms)
    configs = [frozenset(c) for r in range(len(firms) + 1) for c in itertools.combinations(firms, r)]
    missing = [sorted(c) for c in configs if c not in table]
    if missing and not allow_missing:
        raise ValueError(f"profit table is missing participation sets {missing}")
    for c in configs:
        absent = [f for f in firms if c in table and f not in table[c]]
        if absent:
            raise ValueError(f"profit table entry {sorted(c)} lacks firms {absent}")
    checkable = [c for c in configs if c in table and all(c ^ {f} in table for f in firms)]
    if not checkable:
        raise ValueError(f"profit table is missing participation sets {missing}; no set can be checked")
    eq = [c for c in checkable if all(table[c][f] >= table[c ^ {f}][f] for f in firms)]
    return EntryResult(equilibria=eq, unique=len(eq) == 1 and not missing, firms=firms)


def select_equilibrium(result: EntryResult, rule: str = "max_participation") -> frozenset:
    if not result.equilibria:
        raise CounterfactualError("entry game has no pure-strategy equilibrium")
    key = (lambda c: (-len(c), sorted(c))) if rule == "max_participation" else (lambda c: (len(c), sorted(c)))
    return sorted(result.equilibria, key=key)[0]


def predetermined_scenarios(model: MarketModel, config: MechanismConfig) -> dict[frozenset, MechanismOutcome]:
    """Outcome of every participation set at the configured rebate rate."""
    out = {}
    r = config.rebate_rate
    for n in range(len(model.market.firms) + 1):
        for parts in itertools.combinations(model.market.firms, n):
            try:
                sc = solve_scenario(model, parts, config)
            except EquilibriumError as exc:
                log.warning("market %s, participants %s: %s", model.market.market_id, parts, exc)
                continue
            net = sc.prices * (1.0 - r)
            gexp = float(net @ sc.wic_quantity)
            out[frozenset(parts)] = _outcome("predetermined", model, sc, net, gexp, config)
    return out


def simulate_predetermined(model: MarketModel, config: MechanismConfig | None = None) -> MechanismOutcome:
    """Entry game at a fixed rebate rate, then that equilibrium's outcome.

    When several equilibria exist the configured selection rule picks one and
    ``equilibrium_flags['unique']`` is False.  If no pure equilibrium exists
    the set with the smallest largest deviation gain is used and flagged.
    """
    config = config or MechanismConfig("predetermined")
    outs = predetermined_scenarios(model, config)
    firms = model.market.firms
    table = {k: {f: v.profits[f]["total"] for f in firms} for k, v in outs.items()}
    try:
        res = entry_equilibrium(table, firms, allow_missing=True)
    except ValueError as exc:
        raise CounterfactualError(f"market {model.market.market_id}: {exc}") from None
    flags = {"unique": res.unique, "tie": False, "pure_equilibrium": bool(res.equilibria),
             "complete_table": len(table) == 2 ** len(firms)}
    if res.equilibria:
        chosen = select_equilibrium(res, config.equilibrium_selection)
    else:
        def regret(c):
            return max(table[c ^ {f}][f] - table[c][f] for f in firms)
        checkable = [c for c in table if all(c ^ {f} in table for f in firms)]
        chosen = min(checkable, key=lambda c: (regret(c), -len(c), sorted(c)))
    o = outs[chosen]
    return replace(o, equilibrium_flags=flags)


# ----------------------------------------------------------------------
# aggregation

ROWS_FIXED = ("GEXP", "TS", "CS", "pi_all", "CS_WIC", "CS_nonWIC")


def table_rows(firms: Sequence[str]) -> tuple[str, ...]:
    return ROWS_FIXED + tuple(f"pi_{f}" for f in firms)


def aggregate(outcomes: Sequence[MechanismOutcome], firms: Sequence[str]) -> dict[str, float]:
    """Per-market means of the welfare components with the identities imposed."""
    if not outcomes:
        raise ValueError("no outcomes to aggregate")
    comp = {"GEXP": np.mean([o.gexp for o in outcomes]),
            "CS_WIC": np.mean([o.cs_wic for o in outcomes]),
            "CS_nonWIC": np.mean([o.cs_nonwic for o in outcomes])}
    for f in firms:
        comp[f"pi_{f}"] = np.mean([o.profits[f]["total"] for o in outcomes])
    return complete_rows({k: float(v) for k, v in comp.items()}, firms)


def complete_rows(comp: Mapping[str, float], firms: Sequence[str]) -> dict[str, float]:
    """Fill CS, pi_all and TS from their components, in table order."""
    out = {"GEXP": comp["GEXP"]}
    cs = comp["CS_WIC"] + comp["CS_nonWIC"]
    pi_all = 0.0
    for f in firms:
        pi_all += comp[f"pi_{f}"]
    out["TS"] = cs + pi_all
    out["CS"] = cs
    out["pi_all"] = pi_all
    out["CS_WIC"] = comp["CS_WIC"]
    out["CS_nonWIC"] = comp["CS_nonWIC"]
    for f in firms:
        out[f"pi_{f}"] = comp[f"pi_{f}"]
    return out


@dataclass
class ComparisonTable:
    """Levels of two mechanisms plus difference and percent difference."""
    base: str
    alt: str
    rows: tuple[str, ...]
    base_values: dict[str, float]
    alt_values: dict[str, float]
    diff: dict[str, float]
    pct_diff: dict[str, float]

    def records(self) -> list[dict]:
        return [{"metric": r, self.base: self.base_values[r], self.alt: self.alt_values[r],
                 "diff": self.diff[r], "pct_diff": self.pct_diff[r]} for r in self.rows]

    @property
    def columns(self) -> list[str]:
        return ["metric", self.base, self.alt, "diff", "pct_diff"]


def compare_levels(base_name: str, base: Mapping[str, float], alt_name: str, alt: Mapping[str, float],
                   firms: Sequence[str]) -> ComparisonTable:
    """Diffs of components, with derived rows summed so identities hold in each column."""
    comps = ["GEXP", "CS_WIC", "CS_nonWIC"] + [f"pi_{f}" for f in firms]
    diff = complete_rows({k: alt[k] - base[k] for k in comps}, firms)
    pct = {k: (diff[k] / base[k] if base[k] != 0 else (0.0 if diff[k] == 0 else float("nan"))) for k in diff}
    rows = table_rows(firms)
    return ComparisonTable(base_name, alt_name, rows, dict(base), dict(alt), diff, pct)


def compare_mechanisms(outcomes: Mapping[str, Sequence[MechanismOutcome]], base: str, alt: str,
                       firms: Sequence[str]) -> ComparisonTable:
    """Table of ``alt`` against ``base`` aggregated over markets; pct is diff / base."""
    return compare_levels(base, aggregate(outcomes[base], firms), alt, aggregate(outcomes[alt], firms), firms)


# ----------------------------------------------------------------------
# drivers over many markets

def simulate_market(model: MarketModel, rebate_model: RebateModel, n_draws: int, seed,
                    rebate_rate: float = 0.55, oz_per_infant: float = OZ_PER_INFANT,
                    mechanisms: Sequence[str] = MECHANISMS, **options) -> dict[str, MechanismOutcome]:
    out = {}
    for kind in mechanisms:
        cfg = MechanismConfig(kind, rebate_rate=rebate_rate, wic_ounces_per_infant=oz_per_infant, **options)
        if kind == "auction":
            out[kind] = simulate_auction(model, rebate_model, n_draws, seed, cfg)
        elif kind == "voucher":
            out[kind] = simulate_voucher(model, cfg)
        else:
            out[kind] = simulate_predetermined(model, cfg)
    return out


def run_mechanisms(models: Sequence[MarketModel], rebate_model: RebateModel, n_draws: int = 50,
                   root_seed: int = 0, threads: int | None = 1, **kw) -> dict[str, list[MechanismOutcome]]:
    """All mechanisms in every market; market ``i`` draws from its own stream."""
    def one(args):
        i, m = args
        return simulate_market(m, rebate_model, n_draws, rng_for(root_seed, "simulate", i), **kw)

    per_market = pmap(one, list(enumerate(models)), threads)
    kinds = kw.get("mechanisms", MECHANISMS)
    return {k: [pm[k] for pm in per_market] for k in kinds}


@dataclass
class SweepTable:
    scales: tuple[float, ...]
    rows: tuple[str, ...]
    levels: dict[float, dict[str, float]]
    base_scale: float
    firms: tuple[str, ...]

    def records(self) -> list[dict]:
        out = []
        base = self.levels[self.base_scale]
        for r in self.rows:
            rec = {"metric": r}
            for s in self.scales:
                rec[f"scale_{s:g}"] = self.levels[s][r]
            for s in self.scales:
                if s == self.base_scale:
                    continue
                t = compare_levels("base", base, "alt", self.levels[s], self.firms)
                rec[f"diff_{s:g}"] = t.diff[r]
                rec[f"pct_diff_{s:g}"] = t.pct_diff[r]
            out.append(rec)
        return out


def program_size_sweep(models: Sequence[MarketModel], rebate_model: RebateModel,
                       scales: Sequence[float] = (0.9, 1.0, 1.1), n_draws: int = 50, root_seed: int = 0,
                       threads: int | None = 1, **kw) -> SweepTable:
    """Auction outcomes with the WIC population rescaled; draws are common across scales."""
    if any(not s > 0 for s in scales):
        raise ValueError("scale factors must be positive")
    firms = models[0].market.firms
    levels = {}
    for s in scales:
        scaled = [m.scaled(s) for m in models]
        res = run_mechanisms(scaled, rebate_model, n_draws, root_seed, threads, mechanisms=("auction",), **kw)
        levels[float(s)] = aggregate(res["auction"], firms)
    base = 1.0 if 1.0 in levels else float(scales[0])
    return SweepTable(tuple(float(s) for s in scales), table_rows(firms), levels, base, tuple(firms))


def outcomes_to_json(outcomes: Mapping[str, Sequence[MechanismOutcome]], market_ids: Sequence[str]) -> str:
    return json.dumps({k: [dict(market_id=mid, **o.to_dict()) for mid, o in zip(market_ids, v)]
                       for k, v in outcomes.items()}, indent=1) + "\n"


def outcomes_from_json(text: str) -> dict[str, list[MechanismOutcome]]:
    d = json.loads(text)
    return {k: [MechanismOutcome.from_dict(o) for o in v] for k, v in d.items()}
