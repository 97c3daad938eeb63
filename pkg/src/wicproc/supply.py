"""Post-auction pricing game, marginal-cost recovery, and WIC price adjustment.

Pricing happens in two steps.  The WIC supplier first computes the price of
its WIC brand in a full Bertrand game over non-WIC demand (the *perceived*
price) and marks it up by ``1 + rho``.  With that price held fixed, every firm
then sets its remaining prices.  The winner's first-order conditions for its
other brands still account for the WIC brand's non-WIC sales.

First-order condition for a product ``j`` whose price firm ``f`` controls::

    s_j + sum_{k in f} (p_k - c_k) d s_k / d p_j = 0

Costs passed to the solvers are the costs of the scenario being solved, so
any cost saving from WIC status must already be applied (see
:func:`scenario_costs`).  Likewise the demand context must carry the
scenario's spillover terms.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from .demand import DemandContext
from .market_data import MarketConfig
from .parallel import pmap

log = logging.getLogger(__name__)

RHO_GRID = tuple(round(0.01 * k, 2) for k in range(1, 21))
OZ_PER_INFANT = 400.0   # ounces of formula per infant per month


class EquilibriumError(RuntimeError):
    def __init__(self, message: str, prices=None, residual: float = np.nan):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.prices = prices
        self.residual = residual


class RecoveryError(RuntimeError):
    pass


@dataclass(frozen=True)
class SupplyParams:
    """Cost function and WIC pricing parameters.

    ``delta_c_nonwic[f]`` shifts the marginal cost of every product of firm
    ``f`` while it holds WIC status; ``delta_c_wic[f]`` is the additional
    shift on its WIC brand.  Negative values are savings.
    """
    gamma: Mapping[str, float] = field(default_factory=dict)
    delta_c_nonwic: Mapping[str, float] = field(default_factory=dict)
    delta_c_wic: Mapping[str, float] = field(default_factory=dict)
    rho: Mapping[str, float] = field(default_factory=dict)
    omega_sd: float = 0.0
    std_errors: Mapping[str, float] = field(default_factory=dict)
    unidentified: tuple[str, ...] = ()

    def __post_init__(self):
        if any(r < 0 for r in self.rho.values()):
            raise ValueError("rho values must be >= 0")

    def to_json(self) -> str:
        return json.dumps({
            "gamma": dict(self.gamma), "delta_c_nonwic": dict(self.delta_c_nonwic),
            "delta_c_wic": dict(self.delta_c_wic), "rho": dict(self.rho),
            "omega_sd": self.omega_sd, "std_errors": dict(self.std_errors),
            "unidentified": list(self.unidentified)}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SupplyParams":
        d = json.loads(text)
        d["unidentified"] = tuple(d.get("unidentified", ()))
        return cls(**d)


@dataclass(frozen=True)
class CostRecovery:
    marginal_costs: np.ndarray
    markups: np.ndarray
    winner_wic_cost: float
    method_tag: tuple[str, ...]
    perceived_prices: np.ndarray | None = None
    sign_changes: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.marginal_costs)):
            raise RecoveryError("recovered marginal costs are not finite")


@dataclass(frozen=True)
class OwnershipJacobian:
    """FOC coefficient matrix for the price-setting rows.

    ``delta_s[r, k] = d s_k / d p_j`` for the r-th price-setting product ``j``
    when ``j`` and ``k`` share an owner, else 0.  With a common price
    coefficient across products the mixed-logit Jacobian is symmetric, so this
    equals ``d s_j / d p_k`` as well.
    """
    delta_s: np.ndarray
    s: np.ndarray
    rows: np.ndarray


# ----------------------------------------------------------------------
# helpers

def ownership(market: MarketConfig) -> np.ndarray:
    f = market.firm_ids
    return (f[:, None] == f[None, :]).astype(float)


def wic_rows(market: MarketConfig, participants) -> list[int]:
    if participants is None:
        return []
    if isinstance(participants, str):
        participants = (participants,)
    return sorted(market.auction_brand_of(f) for f in participants)


def scenario_costs(base_costs, market: MarketConfig, supply: SupplyParams, participants=(),
                   prorate: bool = True) -> np.ndarray:
    """Base (non-WIC) costs plus WIC cost shifts, divided across ``participants``."""
    c = np.array(base_costs, dtype=float)
    participants = tuple(participants)
    if not participants:
        return c
    share = 1.0 / len(participants) if prorate else 1.0
    fids = market.firm_ids
    for f in participants:
        own = fids == f
        c[own] += supply.delta_c_nonwic.get(f, 0.0) * share
        c[market.auction_brand_of(f)] += supply.delta_c_wic.get(f, 0.0) * share
    return c


def remove_wic_costs(costs, market: MarketConfig, supply: SupplyParams, winner: str | None) -> np.ndarray:
    if winner is None:
        return np.array(costs, dtype=float)
    shifted = scenario_costs(np.zeros(market.n_products), market, supply, (winner,))
    return np.asarray(costs, dtype=float) - shifted


def ownership_jacobian(prices, ctx: DemandContext, fixed=()) -> OwnershipJacobian:
    s, D = ctx.shares_and_jacobian(prices)
    M = ownership(ctx.market) * D.T
    rows = np.setdiff1d(np.arange(s.size), np.asarray(fixed, dtype=int))
    return OwnershipJacobian(delta_s=M[rows], s=s, rows=rows)


def foc_residual(prices, costs, ctx: DemandContext, fixed=()) -> np.ndarray:
    """Left side of the stacked FOCs for every price-setting product.

    ``fixed`` lists products whose price is not chosen in this step (the WIC
    brand).  Their margins still enter the rows of same-firm products.
    """
    p = np.asarray(prices, dtype=float)
    c = np.asarray(costs, dtype=float)
    oj = ownership_jacobian(p, ctx, fixed)
    if not np.any(oj.s > 0):
        raise EquilibriumError("all shares are zero; demand is singular")
    return oj.s[oj.rows] + oj.delta_s @ (p - c)


# ----------------------------------------------------------------------
# equilibrium solvers

def _solve_prices(costs, ctx: DemandContext, fixed_prices: Mapping[int, float], tol: float,
                  max_iter: int, damping: float, p0=None) -> np.ndarray:
    c = np.asarray(costs, dtype=float)
    if not np.all(np.isfinite(c)):
        raise EquilibriumError("costs must be finite")
    J = c.size
    fixed = np.array(sorted(fixed_prices), dtype=int)
    free = np.setdiff1d(np.arange(J), fixed)
    O = ownership(ctx.market)
    if p0 is None:
        p = c + 1.0 / ctx.params.alpha
    else:
        p = np.array(p0, dtype=float)
    for k, v in fixed_prices.items():
        p[k] = v
    if free.size == 0:
        return p

    last = np.inf
    growth = 0
    for it in range(max_iter):
        s, D = ctx.shares_and_jacobian(p)
        M = O * D.T
        A = M[np.ix_(free, free)]
        b = s[free] + M[np.ix_(free, fixed)] @ (p[fixed] - c[fixed])
        try:
            target = c[free] - np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            raise EquilibriumError("singular ownership-Jacobian block", p, np.inf) from None
        step = target - p[free]
        size = np.max(np.abs(step))
        if not np.isfinite(size):
            break
        if size < tol:
            p[free] = target
            return p
        growth = growth + 1 if size > last else 0
        if growth >= 5:
            break   # oscillating; hand over to the root finder
        last = size
        p[free] += damping * step

    # fallback: quasi-Newton root finder on the stacked FOC
    def resid(x):
        q = p.copy()
        q[free] = x
        return foc_residual(q, c, ctx, fixed)

    sol = optimize.root(resid, p[free], method="hybr", options={"xtol": tol * 1e-2})
    q = p.copy()
    q[free] = sol.x
    r = np.max(np.abs(resid(sol.x))) if np.all(np.isfinite(sol.x)) else np.inf
    if not sol.success or r > 1e-9:
        raise EquilibriumError(f"market {ctx.market.market_id}: price equilibrium did not converge", q, r)
    return q


def solve_bertrand(costs, ctx: DemandContext, tol: float = 1e-10, max_iter: int = 5000,
                   damping: float = 0.5, p0=None) -> np.ndarray:
    """Full Bertrand-Nash prices with every product's FOC optimal.

    Damped fixed point on ``p = c - (O * D')^-1 s``, falling back to a
    root finder on the stacked FOC if the iteration oscillates.
    """
    return _solve_prices(costs, ctx, {}, tol, max_iter, damping, p0)


def solve_constrained(costs, ctx: DemandContext, fixed_prices: Mapping[int, float],
                      tol: float = 1e-10, max_iter: int = 5000, damping: float = 0.5,
                      p0=None) -> np.ndarray:
    """Bertrand prices for all products except those in ``fixed_prices``."""
    return _solve_prices(costs, ctx, dict(fixed_prices), tol, max_iter, damping, p0)


@dataclass(frozen=True)
class TwoStepPrices:
    prices: np.ndarray
    perceived: np.ndarray
    wic_products: tuple[int, ...]


def solve_two_step(costs, ctx: DemandContext, rho_by_firm: Mapping[str, float],
                   tol: float = 1e-10, p0=None) -> TwoStepPrices:
    """Perceived Bertrand stage, WIC-brand mark-up, then the constrained stage.

    Each firm in ``rho_by_firm`` supplies WIC and sets its auction brand at
    ``(1 + rho_f)`` times its perceived price.
    """
    market = ctx.market
    perceived = solve_bertrand(costs, ctx, tol=tol, p0=p0)
    fixed = {market.auction_brand_of(f): (1.0 + r) * perceived[market.auction_brand_of(f)]
             for f, r in rho_by_firm.items()}
    if not fixed:
        return TwoStepPrices(perceived, perceived, ())
    prices = solve_constrained(costs, ctx, fixed, tol=tol, p0=perceived)
    return TwoStepPrices(prices, perceived, tuple(sorted(fixed)))


def solve_post_auction(costs, ctx: DemandContext, winner: str, rho_winner: float,
                       tol: float = 1e-10, p0=None) -> np.ndarray:
    """Observed-price equilibrium after ``winner`` takes the WIC contract."""
    if rho_winner < 0:
        raise ValueError("rho must be >= 0")
    return solve_two_step(costs, ctx, {winner: rho_winner}, tol=tol, p0=p0).prices


# ----------------------------------------------------------------------
# cost recovery

def recover_loser_costs(prices, ctx: DemandContext, winner: str | None) -> dict[str, np.ndarray]:
    """Marginal costs of non-WIC firms from their FOCs, one block per firm."""
    p = np.asarray(prices, dtype=float)
    market = ctx.market
    s, D = ctx.shares_and_jacobian(p)
    out = {}
    for f in market.firms:
        if f == winner:
            continue
        idx = market.products_of(f)
        A = D[np.ix_(idx, idx)].T
        try:
            out[f] = p[idx] + np.linalg.solve(A, s[idx])
        except np.linalg.LinAlgError:
            raise RecoveryError(f"market {market.market_id}: singular derivative block for firm {f}") from None
    return out


def winner_linear_map(prices, ctx: DemandContext, winner: str) -> tuple[np.ndarray, np.ndarray]:
    """``(a, b)`` with ``c_j = a_j + b_j c_wic`` for the winner's other brands.

    Order follows the winner's products with the WIC brand removed.
    """
    p = np.asarray(prices, dtype=float)
    market = ctx.market
    k = market.auction_brand_of(winner)
    L = np.array([j for j in market.products_of(winner) if j != k], dtype=int)
    if L.size == 0:
        return np.zeros(0), np.zeros(0)
    s, D = ctx.shares_and_jacobian(p)
    A = D[np.ix_(L, L)].T            # A[r, c] = d s_c / d p_r
    d = D[k, L]                      # d s_k / d p_j for j in L
    try:
        a = p[L] + np.linalg.solve(A, s[L] + p[k] * d)
        b = -np.linalg.solve(A, d)
    except np.linalg.LinAlgError:
        raise RecoveryError(f"market {market.market_id}: singular winner derivative block") from None
    return a, b


def recover_winner_costs(prices, ctx: DemandContext, winner: str, rho: float,
                         loser_costs: Mapping[str, np.ndarray] | None = None,
                         tol: float = 1e-12, scan_points: int = 9) -> CostRecovery:
    """All marginal costs in a market where ``winner`` holds the contract.

    The WIC brand's cost is the root of ``perceived(c) - p_wic / (1 + rho)``,
    where ``perceived(c)`` is the WIC-brand price in the full Bertrand game
    with the winner's other costs tied to ``c`` by :func:`winner_linear_map`.
    The bracket is ``[0, p_wic]``, widened once (with a warning) if needed.
    A coarse scan counts sign changes so that multiple roots are reported.
    """
    p = np.asarray(prices, dtype=float)
    market = ctx.market
    if loser_costs is None:
        loser_costs = recover_loser_costs(p, ctx, winner)
    k = market.auction_brand_of(winner)
    L = np.array([j for j in market.products_of(winner) if j != k], dtype=int)
    a, b = winner_linear_map(p, ctx, winner)
    costs = np.empty(market.n_products)
    for f, c in loser_costs.items():
        costs[market.products_of(f)] = c
    target = p[k] / (1.0 + rho)
    warm = {"p": p.copy()}

    def fill(ck):
        c = costs.copy()
        c[k] = ck
        c[L] = a + b * ck
        return c

    def gap(ck):
        try:
            q = solve_bertrand(fill(ck), ctx, p0=warm["p"])
        except EquilibriumError:
            q = solve_bertrand(fill(ck), ctx)
        warm["p"] = q
        return q[k] - target

    lo, hi = 0.0, p[k]
    glo, ghi = gap(lo), gap(hi)
    if glo * ghi > 0:
        width = hi - lo
        warnings.warn(f"market {market.market_id}: no sign change on [0, {hi:.4g}], "
                      "widening the bracket once", RuntimeWarning, stacklevel=2)
        lo, hi = lo - width, hi + width
        glo, ghi = gap(lo), gap(hi)
        if glo * ghi > 0:
            raise RecoveryError(f"market {market.market_id}: no sign change on [{lo:.4g}, {hi:.4g}] "
                                f"(residuals {glo:.3e}, {ghi:.3e})")
    grid = np.linspace(lo, hi, scan_points)
    vals = [glo] + [gap(x) for x in grid[1:-1]] + [ghi]
    changes = int(np.sum(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0))
    if changes > 1:
        log.warning("market %s: %d sign changes for the WIC-brand cost", market.market_id, changes)
    # bracket the first sign change of the scan
    for i in range(len(vals) - 1):
        if vals[i] == 0:
            ck = grid[i]
            break
        if vals[i] * vals[i + 1] < 0:
            ck = optimize.brentq(gap, grid[i], grid[i + 1], xtol=tol, rtol=4 * np.finfo(float).eps)
            break
    else:
        ck = grid[-1]
    c = fill(ck)
    perceived = solve_bertrand(c, ctx, p0=p)
    tags = tuple("winner_linear_map" if f == winner else "loser_foc" for f in market.firm_ids)
    return CostRecovery(marginal_costs=c, markups=(p - c) / p, winner_wic_cost=float(ck),
                        method_tag=tags, perceived_prices=perceived, sign_changes=max(changes, 1))


def recover_costs(prices, ctx: DemandContext, winner: str | None, rho: float = 0.0) -> CostRecovery:
    """Recovered costs for a whole market, with or without a WIC winner."""
    p = np.asarray(prices, dtype=float)
    if winner is None:
        lc = recover_loser_costs(p, ctx, None)
        c = np.empty(p.size)
        for f, v in lc.items():
            c[ctx.market.products_of(f)] = v
        return CostRecovery(c, (p - c) / p, np.nan, ("loser_foc",) * p.size)
    return recover_winner_costs(p, ctx, winner, rho)


# ----------------------------------------------------------------------
# cost function

@dataclass(frozen=True)
class CostObservation:
    market_id: str
    product_id: str
    firm_id: str
    is_auction_brand: bool
    won: bool
    cost: float
    characteristics: Mapping[str, float]
    shifters: Mapping[str, float]


def cost_observations(market: MarketConfig, recovery: CostRecovery,
                      characteristics: Sequence[str] | None = None) -> list[CostObservation]:
    names = market.char_names or tuple(f"c{k}" for k in range(market.X.shape[1]))
    keep = characteristics if characteristics is not None else names
    out = []
    for j, p in enumerate(market.products):
        chars = {n: float(v) for n, v in zip(names, p.characteristics) if n in keep}
        out.append(CostObservation(market.market_id, p.product_id, p.firm_id, p.is_auction_brand,
                                   p.firm_id == market.winner, float(recovery.marginal_costs[j]),
                                   chars, dict(market.cost_shifters[p.firm_id])))
    return out


class CollinearityError(ValueError):
    pass


def ols(y: np.ndarray, X: np.ndarray, names: Sequence[str]):
    """Least squares with classical standard errors; collinear columns raise."""
    n, k = X.shape
    rank = np.linalg.matrix_rank(X)
    if rank < k:
        bad = []
        cur = np.zeros((n, 0))
        for i in range(k):
            trial = np.column_stack([cur, X[:, i]])
            if np.linalg.matrix_rank(trial) < trial.shape[1]:
                bad.append(names[i])
            else:
                cur = trial
        raise CollinearityError(f"collinear design; dependent columns: {', '.join(bad)}")
    if n <= k:
        raise CollinearityError(f"{n} observations for {k} coefficients")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    s2 = resid @ resid / (n - k)
    cov = s2 * np.linalg.inv(X.T @ X)
    return coef, np.sqrt(np.diag(cov)), resid


def cost_design(panel: Sequence[CostObservation], firms: Sequence[str] | None = None,
                quadratic: bool = True):
    """Design matrix in the win-interaction layout; returns (X, names)."""
    if firms is None:
        firms = list(dict.fromkeys(o.firm_id for o in panel))
    base, others = firms[0], list(firms[1:])
    chars = list(dict.fromkeys(n for o in panel for n in o.characteristics))
    shifters = list(dict.fromkeys(n for o in panel for n in o.shifters))
    names = (["constant"] + others + ["auctionBrand", "win"] + [f"win*{f}" for f in others]
             + ["win*auctionBrand"] + [f"win*auctionBrand*{f}" for f in others] + chars + shifters
             + ([f"{n}*{n}" for n in shifters] if quadratic else []))
    rows = []
    for o in panel:
        fd = [float(o.firm_id == f) for f in others]
        w, ab = float(o.won), float(o.is_auction_brand)
        z = [o.shifters.get(n, 0.0) for n in shifters]
        rows.append([1.0] + fd + [ab, w] + [w * v for v in fd] + [w * ab] + [w * ab * v for v in fd]
                    + [o.characteristics.get(n, 0.0) for n in chars] + z
                    + ([v * v for v in z] if quadratic else []))
    return np.array(rows, dtype=float), names, base, others


def fit_cost_function(panel: Sequence[CostObservation], rho: Mapping[str, float] | None = None,
                      firms: Sequence[str] | None = None, quadratic: bool = True) -> SupplyParams:
    """Regress recovered marginal costs on the cost design.

    Win-interaction columns without support (a firm that never wins) are
    dropped and listed in ``unidentified``; any other collinearity raises.
    """
    X, names, base, others = cost_design(panel, firms, quadratic)
    y = np.array([o.cost for o in panel])
    empty = [i for i, n in enumerate(names) if n.startswith("win") and not np.any(X[:, i])]
    unident = tuple(names[i] for i in empty)
    keep = [i for i in range(len(names)) if i not in empty]
    Xk = X[:, keep]
    nk = [names[i] for i in keep]
    coef, se, resid = ols(y, Xk, nk)
    est = dict(zip(nk, coef))
    ses = dict(zip(nk, se))
    nonwic, wic = {}, {}
    for f in [base] + others:
        tag = "" if f == base else f"*{f}"
        if "win" in est and (f == base or f"win{tag}" in est):
            nonwic[f] = est["win"] + (est.get(f"win{tag}", 0.0) if tag else 0.0)
        if "win*auctionBrand" in est and (f == base or f"win*auctionBrand{tag}" in est):
            wic[f] = est["win*auctionBrand"] + (est.get(f"win*auctionBrand{tag}", 0.0) if tag else 0.0)
    gamma = {n: v for n, v in est.items() if not n.startswith("win")}
    dof = max(len(y) - len(nk), 1)
    return SupplyParams(gamma=gamma, delta_c_nonwic=nonwic, delta_c_wic=wic, rho=dict(rho or {}),
                        omega_sd=float(np.sqrt(resid @ resid / dof)),
                        std_errors=ses, unidentified=unident)


# ----------------------------------------------------------------------
# profits

def firm_profits(prices, costs, shares, market: MarketConfig, wic_quantity=None,
                 wic_net_price=None, oz_per_infant: float = OZ_PER_INFANT) -> dict[str, dict[str, float]]:
    """Per-firm non-WIC, WIC, and total profit (fixed costs excluded).

    Non-WIC quantity is ``market_size * oz_per_infant * s_j``.  WIC revenue per
    ounce is ``wic_net_price`` (retail price net of any rebate).
    """
    p = np.asarray(prices, dtype=float)
    c = np.asarray(costs, dtype=float)
    s = np.asarray(shares, dtype=float)
    J = p.size
    if not (c.size == s.size == J == market.n_products):
        raise ValueError("prices, costs and shares must match the product count")
    q_wic = np.zeros(J) if wic_quantity is None else np.asarray(wic_quantity, dtype=float)
    net = p if wic_net_price is None else np.asarray(wic_net_price, dtype=float)
    non_wic = (p - c) * market.market_size * oz_per_infant * s
    wic = (net - c) * q_wic
    out = {}
    fids = market.firm_ids
    for f in market.firms:
        own = fids == f
        nw, w = float(non_wic[own].sum()), float(wic[own].sum())
        out[f] = {"total": nw + w, "wic": w, "non_wic": nw}
    return out


def profit_decomposition(prices, costs, shares, market: MarketConfig, winner: str | None,
                         rebate: float = 0.0, oz_per_infant: float = OZ_PER_INFANT,
                         wic_share: float = 1.0) -> dict[str, dict[str, float]]:
    """Profits when ``winner`` serves ``wic_share`` of all WIC infants at its WIC brand."""
    J = len(prices)
    q = np.zeros(J)
    net = np.asarray(prices, dtype=float).copy()
    if winner is not None:
        k = market.auction_brand_of(winner)
        q[k] = market.wic_infants * oz_per_infant * wic_share
        net[k] -= rebate
    return firm_profits(prices, costs, shares, market, q, net, oz_per_infant)


# ----------------------------------------------------------------------
# rho calibration

@dataclass
class RhoCalibration:
    bounds: dict[str, float]
    at_boundary: dict[str, bool]
    win_profit: dict[str, float]
    lose_profit: dict[str, float]
    passes: int

    def to_json(self) -> str:
        return json.dumps({"rho": self.bounds, "at_boundary": self.at_boundary,
                           "win_profit": self.win_profit, "lose_profit": self.lose_profit,
                           "passes": self.passes}, indent=1) + "\n"


@dataclass(frozen=True)
class WonMarket:
    """One market with an observed winner, as used by :func:`calibrate_rho`."""
    ctx: DemandContext          # built with the observed winner's spillovers
    rebate: float               # winner's rebate, $/oz


def winner_profit(wm: WonMarket, rho: float, oz_per_infant: float = OZ_PER_INFANT,
                  recovery: CostRecovery | None = None) -> float:
    """Observed-world total profit of the winner given its rho."""
    m = wm.ctx.market
    rec = recovery or recover_winner_costs(m.prices, wm.ctx, m.winner, rho)
    s = wm.ctx.shares(m.prices)
    k = m.auction_brand_of(m.winner)
    take_up = wm.ctx.wic_choice([k])[k]
    pr = profit_decomposition(m.prices, rec.marginal_costs, s, m, m.winner, wm.rebate, oz_per_infant,
                              wic_share=take_up)
    return pr[m.winner]["total"]


def expected_losing_profit(wm: WonMarket, recovery: CostRecovery, supply: SupplyParams,
                           rho: Mapping[str, float], oz_per_infant: float = OZ_PER_INFANT) -> float:
    """Winner's mean profit if each rival had won instead, with equal probability."""
    m = wm.ctx.market
    f = m.winner
    base = remove_wic_costs(recovery.marginal_costs, m, supply, f)
    vals = []
    for g in m.firms:
        if g == f:
            continue
        ctx_g = wm.ctx.with_wic(winner=g)
        c_g = scenario_costs(base, m, supply, (g,))
        p_g = solve_post_auction(c_g, ctx_g, g, rho[g], p0=m.prices)
        s_g = ctx_g.shares(p_g)
        vals.append(profit_decomposition(p_g, c_g, s_g, m, g, 0.0, oz_per_infant)[f]["total"])
    return float(np.mean(vals)) if vals else 0.0


def calibrate_rho(markets: Sequence[WonMarket], supply: SupplyParams,
                  grid: Sequence[float] = RHO_GRID, oz_per_infant: float = OZ_PER_INFANT,
                  threads: int | None = 1, max_passes: int = 10) -> RhoCalibration:
    """Smallest grid values of rho with mean winning profit >= mean losing profit.

    Firms are updated one at a time, each taking the smallest grid value at
    which its own inequality holds given the others' current values, until a
    full pass changes nothing.  A firm whose inequality fails on the whole
    grid gets the top of the grid and ``at_boundary = True``.
    """
    grid = sorted(grid)
    firms = sorted({f for wm in markets for f in wm.ctx.market.firms})
    rho = {f: grid[0] for f in firms}
    at_boundary = {f: False for f in firms}
    by_firm = {f: [wm for wm in markets if wm.ctx.market.winner == f] for f in firms}
    rec_cache: dict[tuple[int, float], CostRecovery] = {}

    def recovery(i, wm, r):
        key = (i, r)
        if key not in rec_cache:
            m = wm.ctx.market
            rec_cache[key] = recover_winner_costs(m.prices, wm.ctx, m.winner, r)
        return rec_cache[key]

    index = {id(wm): i for i, wm in enumerate(markets)}

    def evaluate(f, rho_map):
        wms = by_firm[f]
        if not wms:
            return 0.0, 0.0

        def one(wm):
            rec = recovery(index[id(wm)], wm, rho_map[f])
            return (winner_profit(wm, rho_map[f], oz_per_infant, rec),
                    expected_losing_profit(wm, rec, supply, rho_map, oz_per_infant))

        vals = pmap(one, wms, threads)
        return float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals]))

    win, lose = {}, {}
    passes = 0
    for passes in range(1, max_passes + 1):
        changed = False
        for f in firms:
            if not by_firm[f]:
                continue
            chosen = None
            for r in grid:
                trial = dict(rho, **{f: r})
                w, l = evaluate(f, trial)
                if w >= l:
                    chosen = (r, w, l)
                    break
            if chosen is None:
                r = grid[-1]
                w, l = evaluate(f, dict(rho, **{f: r}))
                chosen = (r, w, l)
                at_boundary[f] = True
            else:
                at_boundary[f] = False
            if chosen[0] != rho[f]:
                changed = True
            rho[f] = chosen[0]
            win[f], lose[f] = chosen[1], chosen[2]
        if not changed and passes > 1:
            break
    return RhoCalibration(bounds=rho, at_boundary=at_boundary, win_profit=win, lose_profit=lose,
                          passes=passes)
