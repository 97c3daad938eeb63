"""Random-coefficients logit demand with auction-winner spillovers.

Utility of non-WIC consumer ``i`` for product ``j``::

    u_ij = x_j beta - alpha_i p_j + spill_j + xi_j + sigma_const v_i1 + eps_ij
    alpha_i = alpha - sigma_price v_i0 - pi_income (income_i - mean income)

``spill_j`` is ``delta0`` on every product of the contract winner plus
``delta1`` on the winner's auctioned (WIC) brand.  When several firms share
WIC status the two terms are divided equally among them.  The outside good
has utility normalised to zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize, special, stats
from scipy.stats import qmc

from .market_data import MarketConfig
from .parallel import pmap

NONLINEAR = ("sigma_price", "sigma_const", "pi_income")


class DemandError(RuntimeError):
    pass


class InversionError(DemandError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class DemandParams:
    alpha: float
    beta: np.ndarray
    delta0: float = 0.0
    delta1: float = 0.0
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(2))   # (price, constant)
    pi_income: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (2,):
            raise ValueError("sigma holds (sigma_price, sigma_const)")
        if np.any(sigma < 0):
            raise ValueError("sigma loadings must be >= 0")
        object.__setattr__(self, "sigma", sigma)
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")

    @property
    def is_plain_logit(self) -> bool:
        return not np.any(self.sigma) and self.pi_income == 0

    @property
    def theta2(self) -> np.ndarray:
        return np.array([self.sigma[0], self.sigma[1], self.pi_income])

    def with_theta2(self, theta2) -> "DemandParams":
        t = np.asarray(theta2, dtype=float)
        return replace(self, sigma=np.abs(t[:2]), pi_income=float(t[2]))


@dataclass(frozen=True)
class ConsumerDraws:
    v: np.ndarray        # (n, 2) standard normal
    income: np.ndarray   # (n,)
    weights: np.ndarray  # (n,) nonnegative, sums to one

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).reshape(-1, 2)
        income = np.asarray(self.income, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if not (v.shape[0] == income.size == w.size):
            raise ValueError("draw arrays have mismatched lengths")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
        for name, arr in (("v", v), ("income", income), ("weights", w)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.weights.size

    @property
    def income_dm(self) -> np.ndarray:
        return self.income - self.weights @ self.income


def make_draws(n: int, rng: np.random.Generator | int, income_median: float = 1.0,
               income_sigma: float = 0.5, halton: bool = False) -> ConsumerDraws:
    """Uniformly weighted draws; income is lognormal around ``income_median``."""
    rng = np.random.default_rng(rng)
    if halton:
        u = qmc.Halton(d=3, scramble=True, seed=rng).random(n)
        z = stats.norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    else:
        z = rng.standard_normal((n, 3))
    income = income_median * np.exp(income_sigma * z[:, 2])
    return ConsumerDraws(v=z[:, :2], income=income, weights=np.full(n, 1.0 / n))


def plain_draws() -> ConsumerDraws:
    """A single representative consumer; reduces everything to plain logit."""
    return ConsumerDraws(v=np.zeros((1, 2)), income=np.zeros(1), weights=np.ones(1))


# ----------------------------------------------------------------------
# utilities and shares

def spillover_utility(params: DemandParams, market: MarketConfig, winner: str | None = None,
                      participants: Iterable[str] | None = None) -> np.ndarray:
    """Per-product utility premium from holding WIC status.

    ``participants`` spreads the premium equally over several WIC suppliers;
    ``winner`` is the single-supplier case.
    """
    if participants is None:
        participants = () if winner is None else (winner,)
    participants = tuple(participants)
    spill = np.zeros(market.n_products)
    if not participants:
        return spill
    share = 1.0 / len(participants)
    firm_ids = market.firm_ids
    for f in participants:
        own = firm_ids == f
        spill[own] += params.delta0 * share
        spill[own & market.auction_mask] += params.delta1 * share
    return spill


def mean_utility(params: DemandParams, market: MarketConfig, xi, winner: str | None = None,
                 prices=None, spill=None) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    X = market.X
    if xi.shape != (market.n_products,):
        raise ValueError(f"xi has length {xi.size}, market has {market.n_products} products")
    if X.shape[1] != params.beta.size:
        raise ValueError(f"beta has {params.beta.size} entries, market has {X.shape[1]} characteristics")
    p = market.prices if prices is None else np.asarray(prices, dtype=float)
    if spill is None:
        spill = spillover_utility(params, market, winner)
    return X @ params.beta - params.alpha * p + spill + xi


def individual_alpha(params: DemandParams, draws: ConsumerDraws) -> np.ndarray:
    return params.alpha - params.sigma[0] * draws.v[:, 0] - params.pi_income * draws.income_dm


def _deviations(params: DemandParams, prices: np.ndarray, draws: ConsumerDraws) -> np.ndarray:
    slope = params.sigma[0] * draws.v[:, 0] + params.pi_income * draws.income_dm
    return slope[:, None] * prices[None, :] + params.sigma[1] * draws.v[:, 1][:, None]


def choice_probabilities(delta: np.ndarray, prices: np.ndarray, params: DemandParams,
                         draws: ConsumerDraws) -> np.ndarray:
    """Per-draw logit probabilities, shape (n_draws, J)."""
    mu = delta[None, :] + _deviations(params, prices, draws)
    top = np.maximum(mu.max(axis=1, keepdims=True), 0.0)
    e = np.exp(mu - top)
    return e / (np.exp(-top) + e.sum(axis=1, keepdims=True))


def shares_from_delta(delta, prices, params, draws) -> np.ndarray:
    return draws.weights @ choice_probabilities(np.asarray(delta, float), np.asarray(prices, float),
                                                params, draws)


def market_shares(params: DemandParams, market: MarketConfig, xi, winner: str | None,
                  draws: ConsumerDraws, prices=None) -> np.ndarray:
    p = market.prices if prices is None else np.asarray(prices, dtype=float)
    delta = mean_utility(params, market, xi, winner, prices=p)
    return shares_from_delta(delta, p, params, draws)


def price_jacobian(probs: np.ndarray, alpha_i: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``D[j, k] = d s_j / d p_k`` from per-draw probabilities."""
    wa = weights * alpha_i
    D = (probs * wa[:, None]).T @ probs
    D[np.diag_indices_from(D)] -= wa @ probs
    return D


# ----------------------------------------------------------------------
# demand context used by the supply side and the counterfactuals

@dataclass(frozen=True)
class DemandContext:
    """Everything needed to evaluate shares at arbitrary prices in one market."""
    params: DemandParams
    market: MarketConfig
    xi: np.ndarray
    draws: ConsumerDraws
    spill: np.ndarray

    @classmethod
    def build(cls, params, market, xi, draws, winner=None, participants=None) -> "DemandContext":
        spill = spillover_utility(params, market, winner, participants)
        return cls(params, market, np.asarray(xi, dtype=float), draws, spill)

    def with_wic(self, winner=None, participants=None) -> "DemandContext":
        return DemandContext.build(self.params, self.market, self.xi, self.draws, winner, participants)

    @property
    def base_utility(self) -> np.ndarray:
        """Mean utility without the price term."""
        return self.market.X @ self.params.beta + self.spill + self.xi

    @property
    def alpha_i(self) -> np.ndarray:
        return individual_alpha(self.params, self.draws)

    def probabilities(self, prices) -> np.ndarray:
        p = np.asarray(prices, dtype=float)
        return choice_probabilities(self.base_utility - self.params.alpha * p, p, self.params, self.draws)

    def shares(self, prices) -> np.ndarray:
        return self.draws.weights @ self.probabilities(prices)

    def shares_and_jacobian(self, prices) -> tuple[np.ndarray, np.ndarray]:
        probs = self.probabilities(prices)
        s = self.draws.weights @ probs
        return s, price_jacobian(probs, self.alpha_i, self.draws.weights)

    def price_free_utility(self, available) -> np.ndarray:
        """Per-draw utilities of ``available`` products with the price term removed."""
        idx = np.asarray(available, dtype=int)
        return self.base_utility[idx][None, :] + self.params.sigma[1] * self.draws.v[:, [1]]

    def wic_choice(self, available, deterministic: bool = False) -> np.ndarray:
        """Probability that a price-insensitive consumer picks each product.

        Only ``available`` products can be chosen; the outside good (utility
        0) is always available and takes the remaining mass.  With
        ``deterministic`` each draw takes its highest-utility option instead of
        integrating over taste shocks.
        """
        out = np.zeros(self.market.n_products)
        idx = np.asarray(available, dtype=int)
        if idx.size == 0:
            return out
        u = self.price_free_utility(idx)
        if deterministic:
            full = np.column_stack([np.zeros(u.shape[0]), u])
            pick = np.argmax(full, axis=1)
            probs = (pick[:, None] == np.arange(1, idx.size + 1)[None, :]).astype(float)
        else:
            top = np.maximum(u.max(axis=1, keepdims=True), 0.0)
            e = np.exp(u - top)
            probs = e / (np.exp(-top) + e.sum(axis=1, keepdims=True))
        out[idx] = self.draws.weights @ probs
        return out

    def wic_expected_utility(self, available, deterministic: bool = False) -> float:
        """Expected maximum price-free utility, in utils, per consumer."""
        idx = np.asarray(available, dtype=int)
        if idx.size == 0:
            return 0.0
        u = self.price_free_utility(idx)
        if deterministic:
            return float(self.draws.weights @ np.maximum(u.max(axis=1), 0.0))
        return float(self.draws.weights @ np.logaddexp(0.0, special.logsumexp(u, axis=1)))


# ----------------------------------------------------------------------
# inversion and elasticities

def invert_shares(observed_shares, params: DemandParams, market: MarketConfig,
                  winner: str | None, draws: ConsumerDraws, tol: float = 1e-12,
                  max_iter: int = 2000, prices=None) -> np.ndarray:
    """Mean utilities that reproduce ``observed_shares`` (BLP contraction)."""
    s_obs = np.asarray(observed_shares, dtype=float)
    if s_obs.shape != (market.n_products,):
        raise ValueError("observed shares do not match the product count")
    if np.any(s_obs <= 0) or np.any(s_obs >= 1) or s_obs.sum() >= 1:
        raise ValueError(f"market {market.market_id}: observed shares must lie in (0,1) and sum below 1")
    p = market.prices if prices is None else np.asarray(prices, dtype=float)
    log_obs = np.log(s_obs)
    delta = log_obs - np.log1p(-s_obs.sum())
    if params.is_plain_logit:
        return delta
    resid = np.inf
    for _ in range(max_iter):
        step = log_obs - np.log(shares_from_delta(delta, p, params, draws))
        delta = delta + step
        resid = np.max(np.abs(step))
        if resid < tol:
            return delta
    raise InversionError(f"market {market.market_id}: contraction did not converge in {max_iter} "
                         "iterations", resid)


def elasticity_matrix(params: DemandParams, market: MarketConfig, xi, winner: str | None,
                      draws: ConsumerDraws, prices=None) -> np.ndarray:
    """``E[i, j] = (p_j / s_i) d s_i / d p_j``."""
    ctx = DemandContext.build(params, market, xi, draws, winner)
    p = market.prices if prices is None else np.asarray(prices, dtype=float)
    s, D = ctx.shares_and_jacobian(p)
    if np.any(s <= 0):
        raise ValueError(f"market {market.market_id}: zero share, elasticity undefined")
    return D * p[None, :] / s[:, None]


# ----------------------------------------------------------------------
# GMM estimation

@dataclass(frozen=True)
class InstrumentSet:
    """Excluded instruments stacked over (market, product) rows."""
    cost_shifters: np.ndarray
    blp_sums: np.ndarray
    hausman_prices: np.ndarray
    names: tuple[str, ...] = ()

    @property
    def excluded(self) -> np.ndarray:
        return np.hstack([self.cost_shifters, self.blp_sums, self.hausman_prices])


def linear_design(market: MarketConfig) -> np.ndarray:
    """Columns [x..., -price, winner dummy, winner WIC-brand dummy]."""
    J = market.n_products
    win = np.zeros(J)
    wic = np.zeros(J)
    if market.winner is not None:
        win[market.firm_ids == market.winner] = 1.0
        wic[market.auction_brand_of(market.winner)] = 1.0
    return np.column_stack([market.X, -market.prices, win, wic])


def linear_names(market: MarketConfig) -> list[str]:
    names = market.char_names or tuple(f"c{k}" for k in range(market.X.shape[1]))
    return [f"beta_{n}" for n in names] + ["alpha", "delta0", "delta1"]


def _prune_columns(base: np.ndarray, cand: np.ndarray, names: list[str], tol=1e-9):
    """Keep candidate columns that add rank on top of ``base``."""
    keep = []
    cur = base
    scale = max(1.0, np.abs(base).max())
    rtol = tol * scale * np.sqrt(base.shape[0])
    rank = np.linalg.matrix_rank(cur, tol=rtol)
    for k in range(cand.shape[1]):
        trial = np.column_stack([cur, cand[:, k]])
        r = np.linalg.matrix_rank(trial, tol=rtol)
        if r > rank:
            cur, rank = trial, r
            keep.append(k)
    return cand[:, keep], [names[k] for k in keep]


def build_instruments(markets: Sequence[MarketConfig], include_demographics: bool = True) -> InstrumentSet:
    """Cost shifters (with squares), rival-characteristic sums, and Hausman prices.

    Columns already spanned by the exogenous regressors (or by earlier
    instruments) are dropped, so the resulting set has full column rank when
    combined with the exogenous part of :func:`linear_design`.
    """
    cost_rows, blp_rows = [], []
    shifter_names = sorted({n for m in markets for f in m.cost_shifters.values() for n in f})
    # Hausman: mean price of the same product in all other markets
    totals: dict[str, list[float]] = {}
    for m in markets:
        for p, price in zip(m.products, m.prices):
            totals.setdefault(p.product_id, []).append(price)
    haus = []
    for m in markets:
        X = m.X
        fids = m.firm_ids
        inc = m.demographics.get("median_income", 1.0)
        for j, p in enumerate(m.products):
            z = [m.cost_shifters[p.firm_id].get(n, 0.0) for n in shifter_names]
            row = z + [v * v for v in z]
            if include_demographics:
                row += [v * np.log(inc) for v in z]
            cost_rows.append(row)
            rival = fids != p.firm_id
            same = (fids == p.firm_id) & (np.arange(m.n_products) != j)
            blp_rows.append(np.concatenate([X[rival].sum(axis=0), X[same].sum(axis=0),
                                            [rival.sum(), same.sum()]]))
            vals = totals[p.product_id]
            n_other = len(vals) - 1
            haus.append([(sum(vals) - m.prices[j]) / n_other if n_other else m.prices[j]])
    cost = np.array(cost_rows, dtype=float).reshape(len(haus), -1)
    blp = np.array(blp_rows, dtype=float)
    haus = np.array(haus, dtype=float)
    exog = np.vstack([linear_design(m) for m in markets])
    exog = np.delete(exog, exog.shape[1] - 3, axis=1)   # drop the price column
    kx = markets[0].X.shape[1]
    cnames = ([f"z_{n}" for n in shifter_names] + [f"z_{n}^2" for n in shifter_names]
              + ([f"z_{n}*log_income" for n in shifter_names] if include_demographics else []))
    bnames = [f"rival_x{k}" for k in range(kx)] + [f"own_x{k}" for k in range(kx)] + ["n_rival", "n_own"]
    all_cand = np.hstack([cost, blp, haus])
    all_names = cnames + bnames + ["hausman_price"]
    kept, kept_names = _prune_columns(exog, all_cand, all_names)
    nc = sum(1 for n in kept_names if n in cnames)
    nb = sum(1 for n in kept_names if n in bnames)
    return InstrumentSet(cost_shifters=kept[:, :nc], blp_sums=kept[:, nc:nc + nb],
                         hausman_prices=kept[:, nc + nb:], names=tuple(kept_names))


def iv_regression(y: np.ndarray, X: np.ndarray, Z: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
    """Linear GMM: argmin (Z'(y - Xb))' W (Z'(y - Xb))."""
    if W is None:
        W = np.linalg.inv(Z.T @ Z)
    ZX = Z.T @ X
    A = ZX.T @ W @ ZX
    return np.linalg.solve(A, ZX.T @ W @ (Z.T @ y))


@dataclass
class GMMOptions:
    nonlinear: tuple[str, ...] = NONLINEAR
    tol: float = 1e-12           # contraction tolerance, log shares
    max_iter: int = 2000
    optimizer_tol: float = 1e-8
    threads: int | None = 1
    two_step: bool = True


@dataclass
class DemandEstimate:
    params: DemandParams
    names: list[str]
    estimates: np.ndarray
    std_errors: np.ndarray
    objective: float
    xi: dict[tuple[str, str], float]

    def to_json(self) -> str:
        return json.dumps({
            "parameters": {n: float(v) for n, v in zip(self.names, self.estimates)},
            "std_errors": {n: float(v) for n, v in zip(self.names, self.std_errors)},
            "objective": float(self.objective),
            "xi": [{"market_id": m, "product_id": p, "xi": float(v)} for (m, p), v in self.xi.items()],
        }, indent=1, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DemandEstimate":
        d = json.loads(text)
        for key in ("parameters", "std_errors", "objective", "xi"):
            if key not in d:
                raise ValueError(f"demand estimate JSON missing {key!r}")
        names = list(d["parameters"])
        est = np.array([d["parameters"][n] for n in names])
        se = np.array([d["std_errors"].get(n, np.nan) for n in names])
        return cls(params=params_from_vector(names, est), names=names, estimates=est,
                   std_errors=se, objective=d["objective"],
                   xi={(r["market_id"], r["product_id"]): r["xi"] for r in d["xi"]})

    def xi_for(self, market: MarketConfig) -> np.ndarray:
        return np.array([self.xi[(market.market_id, p.product_id)] for p in market.products])


def params_from_vector(names: Sequence[str], values: Sequence[float]) -> DemandParams:
    v = dict(zip(names, values))
    beta = [v[n] for n in names if n.startswith("beta_")]
    return DemandParams(alpha=v["alpha"], beta=beta, delta0=v.get("delta0", 0.0),
                        delta1=v.get("delta1", 0.0),
                        sigma=[abs(v.get("sigma_price", 0.0)), abs(v.get("sigma_const", 0.0))],
                        pi_income=v.get("pi_income", 0.0))


def _market_delta_and_jac(args):
    market, draws, params, opts, need_jac, which = args
    delta = invert_shares(market.shares, params, market, market.winner, draws,
                          tol=opts.tol, max_iter=opts.max_iter)
    if not need_jac or not which:
        return delta, None
    p = market.prices
    probs = choice_probabilities(delta, p, params, draws)
    w = draws.weights
    ds_ddelta = (probs * w[:, None]).T @ (-probs)
    ds_ddelta[np.diag_indices_from(ds_ddelta)] += w @ probs
    cols = []
    for name in which:
        if name == "sigma_price":
            dmu = draws.v[:, [0]] * p[None, :]
        elif name == "sigma_const":
            dmu = np.repeat(draws.v[:, [1]], p.size, axis=1)
        else:
            dmu = draws.income_dm[:, None] * p[None, :]
        inner = dmu - (probs * dmu).sum(axis=1, keepdims=True)
        cols.append(w @ (probs * inner))
    ds_dtheta = np.column_stack(cols)
    return delta, -np.linalg.solve(ds_ddelta, ds_dtheta)


def gmm_estimate(markets: Sequence[MarketConfig], instruments: InstrumentSet,
                 draws: Sequence[ConsumerDraws], init: DemandParams,
                 options: GMMOptions | None = None) -> DemandEstimate:
    """Two-step GMM with linear parameters concentrated out.

    Step one weights moments by ``(Z'Z/N)^-1`` (2SLS); step two uses the
    inverse of the heteroskedasticity-robust moment covariance evaluated at the
    step-one estimates.  Standard errors use the sandwich formula with the
    step-two weighting matrix.
    """
    opts = options or GMMOptions()
    markets = list(markets)
    draws = list(draws)
    if any(m.shares is None for m in markets):
        raise ValueError("every market needs observed shares for estimation")
    if len(draws) != len(markets):
        raise ValueError("one ConsumerDraws per market is required")
    X1_full = np.vstack([linear_design(m) for m in markets])
    exog = np.delete(X1_full, X1_full.shape[1] - 3, axis=1)
    exog = exog[:, np.any(exog != 0, axis=0)]
    # winner dummies are all zero when no market has a winner; those terms are fixed at zero
    active = np.any(X1_full != 0, axis=0)
    X1 = X1_full[:, active]
    Z = np.hstack([exog, instruments.excluded])
    N = Z.shape[0]
    if Z.shape[0] != X1.shape[0]:
        raise ValueError("instrument rows do not match product rows")
    which = tuple(n for n in NONLINEAR if n in opts.nonlinear)
    if Z.shape[1] < X1.shape[1] + len(which):
        raise DemandError("fewer instrument columns than parameters")
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise DemandError("instrument matrix is rank deficient")

    idx = {n: k for k, n in enumerate(NONLINEAR)}
    theta_full0 = init.theta2

    def unpack(t):
        full = theta_full0.copy()
        for k, n in enumerate(which):
            full[idx[n]] = t[k]
        return init.with_theta2(full)

    def stacked(t, need_jac):
        params = unpack(t)
        out = pmap(_market_delta_and_jac, [(m, d, params, opts, need_jac, which)
                                            for m, d in zip(markets, draws)], opts.threads)
        delta = np.concatenate([o[0] for o in out])
        jac = np.vstack([o[1] for o in out]) if need_jac and which else None
        return delta, jac

    def concentrate(delta, W):
        theta1 = iv_regression(delta, X1, Z, W)
        return theta1, delta - X1 @ theta1

    def objective(t, W):
        delta, jac = stacked(t, need_jac=True)
        theta1, xi = concentrate(delta, W)
        g = Z.T @ xi / N
        val = N * g @ W @ g
        grad = 2 * N * (g @ W @ (Z.T @ jac / N)) if jac is not None else np.zeros(0)
        return float(val), grad

    def run(W, start):
        if not which:
            return np.zeros(0)
        bounds = [(0.0, None) if n.startswith("sigma") else (None, None) for n in which]
        res = optimize.minimize(objective, start, args=(W,), jac=True, method="L-BFGS-B",
                                bounds=bounds, options={"ftol": opts.optimizer_tol * 1e-3,
                                                        "gtol": opts.optimizer_tol, "maxiter": 500})
        return res.x

    t0 = np.array([theta_full0[idx[n]] for n in which])
    W = np.linalg.inv(Z.T @ Z / N)
    t_hat = run(W, t0)
    if opts.two_step:
        delta, _ = stacked(t_hat, need_jac=False)
        _, xi = concentrate(delta, W)
        S = (Z * xi[:, None] ** 2).T @ Z / N
        W = np.linalg.inv(S)
        t_hat = run(W, t_hat)

    delta, jac = stacked(t_hat, need_jac=True)
    theta1_active, xi = concentrate(delta, W)
    g = Z.T @ xi / N
    obj = float(N * g @ W @ g)

    # sandwich standard errors
    G = -Z.T @ X1 / N
    if jac is not None:
        G = np.hstack([G, Z.T @ jac / N])
    S = (Z * xi[:, None] ** 2).T @ Z / N
    bread = np.linalg.pinv(G.T @ W @ G)
    V = bread @ G.T @ W @ S @ W @ G @ bread / N
    se_all = np.sqrt(np.clip(np.diag(V), 0, None))
    n_lin = X1_full.shape[1]
    theta1 = np.zeros(n_lin)
    theta1[active] = theta1_active
    se = np.full(n_lin + len(which), np.nan)
    se[np.flatnonzero(active)] = se_all[:X1.shape[1]]
    se[n_lin:] = se_all[X1.shape[1]:]

    names = linear_names(markets[0]) + list(which)
    est = np.concatenate([theta1, t_hat])
    full = unpack(t_hat)
    params = DemandParams(alpha=theta1[-3], beta=theta1[:-3], delta0=theta1[-2], delta1=theta1[-1],
                          sigma=full.sigma, pi_income=full.pi_income)
    xi_map = {}
    k = 0
    for m in markets:
        for p in m.products:
            xi_map[(m.market_id, p.product_id)] = float(xi[k])
            k += 1
    # the nonlinear names not estimated are still reported (fixed at init)
    for n in NONLINEAR:
        if n not in which:
            names.append(n)
            est = np.append(est, theta_full0[idx[n]])
            se = np.append(se, np.nan)
    return DemandEstimate(params=params, names=names, estimates=est, std_errors=se,
                          objective=obj, xi=xi_map)
