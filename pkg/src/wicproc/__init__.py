"""Demand, pricing and procurement-mechanism simulation for WIC infant formula markets."""
from .market_data import AuctionRecord, DataError, MarketConfig, Product, load_markets, non_wic_sales
from .demand import ConsumerDraws, DemandContext, DemandParams, invert_shares, market_shares
from .supply import SupplyParams, solve_bertrand, solve_post_auction
from .bidding import RebateModel, determine_winner, fit_rebate_model, predict_rebates
from .counterfactual import MechanismConfig, MechanismOutcome, compare_mechanisms, entry_equilibrium
from .synthetic import SyntheticSpec, generate_synthetic, generate_world

__all__ = [
    "AuctionRecord", "DataError", "MarketConfig", "Product", "load_markets", "non_wic_sales",
    "ConsumerDraws", "DemandContext", "DemandParams", "invert_shares", "market_shares",
    "SupplyParams", "solve_bertrand", "solve_post_auction",
    "RebateModel", "determine_winner", "fit_rebate_model", "predict_rebates",
    "MechanismConfig", "MechanismOutcome", "compare_mechanisms", "entry_equilibrium",
    "SyntheticSpec", "generate_synthetic", "generate_world",
]
__version__ = "0.1.0"
