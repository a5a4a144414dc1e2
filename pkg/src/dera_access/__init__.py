"""Forward auction for distribution-network access with DER aggregator bids."""

from .auction import (
    AuctionInfeasibleError,
    AuctionInstance,
    ClearingResult,
    DsoCost,
    check_price_identity,
    clear,
    envelope_check,
    locational_prices,
    payments,
    verify_robust,
)
from .dera import (
    AccessInterval,
    BidCurve,
    DeraBid,
    DeraPortfolio,
    Prosumer,
    bid_curves,
    optimal_decision,
    oracle_surplus,
    pwl_benefit_value,
)
from .net_model import (
    RadialNetwork,
    SensitivityBundle,
    build_sensitivity,
    evaluate_flow,
    parse_matpower_case,
    worst_case_bounds,
)
from .prosumer import NemTariff, ProsumerParams, UtilityFn, nem_consumption, nem_surplus
from .solver import ConcavePwl, ConvexSeparableProgram, kkt_residuals, solve

__version__ = "0.1.0"

__all__ = [
    "AccessInterval",
    "AuctionInfeasibleError",
    "AuctionInstance",
    "BidCurve",
    "ClearingResult",
    "ConcavePwl",
    "ConvexSeparableProgram",
    "DeraBid",
    "DeraPortfolio",
    "DsoCost",
    "NemTariff",
    "Prosumer",
    "ProsumerParams",
    "RadialNetwork",
    "SensitivityBundle",
    "UtilityFn",
    "bid_curves",
    "build_sensitivity",
    "check_price_identity",
    "clear",
    "envelope_check",
    "evaluate_flow",
    "kkt_residuals",
    "locational_prices",
    "nem_consumption",
    "nem_surplus",
    "optimal_decision",
    "oracle_surplus",
    "parse_matpower_case",
    "payments",
    "pwl_benefit_value",
    "solve",
    "verify_robust",
    "worst_case_bounds",
]
