"""Peer-to-peer electricity market adapter."""

from .grid import GridModel, Line, distance_matrix, ieee14, isf_matrix, line_flows, ptdf, read_grid
from .market import (
    MarketParams,
    MarketRound,
    TradeSpace,
    constraint_residual,
    feasible_project,
    gen_random_round,
    gen_timevarying_round,
    market_cost,
    market_problem,
    oasis_ingest,
    satisfaction_gap,
)

__all__ = [
    "GridModel", "Line", "distance_matrix", "ieee14", "isf_matrix", "line_flows", "ptdf", "read_grid",
    "MarketParams", "MarketRound", "TradeSpace", "constraint_residual", "feasible_project", "gen_random_round",
    "gen_timevarying_round", "market_cost", "market_problem", "oasis_ingest", "satisfaction_gap",
]
