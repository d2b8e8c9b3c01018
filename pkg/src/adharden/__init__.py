"""Attack-graph hardening: a policy-gradient attacker co-evolved against
evolutionary blocking-plan defenders, with exact small-scale ground truth."""

from .condense import CondensedGraph, condense, load_condensed, save_condensed
from .env import AttackEnv, DefenseConfig, initial_state
from .graphs import (
    ADGraph,
    RateDistribution,
    assign_blockable,
    assign_rates,
    generate_synthetic,
    load_graph,
    save_graph,
    select_entries,
)
from .oracle import exact_best_defense, exact_value, mc_optimal_play

__all__ = [
    "ADGraph",
    "AttackEnv",
    "CondensedGraph",
    "DefenseConfig",
    "RateDistribution",
    "assign_blockable",
    "assign_rates",
    "condense",
    "exact_best_defense",
    "exact_value",
    "generate_synthetic",
    "initial_state",
    "load_condensed",
    "load_graph",
    "mc_optimal_play",
    "save_condensed",
    "save_graph",
    "select_entries",
]
