"""Exact ground truth at small scale.

The attacker's decision process is acyclic (statuses only ever move from
untried to traversed/failed), so the optimal success probability solves by
memoized depth-first recursion over reachable states.  That makes three
checks possible on small graphs: the exact value of any defense plan, the
exactly optimal plan by exhaustion over all budget-k subsets, and a Monte
Carlo simulation following the exact optimal policy, which must agree with
the computed value.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .condense import CondensedGraph
from .env import (
    DefenseConfig,
    Outcome,
    UNKNOWN,
    da_controlled,
    initial_state,
    legal_mask,
    outcome_distribution,
)
from .util import EvalResult, binomial_ci


class OracleError(ValueError):
    pass


@dataclass
class ValueTable:
    """Memoized optimal values rooted at one initial state.

    ``values`` maps a state key (the raw status bytes) to the optimal success
    probability; ``best_action`` holds the argmax chain (lowest id on ties,
    None for terminal states); ``branches`` caches the outcome distribution
    of the best action as (next_key, prob, reward, done) tuples so optimal
    play can be simulated without re-deriving transitions.
    """

    cg: CondensedGraph
    root: bytes
    values: dict[bytes, float] = field(default_factory=dict)
    best_action: dict[bytes, int | None] = field(default_factory=dict)
    branches: dict[bytes, list[tuple[bytes, float, int, bool]]] = field(default_factory=dict)

    @property
    def root_value(self) -> float:
        return self.values[self.root]


def solve(cg: CondensedGraph, defense: DefenseConfig, max_nsps: int = 20) -> ValueTable:
    """Build the full value table reachable from the initial state."""
    if cg.n_nsps > max_nsps:
        raise OracleError(f"{cg.n_nsps} chains exceed the exact-solver cap of {max_nsps}")
    root = initial_state(cg, defense)
    table = ValueTable(cg=cg, root=root.tobytes())
    _value(root, cg, table)
    return table


def _value(s: np.ndarray, cg: CondensedGraph, table: ValueTable) -> float:
    key = s.tobytes()
    cached = table.values.get(key)
    if cached is not None:
        return cached
    if da_controlled(s, cg):
        table.values[key] = 1.0
        table.best_action[key] = None
        return 1.0
    legal = np.flatnonzero(legal_mask(s, cg))
    if legal.size == 0:
        table.values[key] = 0.0
        table.best_action[key] = None
        return 0.0
    best = -1.0
    best_a = None
    best_branches: list[Outcome] = []
    for a in legal:
        total = 0.0
        branches = outcome_distribution(s, int(a), cg)
        for nxt, prob, reward, done in branches:
            if done:
                total += prob * reward
            else:
                total += prob * _value(nxt, cg, table)
        if total > best:
            best = total
            best_a = int(a)
            best_branches = branches
    table.values[key] = best
    table.best_action[key] = best_a
    table.branches[key] = [
        (nxt.tobytes(), prob, reward, done) for nxt, prob, reward, done in best_branches
    ]
    return best


def exact_value(cg: CondensedGraph, defense: DefenseConfig, max_nsps: int = 20) -> float:
    """Optimal attacker success probability against one defense plan."""
    return solve(cg, defense, max_nsps=max_nsps).root_value


def exact_best_defense(
    cg: CondensedGraph,
    k: int,
    max_configs: int = 100_000,
    max_nsps: int = 20,
) -> tuple[DefenseConfig, float]:
    """Exhaustively minimize the exact value over all budget-k plans.

    Ties go to the lexicographically smallest blocked set (the enumeration
    order of ``itertools.combinations``).
    """
    n = cg.n_bw
    if k > n:
        raise OracleError(f"budget {k} exceeds {n} block-worthy edges")
    import math

    n_configs = math.comb(n, k)
    if n_configs > max_configs:
        raise OracleError(f"{n_configs} plans exceed the exhaustion cap of {max_configs}")
    best_cfg = None
    best_val = np.inf
    for blocked in combinations(range(n), k):
        cfg = DefenseConfig.from_ids(n, blocked)
        val = exact_value(cg, cfg, max_nsps=max_nsps)
        if val < best_val:
            best_val = val
            best_cfg = cfg
    assert best_cfg is not None
    return best_cfg, float(best_val)


def mc_optimal_play(
    cg: CondensedGraph,
    defense: DefenseConfig,
    episodes: int,
    rng: np.random.Generator,
    table: ValueTable | None = None,
) -> EvalResult:
    """Simulate optimal play and report the empirical success rate.

    The mean must converge to ``exact_value``; this is the master consistency
    check between the simulator semantics and the dynamic program.
    """
    if table is None:
        table = solve(cg, defense)
    successes = 0
    for _ in range(episodes):
        key = table.root
        while True:
            action = table.best_action[key]
            if action is None:
                break
            u = rng.random()
            acc = 0.0
            branches = table.branches[key]
            chosen = branches[-1]
            for br in branches:
                acc += br[1]
                if u < acc:
                    chosen = br
                    break
            key, _, reward, done = chosen
            if done:
                successes += reward
                break
    return binomial_ci(successes, episodes)
