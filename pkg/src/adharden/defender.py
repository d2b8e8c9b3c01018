"""Defender search over budget-k blocking plans.

Three policies share the same plan representation and variation operators:

  * diversity-driven evolutionary search (the default): offspring within a
    fitness window of the population best are admitted and the survivor cut
    removes whichever individual contributes least to blocked-edge diversity;
  * plain evolutionary computation: identical machinery, but the survivor
    cut always removes the worst-fitness individual;
  * greedy: block one edge at a time, each round picking the edge whose
    addition minimizes the estimated attacker success.

Fitness of a plan is the negated (clamped) critic estimate of the attacker's
success from that plan's initial state, so larger fitness = better defense.
An exact-solver fitness drop-in exists for small graphs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import nn, oracle
from .condense import CondensedGraph
from .env import DefenseConfig, encode, initial_state


class DefenderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# fitness


class FitnessFn(Protocol):
    def __call__(self, config: DefenseConfig) -> float: ...

    def batch(self, configs: Sequence[DefenseConfig]) -> np.ndarray: ...


class CriticFitness:
    """Defender fitness = -clamp01(critic value of the plan's initial state)."""

    def __init__(self, critic: nn.MlpParams, cg: CondensedGraph):
        self.critic = critic
        self.cg = cg

    def set_critic(self, critic: nn.MlpParams) -> None:
        self.critic = critic

    def batch(self, configs: Sequence[DefenseConfig]) -> np.ndarray:
        feats = np.stack([encode(initial_state(self.cg, c)) for c in configs])
        values, _ = nn.critic_forward(self.critic, feats)
        return -np.asarray(nn.clamp01(values))

    def __call__(self, config: DefenseConfig) -> float:
        return float(self.batch([config])[0])


class OracleFitness:
    """Exact-solver fitness with a per-plan cache; small graphs only."""

    def __init__(self, cg: CondensedGraph, max_nsps: int = 20):
        self.cg = cg
        self.max_nsps = max_nsps
        self._cache: dict[DefenseConfig, float] = {}

    def __call__(self, config: DefenseConfig) -> float:
        val = self._cache.get(config)
        if val is None:
            val = -oracle.exact_value(self.cg, config, max_nsps=self.max_nsps)
            self._cache[config] = val
        return val

    def batch(self, configs: Sequence[DefenseConfig]) -> np.ndarray:
        return np.array([self(c) for c in configs])


# ---------------------------------------------------------------------------
# population


@dataclass
class Individual:
    config: DefenseConfig
    fitness: float
    born: int  # admission counter; lower = older (tie-breaks)


@dataclass
class Population:
    """Fixed-size plan population with an incrementally maintained count of
    how often each block-worthy edge is blocked."""

    individuals: list[Individual]
    mu: int
    k: int
    n_bw: int
    counts: np.ndarray = field(init=False)
    births: int = field(init=False)

    def __post_init__(self) -> None:
        for ind in self.individuals:
            self._check_budget(ind.config)
        self.counts = self.recount()
        self.births = len(self.individuals)

    def _check_budget(self, config: DefenseConfig) -> None:
        if config.k != self.k:
            raise DefenderError(f"plan blocks {config.k} edges, budget is {self.k}")
        if len(config.bits) != self.n_bw:
            raise DefenderError(f"plan length {len(config.bits)} != {self.n_bw} bw edges")

    def recount(self) -> np.ndarray:
        counts = np.zeros(self.n_bw, dtype=np.int64)
        for ind in self.individuals:
            counts += ind.config.as_array()
        return counts

    @property
    def opt(self) -> float:
        return max(ind.fitness for ind in self.individuals)

    def best(self) -> Individual:
        return max(self.individuals, key=lambda ind: (ind.fitness, -ind.born))

    def admit(self, config: DefenseConfig, fitness: float) -> Individual:
        self._check_budget(config)
        ind = Individual(config, fitness, born=self.births)
        self.births += 1
        self.individuals.append(ind)
        self.counts += config.as_array()
        return ind

    def remove(self, ind: Individual) -> None:
        self.individuals.remove(ind)
        self.counts -= ind.config.as_array()

    def refresh_fitness(self, fitness_fn: FitnessFn) -> None:
        scores = fitness_fn.batch([ind.config for ind in self.individuals])
        for ind, score in zip(self.individuals, scores):
            ind.fitness = float(score)


def init_population(
    mu: int, k: int, n_bw: int, rng: np.random.Generator, fitness_fn: FitnessFn
) -> Population:
    """mu uniformly random budget-k plans, fitness evaluated."""
    if n_bw < k:
        raise DefenderError(f"only {n_bw} block-worthy edges for budget {k}")
    configs = [
        DefenseConfig.from_ids(n_bw, rng.choice(n_bw, size=k, replace=False))
        for _ in range(mu)
    ]
    scores = fitness_fn.batch(configs)
    inds = [Individual(c, float(s), born=i) for i, (c, s) in enumerate(zip(configs, scores))]
    return Population(inds, mu=mu, k=k, n_bw=n_bw)


# ---------------------------------------------------------------------------
# variation operators


def _poisson_x(rng: np.random.Generator, cap: int) -> int:
    """Swap count: Poisson(1), at least 1, at most ``cap`` (0 when cap is 0)."""
    if cap <= 0:
        return 0
    return min(max(int(rng.poisson(1.0)), 1), cap)


def mutate(config: DefenseConfig, rng: np.random.Generator, x: int | None = None) -> DefenseConfig:
    """Swap x blocked bits with x unblocked bits, preserving the budget."""
    arr = config.as_array()
    blocked = np.flatnonzero(arr)
    unblocked = np.flatnonzero(~arr)
    if x is None:
        x = _poisson_x(rng, min(len(blocked), len(unblocked)))
    if x == 0:
        return config
    off = rng.choice(blocked, size=x, replace=False)
    on = rng.choice(unblocked, size=x, replace=False)
    arr[off] = False
    arr[on] = True
    return DefenseConfig.from_array(arr)


def crossover(
    p1: DefenseConfig,
    p2: DefenseConfig,
    rng: np.random.Generator,
    x: int | None = None,
) -> DefenseConfig:
    """Exchange x discordant positions between the parents.

    Positions where p1 is unblocked but p2 blocked (and vice versa) come in
    equal numbers since both parents block exactly k edges; swapping x of
    each produces two budget-preserving children, one of which is returned
    uniformly at random.
    """
    a1 = p1.as_array()
    a2 = p2.as_array()
    n_on = np.flatnonzero(~a1 & a2)  # p1 N, p2 B
    n_off = np.flatnonzero(a1 & ~a2)  # p1 B, p2 N
    if x is None:
        x = _poisson_x(rng, len(n_on))
    if x == 0:
        return p1 if rng.random() < 0.5 else p2
    take_on = rng.choice(n_on, size=x, replace=False)
    take_off = rng.choice(n_off, size=x, replace=False)
    c1 = a1.copy()
    c1[take_on] = True
    c1[take_off] = False
    c2 = a2.copy()
    c2[take_on] = False
    c2[take_off] = True
    child = c1 if rng.random() < 0.5 else c2
    return DefenseConfig.from_array(child)


# ---------------------------------------------------------------------------
# survivor selection


def sorted_diver(counts: np.ndarray, config: DefenseConfig) -> np.ndarray:
    """Per-edge block counts of the population without this individual,
    sorted descending.  Lexicographically smaller = flatter = the remaining
    population spreads its blocks more evenly."""
    residual = counts - config.as_array()
    return np.sort(residual)[::-1]


Selector = Callable[[Population, float], Individual]


def survivor_select(pop: Population, opt_before: float) -> Individual:
    """Diversity-driven cut on a mu+1 population; returns the removed one.

    The newest member is the offspring.  If it strictly improves on the best
    fitness seen before admission, the worst-fitness individual goes (even if
    that hurts diversity).  Otherwise the cut removes the individual whose
    absence leaves the descending-sorted block-count vector lexicographically
    smallest, breaking ties toward worse fitness, then toward older age.
    """
    if len(pop.individuals) != pop.mu + 1:
        raise DefenderError(f"survivor selection needs mu+1 members, got {len(pop.individuals)}")
    offspring = pop.individuals[-1]
    if offspring.fitness > opt_before:
        victim = min(pop.individuals, key=lambda ind: (ind.fitness, ind.born))
    else:
        victim = min(
            pop.individuals,
            key=lambda ind: (tuple(sorted_diver(pop.counts, ind.config)), ind.fitness, ind.born),
        )
    pop.remove(victim)
    return victim


def ec_survivor_select(pop: Population, opt_before: float) -> Individual:
    """Plain evolutionary cut: always remove the worst fitness (oldest on
    ties)."""
    if len(pop.individuals) != pop.mu + 1:
        raise DefenderError(f"survivor selection needs mu+1 members, got {len(pop.individuals)}")
    victim = min(pop.individuals, key=lambda ind: (ind.fitness, ind.born))
    pop.remove(victim)
    return victim


# ---------------------------------------------------------------------------
# search loops


@dataclass
class StepInfo:
    offspring: DefenseConfig
    fitness: float
    admitted: bool
    removed: DefenseConfig | None = None


FITNESS_WINDOW = 0.1


def edo_step(
    pop: Population,
    fitness_fn: FitnessFn,
    rng: np.random.Generator,
    selector: Selector = survivor_select,
) -> StepInfo:
    """One search iteration: propose by mutation or crossover (50/50), admit
    if the offspring's fitness reaches the window around the population best
    (anything strictly better is always admitted), then cut back to mu."""
    inds = pop.individuals
    if rng.random() < 0.5:
        parent = inds[int(rng.integers(len(inds)))]
        child = mutate(parent.config, rng)
    else:
        p1 = inds[int(rng.integers(len(inds)))]
        p2 = inds[int(rng.integers(len(inds)))]
        child = crossover(p1.config, p2.config, rng)
    fitness = float(fitness_fn(child))
    opt_before = pop.opt
    if fitness < opt_before - FITNESS_WINDOW:
        return StepInfo(child, fitness, admitted=False)
    pop.admit(child, fitness)
    victim = selector(pop, opt_before)
    return StepInfo(child, fitness, admitted=True, removed=victim.config)


class EdoDefender:
    """Evolutionary defender driving a plan population between training
    phases.

    ``hook`` follows the trainer's defender-hook contract: refresh fitness
    under the new critic snapshot, run this invocation's share of the total
    iteration budget, record the best plan seen, and hand the population out
    to the environment slots (one individual per slot when sizes match).
    """

    def __init__(
        self,
        cg: CondensedGraph,
        k: int,
        rng: np.random.Generator,
        mu: int = 20,
        total_iters: int = 20000,
        n_hooks: int = 35,
        selector: Selector = survivor_select,
        fitness_fn: FitnessFn | None = None,
    ):
        self.cg = cg
        self.k = k
        self.rng = rng
        self.selector = selector
        self.fitness_fn = fitness_fn or CriticFitness(_zero_critic(cg), cg)
        self.tranche = max(1, math.ceil(total_iters / max(1, n_hooks)))
        self.population = init_population(mu, k, cg.n_bw, rng, self.fitness_fn)
        self.best_config: DefenseConfig | None = None
        self.best_fitness = -np.inf
        self._record_best()

    def _record_best(self) -> None:
        best = self.population.best()
        if best.fitness > self.best_fitness:
            self.best_fitness = best.fitness
            self.best_config = best.config

    def run(self, iters: int) -> None:
        for _ in range(iters):
            edo_step(self.population, self.fitness_fn, self.rng, self.selector)
        self._record_best()

    def hook(self, critic: nn.MlpParams, current: list[DefenseConfig]) -> list[DefenseConfig]:
        if isinstance(self.fitness_fn, CriticFitness):
            self.fitness_fn.set_critic(critic)
        self.population.refresh_fitness(self.fitness_fn)
        self.run(self.tranche)
        return self.plans_for_slots(len(current))

    def plans_for_slots(self, n_slots: int) -> list[DefenseConfig]:
        inds = self.population.individuals
        return [inds[i % len(inds)].config for i in range(n_slots)]

    def final_best(self, critic: nn.MlpParams | None = None) -> DefenseConfig:
        """Best plan of the final population, judged by the final critic."""
        if critic is not None and isinstance(self.fitness_fn, CriticFitness):
            self.fitness_fn.set_critic(critic)
            self.population.refresh_fitness(self.fitness_fn)
        return self.population.best().config


def _zero_critic(cg: CondensedGraph) -> nn.MlpParams:
    sizes = [cg.n_nsps, 4, 4, 1]
    return nn.MlpParams(
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
    )


def greedy_defense(fitness_fn: FitnessFn, n_bw: int, k: int) -> DefenseConfig:
    """Block k edges one at a time, each round taking the edge whose addition
    maximizes fitness (minimizes estimated attacker success); ties go to the
    lowest edge id."""
    if n_bw < k:
        raise DefenderError(f"only {n_bw} block-worthy edges for budget {k}")
    blocked: list[int] = []
    for _ in range(k):
        candidates = [i for i in range(n_bw) if i not in blocked]
        configs = [DefenseConfig.from_ids(n_bw, blocked + [c]) for c in candidates]
        scores = fitness_fn.batch(configs)
        blocked.append(candidates[int(np.argmax(scores))])
    return DefenseConfig.from_ids(n_bw, blocked)


class GreedyDefender:
    """Greedy plan recomputed from scratch at every hook invocation; all env
    slots share the single current plan."""

    def __init__(self, cg: CondensedGraph, k: int, rng: np.random.Generator):
        self.cg = cg
        self.k = k
        arr = rng.choice(cg.n_bw, size=k, replace=False)
        self.current = DefenseConfig.from_ids(cg.n_bw, arr)

    def hook(self, critic: nn.MlpParams, current: list[DefenseConfig]) -> list[DefenseConfig]:
        fitness = CriticFitness(critic, self.cg)
        self.current = greedy_defense(fitness, self.cg.n_bw, self.k)
        return [self.current for _ in current]

    def final_best(self, critic: nn.MlpParams | None = None) -> DefenseConfig:
        if critic is not None:
            self.current = greedy_defense(CriticFitness(critic, self.cg), self.cg.n_bw, self.k)
        return self.current
