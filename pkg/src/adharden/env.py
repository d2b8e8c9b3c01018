"""The attacker's decision process over a condensed graph.

A state is one ternary status per chain: +1 the attacker traversed it, -1 the
attacker failed on it, 0 untried.  Untried chains whose source node is under
attacker control (an entry, or the endpoint of a traversed chain) are the
legal actions.  Acting on a chain succeeds, fails, or triggers detection with
the chain's aggregated probabilities; detection ends the attack, reaching the
domain admin pays reward 1.

A defense plan blocks a subset of block-worthy edges; blocked chains start
out failed (status -1), which is how blocking is realized without touching
the graph.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .condense import CondensedGraph
from .graphs import GraphFormatError

S = 1
FAILED = -1
UNKNOWN = 0

AttackerState = np.ndarray  # int8 vector of {S, FAILED, UNKNOWN}, length n_nsps


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class DefenseConfig:
    """Choice of block-worthy edges to block, as a bit per bw edge."""

    bits: tuple[int, ...]

    @classmethod
    def from_ids(cls, n_bw: int, blocked: Iterable[int]) -> "DefenseConfig":
        bits = [0] * n_bw
        for i in blocked:
            bits[i] = 1
        return cls(tuple(bits))

    @classmethod
    def none(cls, n_bw: int) -> "DefenseConfig":
        return cls((0,) * n_bw)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "DefenseConfig":
        return cls(tuple(int(b) for b in arr))

    @classmethod
    def from_bitstring(cls, s: str) -> "DefenseConfig":
        if set(s) - {"0", "1"}:
            raise GraphFormatError(f"bad defense bitstring {s!r}")
        return cls(tuple(int(c) for c in s))

    @property
    def k(self) -> int:
        return sum(self.bits)

    @property
    def blocked_ids(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=bool)

    def to_bitstring(self) -> str:
        return "".join(str(b) for b in self.bits)


def save_defense(d: DefenseConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(d.to_bitstring() + "\n")


def load_defense(path: str) -> DefenseConfig:
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                return DefenseConfig.from_bitstring(line)
    raise GraphFormatError(f"{path}: no defense bitstring found")


class StepOutcome(NamedTuple):
    next: AttackerState
    reward: int
    done: bool  # DA reached or attacker detected


class Outcome(NamedTuple):
    next: AttackerState
    prob: float
    reward: int
    done: bool


def initial_state(cg: CondensedGraph, d: DefenseConfig) -> AttackerState:
    """All chains untried, except members of blocked bw edges start failed."""
    if len(d.bits) != cg.n_bw:
        raise EnvError(f"defense has {len(d.bits)} bits, graph has {cg.n_bw} bw edges")
    s = np.zeros(cg.n_nsps, dtype=np.int8)
    rt = cg.runtime
    for b in d.blocked_ids:
        s[rt.bw_members[b]] = FAILED
    return s


def controlled_mask(s: AttackerState, cg: CondensedGraph) -> np.ndarray:
    """Boolean mask over condensed nodes the attacker controls."""
    rt = cg.runtime
    mask = rt.entry_node_mask.copy()
    mask[rt.nsp_dst[s == S]] = True
    return mask


def controlled_nodes(s: AttackerState, cg: CondensedGraph) -> frozenset[str]:
    mask = controlled_mask(s, cg)
    return frozenset(nid for nid, i in cg.runtime.node_index.items() if mask[i])


def legal_mask(s: AttackerState, cg: CondensedGraph) -> np.ndarray:
    rt = cg.runtime
    return (s == UNKNOWN) & controlled_mask(s, cg)[rt.nsp_src]


def legal_actions(s: AttackerState, cg: CondensedGraph) -> np.ndarray:
    return np.flatnonzero(legal_mask(s, cg))


def da_controlled(s: AttackerState, cg: CondensedGraph) -> bool:
    return bool(((s == S) & cg.runtime.nsp_dst_is_da).any())


def is_terminal(s: AttackerState, cg: CondensedGraph) -> bool:
    return da_controlled(s, cg) or not legal_mask(s, cg).any()


def outcome_distribution(s: AttackerState, a: int, cg: CondensedGraph) -> list[Outcome]:
    """All possible next states of acting on chain ``a`` with probabilities.

    Branches in order (zero-probability branches omitted):
      success: chain marked traversed; untried chains whose destination is
        already under control are marked traversed too (trying them could
        only risk detection); reward 1 and done if the chain ends at the DA.
      failure: chain marked failed, along with every untried chain sharing
        its block-worthy edge (that shared edge is what failed).
      detection: the attack ends; statuses unchanged, reward 0, done.
    """
    if not legal_mask(s, cg)[a]:
        raise EnvError(f"action {a} is not legal in this state")
    rt = cg.runtime
    ps, pf, pd = rt.probs[a]
    branches: list[Outcome] = []
    if ps > 0.0:
        nxt = s.copy()
        nxt[a] = S
        ctl = controlled_mask(nxt, cg)
        nxt[(nxt == UNKNOWN) & ctl[rt.nsp_dst]] = S
        reached = bool(rt.nsp_dst_is_da[a])
        branches.append(Outcome(nxt, float(ps), int(reached), reached))
    if pf > 0.0:
        nxt = s.copy()
        nxt[a] = FAILED
        b = rt.bw_of_nsp[a]
        if b >= 0:
            members = rt.bw_members[b]
            nxt[members[s[members] == UNKNOWN]] = FAILED
        branches.append(Outcome(nxt, float(pf), 0, False))
    if pd > 0.0:
        branches.append(Outcome(s.copy(), float(pd), 0, True))
    total = sum(b.prob for b in branches)
    if abs(total - 1.0) > 1e-12:
        raise EnvError(f"outcome probabilities sum to {total}")
    return branches


def step(s: AttackerState, a: int, cg: CondensedGraph, rng: np.random.Generator) -> StepOutcome:
    """Sample one branch of the outcome distribution."""
    branches = outcome_distribution(s, a, cg)
    u = rng.random()
    acc = 0.0
    chosen = branches[-1]
    for b in branches:
        acc += b.prob
        if u < acc:
            chosen = b
            break
    return StepOutcome(chosen.next, chosen.reward, chosen.done)


def encode(s: AttackerState) -> np.ndarray:
    """Feature vector: traversed -> +1, failed -> -1, untried -> 0."""
    return s.astype(np.float64)


def trace_line(a: int, out: StepOutcome, prev: AttackerState) -> str:
    """One debug-trace line for a step (``step <nsp> -> S|F|D``)."""
    if out.done and out.reward == 0 and out.next[a] == prev[a]:
        tag = "D"
    elif out.next[a] == S:
        tag = "S"
    else:
        tag = "F"
    return f"step {a} -> {tag}"


class AttackEnv:
    """Stateful episode wrapper around one condensed graph + defense plan.

    Each instance owns an rng stream; a replacement defense plan set with
    :meth:`set_defense` takes effect at the next reset, the way the defender
    swaps plans between training episodes.
    """

    def __init__(self, cg: CondensedGraph, defense: DefenseConfig, rng: np.random.Generator):
        self.cg = cg
        self._defense = defense
        self._pending: DefenseConfig | None = None
        self.rng = rng
        self.state: AttackerState = initial_state(cg, defense)
        self.episode_return = 0
        self.done = is_terminal(self.state, cg)

    @property
    def defense(self) -> DefenseConfig:
        return self._defense

    def set_defense(self, d: DefenseConfig) -> None:
        self._pending = d

    def reset(self) -> AttackerState:
        if self._pending is not None:
            self._defense = self._pending
            self._pending = None
        self.state = initial_state(self.cg, self._defense)
        self.episode_return = 0
        self.done = is_terminal(self.state, self.cg)
        return self.state

    def legal(self) -> np.ndarray:
        return legal_mask(self.state, self.cg)

    def step(self, a: int) -> tuple[AttackerState, int, bool]:
        if self.done:
            raise EnvError("episode is over; call reset()")
        out = step(self.state, a, self.cg, self.rng)
        self.state = out.next
        self.episode_return += out.reward
        self.done = out.done or is_terminal(out.next, self.cg)
        return out.next, out.reward, self.done
