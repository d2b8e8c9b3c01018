"""Raw attack-graph model: typed nodes, probabilistic edges, text-file I/O,
and seeded synthetic generation.

Nodes are accounts, machines, groups, or the domain-admin target.  Each edge
carries a detection probability ``pd``, a failure probability ``pf`` (success
is the remainder) and a ``blockable`` flag.  Every randomized operation here
is a pure function of its inputs and an integer seed.

Graph file format (UTF-8, one record per line, ``#`` starts a comment)::

    node <id> <User|Computer|Group|DomainAdmin>
    entry <id>
    edge <src> <dst> <HasSession|MemberOf|AdminTo> [pd=<f>] [pf=<f>] [blockable=<0|1>]

Node ids are whitespace-free tokens and may not contain ``:`` or ``,``
(reserved by the condensed-graph format).  ``save_graph`` writes records in a
canonical sorted order so that save(load(f)) is byte-identical for canonical
files.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Iterable

import numpy as np


class GraphError(ValueError):
    """Structural problem in an attack graph."""


class GraphFormatError(GraphError):
    """Malformed graph file; message includes the offending location."""


class NodeKind(str, Enum):
    USER = "User"
    COMPUTER = "Computer"
    GROUP = "Group"
    DOMAIN_ADMIN = "DomainAdmin"


class EdgeKind(str, Enum):
    HAS_SESSION = "HasSession"
    MEMBER_OF = "MemberOf"
    ADMIN_TO = "AdminTo"


@dataclass(frozen=True)
class EdgeAttr:
    """Per-edge attributes.  pd/pf/blockable stay None until assigned."""

    kind: EdgeKind
    pd: float | None = None
    pf: float | None = None
    blockable: bool | None = None

    @property
    def ps(self) -> float:
        """Success probability 1 - pf - pd (requires rates assigned)."""
        if self.pd is None or self.pf is None:
            raise GraphError("edge rates not assigned")
        return 1.0 - self.pf - self.pd

    def validate(self) -> None:
        if (self.pd is None) != (self.pf is None):
            raise GraphError("pd and pf must be assigned together")
        if self.pd is not None:
            if not (self.pd >= 0.0 and self.pf >= 0.0):
                raise GraphError(f"negative rate: pd={self.pd} pf={self.pf}")
            if self.pd + self.pf > 1.0 + 1e-12:
                raise GraphError(f"pd + pf > 1: pd={self.pd} pf={self.pf}")


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    attr: EdgeAttr


@dataclass(frozen=True)
class ADGraph:
    """Directed attack graph.

    Immutable; attribute-assignment operations return new graphs.  ``entries``
    may be empty on a freshly parsed or generated-but-unselected graph; every
    operation that needs entry points checks for them explicitly.
    """

    nodes: tuple[tuple[str, NodeKind], ...]
    edges: tuple[Edge, ...]
    entries: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        for node_id, _ in self.nodes:
            if node_id in seen:
                raise GraphError(f"duplicate node id {node_id!r}")
            if ":" in node_id or "," in node_id or not node_id:
                raise GraphError(f"invalid node id {node_id!r}")
            seen.add(node_id)
        for e in self.edges:
            if e.src not in seen:
                raise GraphError(f"edge {e.src}->{e.dst}: unknown source {e.src!r}")
            if e.dst not in seen:
                raise GraphError(f"edge {e.src}->{e.dst}: unknown destination {e.dst!r}")
            if e.src == e.dst:
                raise GraphError(f"self-loop on {e.src!r}")
            e.attr.validate()
        das = self.da_nodes
        for entry in self.entries:
            if entry not in seen:
                raise GraphError(f"unknown entry node {entry!r}")
            if entry in das:
                raise GraphError(f"entry {entry!r} is a domain-admin node")

    @cached_property
    def kind_of(self) -> dict[str, NodeKind]:
        return {nid: kind for nid, kind in self.nodes}

    @cached_property
    def da_nodes(self) -> frozenset[str]:
        return frozenset(nid for nid, kind in self.nodes if kind is NodeKind.DOMAIN_ADMIN)

    @cached_property
    def out_edges(self) -> dict[str, tuple[Edge, ...]]:
        adj: dict[str, list[Edge]] = {nid: [] for nid, _ in self.nodes}
        for e in self.edges:
            adj[e.src].append(e)
        return {nid: tuple(es) for nid, es in adj.items()}

    @cached_property
    def in_edges(self) -> dict[str, tuple[Edge, ...]]:
        adj: dict[str, list[Edge]] = {nid: [] for nid, _ in self.nodes}
        for e in self.edges:
            adj[e.dst].append(e)
        return {nid: tuple(es) for nid, es in adj.items()}

    def with_entries(self, entries: Iterable[str]) -> "ADGraph":
        return replace(self, entries=frozenset(entries))

    def hops_to_da(self) -> dict[str, int]:
        """Directed hop distance from each node to the nearest domain admin.

        Nodes that cannot reach any DA are absent from the returned map.
        """
        if not self.da_nodes:
            raise GraphError("graph has no domain-admin node")
        dist = {nid: 0 for nid in self.da_nodes}
        queue = deque(self.da_nodes)
        while queue:
            v = queue.popleft()
            for e in self.in_edges[v]:
                if e.src not in dist:
                    dist[e.src] = dist[v] + 1
                    queue.append(e.src)
        return dist


@dataclass(frozen=True)
class RateDistribution:
    """Sampling law for per-edge (pd, pf) pairs.

    Independent mode draws both uniformly on [0, 0.2].  Correlated modes draw
    from a bivariate normal with mean ``mean``, marginal sigma ``sigma`` and
    correlation ``corr``, then clamp componentwise to [0, 0.5] and rescale the
    pair proportionally in the (practically unreachable) case pd + pf > 1.
    """

    class Mode(str, Enum):
        INDEPENDENT = "indep"
        POSITIVE = "pos"
        NEGATIVE = "neg"

    mode: Mode = Mode.INDEPENDENT
    mean: tuple[float, float] = (0.1, 0.1)
    sigma: float = 0.05

    @classmethod
    def from_name(cls, name: str) -> "RateDistribution":
        return cls(mode=cls.Mode(name))

    @property
    def corr(self) -> float:
        if self.mode is RateDistribution.Mode.POSITIVE:
            return 0.5
        if self.mode is RateDistribution.Mode.NEGATIVE:
            return -0.5
        return 0.0


# ---------------------------------------------------------------------------
# file I/O


def _format_float(x: float) -> str:
    return repr(float(x))


def save_graph(g: ADGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_graph(g))


def dump_graph(g: ADGraph) -> str:
    lines = ["# adharden attack graph"]
    for nid, kind in sorted(g.nodes):
        lines.append(f"node {nid} {kind.value}")
    for nid in sorted(g.entries):
        lines.append(f"entry {nid}")
    for e in sorted(g.edges, key=lambda e: (e.src, e.dst, e.attr.kind.value)):
        rec = f"edge {e.src} {e.dst} {e.attr.kind.value}"
        if e.attr.pd is not None:
            rec += f" pd={_format_float(e.attr.pd)} pf={_format_float(e.attr.pf)}"
        if e.attr.blockable is not None:
            rec += f" blockable={int(e.attr.blockable)}"
        lines.append(rec)
    return "\n".join(lines) + "\n"


def load_graph(path: str) -> ADGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read(), where=path)


def parse_graph(text: str, where: str = "<string>") -> ADGraph:
    nodes: list[tuple[str, NodeKind]] = []
    edges: list[Edge] = []
    entries: list[str] = []
    node_ids: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        loc = f"{where}:{lineno}"
        tokens = line.split()
        try:
            if tokens[0] == "node":
                _, nid, kind = tokens
                if nid in node_ids:
                    raise GraphFormatError(f"{loc}: duplicate node id {nid!r}")
                nodes.append((nid, NodeKind(kind)))
                node_ids.add(nid)
            elif tokens[0] == "entry":
                _, nid = tokens
                entries.append(nid)
            elif tokens[0] == "edge":
                src, dst, kind = tokens[1:4]
                fields = dict(t.split("=", 1) for t in tokens[4:])
                unknown = set(fields) - {"pd", "pf", "blockable"}
                if unknown:
                    raise GraphFormatError(f"{loc}: unknown edge fields {sorted(unknown)}")
                attr = EdgeAttr(
                    kind=EdgeKind(kind),
                    pd=float(fields["pd"]) if "pd" in fields else None,
                    pf=float(fields["pf"]) if "pf" in fields else None,
                    blockable=bool(int(fields["blockable"])) if "blockable" in fields else None,
                )
                edges.append(Edge(src, dst, attr))
            else:
                raise GraphFormatError(f"{loc}: unknown record {tokens[0]!r}")
        except GraphFormatError:
            raise
        except (ValueError, KeyError) as exc:
            raise GraphFormatError(f"{loc}: cannot parse {line!r}: {exc}") from exc
    for e in edges:
        if e.src not in node_ids:
            raise GraphFormatError(f"{where}: edge {e.src}->{e.dst}: dangling endpoint {e.src!r}")
        if e.dst not in node_ids:
            raise GraphFormatError(f"{where}: edge {e.src}->{e.dst}: dangling endpoint {e.dst!r}")
    for nid in entries:
        if nid not in node_ids:
            raise GraphFormatError(f"{where}: entry record for unknown node {nid!r}")
    try:
        return ADGraph(tuple(nodes), tuple(edges), frozenset(entries))
    except GraphError as exc:
        raise GraphFormatError(f"{where}: {exc}") from exc


# ---------------------------------------------------------------------------
# synthetic generation


def generate_synthetic(
    n_computers: int,
    seed: int,
    n_faraway: int = 40,
    n_entries: int = 20,
) -> ADGraph:
    """Generate a layered synthetic domain graph.

    Computers hold user sessions (Computer -> User), users belong to groups
    (User -> Group), groups administer computers (Group -> Computer).  A small
    set of privileged users is wired into a single domain-admin node.  Sizes
    are tuned so node count is about 3x and edge count about 7x the computer
    count.  Entry nodes are selected from the nodes farthest from the DA.
    """
    if n_computers < 2:
        raise GraphError("need at least 2 computers")
    rng = np.random.default_rng(seed)

    n_users = max(2, round(1.8 * n_computers))
    n_groups = max(1, round(0.2 * n_computers))
    computers = [f"C{i:05d}" for i in range(n_computers)]
    users = [f"U{i:05d}" for i in range(n_users)]
    groups = [f"G{i:05d}" for i in range(n_groups)]
    da = "DA"

    nodes = (
        [(c, NodeKind.COMPUTER) for c in computers]
        + [(u, NodeKind.USER) for u in users]
        + [(g, NodeKind.GROUP) for g in groups]
        + [(da, NodeKind.DOMAIN_ADMIN)]
    )

    edge_set: set[tuple[str, str, EdgeKind]] = set()

    def add(src: str, dst: str, kind: EdgeKind) -> None:
        if src != dst:
            edge_set.add((src, dst, kind))

    # Sessions: each computer holds 1-3 user sessions (mean 2).
    for c in computers:
        for u in rng.choice(n_users, size=rng.integers(1, 4), replace=False):
            add(c, users[u], EdgeKind.HAS_SESSION)

    # Memberships: each user joins 1-3 groups, skewed toward 1-2 (mean ~1.7).
    for u in users:
        n_memb = rng.choice([1, 2, 3], p=[0.45, 0.4, 0.15])
        for gi in rng.choice(n_groups, size=min(n_memb, n_groups), replace=False):
            add(u, groups[gi], EdgeKind.MEMBER_OF)

    # Administration: each group administers ~10 computers.
    n_admin = min(10, n_computers)
    for gname in groups:
        for ci in rng.choice(n_computers, size=n_admin, replace=False):
            add(gname, computers[ci], EdgeKind.ADMIN_TO)

    # Privileged wiring: a few users sit in the DA group; the DA group
    # administers a few machines (those edges are outgoing from DA and get
    # pruned later, but real domains have them).
    da_users = [users[i] for i in rng.choice(n_users, size=max(1, round(0.01 * n_users)), replace=False)]
    for u in da_users:
        add(u, da, EdgeKind.MEMBER_OF)
    for ci in rng.choice(n_computers, size=max(1, round(0.02 * n_computers)), replace=False):
        add(da, computers[ci], EdgeKind.ADMIN_TO)

    # Guarantee at least one full path into the DA: some computer holds a
    # privileged session and some group administers that computer.
    add(computers[0], da_users[0], EdgeKind.HAS_SESSION)
    add(groups[0], computers[0], EdgeKind.ADMIN_TO)

    edges = tuple(
        Edge(src, dst, EdgeAttr(kind=kind))
        for src, dst, kind in sorted(edge_set, key=lambda t: (t[0], t[1], t[2].value))
    )
    g = ADGraph(tuple(nodes), edges)
    entry_seed = int(np.random.SeedSequence(seed).spawn(1)[0].generate_state(1)[0])
    return g.with_entries(select_entries(g, entry_seed, n_faraway=n_faraway, n_entries=n_entries))


def select_entries(
    g: ADGraph,
    seed: int,
    n_faraway: int = 40,
    n_entries: int = 20,
) -> frozenset[str]:
    """Pick entry nodes among the nodes farthest (in hops) from the DA.

    The ``n_faraway`` candidates with the greatest finite hop distance are
    ranked deterministically (distance desc, id asc); ``n_entries`` of them
    are drawn uniformly under the seed.  Falls back with a warning when fewer
    candidates exist.
    """
    dist = g.hops_to_da()
    candidates = sorted(
        (nid for nid in dist if nid not in g.da_nodes),
        key=lambda nid: (-dist[nid], nid),
    )
    if not candidates:
        raise GraphError("no node can reach the domain admin")
    if len(candidates) < n_faraway:
        warnings.warn(
            f"only {len(candidates)} nodes reach the DA; using all of them as entry candidates",
            stacklevel=2,
        )
    pool = candidates[:n_faraway]
    take = min(n_entries, len(pool))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(pool), size=take, replace=False)
    return frozenset(pool[i] for i in picked)


# ---------------------------------------------------------------------------
# stochastic attribute assignment


def sample_rates(dist: RateDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n (pd, pf) pairs as an (n, 2) array, honoring the rate invariants."""
    if dist.mode is RateDistribution.Mode.INDEPENDENT:
        return rng.uniform(0.0, 0.2, size=(n, 2))
    s2 = dist.sigma**2
    cov = np.array([[s2, dist.corr * s2], [dist.corr * s2, s2]])
    chol = np.linalg.cholesky(cov)
    samples = np.asarray(dist.mean) + rng.standard_normal((n, 2)) @ chol.T
    samples = np.clip(samples, 0.0, 0.5)
    total = samples.sum(axis=1)
    over = total > 1.0
    if over.any():
        samples[over] /= total[over, None]
    return samples


def assign_rates(g: ADGraph, dist: RateDistribution, seed: int) -> ADGraph:
    """Return a copy of g with pd/pf sampled per edge from ``dist``."""
    rng = np.random.default_rng(seed)
    samples = sample_rates(dist, len(g.edges), rng)
    edges = tuple(
        replace(e, attr=replace(e.attr, pd=float(pd), pf=float(pf)))
        for e, (pd, pf) in zip(g.edges, samples)
    )
    return replace(g, edges=edges)


def blockable_probabilities(g: ADGraph) -> np.ndarray:
    """Per-edge probability of being blockable: minHops(edge, DA) / maxHops.

    The hop count of an edge is the distance from its destination to the DA,
    so edges entering the DA get probability 0 and the farthest edges get 1.
    Edges whose destination cannot reach the DA are treated as maximally far
    (probability 1); they are pruned later anyway.
    """
    dist = g.hops_to_da()
    hops = np.array([dist.get(e.dst, -1) for e in g.edges], dtype=float)
    finite = hops >= 0
    max_hops = hops[finite].max(initial=0.0)
    if max_hops == 0.0:
        probs = np.zeros(len(g.edges))
    else:
        probs = hops / max_hops
    probs[~finite] = 1.0
    return probs


def assign_blockable(g: ADGraph, seed: int) -> ADGraph:
    """Return a copy of g with each edge independently flagged blockable."""
    rng = np.random.default_rng(seed)
    probs = blockable_probabilities(g)
    draws = rng.random(len(g.edges)) < probs
    edges = tuple(
        replace(e, attr=replace(e.attr, blockable=bool(b)))
        for e, b in zip(g.edges, draws)
    )
    return replace(g, edges=edges)
