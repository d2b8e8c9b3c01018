"""Condense a raw attack graph into its chain-contracted form.

The attacker only makes decisions at entry points and at nodes with several
outgoing edges.  Every maximal single-successor chain from such a node down
to the next decision point (or the domain admin) collapses into one macro
edge with aggregated success/failure/detection probabilities.  Blocking any
chain is equivalent to blocking its last blockable edge, so each blockable
chain contributes one "block-worthy" edge; chains that merge into a shared
suffix can share that edge, in which case one block disables all of them.

Condensed file format (one record per line, ``#`` comments)::

    da <id>
    entry <id>
    split <id>
    bw <id> <src> <dst> <kind> nsps=<i>,<j>,...
    nsp <id> <src> <dst> ps=<f> pf=<f> pd=<f> bw=<id|-> edges=<src>:<dst>:<kind>:<0|1>,...

The per-edge rate attributes are not persisted (only the aggregates matter
downstream); the trailing bit on each edge token is its blockable flag.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from types import SimpleNamespace
from typing import Sequence

import numpy as np

from .graphs import ADGraph, Edge, EdgeAttr, EdgeKind, GraphError, GraphFormatError, NodeKind


class CondenseError(GraphError):
    """Graph cannot be condensed (disconnected entries, bad structure...)."""


@dataclass(frozen=True)
class Nsp:
    """One non-splitting chain, treated as a single macro edge.

    ``edge_ids`` are indices into the pruned graph's edge list, parallel to
    ``edge_seq``; they give each physical edge a stable identity even when
    two edges compare equal.
    """

    id: int
    src: str
    dst: str
    edge_seq: tuple[Edge, ...]
    edge_ids: tuple[int, ...]
    ps: float
    pf: float
    pd: float
    bw_id: int | None = None


@dataclass(frozen=True)
class BwEdge:
    """A block-worthy edge and the chains it disables when blocked."""

    id: int
    edge: Edge
    member_nsps: tuple[int, ...]


@dataclass(frozen=True)
class CondensedGraph:
    entries: frozenset[str]
    split: frozenset[str]
    da: str
    nsps: tuple[Nsp, ...]
    bw_edges: tuple[BwEdge, ...]

    @property
    def n_nsps(self) -> int:
        return len(self.nsps)

    @property
    def n_bw(self) -> int:
        return len(self.bw_edges)

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.entries | self.split | {self.da}))

    def validate(self) -> None:
        n_nodes = len(self.node_ids)
        if n_nodes != len(self.entries) + len(self.split) + 1:
            raise CondenseError(
                f"node sets overlap: {len(self.entries)} entries + {len(self.split)} splits"
                f" + DA != {n_nodes} distinct nodes"
            )
        if self.da in self.entries or self.da in self.split:
            raise CondenseError("DA listed as entry or split")
        members: dict[int, list[int]] = {b.id: [] for b in self.bw_edges}
        for nsp in self.nsps:
            if nsp.src not in self.entries | self.split:
                raise CondenseError(f"NSP {nsp.id} starts at non-decision node {nsp.src}")
            if nsp.dst not in self.split | {self.da}:
                raise CondenseError(f"NSP {nsp.id} ends at {nsp.dst}, not a split node or DA")
            if not nsp.edge_seq:
                raise CondenseError(f"NSP {nsp.id} has empty edge sequence")
            if abs(nsp.ps + nsp.pf + nsp.pd - 1.0) > 1e-12:
                raise CondenseError(f"NSP {nsp.id} probabilities sum to {nsp.ps + nsp.pf + nsp.pd}")
            flags = [e.attr.blockable for e in nsp.edge_seq]
            if any(f is None for f in flags):
                raise CondenseError(f"NSP {nsp.id} has edges without blockable flags")
            has_blockable = any(flags)
            if has_blockable != (nsp.bw_id is not None):
                raise CondenseError(f"NSP {nsp.id}: blockable={has_blockable} but bw_id={nsp.bw_id}")
            if nsp.bw_id is not None:
                members[nsp.bw_id].append(nsp.id)
                last_blockable = max(i for i, f in enumerate(flags) if f)
                if nsp.edge_seq[last_blockable] != self.bw_edges[nsp.bw_id].edge:
                    raise CondenseError(f"NSP {nsp.id}: bw edge is not its last blockable edge")
        for b in self.bw_edges:
            if tuple(sorted(members[b.id])) != tuple(sorted(b.member_nsps)):
                raise CondenseError(f"bw edge {b.id}: member list out of sync")
            if not b.member_nsps:
                raise CondenseError(f"bw edge {b.id} has no member NSPs")

    @cached_property
    def runtime(self) -> SimpleNamespace:
        """Numpy views used by the environment and the exact solver."""
        node_index = {nid: i for i, nid in enumerate(self.node_ids)}
        entry_mask = np.zeros(len(node_index), dtype=bool)
        for nid in self.entries:
            entry_mask[node_index[nid]] = True
        nsp_src = np.array([node_index[n.src] for n in self.nsps], dtype=np.intp)
        nsp_dst = np.array([node_index[n.dst] for n in self.nsps], dtype=np.intp)
        probs = np.array([[n.ps, n.pf, n.pd] for n in self.nsps], dtype=float)
        bw_of = np.array([-1 if n.bw_id is None else n.bw_id for n in self.nsps], dtype=np.intp)
        members = tuple(np.array(b.member_nsps, dtype=np.intp) for b in self.bw_edges)
        return SimpleNamespace(
            node_index=node_index,
            n_nodes=len(node_index),
            entry_node_mask=entry_mask,
            nsp_src=nsp_src,
            nsp_dst=nsp_dst,
            nsp_dst_is_da=nsp_dst == node_index[self.da],
            probs=probs,
            bw_of_nsp=bw_of,
            bw_members=members,
        )


# ---------------------------------------------------------------------------
# pruning


def prune(g: ADGraph) -> ADGraph:
    """Strip everything irrelevant to an attacker heading for the DA.

    Merges all domain-admin nodes into one (parallel edges created by the
    merge keep the highest-success representative), drops edges out of the DA
    and into entries, then iterates to a fixed point: remove non-entry nodes
    with no incoming edges and nodes that cannot reach the DA.
    """
    das = sorted(g.da_nodes)
    if not das:
        raise CondenseError("graph has no domain-admin node")
    if not g.entries:
        raise CondenseError("graph has no entry nodes")
    da = das[0]

    nodes = {nid: kind for nid, kind in g.nodes if kind is not NodeKind.DOMAIN_ADMIN}
    nodes[da] = NodeKind.DOMAIN_ADMIN
    da_set = set(das)
    entries = set(g.entries)

    def sort_rank(e: Edge) -> tuple:
        ps = e.attr.ps if e.attr.pd is not None else -1.0
        return (-ps, e.src, e.attr.kind.value, -int(bool(e.attr.blockable)))

    edges: list[Edge] = []
    seen_into_da: set[str] = set()
    # Best-ps-first scan makes the keep-first rule below keep the max-ps edge
    # among parallels into the merged DA.
    for e in sorted(g.edges, key=sort_rank):
        if e.src in da_set:
            continue
        dst = da if e.dst in da_set else e.dst
        if dst in entries:
            continue
        if dst == da:
            if e.src in seen_into_da:
                continue
            seen_into_da.add(e.src)
        edges.append(replace(e, dst=dst))

    # Fixed point: drop unreachable-from-anything and cannot-reach-DA nodes.
    while True:
        indeg: dict[str, int] = {nid: 0 for nid in nodes}
        for e in edges:
            indeg[e.dst] += 1
        drop = {
            nid for nid, deg in indeg.items()
            if deg == 0 and nid not in entries and nid != da
        }

        reach: set[str] = {da}
        in_adj: dict[str, list[str]] = {nid: [] for nid in nodes}
        for e in edges:
            in_adj[e.dst].append(e.src)
        stack = [da]
        while stack:
            v = stack.pop()
            for u in in_adj[v]:
                if u not in reach:
                    reach.add(u)
                    stack.append(u)
        drop |= set(nodes) - reach

        if not drop:
            break
        nodes = {nid: kind for nid, kind in nodes.items() if nid not in drop}
        entries -= drop
        edges = [e for e in edges if e.src not in drop and e.dst not in drop]

    if not entries:
        raise CondenseError("all entry nodes are disconnected from the DA")

    node_list = tuple(sorted(nodes.items()))
    edge_list = tuple(sorted(edges, key=lambda e: (e.src, e.dst, e.attr.kind.value)))
    return ADGraph(node_list, edge_list, frozenset(entries))


def find_split_entry(g: ADGraph) -> tuple[frozenset[str], frozenset[str]]:
    """Decision points of a pruned graph.

    Split nodes have out-degree >= 2; entries are kept out of the split set so
    the condensed node sets partition (an entry with several outgoing edges
    still starts one chain per edge, but is counted once).
    """
    da = _single_da(g)
    split = frozenset(
        nid for nid, _ in g.nodes
        if len(g.out_edges[nid]) >= 2 and nid not in g.entries and nid != da
    )
    return split, frozenset(g.entries)


def _single_da(g: ADGraph) -> str:
    das = g.da_nodes
    if len(das) != 1:
        raise CondenseError(f"expected exactly one domain-admin node, found {len(das)}")
    return next(iter(das))


# ---------------------------------------------------------------------------
# chains and block-worthy edges


def compute_nsps(g: ADGraph, split: frozenset[str], entry: frozenset[str]) -> list[Nsp]:
    """Enumerate all non-splitting chains of a pruned graph.

    One chain starts per outgoing edge of every entry/split node and follows
    sole successors until it hits the DA, a split node, or an entry.  A cycle
    of single-successor nodes is a structural error (it cannot reach the DA
    and should have been pruned).
    """
    da = _single_da(g)
    edge_index = {id(e): i for i, e in enumerate(g.edges)}
    stop = split | entry | {da}
    nsps: list[Nsp] = []
    for src in sorted(entry | split):
        for first in sorted(g.out_edges[src], key=lambda e: (e.dst, e.attr.kind.value)):
            seq = [first]
            visited = {src, first.dst}
            cur = first.dst
            while cur not in stop:
                out = g.out_edges[cur]
                if len(out) != 1:
                    raise CondenseError(
                        f"node {cur!r} has {len(out)} successors but is not a splitting node"
                    )
                nxt = out[0]
                if nxt.dst in visited and nxt.dst not in stop:
                    cycle = " -> ".join(e.src for e in seq) + f" -> {cur} -> {nxt.dst}"
                    raise CondenseError(f"non-splitting cycle: {cycle}")
                seq.append(nxt)
                visited.add(nxt.dst)
                cur = nxt.dst
            ps, pf, pd = aggregate_probs(seq)
            nsps.append(
                Nsp(
                    id=len(nsps),
                    src=src,
                    dst=cur,
                    edge_seq=tuple(seq),
                    edge_ids=tuple(edge_index[id(e)] for e in seq),
                    ps=ps,
                    pf=pf,
                    pd=pd,
                )
            )
    return nsps


def aggregate_probs(edge_seq: Sequence[Edge]) -> tuple[float, float, float]:
    """Collapse a chain of edges into one (ps, pf, pd) triple.

    Traversal is sequential: the chain succeeds iff every edge succeeds, and
    detection on any edge (having succeeded so far) ends the attack.  Hence

        ps = prod_i ps_i
        pd = sum_i (prod_{j<i} ps_j) * pd_i
        pf = 1 - ps - pd
    """
    if not edge_seq:
        raise CondenseError("empty edge sequence")
    ps = 1.0
    pd = 0.0
    for e in edge_seq:
        pd += ps * e.attr.pd
        ps *= e.attr.ps
    return ps, 1.0 - ps - pd, pd


def compute_bw(nsps: Sequence[Nsp]) -> tuple[list[BwEdge], list[Nsp]]:
    """Assign each blockable chain its block-worthy edge (the last blockable
    edge on the chain) and deduplicate edges shared by several chains.

    Returns the bw edges plus the chains with ``bw_id`` filled in.
    """
    by_edge: dict[int, list[int]] = {}
    edge_obj: dict[int, Edge] = {}
    choice: dict[int, int] = {}
    for nsp in nsps:
        blockable = [i for i, e in enumerate(nsp.edge_seq) if e.attr.blockable]
        if not blockable:
            continue
        pos = blockable[-1]
        eid = nsp.edge_ids[pos]
        by_edge.setdefault(eid, []).append(nsp.id)
        edge_obj[eid] = nsp.edge_seq[pos]
        choice[nsp.id] = eid
    bw_edges = [
        BwEdge(id=i, edge=edge_obj[eid], member_nsps=tuple(sorted(by_edge[eid])))
        for i, eid in enumerate(sorted(by_edge))
    ]
    bw_index = {eid: i for i, eid in enumerate(sorted(by_edge))}
    updated = [
        replace(nsp, bw_id=bw_index[choice[nsp.id]]) if nsp.id in choice else nsp
        for nsp in nsps
    ]
    return bw_edges, updated


def condense(g: ADGraph) -> CondensedGraph:
    """Full preprocessing pipeline: prune, find decision points, contract
    chains, pick block-worthy edges.  Validates all structural invariants."""
    pruned = prune(g)
    split, entry = find_split_entry(pruned)
    nsps = compute_nsps(pruned, split, entry)
    bw_edges, nsps = compute_bw(nsps)
    cg = CondensedGraph(
        entries=entry,
        split=split,
        da=_single_da(pruned),
        nsps=tuple(nsps),
        bw_edges=tuple(bw_edges),
    )
    cg.validate()
    return cg


# ---------------------------------------------------------------------------
# file I/O


def _edge_token(e: Edge) -> str:
    return f"{e.src}:{e.dst}:{e.attr.kind.value}:{int(bool(e.attr.blockable))}"


def _parse_edge_token(tok: str, loc: str) -> Edge:
    parts = tok.split(":")
    if len(parts) != 4:
        raise GraphFormatError(f"{loc}: bad edge token {tok!r}")
    src, dst, kind, bit = parts
    return Edge(src, dst, EdgeAttr(kind=EdgeKind(kind), blockable=bool(int(bit))))


def dump_condensed(cg: CondensedGraph) -> str:
    from .graphs import _format_float as ff

    lines = ["# adharden condensed graph", f"da {cg.da}"]
    lines += [f"entry {nid}" for nid in sorted(cg.entries)]
    lines += [f"split {nid}" for nid in sorted(cg.split)]
    for b in cg.bw_edges:
        members = ",".join(str(i) for i in b.member_nsps)
        lines.append(f"bw {b.id} {b.edge.src} {b.edge.dst} {b.edge.attr.kind.value} nsps={members}")
    for n in cg.nsps:
        bw = "-" if n.bw_id is None else str(n.bw_id)
        edges = ",".join(_edge_token(e) for e in n.edge_seq)
        lines.append(
            f"nsp {n.id} {n.src} {n.dst} ps={ff(n.ps)} pf={ff(n.pf)} pd={ff(n.pd)}"
            f" bw={bw} edges={edges}"
        )
    return "\n".join(lines) + "\n"


def save_condensed(cg: CondensedGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_condensed(cg))


def load_condensed(path: str) -> CondensedGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_condensed(fh.read(), where=path)


def parse_condensed(text: str, where: str = "<string>") -> CondensedGraph:
    da: str | None = None
    entries: list[str] = []
    split: list[str] = []
    bw_records: list[tuple[int, Edge, tuple[int, ...]]] = []
    nsp_records: list[Nsp] = []
    edge_ids: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        loc = f"{where}:{lineno}"
        tokens = line.split()
        try:
            if tokens[0] == "da":
                da = tokens[1]
            elif tokens[0] == "entry":
                entries.append(tokens[1])
            elif tokens[0] == "split":
                split.append(tokens[1])
            elif tokens[0] == "bw":
                bid = int(tokens[1])
                src, dst, kind = tokens[2:5]
                fields = dict(t.split("=", 1) for t in tokens[5:])
                members = tuple(int(x) for x in fields["nsps"].split(","))
                edge = Edge(src, dst, EdgeAttr(kind=EdgeKind(kind), blockable=True))
                bw_records.append((bid, edge, members))
            elif tokens[0] == "nsp":
                nid = int(tokens[1])
                src, dst = tokens[2:4]
                fields = dict(t.split("=", 1) for t in tokens[4:])
                seq = tuple(_parse_edge_token(t, loc) for t in fields["edges"].split(","))
                ids = []
                for tok in fields["edges"].split(","):
                    ids.append(edge_ids.setdefault(tok, len(edge_ids)))
                nsp_records.append(
                    Nsp(
                        id=nid,
                        src=src,
                        dst=dst,
                        edge_seq=seq,
                        edge_ids=tuple(ids),
                        ps=float(fields["ps"]),
                        pf=float(fields["pf"]),
                        pd=float(fields["pd"]),
                        bw_id=None if fields["bw"] == "-" else int(fields["bw"]),
                    )
                )
            else:
                raise GraphFormatError(f"{loc}: unknown record {tokens[0]!r}")
        except GraphFormatError:
            raise
        except (ValueError, KeyError, IndexError) as exc:
            raise GraphFormatError(f"{loc}: cannot parse {line!r}: {exc}") from exc
    if da is None:
        raise GraphFormatError(f"{where}: missing da record")
    bw_records.sort(key=lambda r: r[0])
    if [r[0] for r in bw_records] != list(range(len(bw_records))):
        raise GraphFormatError(f"{where}: bw ids are not 0..n-1")
    nsp_records.sort(key=lambda n: n.id)
    if [n.id for n in nsp_records] != list(range(len(nsp_records))):
        raise GraphFormatError(f"{where}: nsp ids are not 0..n-1")
    cg = CondensedGraph(
        entries=frozenset(entries),
        split=frozenset(split),
        da=da,
        nsps=tuple(nsp_records),
        bw_edges=tuple(BwEdge(id=b, edge=e, member_nsps=m) for b, e, m in bw_records),
    )
    cg.validate()
    return cg
