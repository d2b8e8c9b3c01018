"""Shared test helpers: hand-buildable graphs, random graph factories, and
independent oracles (exhaustive chain-outcome enumeration, finite-difference
gradients) kept deliberately separate from the library code paths they check."""
from __future__ import annotations

from itertools import product

import numpy as np

from adharden.condense import CondensedGraph, condense
from adharden.graphs import ADGraph, Edge, EdgeAttr, EdgeKind, NodeKind
from adharden.nn import MlpParams


def make_graph(nodes, edges, entries):
    """Compact graph builder.

    nodes: dict id -> NodeKind (or 'da'/'user'/... shorthand strings)
    edges: iterable of (src, dst) or (src, dst, pd, pf) or
           (src, dst, pd, pf, blockable)
    """
    kind_alias = {
        "da": NodeKind.DOMAIN_ADMIN,
        "user": NodeKind.USER,
        "computer": NodeKind.COMPUTER,
        "group": NodeKind.GROUP,
    }
    node_list = tuple(
        (nid, kind_alias[k] if isinstance(k, str) else k) for nid, k in nodes.items()
    )
    edge_list = []
    for spec in edges:
        src, dst = spec[0], spec[1]
        pd = spec[2] if len(spec) > 2 else None
        pf = spec[3] if len(spec) > 3 else None
        blockable = spec[4] if len(spec) > 4 else (False if pd is not None else None)
        edge_list.append(
            Edge(src, dst, EdgeAttr(kind=EdgeKind.ADMIN_TO, pd=pd, pf=pf, blockable=blockable))
        )
    return ADGraph(node_list, tuple(edge_list), frozenset(entries))


def chain_graph(rates, entries=("E",)):
    """E -> n1 -> n2 -> ... -> DA with the given (pd, pf, blockable) per edge."""
    names = ["E"] + [f"n{i}" for i in range(1, len(rates))] + ["DA"]
    nodes = {n: "user" for n in names[:-1]}
    nodes["DA"] = "da"
    edges = [
        (names[i], names[i + 1], pd, pf, blk)
        for i, (pd, pf, blk) in enumerate(rates)
    ]
    return make_graph(nodes, edges, entries)


def random_attack_graph(rng: np.random.Generator, n_mid_max: int = 5) -> ADGraph:
    """Random layered DAG with rates and blockable flags, guaranteed to
    condense: entries feed a few mid layers which feed the DA."""
    n_entries = int(rng.integers(1, 4))
    n_mid = int(rng.integers(0, n_mid_max + 1))
    entries = [f"E{i}" for i in range(n_entries)]
    mids = [f"m{i}" for i in range(n_mid)]
    order = entries + mids + ["DA"]
    nodes = {n: "user" for n in entries + mids}
    nodes["DA"] = "da"
    edges = []

    def rand_rates():
        pd = float(rng.uniform(0.0, 0.4))
        pf = float(rng.uniform(0.0, min(0.6, 1.0 - pd)))
        return pd, pf, bool(rng.random() < 0.6)

    for i, src in enumerate(entries + mids):
        targets = order[max(i + 1, n_entries):]
        n_out = int(rng.integers(1, min(3, len(targets)) + 1))
        picked = rng.choice(len(targets), size=n_out, replace=False)
        for t in picked:
            edges.append((src, targets[t], *rand_rates()))
    return make_graph(nodes, edges, entries)


def random_condensed(
    rng: np.random.Generator,
    max_nsps: int,
    min_nsps: int = 1,
    min_bw: int = 0,
    tries: int = 200,
) -> CondensedGraph:
    """Rejection-sample a random condensed graph within the size bounds."""
    for _ in range(tries):
        try:
            cg = condense(random_attack_graph(rng))
        except Exception:
            continue
        if min_nsps <= cg.n_nsps <= max_nsps and cg.n_bw >= min_bw:
            return cg
    raise RuntimeError("could not sample a condensed graph within bounds")


# ---------------------------------------------------------------------------
# independent oracles


def enumerate_chain_outcomes(rates):
    """Exhaustive enumeration oracle for chain aggregation.

    Assigns every edge an outcome in {success, fail, detect}, walks the chain
    stopping at the first non-success, and accumulates the probability of
    each terminal result.  Returns (ps, pf, pd).
    """
    n = len(rates)
    totals = {"s": 0.0, "f": 0.0, "d": 0.0}
    for events in product("sfd", repeat=n):
        prob = 1.0
        for (pd, pf), ev in zip(rates, events):
            prob *= {"s": 1.0 - pd - pf, "f": pf, "d": pd}[ev]
        result = "s"
        for ev in events:
            if ev != "s":
                result = ev
                break
        totals[result] += prob
    return totals["s"], totals["f"], totals["d"]


def finite_diff_grads(loss_fn, params: MlpParams, h: float = 1e-5):
    """Central-difference gradients of loss_fn(params) w.r.t. every entry."""
    grads_w, grads_b = [], []
    for arrs, out in ((params.weights, grads_w), (params.biases, grads_b)):
        for arr in arrs:
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss_fn(params)
                arr[idx] = orig - h
                down = loss_fn(params)
                arr[idx] = orig
                g[idx] = (up - down) / (2.0 * h)
            out.append(g)
    return grads_w, grads_b


def max_rel_error(analytic, numeric) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
