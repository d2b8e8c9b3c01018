import numpy as np
import pytest

from adharden.graphs import (
    ADGraph,
    GraphError,
    GraphFormatError,
    NodeKind,
    RateDistribution,
    assign_blockable,
    assign_rates,
    blockable_probabilities,
    dump_graph,
    generate_synthetic,
    load_graph,
    parse_graph,
    save_graph,
    select_entries,
)

from util import chain_graph, make_graph

THREE_NODE = """
# tiny test graph
node A User
node B Computer
node DA DomainAdmin
entry A
edge A B AdminTo
edge B DA AdminTo
"""


def test_parse_three_node_file():
    g = parse_graph(THREE_NODE)
    assert len(g.nodes) == 3
    assert len(g.edges) == 2
    assert g.entries == {"A"}
    assert g.kind_of["DA"] is NodeKind.DOMAIN_ADMIN


def test_parse_unknown_endpoint_reports_location():
    with pytest.raises(GraphFormatError, match="dangling endpoint 'X'"):
        parse_graph("node A User\nedge A X AdminTo\n")


def test_parse_duplicate_node_id():
    with pytest.raises(GraphFormatError, match="duplicate node id"):
        parse_graph("node A User\nnode A Computer\n")


def test_parse_bad_record():
    with pytest.raises(GraphFormatError, match=":1"):
        parse_graph("frobnicate A B\n")


def test_roundtrip_is_byte_identical(tmp_path):
    g = generate_synthetic(10, seed=3, n_faraway=10, n_entries=4)
    g = assign_rates(g, RateDistribution.from_name("pos"), seed=1)
    g = assign_blockable(g, seed=2)
    p1 = tmp_path / "a.txt"
    p2 = tmp_path / "b.txt"
    save_graph(g, str(p1))
    save_graph(load_graph(str(p1)), str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_roundtrip_preserves_unset_attributes(tmp_path):
    text = dump_graph(parse_graph(THREE_NODE))
    g = parse_graph(text)
    assert g.edges[0].attr.pd is None
    assert g.edges[0].attr.blockable is None
    assert dump_graph(g) == text


def test_self_loop_rejected():
    with pytest.raises(GraphError, match="self-loop"):
        make_graph({"A": "user", "DA": "da"}, [("A", "A")], ["A"])


def test_entry_must_not_be_da():
    with pytest.raises(GraphError, match="domain-admin"):
        make_graph({"A": "user", "DA": "da"}, [("A", "DA")], ["DA"])


# ---------------------------------------------------------------------------
# synthetic generation


def test_generate_determinism():
    assert generate_synthetic(30, seed=7) == generate_synthetic(30, seed=7)
    assert generate_synthetic(30, seed=7) != generate_synthetic(30, seed=8)


@pytest.mark.parametrize("n", [100, 500])
def test_generate_calibration_bands(n):
    g = generate_synthetic(n, seed=0)
    assert 0.7 * 3 * n <= len(g.nodes) <= 1.3 * 3 * n
    assert 0.7 * 7 * n <= len(g.edges) <= 1.3 * 7 * n


def test_generate_r500_node_band():
    g = generate_synthetic(500, seed=0)
    assert 1300 <= len(g.nodes) <= 1700


def test_generate_minimal_has_path_to_da():
    g = generate_synthetic(2, seed=0)
    dist = g.hops_to_da()
    assert g.entries
    assert any(e in dist for e in g.entries)


def test_generate_edge_kinds_present():
    g = generate_synthetic(50, seed=1)
    kinds = {e.attr.kind.value for e in g.edges}
    assert kinds == {"HasSession", "MemberOf", "AdminTo"}
    assert len(g.da_nodes) == 1


def test_generate_rejects_tiny():
    with pytest.raises(GraphError):
        generate_synthetic(1, seed=0)


# ---------------------------------------------------------------------------
# rate assignment


def _flat_graph(n_edges):
    """Star graph with n_edges parallel sources feeding the DA."""
    nodes = {f"s{i}": "user" for i in range(n_edges)}
    nodes["DA"] = "da"
    edges = [(f"s{i}", "DA") for i in range(n_edges)]
    return make_graph(nodes, edges, [f"s{i}" for i in range(n_edges)])


def _rates_of(g):
    return np.array([[e.attr.pd, e.attr.pf] for e in g.edges])


def test_assign_rates_independent_statistics():
    g = assign_rates(_flat_graph(100_000), RateDistribution.from_name("indep"), seed=0)
    rates = _rates_of(g)
    assert rates.min() >= 0.0 and rates.max() <= 0.2
    assert 0.095 <= rates[:, 0].mean() <= 0.105
    assert 0.095 <= rates[:, 1].mean() <= 0.105


@pytest.mark.parametrize("mode,lo,hi", [("pos", 0.40, 0.58), ("neg", -0.58, -0.40)])
def test_assign_rates_correlated_statistics(mode, lo, hi):
    g = assign_rates(_flat_graph(100_000), RateDistribution.from_name(mode), seed=0)
    rates = _rates_of(g)
    corr = np.corrcoef(rates[:, 0], rates[:, 1])[0, 1]
    assert lo <= corr <= hi
    assert 0.095 <= rates[:, 0].mean() <= 0.105


@pytest.mark.parametrize("mode", ["indep", "pos", "neg"])
def test_assign_rates_invariants_exhaustive(mode):
    g = assign_rates(_flat_graph(20_000), RateDistribution.from_name(mode), seed=4)
    rates = _rates_of(g)
    assert (rates >= 0.0).all()
    assert (rates.sum(axis=1) <= 1.0 + 1e-12).all()


def test_assign_rates_deterministic():
    g = _flat_graph(50)
    d = RateDistribution.from_name("neg")
    assert assign_rates(g, d, seed=9) == assign_rates(g, d, seed=9)


# ---------------------------------------------------------------------------
# blockable assignment


def test_blockable_probabilities_chain():
    # E -> n1 -> n2 -> DA: edge hop counts {2, 1, 0} => probabilities {1, 0.5, 0}
    g = chain_graph([(0.1, 0.1, False)] * 3)
    probs = {(e.src, e.dst): p for e, p in zip(g.edges, blockable_probabilities(g))}
    assert probs[("E", "n1")] == 1.0
    assert probs[("n1", "n2")] == 0.5
    assert probs[("n2", "DA")] == 0.0


def test_blockable_extremes_are_deterministic():
    g = chain_graph([(0.1, 0.1, False)] * 3)
    for seed in range(50):
        got = assign_blockable(g, seed)
        flags = {(e.src, e.dst): e.attr.blockable for e in got.edges}
        assert flags[("E", "n1")] is True  # probability 1
        assert flags[("n2", "DA")] is False  # probability 0


def test_blockable_unreachable_edge_gets_probability_one():
    g = make_graph(
        {"E": "user", "x": "user", "y": "user", "DA": "da"},
        [("E", "DA"), ("x", "y")],
        ["E"],
    )
    probs = {(e.src, e.dst): p for e, p in zip(g.edges, blockable_probabilities(g))}
    assert probs[("x", "y")] == 1.0


def test_blockable_requires_da():
    g = ADGraph((("A", NodeKind.USER), ("B", NodeKind.USER)), (), frozenset())
    with pytest.raises(GraphError, match="no domain-admin"):
        assign_blockable(g, seed=0)


# ---------------------------------------------------------------------------
# entry selection


def test_select_entries_chain_of_50():
    rates = [(0.0, 0.0, False)] * 50
    g = chain_graph(rates)
    dist = g.hops_to_da()
    farthest40 = sorted((n for n in dist if n != "DA"), key=lambda n: (-dist[n], n))[:40]
    picked = select_entries(g, seed=0)
    assert len(picked) == 20
    assert picked <= set(farthest40)


def test_select_entries_exactly_40_candidates():
    nodes = {f"s{i:02d}": "user" for i in range(40)}
    nodes["DA"] = "da"
    edges = [(f"s{i:02d}", "DA", 0.1, 0.1, False) for i in range(40)]
    g = make_graph(nodes, edges, ["s00"])
    picked = select_entries(g, seed=1)
    assert len(picked) == 20
    assert picked <= {f"s{i:02d}" for i in range(40)}


def test_select_entries_deterministic():
    g = generate_synthetic(40, seed=2)
    assert select_entries(g, seed=5) == select_entries(g, seed=5)


def test_select_entries_warns_when_few_candidates():
    g = chain_graph([(0.0, 0.0, False)] * 3)
    with pytest.warns(UserWarning, match="entry candidates"):
        picked = select_entries(g, seed=0)
    assert picked == {"E", "n1", "n2"}


def test_select_entries_errors_when_da_unreachable():
    g = make_graph({"A": "user", "B": "user", "DA": "da"}, [("A", "B")], ["A"])
    with pytest.raises(GraphError, match="no node can reach"):
        select_entries(g, seed=0)
