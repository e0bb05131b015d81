"""Attack-tree DSL, evaluation, cutset oracle and the privacy observer."""

import itertools
import math

import pytest
from hypothesis import given, settings, strategies as st

from covault import analysis as an
from covault.analysis import AttackerProfile, Attributes, Gate, Leaf

SMALL = """
tree t
title "small"
OR "root"
  leaf "a" cost=5 time=2 prob=0.5
  AND "both"
    leaf "b" cost=1 time=3 prob=0.5
    leaf "c" cost=2 time=4 prob=0.5
"""


def tree(text=SMALL, tid="t", params=None):
    return an.instantiate(an.parse_trees(text), tid, params)


def gate(kind, *attrs):
    kids = tuple(Leaf(f"l{i}", Attributes(*a), id=f"r.{i}") for i, a in enumerate(attrs))
    return Gate(kind, kids)


# DSL

def test_parse_and_serialize_round_trip():
    lib = an.parse_trees(SMALL)
    again = an.parse_trees(an.serialize_trees(lib))
    assert again == lib


def test_library_round_trip():
    lib = an.load_revault_library()
    assert an.parse_trees(an.serialize_trees(lib)) == lib


@pytest.mark.parametrize("text", [
    "leaf \"x\"",
    "tree t\nXOR\n  leaf \"x\"",
    "tree t\nOR\n   leaf \"x\"",
    "tree t\nleaf \"x\" cost=1",
    "tree t\nleaf \"x\"\nleaf \"y\"",
    "tree t\nOR",
])
def test_syntax_errors(text):
    with pytest.raises(an.TreeSyntaxError):
        an.parse_trees(text)


def test_bad_references():
    lib = an.parse_trees("tree a\nOR\n  ref b\n  leaf \"x\"\ntree b\nAND\n  ref a\n  leaf \"y\"")
    with pytest.raises(an.BadReference):
        an.reachable(lib, "a")
    lib = an.parse_trees("tree a\nOR\n  ref zz\n  leaf \"x\"")
    with pytest.raises(an.BadReference):
        an.instantiate(lib, "a")


def test_library_shape_and_parameters():
    lib = an.load_revault_library()
    assert sorted(lib) == sorted(an.LIBRARY_IDS) and len(lib) == 22
    with pytest.raises(an.BadParameters):
        an.instantiate(lib, "i", {"N": 3, "A": 4, "B": 1})
    with pytest.raises(an.BadParameters):
        an.instantiate(lib, "i", {"N": 3})
    an.instantiate(lib, "i", {"N": 3, "A": 2, "B": 1})


def test_constraints():
    assert an.check_constraint("A + B = N", {"A": 2, "B": 1, "N": 3})
    assert not an.check_constraint("A + B + C = M - K + 1", {"A": 1, "B": 1, "C": 1, "M": 3, "K": 2})
    assert an.check_constraint("A <= N", {"A": 1, "N": 3})


# multiplicity

def test_expand_multiplicity():
    text = "tree t\nparams X\nOR\n  leaf \"a\" times:X\n  leaf \"b\" times:2:SAND"
    node = tree(text, params={"X": 3})
    a, b = node.children
    assert a.kind == "AND" and len(a.children) == 3
    assert b.kind == "SAND" and len(b.children) == 2
    ids = [l.id for l in an.leaves(node)]
    assert len(ids) == len(set(ids)) == 5
    an.check_tree(node)


def test_times_zero_drops_node():
    text = "tree t\nparams X\nAND\n  leaf \"a\" times:X\n  leaf \"b\""
    node = tree(text, params={"X": 0})
    assert [l.label for l in an.leaves(node)] == ["b"]


# evaluation

def test_or_min_cost():
    g = gate("OR", (3, 1, 0.1), (7, 1, 0.9))
    r = an.eval_tree(g, "min_cost")
    assert r.value == 3 and r.scenario == {"r.0"}


def test_and_prob():
    g = gate("AND", (1, 1, 0.5), (1, 1, 0.5))
    assert an.eval_tree(g, "max_prob_under_budget").value == pytest.approx(0.25)
    assert an.eval_tree(g, "max_prob_under_budget", budget=1).value == 0.0


def test_sand_time_sums():
    assert an.eval_tree(gate("SAND", (1, 2, 1), (1, 3, 1)), "min_time").value == 5
    assert an.eval_tree(gate("AND", (1, 2, 1), (1, 3, 1)), "min_time").value == 3


def test_small_tree_queries():
    node = tree()
    assert an.eval_tree(node, "min_cost").value == 3
    assert an.eval_tree(node, "min_time").value == 2
    assert an.eval_tree(node, "max_prob_under_budget", budget=4).value == pytest.approx(0.25)
    assert an.eval_tree(node, "max_prob_under_budget").value == pytest.approx(0.5)


def test_profile_prunes_leaves():
    node = tree()
    r = an.eval_tree(node, "min_cost", profile=AttackerProfile(budget=4))
    assert r.value == 3
    assert an.eval_tree(node, "min_cost", profile=AttackerProfile(budget=0.5)).value == math.inf


def test_unknown_query():
    with pytest.raises(an.AnalysisError):
        an.eval_tree(tree(), "max_cost")


# oracle agreement on random trees

def _trees(depth):
    leaf = st.tuples(st.integers(1, 20), st.integers(1, 10), st.integers(1, 100)).map(
        lambda a: Leaf("x", Attributes(a[0], a[1], a[2] / 100)))
    if depth == 0:
        return leaf
    sub = _trees(depth - 1)
    return st.one_of(leaf, st.builds(lambda k, cs: Gate(k, tuple(cs)), st.sampled_from(an.GATES),
                                     st.lists(sub, min_size=1, max_size=3)))


def _ids(node, pid="r"):
    if isinstance(node, Leaf):
        return Leaf(node.label, node.attrs, id=pid)
    return Gate(node.kind, tuple(_ids(c, f"{pid}.{i}") for i, c in enumerate(node.children)))


@settings(max_examples=80, deadline=None)
@given(_trees(3), st.sampled_from(an.QUERIES), st.integers(1, 60))
def test_eval_matches_oracle(node, query, budget):
    node = _ids(node)
    b = budget if query == "max_prob_under_budget" else math.inf
    assert an.eval_tree(node, query, b).value == pytest.approx(an.oracle_eval(node, query, b))


@settings(max_examples=60, deadline=None)
@given(_trees(3))
def test_enumeration_matches_brute_force(node):
    node = _ids(node)
    assert set(an.enumerate_cutsets(node)) == set(an.brute_force_cutsets(node))
    assert an.count_cutsets(node) >= len(set(an.enumerate_cutsets(node)))


@settings(max_examples=60, deadline=None)
@given(_trees(3), st.integers(1, 30))
def test_pruning_is_sound(node, budget):
    # a pruned tree never reports a cheaper attack than the full tree
    node = _ids(node)
    full = an.eval_tree(node, "min_cost").value
    pruned = an.eval_tree(node, "min_cost", profile=AttackerProfile(budget=budget)).value
    assert pruned >= full


def test_oracle_collapse_is_exact():
    wide = Gate("AND", tuple(Gate("OR", tuple(Leaf("x", Attributes(c + k, 1, 0.5)) for k in range(4)))
                             for c in range(6)))
    node = _ids(wide)
    assert an.count_cutsets(node) == 4 ** 6
    for q in an.QUERIES:
        assert an.oracle_eval(node, q, 30, limit=50) == pytest.approx(an.oracle_eval(node, q, 30, limit=10**5))


def test_library_tree_against_oracle():
    lib = an.load_revault_library()
    node = an.instantiate(lib, "i", an.oracle_params("i"))
    node = an.attach_attributes(node, an.random_attributes(node, 1))
    for q in an.QUERIES:
        assert an.eval_tree(node, q, 150).value == pytest.approx(an.oracle_eval(node, q, 150))


# observer

def test_observer_quiet_on_noise():
    corpus = an.build_observer_corpus(seed=1, n_sequences=0, n_noise=60)
    detections, _ = an.observer_scan(corpus.chain)
    assert detections == []
    assert len(corpus.noise_txids) == 60


def test_observer_small_corpus():
    corpus = an.build_observer_corpus(seed=2, n_sequences=5, n_noise=40)
    detections, graph = an.observer_scan(corpus.chain)
    score = an.score_detections(detections, corpus)
    assert score["recall"] == score["precision"] == 1.0
    kinds = {e[2] for e in graph.edges}
    assert "enforcement-key-reuse" in kinds
    assert kinds <= set(an.EDGE_KINDS)


def test_observer_deterministic():
    a = an.build_observer_corpus(seed=3, n_sequences=3, n_noise=20)
    b = an.build_observer_corpus(seed=3, n_sequences=3, n_noise=20)
    assert a.planted == b.planted and a.noise_txids == b.noise_txids
