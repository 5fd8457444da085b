import numpy as np
import pytest

from helpers import all_traces, oracle_prefix_acceptance, random_spec
from spectrl.graph import (
    EMPTY_GRAPH,
    AbstractGraph,
    CompileError,
    Edge,
    EncodingError,
    GraphError,
    InfeasibleSubTaskError,
    RawEdge,
    RawGraph,
    SubTask,
    compile_abstract_graph,
    dag_to_tree,
    decode_subtask,
    derive_edge_subtask,
    derive_subtask,
    encode_subtask,
    graph_from_json,
    graph_signature,
    graph_to_dot,
    graph_to_json,
    progress_task,
    simulate_prefixes,
    simulate_trace,
    split_disjunctions,
)
from spectrl.logic import SymbolConj, conj, parse_spec, prefix_acceptance

FIG_TASK = "achieve (b & !a & !d); achieve (c & !d) or achieve (a & !d)"


def fig_graph():
    return compile_abstract_graph(parse_spec(FIG_TASK))


def edge_by_goal(g: AbstractGraph, src: int, goal: str) -> Edge:
    matches = [e for e in g.out_edges(src) if goal in e.symbol.positives]
    assert len(matches) == 1, matches
    return matches[0]


class TestCompile:
    def test_single_achieve(self):
        g = compile_abstract_graph(parse_spec("achieve b"))
        assert g.num_nodes == 2
        assert len(g.edges) == 1
        assert g.edges[0] == Edge(0, 1, conj({"b"}), frozenset())
        assert g.accepting == {1}

    def test_ensuring_extends_every_safety_set(self):
        g = compile_abstract_graph(parse_spec("(achieve a; achieve b) ensuring !d"))
        assert all(e.safe == {"d"} for e in g.edges)

    def test_branching_task_shape(self):
        g = fig_graph()
        assert g.num_nodes == 4
        assert len(g.edges) == 3
        b_edge = edge_by_goal(g, 0, "b")
        a_edge = edge_by_goal(g, 0, "a")
        c_edge = edge_by_goal(g, b_edge.dst, "c")
        assert a_edge.dst in g.accepting
        assert c_edge.dst in g.accepting
        assert a_edge.symbol == conj({"a"}, {"d"})
        assert c_edge.symbol == conj({"c"}, {"d"})

    def test_or_duplicate_alternatives_collapse(self):
        g = compile_abstract_graph(parse_spec("achieve a or achieve a"))
        assert g.num_nodes == 2
        assert len(g.edges) == 1
        # and the surviving edge still yields a feasible sub-task
        assert derive_edge_subtask(g, g.edges[0]) == SubTask(frozenset("a"), frozenset())

    def test_seq_copies_second_part_per_join_point(self):
        g = compile_abstract_graph(parse_spec("(achieve a or achieve b); achieve c"))
        assert g.num_nodes == 5
        assert len(g.edges) == 4
        assert len(g.accepting) == 2

    def test_positive_ensuring_rejected(self):
        with pytest.raises(CompileError):
            compile_abstract_graph(parse_spec("achieve a ensuring b"))

    def test_contradictory_edge_rejected(self):
        with pytest.raises(CompileError):
            compile_abstract_graph(parse_spec("achieve a ensuring !a"))

    def test_nodes_numbered_breadth_first(self):
        g = fig_graph()
        assert g.initial == 0
        srcs = [e.src for e in g.edges]
        assert min(srcs) == 0


class TestSubTasks:
    def test_branch_subtask_forbids_sibling_goals(self):
        g = fig_graph()
        a_edge = edge_by_goal(g, 0, "a")
        st = derive_edge_subtask(g, a_edge)
        assert st == SubTask(frozenset({"a"}), frozenset({"b", "d"}))

    def test_chain_subtask(self):
        g = fig_graph()
        b_edge = edge_by_goal(g, 0, "b")
        assert derive_edge_subtask(g, b_edge) == SubTask(frozenset({"b"}), frozenset({"a", "d"}))

    def test_infeasible_when_sibling_shares_goal(self):
        edges = (
            Edge(0, 1, conj({"a"}), frozenset()),
            Edge(0, 2, conj({"a", "b"}), frozenset()),
            Edge(1, 3, conj({"c"}), frozenset()),
            Edge(2, 3, conj({"c"}), frozenset()),
        )
        g = AbstractGraph(num_nodes=4, edges=edges, accepting=frozenset({3}))
        with pytest.raises(InfeasibleSubTaskError):
            derive_subtask(g, 0, 1)

    def test_goalless_edge_rejected(self):
        g = compile_abstract_graph(parse_spec("achieve !a"))
        with pytest.raises(InfeasibleSubTaskError):
            derive_edge_subtask(g, g.edges[0])


class TestProgression:
    def test_progress_to_remaining_chain(self):
        g = fig_graph()
        b_edge = edge_by_goal(g, 0, "b")
        rest = progress_task(g, b_edge)
        assert rest.num_nodes == 2
        assert rest.edges[0].symbol == conj({"c"}, {"d"})
        assert rest.accepting == {1}

    def test_progress_to_accepting_is_empty(self):
        g = fig_graph()
        a_edge = edge_by_goal(g, 0, "a")
        assert progress_task(g, a_edge) is EMPTY_GRAPH
        assert progress_task(g, a_edge).is_empty

    def test_unknown_edge_rejected(self):
        g = fig_graph()
        with pytest.raises(GraphError):
            progress_task(g, Edge(0, 3, conj({"z"}), frozenset()))


class TestTree:
    def test_branching_task_tree(self):
        t = dag_to_tree(fig_graph())
        assert len(t.nodes) == 4
        assert t.root.depth == 0
        assert sorted(n.depth for n in t.nodes) == [0, 1, 1, 2]

    def test_diamond_unrolls_to_five(self):
        edges = (
            Edge(0, 1, conj({"a"}), frozenset()),
            Edge(0, 2, conj({"b"}), frozenset()),
            Edge(1, 3, conj({"c"}), frozenset()),
            Edge(2, 3, conj({"d"}), frozenset()),
        )
        g = AbstractGraph(num_nodes=4, edges=edges, accepting=frozenset({3}))
        t = dag_to_tree(g)
        assert len(t.nodes) == 5
        assert sum(n.accepting for n in t.nodes) == 2

    def test_empty_graph_tree(self):
        assert dag_to_tree(EMPTY_GRAPH).nodes == []

    def test_subtasks_use_dag_siblings(self):
        t = dag_to_tree(fig_graph())
        by_goal = {next(iter(n.subtask.positives)): n.subtask for n in t.nodes if n.subtask}
        assert by_goal["a"].negatives == {"b", "d"}
        assert by_goal["b"].negatives == {"a", "d"}


class TestEncoding:
    def test_layout(self):
        st = SubTask(frozenset({"a"}), frozenset({"b", "d"}))
        bits = encode_subtask(st, ["a", "b", "c", "d"])
        assert bits.tolist() == [1, 0, 0, 0, 0, 1, 0, 1]
        assert decode_subtask(bits, ["a", "b", "c", "d"]) == st

    def test_unknown_proposition(self):
        with pytest.raises(EncodingError):
            encode_subtask(SubTask(frozenset({"z"}), frozenset()), ["a", "b"])

    def test_round_trip_random(self):
        rng = np.random.default_rng(5)
        alphabet = ["a", "b", "c", "d", "e"]
        for _ in range(200):
            pos = {alphabet[rng.integers(5)]}
            neg = {p for p in alphabet if p not in pos and rng.random() < 0.4}
            st = SubTask(frozenset(pos), frozenset(neg))
            assert decode_subtask(encode_subtask(st, alphabet), alphabet) == st


class TestSplitDisjunctions:
    def test_split_and_dedup(self):
        raw = RawGraph(
            num_nodes=2,
            edges=(RawEdge(0, 1, (conj({"a"}), conj({"b"}), conj({"a"}))),),
            accepting=frozenset({1}),
        )
        g = split_disjunctions(raw)
        assert len(g.edges) == 2
        assert {next(iter(e.symbol.positives)) for e in g.edges} == {"a", "b"}

    def test_conjunction_only_graph_unchanged(self):
        g = fig_graph()
        assert split_disjunctions(g) is g

    def test_parallel_alternatives_do_not_forbid_each_other(self):
        raw = RawGraph(
            num_nodes=2,
            edges=(RawEdge(0, 1, (conj({"a"}), conj({"b"}))),),
            accepting=frozenset({1}),
        )
        g = split_disjunctions(raw)
        for e in g.edges:
            st = derive_edge_subtask(g, e)
            assert not st.negatives


class TestSimulation:
    def test_matches_formula_satisfaction_on_random_specs(self):
        rng = np.random.default_rng(13)
        props = ["a", "b", "c"]
        traces = all_traces(3, 4)
        for _ in range(40):
            spec = random_spec(rng, props, depth=2)
            try:
                g = compile_abstract_graph(spec)
            except CompileError:
                continue
            got = simulate_prefixes(g, traces, props)
            want = prefix_acceptance(spec, traces, props)
            assert np.array_equal(got, want), spec

    def test_safety_blocks_the_stretch(self):
        g = compile_abstract_graph(parse_spec("(achieve a; achieve b) ensuring !d"))
        assert simulate_trace(g, [frozenset({"a"}), frozenset({"b"})])
        assert not simulate_trace(g, [frozenset({"a"}), frozenset({"d"}), frozenset({"b"})])

    def test_empty_graph_accepts(self):
        assert simulate_trace(EMPTY_GRAPH, [])


class TestSerialization:
    def test_json_round_trip(self):
        g = fig_graph()
        assert graph_from_json(graph_to_json(g)) == g

    def test_json_fields(self):
        text = graph_to_json(compile_abstract_graph(parse_spec("achieve a ensuring !d")))
        assert '"pos"' in text and '"safe"' in text

    def test_version_checked(self):
        with pytest.raises(GraphError):
            graph_from_json('{"version": 99, "nodes": [], "accepting": [], "edges": []}')

    def test_dot_marks_accepting(self):
        dot = graph_to_dot(fig_graph())
        assert "doublecircle" in dot and "->" in dot

    def test_signature_stable_and_discriminating(self):
        g1 = fig_graph()
        g2 = compile_abstract_graph(parse_spec(FIG_TASK))
        assert graph_signature(g1) == graph_signature(g2)
        other = compile_abstract_graph(parse_spec("achieve a"))
        assert graph_signature(other) != graph_signature(g1)


class TestValidation:
    def test_cycle_rejected(self):
        edges = (
            Edge(0, 1, conj({"a"}), frozenset()),
            Edge(1, 0, conj({"b"}), frozenset()),
        )
        with pytest.raises(GraphError):
            AbstractGraph(num_nodes=2, edges=edges, accepting=frozenset({1})).validate()

    def test_unreachable_rejected(self):
        edges = (Edge(0, 1, conj({"a"}), frozenset()),)
        with pytest.raises(GraphError):
            AbstractGraph(num_nodes=3, edges=edges, accepting=frozenset({1})).validate()

    def test_dead_end_rejected(self):
        edges = (
            Edge(0, 1, conj({"a"}), frozenset()),
            Edge(0, 2, conj({"b"}), frozenset()),
        )
        with pytest.raises(GraphError):
            AbstractGraph(num_nodes=3, edges=edges, accepting=frozenset({1})).validate()
