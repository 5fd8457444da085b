"""Task graphs: a formula compiles to a DAG of sub-goals.

Nodes are stages of the task, edges carry a symbol (the conjunction that
completes the edge at a single step) and a safety set (propositions that must
stay false for the whole stretch spent traversing the edge). Node ids are
canonical integers assigned in breadth-first order from the initial node 0.

The derived sub-task of an edge adds, on top of the edge's own forbidden
propositions, the positive propositions of all sibling edges leaving the same
node toward other targets, so that pursuing one edge cannot silently complete
a different one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .logic import Achieve, Ensuring, Or, Seq, Spec, SymbolConj

__all__ = [
    "GraphError",
    "CompileError",
    "InfeasibleSubTaskError",
    "EncodingError",
    "Edge",
    "AbstractGraph",
    "EMPTY_GRAPH",
    "SubTask",
    "RawEdge",
    "RawGraph",
    "compile_abstract_graph",
    "build_graph",
    "split_disjunctions",
    "derive_subtask",
    "derive_edge_subtask",
    "progress_task",
    "TreeNode",
    "SubTaskTree",
    "dag_to_tree",
    "encode_subtask",
    "decode_subtask",
    "simulate_trace",
    "simulate_prefixes",
    "graph_to_json",
    "graph_from_json",
    "graph_to_dot",
    "graph_signature",
]


class GraphError(ValueError):
    pass


class CompileError(GraphError):
    pass


class InfeasibleSubTaskError(GraphError):
    pass


class EncodingError(GraphError):
    pass


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    symbol: SymbolConj
    safe: frozenset[str]

    def sort_key(self):
        return (
            self.src,
            self.dst,
            tuple(sorted(self.symbol.positives)),
            tuple(sorted(self.symbol.negatives)),
            tuple(sorted(self.safe)),
        )


@dataclass(frozen=True)
class AbstractGraph:
    num_nodes: int
    edges: tuple[Edge, ...]
    accepting: frozenset[int]
    initial: int = 0

    @property
    def is_empty(self) -> bool:
        return self.num_nodes == 0

    def out_edges(self, node: int) -> list[Edge]:
        return [e for e in self.edges if e.src == node]

    def validate(self) -> None:
        if self.is_empty:
            if self.edges or self.accepting:
                raise GraphError("empty graph must have no edges and no accepting nodes")
            return
        if self.initial != 0:
            raise GraphError("initial node must be 0")
        if not self.accepting:
            raise GraphError("no accepting node")
        for e in self.edges:
            if not (0 <= e.src < self.num_nodes and 0 <= e.dst < self.num_nodes):
                raise GraphError(f"edge endpoint out of range: {e}")
            if e.src == e.dst:
                raise GraphError(f"self loop at node {e.src}")
        if any(not (0 <= q < self.num_nodes) for q in self.accepting):
            raise GraphError("accepting node out of range")
        order = self._topological_order()  # raises on cycles
        # reachability from the initial node
        seen = {0}
        for q in order:
            if q in seen:
                for e in self.edges:
                    if e.src == q:
                        seen.add(e.dst)
        if len(seen) != self.num_nodes:
            raise GraphError(f"nodes unreachable from initial: {sorted(set(range(self.num_nodes)) - seen)}")
        # every node can still finish the task
        reaches = set(self.accepting)
        for q in reversed(order):
            if any(e.src == q and e.dst in reaches for e in self.edges):
                reaches.add(q)
        if len(reaches) != self.num_nodes:
            raise GraphError(f"nodes with no path to an accepting node: {sorted(set(range(self.num_nodes)) - reaches)}")

    def _topological_order(self) -> list[int]:
        indeg = [0] * self.num_nodes
        for e in self.edges:
            indeg[e.dst] += 1
        ready = sorted(q for q in range(self.num_nodes) if indeg[q] == 0)
        order: list[int] = []
        while ready:
            q = ready.pop(0)
            order.append(q)
            for e in self.edges:
                if e.src == q:
                    indeg[e.dst] -= 1
                    if indeg[e.dst] == 0:
                        ready.append(e.dst)
            ready.sort()
        if len(order) != self.num_nodes:
            raise GraphError("task graph contains a cycle")
        return order


EMPTY_GRAPH = AbstractGraph(num_nodes=0, edges=(), accepting=frozenset())


@dataclass(frozen=True)
class SubTask:
    """A reach/avoid unit of work: reach all of `positives` at one step while
    never touching `negatives` on the way (the completing step included)."""

    positives: frozenset[str]
    negatives: frozenset[str]

    def __str__(self) -> str:
        pos = " & ".join(sorted(self.positives))
        neg = " & ".join("!" + p for p in sorted(self.negatives))
        return f"achieve ({pos}) ensuring ({neg})" if neg else f"achieve ({pos})"


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------


class _Builder:
    """Mutable graph under construction, arbitrary node ids."""

    def __init__(self):
        self.adj: dict[int, list[tuple[SymbolConj, frozenset[str], int]]] = {}
        self.accepting: set[int] = set()
        self.counter = 0

    def new_node(self) -> int:
        q = self.counter
        self.counter += 1
        self.adj[q] = []
        return q

    def signature(self, node: int, memo: dict[int, tuple] | None = None) -> tuple:
        if memo is None:
            memo = {}
        if node in memo:
            return memo[node]
        out = sorted(
            (
                tuple(sorted(sym.positives)),
                tuple(sorted(sym.negatives)),
                tuple(sorted(safe)),
                self.signature(dst, memo),
            )
            for sym, safe, dst in self.adj[node]
        )
        sig = (node in self.accepting, tuple(out))
        memo[node] = sig
        return sig


def _build(spec: Spec, b: _Builder) -> tuple[int, set[int]]:
    """Returns (initial node, accepting nodes) of the sub-graph for `spec`."""
    if isinstance(spec, Achieve):
        q0 = b.new_node()
        qf = b.new_node()
        b.adj[q0].append((spec.symbol, frozenset(), qf))
        b.accepting.add(qf)
        return q0, {qf}
    if isinstance(spec, Ensuring):
        if spec.condition.positives:
            raise CompileError(
                "only negated propositions can be ensured on a task graph: "
                f"{sorted(spec.condition.positives)}"
            )
        init, acc = _build(spec.spec, b)
        extra = spec.condition.negatives
        stack = [init]
        seen = {init}
        while stack:
            q = stack.pop()
            b.adj[q] = [(sym, safe | extra, dst) for sym, safe, dst in b.adj[q]]
            for _, _, dst in b.adj[q]:
                if dst not in seen:
                    seen.add(dst)
                    stack.append(dst)
        return init, acc
    if isinstance(spec, Seq):
        init1, acc1 = _build(spec.first, b)
        final_acc: set[int] = set()
        for a in sorted(acc1):
            b.accepting.discard(a)
            init2, acc2 = _build(spec.second, b)  # fresh copy per join point
            b.adj[a].extend(b.adj[init2])
            del b.adj[init2]
            final_acc |= acc2
        return init1, final_acc
    if isinstance(spec, Or):
        init1, acc1 = _build(spec.left, b)
        init2, acc2 = _build(spec.right, b)
        b.adj[init1].extend(b.adj[init2])
        del b.adj[init2]
        if init2 in b.accepting:  # pragma: no cover - achieve initials are never accepting
            b.accepting.discard(init2)
            b.accepting.add(init1)
        # deduplicate identical alternatives so they do not forbid each other
        memo: dict[int, tuple] = {}
        kept: list[tuple[SymbolConj, frozenset[str], int]] = []
        seen_sigs: set[tuple] = set()
        for sym, safe, dst in b.adj[init1]:
            key = (
                tuple(sorted(sym.positives)),
                tuple(sorted(sym.negatives)),
                tuple(sorted(safe)),
                b.signature(dst, memo),
            )
            if key in seen_sigs:
                continue
            seen_sigs.add(key)
            kept.append((sym, safe, dst))
        b.adj[init1] = kept
        # alternatives dropped by deduplication become unreachable and are
        # pruned when the graph is canonicalized
        return init1, acc1 | acc2
    raise TypeError(f"not a spec node: {spec!r}")


def _canonicalize(b: _Builder, init: int) -> AbstractGraph:
    # breadth-first renumbering with deterministic neighbor order
    order: list[int] = [init]
    new_id = {init: 0}
    head = 0
    while head < len(order):
        q = order[head]
        head += 1
        outs = sorted(
            b.adj[q],
            key=lambda t: (
                tuple(sorted(t[0].positives)),
                tuple(sorted(t[0].negatives)),
                tuple(sorted(t[1])),
                t[2],
            ),
        )
        for _, _, dst in outs:
            if dst not in new_id:
                new_id[dst] = len(order)
                order.append(dst)
    edges = []
    for q in order:
        for sym, safe, dst in b.adj[q]:
            if dst in new_id:
                edges.append(Edge(new_id[q], new_id[dst], sym, frozenset(safe)))
    edges.sort(key=Edge.sort_key)
    accepting = frozenset(new_id[a] for a in b.accepting if a in new_id)
    g = AbstractGraph(num_nodes=len(order), edges=tuple(edges), accepting=accepting)
    _check_edge_consistency(g)
    g.validate()
    return g


def _check_edge_consistency(g: AbstractGraph) -> None:
    for e in g.edges:
        clash = e.symbol.positives & (e.symbol.negatives | e.safe)
        if clash:
            raise CompileError(
                f"edge {e.src}->{e.dst} requires and forbids {sorted(clash)} at once"
            )


def compile_abstract_graph(spec: Spec) -> AbstractGraph:
    """Compile a formula into its task graph."""
    b = _Builder()
    init, _ = _build(spec, b)
    return _canonicalize(b, init)


def build_graph(edges: Iterable[Edge], accepting: Iterable[int], initial: int = 0) -> AbstractGraph:
    """Canonical graph from hand-assembled edges.

    Node ids may be arbitrary integers; they are renumbered breadth-first from
    `initial` and anything unreachable from it is dropped.
    """
    b = _Builder()
    b.adj[initial] = []
    for e in edges:
        b.adj.setdefault(e.src, [])
        b.adj.setdefault(e.dst, [])
        b.adj[e.src].append((e.symbol, e.safe, e.dst))
    b.accepting = set(accepting)
    return _canonicalize(b, initial)


# ---------------------------------------------------------------------------
# Disjunctive edge splitting (normal-form expansion produces edges labeled by
# a list of alternative conjunctions; each alternative becomes its own edge)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawEdge:
    src: int
    dst: int
    disjuncts: tuple[SymbolConj, ...]
    safe: frozenset[str] = frozenset()


@dataclass(frozen=True)
class RawGraph:
    num_nodes: int
    edges: tuple[RawEdge, ...]
    accepting: frozenset[int]
    initial: int = 0


def split_disjunctions(g: RawGraph | AbstractGraph) -> AbstractGraph:
    if isinstance(g, AbstractGraph):
        return g
    edges: list[Edge] = []
    seen: set[tuple] = set()
    for raw in g.edges:
        for sym in raw.disjuncts:
            e = Edge(raw.src, raw.dst, sym, raw.safe)
            key = e.sort_key()
            if key in seen:
                continue
            seen.add(key)
            edges.append(e)
    edges.sort(key=Edge.sort_key)
    out = AbstractGraph(
        num_nodes=g.num_nodes,
        edges=tuple(edges),
        accepting=frozenset(g.accepting),
        initial=g.initial,
    )
    _check_edge_consistency(out)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Sub-task derivation and task progression
# ---------------------------------------------------------------------------


def derive_edge_subtask(g: AbstractGraph, edge: Edge) -> SubTask:
    positives = edge.symbol.positives
    if not positives:
        raise InfeasibleSubTaskError(
            f"edge {edge.src}->{edge.dst} has no positive proposition to pursue"
        )
    negatives = set(edge.symbol.negatives) | set(edge.safe)
    for other in g.out_edges(edge.src):
        if other.dst != edge.dst:
            negatives |= other.symbol.positives
    clash = positives & negatives
    if clash:
        raise InfeasibleSubTaskError(
            f"sub-task for edge {edge.src}->{edge.dst} is infeasible, "
            f"{sorted(clash)} both required and forbidden"
        )
    return SubTask(frozenset(positives), frozenset(negatives))


def derive_subtask(g: AbstractGraph, src: int, dst: int) -> SubTask:
    matches = [e for e in g.edges if e.src == src and e.dst == dst]
    if not matches:
        raise GraphError(f"no edge {src}->{dst}")
    if len(matches) > 1:
        raise GraphError(f"edge {src}->{dst} is ambiguous, use derive_edge_subtask")
    return derive_edge_subtask(g, matches[0])


def progress_task(g: AbstractGraph, edge: Edge) -> AbstractGraph:
    """The task left after traversing `edge`: the sub-graph hanging off its
    target, or the empty graph when the target is accepting."""
    if edge not in g.edges:
        raise GraphError(f"edge {edge.src}->{edge.dst} not in graph")
    if edge.dst in g.accepting:
        return EMPTY_GRAPH
    keep = {edge.dst}
    frontier = [edge.dst]
    while frontier:
        q = frontier.pop()
        for e in g.edges:
            if e.src == q and e.dst not in keep:
                keep.add(e.dst)
                frontier.append(e.dst)
    b = _Builder()
    b.counter = g.num_nodes
    for q in sorted(keep):
        b.adj[q] = []
    for e in g.edges:
        if e.src in keep:
            b.adj[e.src].append((e.symbol, e.safe, e.dst))
    b.accepting = set(g.accepting & keep)
    return _canonicalize(b, edge.dst)


# ---------------------------------------------------------------------------
# Tree view (unrolled DAG, one tree node per distinct path prefix)
# ---------------------------------------------------------------------------


@dataclass
class TreeNode:
    id: int
    dag_node: int
    parent: int | None
    edge: Edge | None  # DAG edge taken from the parent
    subtask: SubTask | None  # derived with siblings taken from the DAG
    depth: int
    accepting: bool
    children: list[int] = field(default_factory=list)


@dataclass
class SubTaskTree:
    nodes: list[TreeNode]

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    def edges(self) -> list[tuple[int, int]]:
        return [(n.parent, n.id) for n in self.nodes if n.parent is not None]


def dag_to_tree(g: AbstractGraph) -> SubTaskTree:
    if g.is_empty:
        return SubTaskTree(nodes=[])
    root = TreeNode(0, g.initial, None, None, None, 0, g.initial in g.accepting)
    nodes = [root]
    head = 0
    while head < len(nodes):
        node = nodes[head]
        head += 1
        outs = sorted(g.out_edges(node.dag_node), key=Edge.sort_key)
        for e in outs:
            child = TreeNode(
                id=len(nodes),
                dag_node=e.dst,
                parent=node.id,
                edge=e,
                subtask=derive_edge_subtask(g, e),
                depth=node.depth + 1,
                accepting=e.dst in g.accepting,
            )
            node.children.append(child.id)
            nodes.append(child)
    return SubTaskTree(nodes=nodes)


# ---------------------------------------------------------------------------
# Binary encoding of sub-tasks: one block of reach bits then one block of
# avoid bits, both in alphabet order
# ---------------------------------------------------------------------------


def encode_subtask(subtask: SubTask, alphabet: Sequence[str]) -> np.ndarray:
    index = {p: i for i, p in enumerate(alphabet)}
    n = len(alphabet)
    bits = np.zeros(2 * n, dtype=np.float64)
    for p in subtask.positives:
        if p not in index:
            raise EncodingError(f"proposition {p!r} not in alphabet {list(alphabet)}")
        bits[index[p]] = 1.0
    for p in subtask.negatives:
        if p not in index:
            raise EncodingError(f"proposition {p!r} not in alphabet {list(alphabet)}")
        bits[n + index[p]] = 1.0
    return bits


def decode_subtask(bits: np.ndarray, alphabet: Sequence[str]) -> SubTask:
    n = len(alphabet)
    if bits.shape != (2 * n,):
        raise EncodingError(f"expected {2 * n} bits, got shape {bits.shape}")
    pos = frozenset(alphabet[i] for i in range(n) if bits[i] > 0.5)
    neg = frozenset(alphabet[i] for i in range(n) if bits[n + i] > 0.5)
    return SubTask(pos, neg)


# ---------------------------------------------------------------------------
# Trace simulation over the graph: can the labels drive some path from the
# initial node to an accepting node, completing each edge at a distinct step
# in order, with every edge's safety set respected across its stretch?
# ---------------------------------------------------------------------------


def simulate_prefixes(g: AbstractGraph, traces: np.ndarray, props: Sequence[str]) -> np.ndarray:
    """Boolean (batch, steps) array: prefix of length j+1 completes the task."""
    traces = np.asarray(traces, dtype=bool)
    nb, nt, np_ = traces.shape
    if np_ != len(props):
        raise ValueError("trace proposition axis does not match props")
    index = {p: i for i, p in enumerate(props)}
    if g.is_empty:
        return np.ones((nb, nt), dtype=bool)

    def step_ok(pos: Iterable[str], neg: Iterable[str]) -> np.ndarray:
        ok = np.ones((nb, nt), dtype=bool)
        for p in sorted(pos):
            ok &= traces[:, :, index[p]]
        for p in sorted(neg):
            ok &= ~traces[:, :, index[p]]
        return ok

    # arrival[q][b, t]: some valid decomposition puts us at node q with step t
    # the next one to consume (the edge into q completed at step t-1)
    arrival = {q: np.zeros((nb, nt + 1), dtype=bool) for q in range(g.num_nodes)}
    arrival[g.initial][:, 0] = True
    for q in g._topological_order():
        arr_q = arrival[q]
        for e in sorted(g.out_edges(q), key=Edge.sort_key):
            safe_ok = step_ok((), e.safe)
            point = step_ok(e.symbol.positives, e.symbol.negatives) & step_ok((), e.safe)
            # window[b, c]: arrived at q at some t <= c with safety holding on t..c
            window = np.zeros((nb, nt), dtype=bool)
            prev = np.zeros(nb, dtype=bool)
            for c in range(nt):
                prev = (prev | arr_q[:, c]) & safe_ok[:, c]
                window[:, c] = prev
            complete = window & point
            arrival[e.dst][:, 1:] |= complete
    accept = np.zeros((nb, nt), dtype=bool)
    for q in sorted(g.accepting):
        accept |= np.logical_or.accumulate(arrival[q][:, 1:], axis=1)
    return accept


def simulate_trace(g: AbstractGraph, labels: Sequence[Iterable[str]]) -> bool:
    steps = [frozenset(step) for step in labels]
    if g.is_empty:
        return True
    if not steps:
        return False
    props = sorted({p for e in g.edges for p in (e.symbol.props | e.safe)})
    arr = np.zeros((1, len(steps), len(props)), dtype=bool)
    index = {p: i for i, p in enumerate(props)}
    for t, step in enumerate(steps):
        for p in step:
            if p in index:
                arr[0, t, index[p]] = True
    out = simulate_prefixes(g, arr, props)
    return bool(out[0, -1])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_JSON_VERSION = 1


def graph_to_json(g: AbstractGraph) -> str:
    doc = {
        "version": _JSON_VERSION,
        "nodes": list(range(g.num_nodes)),
        "initial": g.initial if not g.is_empty else None,
        "accepting": sorted(g.accepting),
        "edges": [
            {
                "from": e.src,
                "to": e.dst,
                "pos": sorted(e.symbol.positives),
                "neg": sorted(e.symbol.negatives),
                "safe": sorted(e.safe),
            }
            for e in g.edges
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def graph_from_json(text: str) -> AbstractGraph:
    doc = json.loads(text)
    if doc.get("version") != _JSON_VERSION:
        raise GraphError(f"unsupported task graph version: {doc.get('version')!r}")
    nodes = doc["nodes"]
    if not nodes:
        return EMPTY_GRAPH
    edges = tuple(
        sorted(
            (
                Edge(
                    int(e["from"]),
                    int(e["to"]),
                    SymbolConj(frozenset(e["pos"]), frozenset(e["neg"])),
                    frozenset(e.get("safe", [])),
                )
                for e in doc["edges"]
            ),
            key=Edge.sort_key,
        )
    )
    g = AbstractGraph(num_nodes=len(nodes), edges=edges, accepting=frozenset(doc["accepting"]))
    g.validate()
    return g


def graph_to_dot(g: AbstractGraph) -> str:
    lines = ["digraph task {", "  rankdir=LR;"]
    for q in range(g.num_nodes):
        shape = "doublecircle" if q in g.accepting else "circle"
        lines.append(f'  n{q} [label="{q}" shape={shape}];')
    for e in g.edges:
        label = str(e.symbol)
        if e.safe:
            label += " / safe: " + " ".join("!" + p for p in sorted(e.safe))
        lines.append(f'  n{e.src} -> n{e.dst} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def graph_signature(g: AbstractGraph) -> tuple:
    """Canonical hashable form, equal for structurally identical graphs."""
    if g.is_empty:
        return ("empty",)
    memo: dict[int, tuple] = {}

    def sig(q: int) -> tuple:
        if q in memo:
            return memo[q]
        out = sorted(
            (
                tuple(sorted(e.symbol.positives)),
                tuple(sorted(e.symbol.negatives)),
                tuple(sorted(e.safe)),
                sig(e.dst),
            )
            for e in g.out_edges(q)
        )
        s = (q in g.accepting, tuple(out))
        memo[q] = s
        return s

    return sig(g.initial)
