"""Task generators: curriculum chains, random test DAGs, relabeled trees.

Training tasks are chains of random reach-avoid sub-tasks whose length
follows a success-gated curriculum.  Held-out evaluation tasks are random
DAGs drawn from their own stream.  Collected trajectories are recycled by
grafting random branches onto the completed chain, giving a tree-shaped
task that the same trajectory still solves along its backbone.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import (
    AbstractGraph,
    Edge,
    GraphError,
    SubTask,
    build_graph,
    dag_to_tree,
    derive_edge_subtask,
)
from .logic import Achieve, Seq, Spec, SymbolConj

__all__ = [
    "TaskGenError",
    "CurriculumState",
    "RelabelTree",
    "random_symbol",
    "curriculum_task",
    "should_advance",
    "random_test_dag",
    "graph_chains",
    "relabel_trajectory",
]


class TaskGenError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Curriculum


def random_symbol(alphabet: Sequence[str], rng: np.random.Generator,
                  neg_prob: float = 0.25) -> SymbolConj:
    """One random goal proposition plus independently drawn negatives.

    Goals are singletons: environment labels carry at most one proposition
    per step, so a conjunction of two goals could never complete.
    """
    if not alphabet:
        raise TaskGenError("empty alphabet, cannot draw a goal proposition")
    pos = alphabet[int(rng.integers(len(alphabet)))]
    negs = frozenset(p for p in alphabet if p != pos and rng.random() < neg_prob)
    return SymbolConj(frozenset([pos]), negs)


def curriculum_task(level: int, alphabet: Sequence[str], rng: np.random.Generator,
                    neg_prob: float = 0.25) -> Spec:
    """A chain of exactly `level` random sub-tasks."""
    if level < 1:
        raise TaskGenError(f"curriculum level must be >= 1, got {level}")
    spec: Spec = Achieve(random_symbol(alphabet, rng, neg_prob))
    for _ in range(level - 1):
        spec = Seq(spec, Achieve(random_symbol(alphabet, rng, neg_prob)))
    return spec


@dataclass
class CurriculumState:
    """Success-gated task-length schedule.  The level only ever goes up."""

    level: int = 1
    cap: int = 4
    window_size: int = 100
    threshold: float = 0.95
    window: deque = field(default_factory=deque)

    def __post_init__(self):
        if not 1 <= self.level <= self.cap:
            raise TaskGenError(f"level {self.level} outside [1, {self.cap}]")
        self.window = deque(self.window, maxlen=self.window_size)

    @property
    def success_rate(self) -> float:
        return sum(self.window) / len(self.window) if self.window else 0.0


def should_advance(state: CurriculumState, episode_success: bool) -> bool:
    """Record one episode outcome and advance the level when the rolling
    window is full and at least `threshold` of it succeeded.  Returns whether
    the level changed; the window restarts on advancement."""
    state.window.append(bool(episode_success))
    if len(state.window) < state.window_size or state.level >= state.cap:
        return False
    if state.success_rate < state.threshold:
        return False
    state.level += 1
    state.window.clear()
    return True


# ---------------------------------------------------------------------------
# Random evaluation DAGs


def random_test_dag(alphabet: Sequence[str], rng: np.random.Generator,
                    num_nodes: tuple[int, int] = (3, 6),
                    branching: tuple[int, int] = (1, 2),
                    neg_prob: float = 0.25, safe_prob: float = 0.15,
                    max_tries: int = 200) -> AbstractGraph:
    """Random task DAG for held-out evaluation.

    Nodes are laid out in topological order, every node is reachable from
    the initial one, and sinks accept.  Edges carry random reach-avoid
    symbols and, sometimes, safety sets.  Draws where some edge's derived
    sub-task is contradictory are rejected and retried.
    """
    lo, hi = num_nodes
    if not 2 <= lo <= hi:
        raise TaskGenError(f"bad node count range {num_nodes}")
    b_lo, b_hi = branching
    if not 1 <= b_lo <= b_hi:
        raise TaskGenError(f"bad branching range {branching}")
    for _ in range(max_tries):
        g = _draw_dag(alphabet, rng, lo, hi, b_lo, b_hi, neg_prob, safe_prob)
        if g is not None:
            return g
    raise TaskGenError(f"no feasible task DAG found in {max_tries} draws")


def _draw_dag(alphabet, rng, lo, hi, b_lo, b_hi, neg_prob, safe_prob):
    n = int(rng.integers(lo, hi + 1))
    children: dict[int, set[int]] = {q: set() for q in range(n)}
    for q in range(1, n):
        # a parent with spare capacity always exists: q-1 edges so far
        # against q * b_hi slots
        pool = [p for p in range(q) if len(children[p]) < b_hi]
        children[pool[int(rng.integers(len(pool)))]].add(q)
    for q in range(n):
        if not children[q]:
            continue  # sinks stay sinks and become accepting
        want = int(rng.integers(b_lo, b_hi + 1))
        extra = [d for d in range(q + 1, n) if d not in children[q]]
        while len(children[q]) < want and extra:
            children[q].add(extra.pop(int(rng.integers(len(extra)))))
    edges = []
    for q in range(n):
        for d in sorted(children[q]):
            sym = random_symbol(alphabet, rng, neg_prob)
            safe = frozenset(p for p in alphabet
                             if p not in sym.positives and rng.random() < safe_prob)
            edges.append(Edge(q, d, sym, safe))
    accepting = [q for q in range(n) if not children[q]]
    try:
        g = build_graph(edges, accepting)
        for e in g.edges:
            derive_edge_subtask(g, e)
    except GraphError:
        return None
    return g


def graph_chains(g: AbstractGraph) -> list[list[SubTask]]:
    """Root-to-leaf sub-task sequences, one per accepting path."""
    tree = dag_to_tree(g)
    chains = []
    for node in tree.nodes:
        if not node.accepting:
            continue
        path = []
        cur = node
        while cur.parent is not None:
            path.append(cur.subtask)
            cur = tree.nodes[cur.parent]
        chains.append(path[::-1])
    return chains


# ---------------------------------------------------------------------------
# Experience relabeling


@dataclass(frozen=True)
class RelabelTree:
    """A counterfactual tree task built around a finished chain of sub-tasks.

    `backbone[i]` is the edge of `graph` matching the i-th completion; the
    source trajectory completes exactly this path when replayed and never
    enters a branch.
    """

    graph: AbstractGraph
    backbone: tuple[Edge, ...]
    branch_lengths: tuple[int, ...]


def relabel_trajectory(labels: Sequence[frozenset], completions,
                       alphabet: Sequence[str], rng: np.random.Generator,
                       neg_prob: float = 0.25) -> RelabelTree | None:
    """Graft random branches onto the chain of completed sub-tasks.

    Each branch root's goal is drawn from propositions never labeled from
    the branch point onward, and the root and its backbone sibling each gain
    the other's goal as a negative.  Replaying the source labels then walks
    the backbone and nothing else.  Returns None when a completion clashes
    with its own record (cannot happen for monitor output, but callers feed
    stored data).
    """
    if not completions:
        raise TaskGenError("need at least one completed sub-task to relabel")
    l = len(completions)
    if completions[-1].t >= len(labels):
        raise TaskGenError("label sequence shorter than the completion times")
    for c in completions:
        if not c.subtask.positives <= labels[c.t] or labels[c.t] & c.subtask.negatives:
            return None

    # propositions appearing anywhere from step t on
    suffix: list[set] = [set() for _ in range(len(labels) + 1)]
    for t in range(len(labels) - 1, -1, -1):
        suffix[t] = suffix[t + 1] | labels[t]

    base = [c.subtask for c in completions]
    backbone_syms = [SymbolConj(st.positives, st.negatives) for st in base]
    edges: list[Edge] = []
    lengths: list[int] = []
    next_id = l + 1
    for i in range(l):
        t_entry = 0 if i == 0 else completions[i - 1].t
        length = int(rng.integers(0, l - i + 1))
        candidates = sorted(set(alphabet) - base[i].positives - suffix[t_entry])
        if length == 0 or not candidates:
            lengths.append(0)
            continue
        root_pos = candidates[int(rng.integers(len(candidates)))]
        root_negs = frozenset(p for p in alphabet
                              if p != root_pos and rng.random() < neg_prob)
        root_sym = SymbolConj(frozenset([root_pos]), root_negs | base[i].positives)
        backbone_syms[i] = SymbolConj(
            backbone_syms[i].positives,
            backbone_syms[i].negatives | frozenset([root_pos]))
        prev = i
        for depth in range(length):
            sym = root_sym if depth == 0 else random_symbol(alphabet, rng, neg_prob)
            edges.append(Edge(prev, next_id, sym, frozenset()))
            prev = next_id
            next_id += 1
        lengths.append(length)
    for i in range(l):
        edges.append(Edge(i, i + 1, backbone_syms[i], frozenset()))

    srcs = {e.src for e in edges}
    accepting = ({e.dst for e in edges} | {0}) - srcs
    g = build_graph(edges, accepting)

    backbone = []
    cur = g.initial
    for i in range(l):
        matches = [e for e in g.out_edges(cur) if e.symbol == backbone_syms[i]]
        if len(matches) != 1:
            raise TaskGenError("backbone edge lost in canonicalization")
        backbone.append(matches[0])
        cur = matches[0].dst
    return RelabelTree(g, tuple(backbone), tuple(lengths))
