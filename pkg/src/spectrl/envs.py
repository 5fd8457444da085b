"""Letter-grid and region-walk environments plus task tracking.

Environments expose reset/step and a labeling of states with atomic
propositions; they know nothing about tasks or rewards.  TaskMonitor walks
the compiled task graph as labels arrive, segments the episode into
sub-task completions with discounted reward sums, and flags violations of
the assigned sub-task's forbidden set.  RewardScheme turns visit history
and task completion into per-step scalar rewards.
"""

from __future__ import annotations

import string
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from spectrl.graph import (
    EMPTY_GRAPH,
    AbstractGraph,
    Edge,
    InfeasibleSubTaskError,
    SubTask,
    derive_edge_subtask,
    progress_task,
)

__all__ = [
    "BonusRule",
    "BonusTracker",
    "Completion",
    "LetterEnv",
    "MonitorEvent",
    "RewardScheme",
    "StepResult",
    "TaskMonitor",
    "WalkEnv",
    "letter_chain_feasible",
]

LETTER_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    labels: frozenset
    reward: float
    done: bool
    violation: str | None = None


# ---------------------------------------------------------------------------
# Letter grid


class LetterEnv:
    """n x n grid; m cells carry one of k letters; agent moves in cardinal steps.

    Observation is a (k+1, n, n) one-hot stack: one channel per letter plus
    the agent position.  The label of a state is the letter under the agent
    (empty set on blank cells).  Layouts are drawn fresh on reset; a list of
    sub-task chains may be passed so layouts where none of them is solvable
    are rejected and redrawn.
    """

    def __init__(self, n: int = 7, m: int = 10, k: int = 5, horizon: int = 100,
                 rng: np.random.Generator | None = None):
        if not 0 < k < m <= n * n - 1:
            raise ValueError(f"need 0 < k < m <= n*n-1, got n={n} m={m} k={k}")
        if k > 26:
            raise ValueError("at most 26 letters")
        self.n = n
        self.m = m
        self.k = k
        self.horizon = horizon
        self.rng = rng if rng is not None else np.random.default_rng()
        self.alphabet = list(string.ascii_lowercase[:k])
        self.grid = np.full((n, n), -1, dtype=np.int8)
        self.agent = (0, 0)
        self.steps = 0

    @property
    def obs_shape(self):
        return (self.k + 1, self.n, self.n)

    n_actions = 4

    def _labels_at(self, cell) -> frozenset:
        v = self.grid[cell]
        return frozenset() if v < 0 else frozenset({self.alphabet[v]})

    def _observation(self) -> np.ndarray:
        obs = np.zeros(self.obs_shape)
        rows, cols = np.nonzero(self.grid >= 0)
        obs[self.grid[rows, cols], rows, cols] = 1.0
        obs[self.k, self.agent[0], self.agent[1]] = 1.0
        return obs

    def _place(self) -> None:
        n = self.n
        flat = self.rng.permutation(n * n)
        start = int(flat[0])
        cells = flat[1:self.m + 1]
        self.grid.fill(-1)
        # every letter appears at least once; the rest are uniform
        letters = np.concatenate([
            np.arange(self.k),
            self.rng.integers(0, self.k, size=self.m - self.k),
        ])
        self.grid[np.unravel_index(cells, (n, n))] = letters.astype(np.int8)
        self.agent = (start // n, start % n)

    def reset(self, chains=None, max_tries: int = 50) -> StepResult:
        for _ in range(max_tries):
            self._place()
            if chains is None or any(
                    letter_chain_feasible(self.grid, self.alphabet, self.agent, c)
                    for c in chains):
                break
        else:
            raise RuntimeError(f"no feasible layout found in {max_tries} tries")
        self.steps = 0
        return StepResult(self._observation(), self._labels_at(self.agent), 0.0, False)

    def step(self, action: int) -> StepResult:
        dr, dc = LETTER_MOVES[int(action)]
        r = min(max(self.agent[0] + dr, 0), self.n - 1)
        c = min(max(self.agent[1] + dc, 0), self.n - 1)
        self.agent = (r, c)
        self.steps += 1
        return StepResult(self._observation(), self._labels_at(self.agent), 0.0,
                          self.steps >= self.horizon)


def letter_chain_feasible(grid: np.ndarray, alphabet: list, start, chain) -> bool:
    """Can the chain of sub-tasks be completed on this layout?

    Multi-source BFS per segment: expand over cells not labeled with the
    segment's forbidden letters, collect every reachable cell holding the
    goal letter, and continue the next segment from all of them.  The
    source cells themselves are exempt from the forbidden check (the agent
    is already standing there; only arrivals count), but a source that
    already holds the goal still counts: the agent can step off onto any
    legal neighbor and step back, and only the re-arrival fires.
    """
    n_rows, n_cols = grid.shape
    index = {p: i for i, p in enumerate(alphabet)}
    frontier = {tuple(start)}
    for st in chain:
        if len(st.positives) != 1:
            raise ValueError(f"chain sub-tasks need a single goal, got {st}")
        goal = index[next(iter(st.positives))]
        blocked = {index[p] for p in st.negatives if p in index}
        visited = set(frontier)
        queue = deque(frontier)
        targets = set()
        for cell in frontier:
            if grid[cell] == goal and goal not in blocked and any(
                    0 <= cell[0] + dr < n_rows and 0 <= cell[1] + dc < n_cols
                    and not (grid[cell[0] + dr, cell[1] + dc] >= 0
                             and grid[cell[0] + dr, cell[1] + dc] in blocked)
                    for dr, dc in LETTER_MOVES):
                targets.add(cell)
        while queue:
            cell = queue.popleft()
            for dr, dc in LETTER_MOVES:
                nb = (cell[0] + dr, cell[1] + dc)
                if not (0 <= nb[0] < n_rows and 0 <= nb[1] < n_cols) or nb in visited:
                    continue
                v = grid[nb]
                if v >= 0 and v in blocked:
                    continue
                visited.add(nb)
                queue.append(nb)
                if v == goal:
                    targets.add(nb)
        if not targets:
            return False
        frontier = targets
    return True


# ---------------------------------------------------------------------------
# Region walk


class WalkEnv:
    """Point agent in [-1,10]^2 with dynamics x' = clamp(x + a/10).

    Each proposition owns one disk region of radius 0.6; labels are the
    regions containing the position.  Centers are redrawn on reset inside
    [0.5, 9.5]^2 with pairwise distance >= 1.3, so regions never overlap
    and the start (0,0) is always outside all of them.  A fixed layout
    mapping prop -> center pins the geometry instead.
    """

    LOW, HIGH = -1.0, 10.0
    RADIUS = 0.6

    def __init__(self, k: int = 5, horizon: int = 300,
                 rng: np.random.Generator | None = None,
                 fixed_layout: dict | None = None):
        if k > 26:
            raise ValueError("at most 26 propositions")
        self.k = k
        self.horizon = horizon
        self.rng = rng if rng is not None else np.random.default_rng()
        self.alphabet = list(string.ascii_lowercase[:k])
        if fixed_layout is not None and sorted(fixed_layout) != self.alphabet:
            raise ValueError("fixed layout must cover exactly the alphabet")
        self.fixed_layout = fixed_layout
        self.centers = np.zeros((k, 2))
        self.pos = np.zeros(2)
        self.steps = 0

    @property
    def obs_shape(self):
        return (2 + 2 * self.k,)

    action_dim = 2

    def _labels_at(self, pos) -> frozenset:
        d = np.linalg.norm(self.centers - pos, axis=1)
        return frozenset(self.alphabet[i] for i in np.nonzero(d <= self.RADIUS)[0])

    def _observation(self) -> np.ndarray:
        return np.concatenate([self.pos, (self.centers - self.pos).ravel()])

    def _draw_centers(self) -> None:
        placed = []
        while len(placed) < self.k:
            c = self.rng.uniform(0.5, 9.5, size=2)
            if all(np.linalg.norm(c - p) >= 1.3 for p in placed):
                placed.append(c)
        self.centers = np.array(placed)

    def reset(self) -> StepResult:
        if self.fixed_layout is not None:
            self.centers = np.array([self.fixed_layout[p] for p in self.alphabet],
                                    dtype=np.float64)
        else:
            self._draw_centers()
        self.pos = np.zeros(2)
        self.steps = 0
        return StepResult(self._observation(), self._labels_at(self.pos), 0.0, False)

    def step(self, action) -> StepResult:
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        self.pos = np.clip(self.pos + a / 10.0, self.LOW, self.HIGH)
        self.steps += 1
        return StepResult(self._observation(), self._labels_at(self.pos), 0.0,
                          self.steps >= self.horizon)


# ---------------------------------------------------------------------------
# Task monitor


@dataclass(frozen=True)
class Completion:
    subtask: SubTask
    t: int            # arrival step index (state index, 0-based)
    reward_sum: float  # discounted from the segment start
    length: int       # steps since the previous completion


@dataclass(frozen=True)
class MonitorEvent:
    completed: Completion | None
    edge: Edge | None
    graph_before: AbstractGraph
    remaining: AbstractGraph
    accepted: bool
    violation: str | None


class TaskMonitor:
    """Tracks progress of one episode through a compiled task graph.

    The current position is always node 0 of `remaining`; traversing an
    edge replaces `remaining` with the progressed graph.  Rewards are
    accumulated into the running segment before the transition scan, so a
    completing step's own reward lands in its segment:

        R_i = sum_{tau=t_{i-1}}^{t_i - 1} gamma^(tau - t_{i-1}) r_tau

    with t_i the arrival state index.  An edge only fires if its safety set
    held at every step since the segment began (a safe-set hit "poisons"
    that edge for the rest of the segment) and holds at the completing step
    itself, matching the declarative semantics.  Violations are only
    checked against the forbidden set of the assigned sub-task, and only
    when no edge fires: reaching a sibling's subgoal is progress, not a
    violation.
    """

    def __init__(self, graph: AbstractGraph, gamma: float = 0.99):
        self.gamma = gamma
        self.remaining = graph
        self.completions: list[Completion] = []
        self.t = 0
        self.violation: str | None = None
        self.ambiguous_events = 0
        self.assigned: Edge | None = None
        self._assigned_negatives: frozenset = frozenset()
        self._poisoned: set[Edge] = set()
        self._segment_start = 0
        self._running_r = 0.0
        self._power = 1.0

    @property
    def accepted(self) -> bool:
        return self.remaining.is_empty

    @property
    def finished(self) -> bool:
        return self.accepted or self.violation is not None

    def out_edges(self):
        return self.remaining.out_edges(0)

    def assign(self, edge: Edge) -> SubTask:
        """Declare the sub-task the agent is pursuing; returns it."""
        st = derive_edge_subtask(self.remaining, edge)
        self.assigned = edge
        self._assigned_negatives = st.negatives
        return st

    def clear_assignment(self) -> None:
        self.assigned = None
        self._assigned_negatives = frozenset()

    def _matches(self, labels) -> list[Edge]:
        return [e for e in self.out_edges()
                if e not in self._poisoned
                and e.symbol.positives <= labels
                and not ((e.symbol.negatives | e.safe) & labels)]

    def peek(self, labels) -> tuple[Edge | None, bool]:
        """Transition that `labels` would fire, and whether it finishes the task."""
        if self.finished:
            return None, self.accepted
        matches = self._matches(labels)
        if not matches:
            return None, False
        return matches[0], progress_task(self.remaining, matches[0]).is_empty

    def observe_initial(self, labels) -> MonitorEvent:
        """Process the reset state's labels (no reward attached)."""
        if self.t != 0 or self.completions:
            raise RuntimeError("observe_initial after stepping")
        return self._scan(labels)

    def update(self, labels, reward: float) -> MonitorEvent:
        """Consume one step's arrival labels and the transition's reward."""
        if self.finished:
            raise RuntimeError("monitor already finished")
        self._running_r += self._power * float(reward)
        self._power *= self.gamma
        self.t += 1
        return self._scan(labels)

    def _scan(self, labels) -> MonitorEvent:
        before = self.remaining
        matches = [] if self.accepted else self._matches(labels)
        if matches:
            if len(matches) > 1:
                self.ambiguous_events += 1
            edge = matches[0]
            comp = Completion(_completion_subtask(before, edge), self.t,
                              self._running_r, self.t - self._segment_start)
            self.completions.append(comp)
            self.remaining = progress_task(before, edge)
            self._segment_start = self.t
            self._running_r = 0.0
            self._power = 1.0
            self._poisoned = set()
            self.clear_assignment()
            return MonitorEvent(comp, edge, before, self.remaining, self.accepted, None)
        # a safe-set hit rules the edge out for the rest of this segment
        for e in self.out_edges():
            if e.safe & labels:
                self._poisoned.add(e)
        if self._assigned_negatives & labels:
            self.violation = min(self._assigned_negatives & labels)
            return MonitorEvent(None, None, before, before, False, self.violation)
        return MonitorEvent(None, None, before, before, self.accepted, None)


def _completion_subtask(graph: AbstractGraph, edge: Edge) -> SubTask:
    """Sub-task to record for a traversal; falls back to the bare symbol when
    sibling augmentation is contradictory (an edge no planner would assign
    can still fire if its labels show up)."""
    try:
        return derive_edge_subtask(graph, edge)
    except InfeasibleSubTaskError:
        return SubTask(edge.symbol.positives, edge.symbol.negatives | edge.safe)


def replay_labels(graph: AbstractGraph, trace, gamma: float = 0.99) -> TaskMonitor:
    """Run a monitor over a label sequence with no assignment (transitions only)."""
    mon = TaskMonitor(graph, gamma)
    steps = iter(trace)
    try:
        mon.observe_initial(frozenset(next(steps)))
    except StopIteration:
        return mon
    for labels in steps:
        if mon.finished:
            break
        mon.update(frozenset(labels), 0.0)
    return mon


# ---------------------------------------------------------------------------
# Rewards


@dataclass(frozen=True)
class BonusRule:
    """Order-conditioned bonus: reach `goal` after having reached `pre`
    (with `avoid` still unvisited at that earlier moment); paid once."""
    goal: str
    amount: float
    pre: str | None = None
    avoid: str | None = None


@dataclass
class RewardScheme:
    completion_reward: float = 1.0
    bonuses: tuple = ()

    def new_tracker(self) -> "BonusTracker":
        return BonusTracker(self)


@dataclass
class BonusTracker:
    scheme: RewardScheme
    visited: set = field(default_factory=set)
    pre_ok: set = field(default_factory=set)   # rule indices whose precondition fired
    granted: set = field(default_factory=set)

    def observe_initial(self, labels) -> None:
        self._advance(labels)

    def _advance(self, labels) -> None:
        self.visited |= labels
        for i, rule in enumerate(self.scheme.bonuses):
            if i in self.pre_ok:
                continue
            if rule.pre is None:
                self.pre_ok.add(i)
            elif rule.pre in self.visited and (rule.avoid is None
                                               or rule.avoid not in self.visited):
                self.pre_ok.add(i)

    def step_reward(self, labels, task_completed: bool) -> float:
        """Reward for arriving at a state with these labels."""
        self._advance(labels)
        r = self.scheme.completion_reward if task_completed else 0.0
        for i, rule in enumerate(self.scheme.bonuses):
            if i in self.granted or i not in self.pre_ok:
                continue
            if rule.goal in labels:
                r += rule.amount
                self.granted.add(i)
        return r
