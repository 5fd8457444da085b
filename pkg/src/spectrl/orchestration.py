"""Training orchestration: episode collection through the task monitor, a
replay buffer feeding counterfactual relabeling, scheduled policy updates,
curriculum, evaluation, and checkpointed resumable run state.

One run owns four RNG streams spawned from a single seed (env, task, agent,
eval) so layout draws, task draws, action sampling, and held-out evaluation
never perturb each other.  Everything mutable lives on the Runner and is
serialized into a single checkpoint file, which makes resumed runs bitwise
identical to uninterrupted ones.
"""

from __future__ import annotations

import inspect
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spectrl import taskgen
from spectrl.envs import Completion, RewardScheme, TaskMonitor
from spectrl.graph import (
    EMPTY_GRAPH,
    AbstractGraph,
    InfeasibleSubTaskError,
    SubTask,
    compile_abstract_graph,
    derive_edge_subtask,
    graph_from_json,
    graph_signature,
    graph_to_json,
    progress_task,
)
from spectrl.high_level import HighConfig, HighLevel, HighTransition
from spectrl.low_level import (
    AvoidanceConfig,
    LowConfig,
    LowInput,
    LowLevel,
    LowTransition,
)
from spectrl.nn.params import (
    ParamStore,
    load_rng_state,
    read_checkpoint,
    rng_state_blob,
    write_checkpoint,
)

__all__ = [
    "METRIC_COLUMNS",
    "TrainConfig",
    "Episode",
    "EpisodeResult",
    "ReplayBuffer",
    "run_episode",
    "episode_high_transitions",
    "relabel_high_transitions",
    "Runner",
]

METRIC_COLUMNS = (
    "step",
    "level",
    "eval_avg_return",
    "eval_success_rate",
    "eval_violation_rate",
    "high_policy_loss",
    "high_value_loss",
    "transe_loss",
    "low_policy_loss",
    "low_value_loss",
    "q_aux_loss",
    "ambiguous_edge_count",
)

_LOSS_KEYS = (
    "high_policy_loss",
    "high_value_loss",
    "transe_loss",
    "low_policy_loss",
    "low_value_loss",
    "q_aux_loss",
)


@dataclass
class TrainConfig:
    total_steps: int = 200_000
    gamma: float = 0.99
    low_interval: int = 2048     # env steps between controller updates
    high_interval: int = 64      # completed sub-tasks between planner updates
    eval_interval: int = 50_000
    eval_task_count: int = 10
    eval_episodes: int = 100
    eval_task_kind: str = "chain"
    eval_task_depth: int = 2
    replay_capacity: int = 500
    relabel: bool = True         # the no-relabeling ablation sets this False
    neg_prob: float = 0.25
    curriculum_cap: int = 4
    curriculum_window: int = 100
    curriculum_threshold: float = 0.95
    eval_greedy: bool = True     # False samples eval actions from the policy
    checkpoints: bool = True

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        for name in ("low_interval", "high_interval", "eval_interval",
                     "eval_task_count", "eval_episodes", "eval_task_depth",
                     "replay_capacity", "curriculum_cap", "curriculum_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.neg_prob < 1.0:
            raise ValueError("neg_prob must be in [0, 1)")
        if not 0.0 < self.curriculum_threshold <= 1.0:
            raise ValueError("curriculum_threshold must be in (0, 1]")
        if self.eval_task_kind not in ("chain", "dag"):
            raise ValueError(f"unknown eval task kind {self.eval_task_kind!r}")


# ---------------------------------------------------------------------------
# Episodes and replay


@dataclass(frozen=True)
class Episode:
    """One finished rollout under a fixed task.

    `states` has one more entry than `rewards`; `labels[t]` is the label set
    of `states[t]`.  `actions[t]` is what the update replays (equal to the
    executed action for discrete controllers, the pre-squash sample for
    continuous ones).  Completions come straight from the monitor.
    """

    graph: AbstractGraph
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    labels: tuple
    completions: tuple
    success: bool
    violation: str | None
    level: int

    @property
    def steps(self) -> int:
        return len(self.rewards)


@dataclass(frozen=True)
class EpisodeResult:
    episode: Episode
    low_transitions: list
    n_completions: int          # completions usable as planner transitions
    reward_total: float
    ambiguous_events: int


class ReplayBuffer:
    """FIFO buffer of complete episodes; old ones fall off at capacity."""

    def __init__(self, capacity: int = 500):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episodes: deque = deque(maxlen=capacity)

    def add(self, episode: Episode) -> None:
        self._episodes.append(episode)

    def sample(self, rng: np.random.Generator) -> Episode:
        if not self._episodes:
            raise ValueError("replay buffer is empty")
        return self._episodes[int(rng.integers(len(self._episodes)))]

    def __len__(self) -> int:
        return len(self._episodes)

    def __iter__(self):
        return iter(self._episodes)


def _squash_raw(action: np.ndarray) -> np.ndarray:
    # pre-squash coordinates of an externally chosen action
    return np.arctanh(np.clip(action, -1.0 + 1e-6, 1.0 - 1e-6))


def run_episode(env, graph: AbstractGraph, high: HighLevel, low: LowLevel,
                rng: np.random.Generator, gamma: float,
                scheme: RewardScheme | None = None, greedy: bool = False,
                chains=None, level: int = 1, collect: bool = True) -> EpisodeResult:
    """Roll out one episode of `graph` on `env`.

    The planner picks an edge at every sub-task boundary, the controller
    (with its avoidance override) acts until the monitor fires a transition,
    and the reward scheme pays completion and bonus rewards on arrival
    labels.  Terminates on acceptance, violation, or the env horizon.
    """
    scheme = scheme or RewardScheme()
    first = env.reset(chains=chains) if chains is not None else env.reset()
    monitor = TaskMonitor(graph, gamma)
    monitor.observe_initial(first.labels)
    tracker = scheme.new_tracker()
    tracker.observe_initial(first.labels)

    obs = first.observation
    states = [obs]
    labels = [first.labels]
    actions, rewards, low_trs = [], [], []
    total = 0.0

    sub, future = None, EMPTY_GRAPH
    if not monitor.finished:
        plan = high.plan(obs, monitor.remaining, rng, greedy=greedy)
        sub = monitor.assign(plan.edge)
        future = progress_task(monitor.remaining, plan.edge)

    done = monitor.finished
    while not done:
        inp = low.assemble(obs, sub, future)
        decided = low.act(inp, rng, greedy=greedy)
        action = low.avoidance_action(inp, decided.action, rng)
        if low.cfg.continuous:
            raw = decided.raw if action is decided.action else _squash_raw(action)
        else:
            raw = int(action)

        step = env.step(action)
        _, finishes = monitor.peek(step.labels)
        r = step.reward + tracker.step_reward(step.labels, finishes)
        event = monitor.update(step.labels, r)
        done = step.done or monitor.finished
        total += r
        states.append(step.observation)
        labels.append(step.labels)
        actions.append(raw)
        rewards.append(r)

        completed = event.completed is not None
        v_high = None
        if completed and not monitor.finished:
            plan = high.plan(step.observation, monitor.remaining, rng, greedy=greedy)
            v_high = plan.value
            sub = monitor.assign(plan.edge)
            future = progress_task(monitor.remaining, plan.edge)
        elif completed:
            v_high = 0.0        # nothing left to pursue
            future = EMPTY_GRAPH
        if collect:
            nxt = low.assemble(step.observation, sub, future)
            low_trs.append(LowTransition(inp, raw, r, nxt, done, completed, v_high))
        obs = step.observation

    episode = Episode(
        graph=graph,
        states=np.stack(states),
        actions=np.asarray(actions, dtype=float),
        rewards=np.asarray(rewards, dtype=float),
        labels=tuple(labels),
        completions=tuple(monitor.completions),
        success=monitor.accepted,
        violation=monitor.violation,
        level=level,
    )
    usable = sum(1 for c in monitor.completions if c.length > 0)
    return EpisodeResult(episode, low_trs, usable, total, monitor.ambiguous_events)


# ---------------------------------------------------------------------------
# Rebuilding planner transitions from stored episodes


def _match_completion(graph: AbstractGraph, comp) -> tuple:
    for edge in graph.out_edges(0):
        try:
            st = derive_edge_subtask(graph, edge)
        except InfeasibleSubTaskError:
            st = SubTask(edge.symbol.positives, edge.symbol.negatives | edge.safe)
        if st == comp.subtask:
            return edge, progress_task(graph, edge)
    raise ValueError(f"no edge of the stored graph matches completion {comp}")


def episode_high_transitions(episode: Episode) -> list[HighTransition]:
    """Replay an episode's completions into planner transitions.

    Zero-length completions (fired by the reset labels) carry no decision and
    are skipped; so is any transition that fails to progress the task, which
    keeps the update set clean even for degenerate graphs.
    """
    out: list[HighTransition] = []
    g = episode.graph
    prev_t = 0
    for comp in episode.completions:
        edge, nxt = _match_completion(g, comp)
        if comp.length > 0 and graph_signature(nxt) != graph_signature(g):
            out.append(HighTransition(
                state=episode.states[prev_t],
                graph=g,
                edge=edge,
                subtask=comp.subtask,
                reward=comp.reward_sum,
                dt=comp.length,
                next_state=episode.states[comp.t],
                next_graph=nxt,
            ))
        g = nxt
        prev_t = comp.t
    return out


def relabel_high_transitions(tree: taskgen.RelabelTree,
                             episode: Episode) -> list[HighTransition]:
    """Planner transitions for a relabeled task, reusing the episode's
    segment rewards (the relabeled graph fires at the same steps)."""
    out: list[HighTransition] = []
    g = tree.graph
    prev_t = 0
    for bedge, comp in zip(tree.backbone, episode.completions):
        cands = [e for e in g.out_edges(0)
                 if e.symbol == bedge.symbol and e.safe == bedge.safe]
        if len(cands) != 1:
            raise ValueError("relabeled backbone edge is not unique")
        edge = cands[0]
        st = derive_edge_subtask(g, edge)
        nxt = progress_task(g, edge)
        if comp.length > 0:
            out.append(HighTransition(
                state=episode.states[prev_t],
                graph=g,
                edge=edge,
                subtask=st,
                reward=comp.reward_sum,
                dt=comp.length,
                next_state=episode.states[comp.t],
                next_graph=nxt,
            ))
        g = nxt
        prev_t = comp.t
    return out


# ---------------------------------------------------------------------------
# Runner


class Runner:
    """Owns one training run: envs, modules, buffers, counters, streams.

    `env_factory(rng)` must build a fresh environment drawing all of its
    randomness from `rng`; it is called twice, once for training and once
    for evaluation, so the two never share layouts.
    """

    def __init__(self, env_factory, seed: int, cfg: TrainConfig | None = None,
                 high_config: HighConfig | None = None,
                 low_config: LowConfig | None = None,
                 avoidance: AvoidanceConfig | None = None,
                 scheme: RewardScheme | None = None,
                 eval_tasks: list[AbstractGraph] | None = None):
        self.cfg = cfg or TrainConfig()
        streams = np.random.SeedSequence(seed).spawn(4)
        self.rng_env = np.random.default_rng(streams[0])
        self.rng_task = np.random.default_rng(streams[1])
        self.rng_agent = np.random.default_rng(streams[2])
        self.rng_eval = np.random.default_rng(streams[3])

        self.env = env_factory(self.rng_env)
        self.eval_env = env_factory(self.rng_eval)
        self.alphabet = list(self.env.alphabet)
        self._env_chains = "chains" in inspect.signature(self.env.reset).parameters

        self.store = ParamStore(self.rng_agent)
        self.high = HighLevel(self.store, self.alphabet, self.env.obs_shape,
                              high_config)
        self.low = LowLevel(self.store, self.alphabet, self.env.obs_shape,
                            low_config, avoidance)
        for gamma in (self.high.cfg.gamma, self.low.cfg.gamma):
            if abs(gamma - self.cfg.gamma) > 1e-12:
                raise ValueError("module gammas must match the run gamma")
        if self.low.cfg.continuous == hasattr(self.env, "n_actions"):
            raise ValueError("controller kind does not match the environment")

        self.scheme = scheme or RewardScheme()
        self.replay = ReplayBuffer(self.cfg.replay_capacity)
        self.low_buffer: list[LowTransition] = []
        self.curriculum = taskgen.CurriculumState(
            cap=self.cfg.curriculum_cap,
            window_size=self.cfg.curriculum_window,
            threshold=self.cfg.curriculum_threshold,
        )
        self.step = 0
        self.episodes = 0
        self.high_pending = 0
        self.evals_done = 0
        self.ambiguous_total = 0
        self.last_losses = {k: 0.0 for k in _LOSS_KEYS}
        self._eval_tasks = None
        if eval_tasks is not None:
            self._eval_tasks = [(g, self._chains_for(g)) for g in eval_tasks]

    def _chains_for(self, graph: AbstractGraph):
        return taskgen.graph_chains(graph) if self._env_chains else None

    # ------------------------------------------------------------------
    # task sampling

    def draw_task(self) -> tuple[AbstractGraph, object]:
        spec = taskgen.curriculum_task(self.curriculum.level, self.alphabet,
                                       self.rng_task, self.cfg.neg_prob)
        graph = compile_abstract_graph(spec)
        return graph, self._chains_for(graph)

    def _make_eval_task(self) -> AbstractGraph:
        if self.cfg.eval_task_kind == "dag":
            return taskgen.random_test_dag(self.alphabet, self.rng_eval,
                                           neg_prob=self.cfg.neg_prob)
        spec = taskgen.curriculum_task(self.cfg.eval_task_depth, self.alphabet,
                                       self.rng_eval, self.cfg.neg_prob)
        return compile_abstract_graph(spec)

    def prepare_eval_tasks(self, directory) -> None:
        """Load eval tasks from `directory`, or generate and persist them.

        Generation draws from the held-out eval stream; loading draws
        nothing, which is what makes resumed runs line up.
        """
        if self._eval_tasks is not None:
            directory = Path(directory)
            directory.mkdir(parents=True, exist_ok=True)
            for i, (g, _) in enumerate(self._eval_tasks):
                path = directory / f"task-{i:02d}.json"
                if not path.exists():
                    path.write_text(graph_to_json(g))
            return
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = sorted(directory.glob("task-*.json"))
        if files:
            graphs = [graph_from_json(f.read_text()) for f in files]
        else:
            graphs = [self._make_eval_task()
                      for _ in range(self.cfg.eval_task_count)]
            for i, g in enumerate(graphs):
                (directory / f"task-{i:02d}.json").write_text(graph_to_json(g))
        self._eval_tasks = [(g, self._chains_for(g)) for g in graphs]

    # ------------------------------------------------------------------
    # training

    def train_episode(self) -> EpisodeResult:
        """Collect one episode on the training env and run any due updates."""
        graph, chains = self.draw_task()
        res = run_episode(self.env, graph, self.high, self.low, self.rng_agent,
                          self.cfg.gamma, self.scheme, chains=chains,
                          level=self.curriculum.level)
        ep = res.episode
        self.replay.add(ep)
        self.low_buffer.extend(res.low_transitions)
        self.high_pending += res.n_completions
        self.step += ep.steps
        self.episodes += 1
        self.ambiguous_total += res.ambiguous_events
        taskgen.should_advance(self.curriculum, ep.success)
        if len(self.low_buffer) >= self.cfg.low_interval:
            report = self.low.low_update(self.low_buffer, self.rng_agent)
            self.low_buffer = []
            self.last_losses.update(report)
        if self.high_pending >= self.cfg.high_interval and len(self.replay):
            batch = self.gather_high_batch()
            if batch:
                report = self.high.high_update(batch, self.rng_agent)
                self.last_losses.update(report)
                self.high_pending = 0
        return res

    def gather_high_batch(self) -> list[HighTransition]:
        """Sample stored episodes until enough real planner transitions are
        in hand; optionally pair each episode with a relabeled variant.

        Only progressing transitions are kept, so the batch satisfies the
        "task must change" requirement by construction.
        """
        want = self.cfg.high_interval
        real: list[HighTransition] = []
        extra: list[HighTransition] = []
        tries = 0
        while len(real) < want and tries < 8 * want:
            tries += 1
            ep = self.replay.sample(self.rng_agent)
            real.extend(episode_high_transitions(ep))
            if self.cfg.relabel and ep.completions:
                tree = taskgen.relabel_trajectory(
                    list(ep.labels), list(ep.completions), self.alphabet,
                    self.rng_task, self.cfg.neg_prob)
                if tree is not None:
                    extra.extend(relabel_high_transitions(tree, ep))
        return real + extra

    # ------------------------------------------------------------------
    # evaluation

    def evaluate(self) -> dict:
        """Rollouts on the held-out tasks; touches no training state."""
        if self._eval_tasks is None:
            raise RuntimeError("call prepare_eval_tasks first")
        returns, successes, violations, lengths = [], [], [], []
        for graph, chains in self._eval_tasks:
            for _ in range(self.cfg.eval_episodes):
                res = run_episode(self.eval_env, graph, self.high, self.low,
                                  self.rng_eval, self.cfg.gamma, self.scheme,
                                  greedy=self.cfg.eval_greedy, chains=chains,
                                  collect=False)
                returns.append(res.reward_total)
                successes.append(res.episode.success)
                violations.append(res.episode.violation is not None)
                if res.episode.success:
                    lengths.append(res.episode.steps)
        return {
            "eval_avg_return": float(np.mean(returns)),
            "eval_success_rate": float(np.mean(successes)),
            "eval_violation_rate": float(np.mean(violations)),
            "eval_avg_steps": float(np.mean(lengths)) if lengths else float("nan"),
        }

    # ------------------------------------------------------------------
    # the run loop

    def train(self, run_dir, total_steps: int | None = None) -> None:
        """Train to `total_steps`, writing metrics, eval tasks, and
        checkpoints under `run_dir`.  Call `restore` first to resume; the
        metrics file is then appended to instead of rewritten."""
        total = self.cfg.total_steps if total_steps is None else total_steps
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        self.prepare_eval_tasks(run_dir / "eval-tasks")

        metrics = run_dir / "metrics.csv"
        fresh = self.step == 0 and self.evals_done == 0
        with open(metrics, "w" if fresh else "a") as fh:
            if fresh:
                fh.write(",".join(METRIC_COLUMNS) + "\n")
            self._flush_evals(fh, run_dir, total)
            while self.step < total:
                self.train_episode()
                self._flush_evals(fh, run_dir, total)

    def _flush_evals(self, fh, run_dir: Path, total: int) -> None:
        while True:
            due = self.evals_done * self.cfg.eval_interval
            if due > self.step or due > total:
                return
            row = dict(self.last_losses)
            row.update(self.evaluate())
            row["step"] = due
            row["level"] = self.curriculum.level
            row["ambiguous_edge_count"] = self.ambiguous_total
            fh.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")
            fh.flush()
            self.evals_done += 1
            if self.cfg.checkpoints:
                self.save_checkpoint(run_dir / "checkpoints" / f"step-{due}.ckpt")

    # ------------------------------------------------------------------
    # checkpointing

    def save_checkpoint(self, path) -> None:
        arrays = dict(self.store.state_arrays("params"))
        arrays.update(self.high.opt.state_arrays("opt-high"))
        arrays.update(self.low.opt.state_arrays("opt-low"))
        arrays["run/scalars"] = np.array([
            self.step, self.episodes, self.high_pending, self.evals_done,
            self.ambiguous_total, self.store.version,
        ], dtype=float)
        arrays["run/curriculum"] = np.array(
            [self.curriculum.level] + [float(b) for b in self.curriculum.window])
        blobs = {
            "rng/env": rng_state_blob(self.rng_env),
            "rng/task": rng_state_blob(self.rng_task),
            "rng/agent": rng_state_blob(self.rng_agent),
            "rng/eval": rng_state_blob(self.rng_eval),
            "run/losses": json.dumps(self.last_losses, sort_keys=True).encode(),
        }
        for i, ep in enumerate(self.replay):
            _write_episode(arrays, blobs, f"replay/{i:05d}", ep)
        for i, tr in enumerate(self.low_buffer):
            _write_low_transition(arrays, blobs, f"pending/{i:05d}", tr)
        write_checkpoint(path, arrays, blobs)

    def restore(self, path) -> None:
        arrays, blobs = read_checkpoint(path)
        self.store.load_state(arrays, "params")
        self.high.opt.load_state(arrays, "opt-high")
        self.low.opt.load_state(arrays, "opt-low")
        load_rng_state(self.rng_env, blobs["rng/env"])
        load_rng_state(self.rng_task, blobs["rng/task"])
        load_rng_state(self.rng_agent, blobs["rng/agent"])
        load_rng_state(self.rng_eval, blobs["rng/eval"])
        scalars = arrays["run/scalars"]
        self.step = int(scalars[0])
        self.episodes = int(scalars[1])
        self.high_pending = int(scalars[2])
        self.evals_done = int(scalars[3])
        self.ambiguous_total = int(scalars[4])
        self.store.version = int(scalars[5])
        cur = arrays["run/curriculum"]
        self.curriculum = taskgen.CurriculumState(
            level=int(cur[0]),
            cap=self.cfg.curriculum_cap,
            window_size=self.cfg.curriculum_window,
            threshold=self.cfg.curriculum_threshold,
            window=deque(bool(b) for b in cur[1:]),
        )
        self.last_losses = json.loads(blobs["run/losses"].decode())
        self.replay = ReplayBuffer(self.cfg.replay_capacity)
        for prefix in _prefixes(blobs, "replay/"):
            self.replay.add(_read_episode(arrays, blobs, prefix))
        self.low_buffer = [
            _read_low_transition(arrays, blobs, prefix)
            for prefix in _prefixes(blobs, "pending/")
        ]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# checkpoint payload helpers


def _subtask_obj(st: SubTask) -> dict:
    return {"pos": sorted(st.positives), "neg": sorted(st.negatives)}


def _subtask_from(obj: dict) -> SubTask:
    return SubTask(frozenset(obj["pos"]), frozenset(obj["neg"]))


def _write_episode(arrays: dict, blobs: dict, prefix: str, ep: Episode) -> None:
    arrays[f"{prefix}/states"] = ep.states
    arrays[f"{prefix}/actions"] = ep.actions
    arrays[f"{prefix}/rewards"] = ep.rewards
    meta = {
        "graph": graph_to_json(ep.graph),
        "labels": [sorted(ls) for ls in ep.labels],
        "completions": [
            {"subtask": _subtask_obj(c.subtask), "t": c.t,
             "reward_sum": c.reward_sum, "length": c.length}
            for c in ep.completions
        ],
        "success": ep.success,
        "violation": ep.violation,
        "level": ep.level,
    }
    blobs[f"{prefix}/meta"] = json.dumps(meta, sort_keys=True).encode()


def _read_episode(arrays: dict, blobs: dict, prefix: str) -> Episode:
    meta = json.loads(blobs[f"{prefix}/meta"].decode())
    completions = tuple(
        Completion(_subtask_from(c["subtask"]), int(c["t"]),
                   float(c["reward_sum"]), int(c["length"]))
        for c in meta["completions"]
    )
    return Episode(
        graph=graph_from_json(meta["graph"]),
        states=arrays[f"{prefix}/states"],
        actions=arrays[f"{prefix}/actions"],
        rewards=arrays[f"{prefix}/rewards"],
        labels=tuple(frozenset(ls) for ls in meta["labels"]),
        completions=completions,
        success=bool(meta["success"]),
        violation=meta["violation"],
        level=int(meta["level"]),
    )


def _write_low_transition(arrays: dict, blobs: dict, prefix: str,
                          tr: LowTransition) -> None:
    arrays[f"{prefix}/obs"] = tr.inp.obs
    arrays[f"{prefix}/next_obs"] = tr.next_inp.obs
    arrays[f"{prefix}/action"] = np.asarray(tr.action, dtype=float)
    meta = {
        "pos": tr.inp.pos_bits.tolist(),
        "neg": tr.inp.neg_bits.tolist(),
        "future": graph_to_json(tr.inp.future),
        "next_pos": tr.next_inp.pos_bits.tolist(),
        "next_neg": tr.next_inp.neg_bits.tolist(),
        "next_future": graph_to_json(tr.next_inp.future),
        "reward": tr.reward,
        "done": tr.done,
        "completed": tr.completed,
        "v_high": tr.v_high,
        "discrete": not isinstance(tr.action, np.ndarray),
    }
    blobs[f"{prefix}/meta"] = json.dumps(meta, sort_keys=True).encode()


def _read_low_transition(arrays: dict, blobs: dict, prefix: str) -> LowTransition:
    meta = json.loads(blobs[f"{prefix}/meta"].decode())
    inp = LowInput(arrays[f"{prefix}/obs"],
                   np.asarray(meta["pos"], dtype=float),
                   np.asarray(meta["neg"], dtype=float),
                   graph_from_json(meta["future"]))
    nxt = LowInput(arrays[f"{prefix}/next_obs"],
                   np.asarray(meta["next_pos"], dtype=float),
                   np.asarray(meta["next_neg"], dtype=float),
                   graph_from_json(meta["next_future"]))
    action = arrays[f"{prefix}/action"]
    if meta["discrete"]:
        action = int(action)
    return LowTransition(inp, action, float(meta["reward"]), nxt,
                         bool(meta["done"]), bool(meta["completed"]),
                         meta["v_high"])


def _prefixes(blobs: dict, head: str) -> list[str]:
    out = sorted(k[: -len("/meta")] for k in blobs
                 if k.startswith(head) and k.endswith("/meta"))
    return out
