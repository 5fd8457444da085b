"""Command-line front end.

Exit codes: 0 success, 1 user error (bad files, bad flags, failed
validation), 2 internal failure.  `SPECTRL_RUN_DIR` overrides the root that
run directories are created under when --run-dir is not given.
"""

from __future__ import annotations

import argparse
import os
import string
import sys
import tempfile
from pathlib import Path

import numpy as np

from spectrl import taskgen
from spectrl.config import (
    ConfigError,
    RunConfig,
    build_runner,
    format_config,
    load_config,
    load_task_file,
    with_seed,
)
from spectrl.envs import replay_labels
from spectrl.graph import (
    AbstractGraph,
    GraphError,
    compile_abstract_graph,
    graph_to_json,
)
from spectrl.logic import SpecError, parse_spec
from spectrl.nn.params import CheckpointError
from spectrl.orchestration import METRIC_COLUMNS, run_episode
from spectrl.taskgen import TaskGenError

_USER_ERRORS = (ConfigError, SpecError, GraphError, TaskGenError,
                CheckpointError, OSError)


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args) or 0
    except _USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything else is a bug, not a usage problem
        print(f"internal error: {e!r}", file=sys.stderr)
        return 2


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="spectrl",
        description="Compile reach/avoid task specs and train the "
                    "hierarchical agent on them.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a spec file to a task graph")
    c.add_argument("spec", help="spec file")
    c.add_argument("--dot", action="store_true", help="emit Graphviz DOT")
    c.add_argument("--json", action="store_true", help="emit the graph as JSON")
    c.set_defaults(func=cmd_compile)

    c = sub.add_parser("check", help="test a label trace against a spec")
    c.add_argument("spec", help="spec file")
    c.add_argument("trace", help="one line per state: its true propositions")
    c.set_defaults(func=cmd_check)

    c = sub.add_parser("gen-tasks", help="write a directory of random tasks")
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--count", type=int, default=10)
    c.add_argument("--kind", choices=("chain", "dag"), default="chain")
    c.add_argument("--depth", type=int, default=2, help="chain length")
    c.add_argument("--letters", type=int, default=5, help="alphabet size")
    c.add_argument("--neg-prob", type=float, default=0.25)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gen_tasks)

    c = sub.add_parser("play", help="roll out the policy and print outcomes")
    c.add_argument("--config", required=True)
    c.add_argument("--ckpt", help="checkpoint to load first")
    c.add_argument("--task", help="spec or task JSON; default: draw one")
    c.add_argument("--episodes", type=int, default=5)
    c.add_argument("--greedy", action="store_true")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_play)

    c = sub.add_parser("train", help="train a run to completion")
    c.add_argument("--config", required=True)
    c.add_argument("--seed", type=int, help="overrides the config seed")
    c.add_argument("--run-dir", help="explicit run directory")
    c.add_argument("--steps", type=int, help="overrides total_steps")
    c.add_argument("--resume", help="checkpoint to continue from")
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("eval", help="evaluate a checkpoint on held-out tasks")
    c.add_argument("--config", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--tasks", help="directory of task files")
    c.add_argument("--episodes", type=int, help="episodes per task")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("export-metrics", help="emit a run's metrics CSV")
    c.add_argument("run_dir")
    c.add_argument("--out", help="write here instead of stdout")
    c.set_defaults(func=cmd_export_metrics)
    return p


# ---------------------------------------------------------------------------
# spec handling


def _compile_file(path) -> AbstractGraph:
    return compile_abstract_graph(parse_spec(Path(path).read_text()))


def _edge_label(edge) -> str:
    parts = sorted(edge.symbol.positives)
    parts += [f"!{n}" for n in sorted(edge.symbol.negatives)]
    label = " & ".join(parts)
    if edge.safe:
        label += "  [safe: " + " ".join(f"!{s}" for s in sorted(edge.safe)) + "]"
    return label


def _dot(graph: AbstractGraph) -> str:
    lines = ["digraph task {", "  rankdir=LR;"]
    for q in range(graph.num_nodes):
        shape = "doublecircle" if q in graph.accepting else "circle"
        lines.append(f'  {q} [shape={shape}];')
    for e in graph.edges:
        lines.append(f'  {e.src} -> {e.dst} [label="{_edge_label(e)}"];')
    lines.append("}")
    return "\n".join(lines)


def cmd_compile(args) -> int:
    graph = _compile_file(args.spec)
    if args.dot:
        print(_dot(graph))
    elif args.json:
        print(graph_to_json(graph))
    else:
        acc = " ".join(str(q) for q in sorted(graph.accepting))
        print(f"nodes: {graph.num_nodes}  accepting: {acc}")
        for e in graph.edges:
            print(f"{e.src} -> {e.dst}  {_edge_label(e)}")
    return 0


def _read_trace(path) -> list[frozenset]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line in ("-", "."):
            out.append(frozenset())
            continue
        toks = line.replace(",", " ").split()
        for t in toks:
            if not (len(t) == 1 and t in string.ascii_lowercase):
                raise SpecError(f"bad trace token {t!r} (want single letters)")
        out.append(frozenset(toks))
    return out


def cmd_check(args) -> int:
    graph = _compile_file(args.spec)
    trace = _read_trace(args.trace)
    mon = replay_labels(graph, trace)
    print("SATISFIED" if mon.accepted else "VIOLATED")
    return 0


def cmd_gen_tasks(args) -> int:
    if args.letters < 1 or args.letters > 26:
        raise ConfigError("--letters must be in [1, 26]")
    if args.count < 1 or args.depth < 1:
        raise ConfigError("--count and --depth must be >= 1")
    alphabet = list(string.ascii_lowercase[:args.letters])
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        if args.kind == "chain":
            graph = compile_abstract_graph(taskgen.curriculum_task(
                args.depth, alphabet, rng, args.neg_prob))
        else:
            graph = taskgen.random_test_dag(alphabet, rng,
                                            neg_prob=args.neg_prob)
        path = out / f"task-{i:02d}.json"
        path.write_text(graph_to_json(graph))
        print(f"{path.name}: {graph.num_nodes} nodes, {len(graph.edges)} edges")
    return 0


# ---------------------------------------------------------------------------
# runs


def _resolve_run_dir(args, cfg: RunConfig, seed: int) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    root = Path(os.environ.get("SPECTRL_RUN_DIR", "runs"))
    return root / f"{cfg.env.name}-seed{seed}"


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.train.seed if args.seed is None else args.seed
    runner = build_runner(cfg, seed=seed)
    run_dir = _resolve_run_dir(args, cfg, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(format_config(with_seed(cfg, seed)))
    if args.resume:
        runner.restore(args.resume)
    total = cfg.train.total_steps if args.steps is None else args.steps
    runner.train(run_dir, total)
    print(f"run complete: {run_dir}")
    print(f"steps={runner.step} episodes={runner.episodes} "
          f"level={runner.curriculum.level}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    runner = build_runner(cfg, seed=args.seed)
    runner.restore(args.ckpt)
    if args.episodes is not None:
        if args.episodes < 1:
            raise ConfigError("--episodes must be >= 1")
        runner.cfg.eval_episodes = args.episodes
    tasks_dir = args.tasks or cfg.eval.tasks_dir or tempfile.mkdtemp(
        prefix="spectrl-eval-")
    runner.prepare_eval_tasks(tasks_dir)
    for key, value in sorted(runner.evaluate().items()):
        print(f"{key} = {value}")
    return 0


def cmd_play(args) -> int:
    cfg = load_config(args.config)
    runner = build_runner(cfg, seed=args.seed)
    if args.ckpt:
        runner.restore(args.ckpt)
    if args.task:
        alphabet = list(string.ascii_lowercase[:cfg.env.letters])
        graph = load_task_file(args.task, alphabet)
        chains = runner._chains_for(graph)
    else:
        graph, chains = runner.draw_task()
    for i in range(args.episodes):
        res = run_episode(runner.env, graph, runner.high, runner.low,
                          runner.rng_agent, runner.cfg.gamma, runner.scheme,
                          greedy=args.greedy, chains=chains, collect=False)
        ep = res.episode
        outcome = "success" if ep.success else (
            f"violation:{ep.violation}" if ep.violation else "timeout")
        print(f"episode {i}: steps={ep.steps} return={res.reward_total!r} "
              f"completions={len(ep.completions)} {outcome}")
    return 0


def cmd_export_metrics(args) -> int:
    path = Path(args.run_dir) / "metrics.csv"
    text = path.read_text()
    header = text.splitlines()[0] if text else ""
    if header != ",".join(METRIC_COLUMNS):
        raise ConfigError(f"{path}: not a metrics file (unexpected header)")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    main()
