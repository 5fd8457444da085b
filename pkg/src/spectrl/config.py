"""Run configuration: sectioned plain-text files, validation, and builders.

The format is INI-style with four sections (env, model, train, eval), every
key optional, and no code in configs.  `format_config` materializes all
defaults so the echo written into a run directory is itself loadable and
resolves to the identical RunConfig.
"""

from __future__ import annotations

import configparser
import string
from dataclasses import dataclass, fields, replace
from pathlib import Path

from spectrl.envs import BonusRule, LetterEnv, RewardScheme, WalkEnv
from spectrl.graph import compile_abstract_graph, graph_from_json
from spectrl.high_level import HighConfig
from spectrl.logic import parse_spec
from spectrl.low_level import AvoidanceConfig, LowConfig
from spectrl.orchestration import Runner, TrainConfig

__all__ = ["ConfigError", "EnvBlock", "ModelBlock", "TrainBlock", "EvalBlock",
           "RunConfig", "load_config", "loads_config", "format_config",
           "build_runner"]

MAGIC = "# spectrl config v1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvBlock:
    name: str = "letter"            # letter | walk
    grid: int = 7                   # board side (letter only)
    cells: int = 10                 # lettered cells (letter only)
    letters: int = 5                # alphabet size
    horizon: int = 100
    completion_reward: float = 1.0
    bonuses: tuple = ()             # BonusRule entries
    layout: tuple = ()              # walk only: ((prop, x, y), ...) fixed disks


@dataclass(frozen=True)
class ModelBlock:
    latent: int = 64                # latent state size, both levels
    gnn_dim: int = 64               # planner node feature size
    gnn_steps: int = 8              # message passing rounds, planner
    future_dim: int = 32            # controller task embedding size
    low_gnn_steps: int = 8
    activation: str = "relu"
    conv: tuple = ()                # conv encoder channels; empty = MLP
    enc_hidden: tuple = (128, 128)
    trans_hidden: tuple = (128, 128, 128)
    gnn_hidden: tuple = ()          # empty = one hidden layer of gnn_dim
    policy_hidden: tuple = (128, 128, 128)
    value_hidden: tuple = (128, 128)
    actor_hidden: tuple = (64, 64, 64)
    critic_hidden: tuple = (64, 64)
    reach_hidden: tuple = (64, 64)


@dataclass(frozen=True)
class TrainBlock:
    seed: int = 0
    total_steps: int = 200_000
    gamma: float = 0.99
    lr: float = 3e-4
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    vf_coef: float = 0.5
    reach_coef: float = 0.5
    gae_lambda: float = 0.95
    transe_weight: float = 0.01     # file key: lambda
    margin: float = 1.0             # file key: xi
    nu: float = 0.9
    avoid_candidates: int = 16
    levels: int = 4                 # curriculum cap
    window: int = 100
    threshold: float = 0.95
    low_interval: int = 2048
    high_interval: int = 64
    epochs: int = 4
    minibatch: int = 256
    replay: int = 500
    neg_prob: float = 0.25
    relabel: bool = True
    myopic: bool = False


@dataclass(frozen=True)
class EvalBlock:
    interval: int = 50_000
    tasks: int = 10
    episodes: int = 100
    depth: int = 2
    kind: str = "chain"
    greedy: bool = True             # False samples actions during evaluation
    tasks_dir: str = ""             # explicit task files override generation


@dataclass(frozen=True)
class RunConfig:
    env: EnvBlock = EnvBlock()
    model: ModelBlock = ModelBlock()
    train: TrainBlock = TrainBlock()
    eval: EvalBlock = EvalBlock()


# ---------------------------------------------------------------------------
# parsing and formatting


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple:
    t = text.strip()
    if not t:
        return ()
    try:
        return tuple(int(p) for p in t.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"expected comma-separated ints, got {text!r}") from None


def _fmt_int_tuple(val: tuple) -> str:
    return ",".join(str(v) for v in val)


def _parse_bonuses(text: str) -> tuple:
    rules = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        toks = part.split()
        if len(toks) < 3 or toks[1] != "for":
            raise ConfigError(
                f"bonus rule {part!r}: expected '<amount> for <goal> "
                f"[after <prop>] [unless <prop>]'")
        try:
            amount = float(toks[0])
        except ValueError:
            raise ConfigError(f"bonus rule {part!r}: bad amount {toks[0]!r}") from None
        goal, pre, avoid = toks[2], None, None
        rest = toks[3:]
        while rest:
            if rest[0] == "after" and len(rest) > 1 and pre is None:
                pre, rest = rest[1], rest[2:]
            elif rest[0] == "unless" and len(rest) > 1 and avoid is None:
                avoid, rest = rest[1], rest[2:]
            else:
                raise ConfigError(f"bonus rule {part!r}: cannot parse {rest!r}")
        rules.append(BonusRule(goal, amount, pre, avoid))
    return tuple(rules)


def _fmt_bonuses(rules: tuple) -> str:
    parts = []
    for r in rules:
        s = f"{r.amount!r} for {r.goal}"
        if r.pre is not None:
            s += f" after {r.pre}"
        if r.avoid is not None:
            s += f" unless {r.avoid}"
        parts.append(s)
    return ", ".join(parts)


def _parse_layout(text: str) -> tuple:
    out = []
    for item in text.split():
        try:
            sym, coords = item.split(":")
            x, y = coords.split(",")
            out.append((sym, float(x), float(y)))
        except ValueError:
            raise ConfigError(
                f"layout item {item!r}: expected 'prop:x,y'") from None
    return tuple(out)


def _fmt_layout(val: tuple) -> str:
    return " ".join(f"{s}:{x!r},{y!r}" for s, x, y in val)


# file key -> (attribute, parse, format); identity attribute unless renamed
_SPECIAL = {
    ("env", "bonuses"): (_parse_bonuses, _fmt_bonuses),
    ("env", "layout"): (_parse_layout, _fmt_layout),
}
_RENAMES = {("train", "lambda"): "transe_weight", ("train", "xi"): "margin"}

_BLOCKS = {"env": EnvBlock, "model": ModelBlock, "train": TrainBlock,
           "eval": EvalBlock}


def _schema(section: str) -> dict:
    """file key -> (attr, parse, fmt) for one section."""
    cls = _BLOCKS[section]
    attr_to_key = {attr: key for (sec, key), attr in _RENAMES.items()
                   if sec == section}
    out = {}
    for f in fields(cls):
        key = attr_to_key.get(f.name, f.name)
        if (section, key) in _SPECIAL:
            parse, fmt = _SPECIAL[(section, key)]
        elif f.type == "bool" or isinstance(f.default, bool):
            parse, fmt = _parse_bool, lambda v: "true" if v else "false"
        elif isinstance(f.default, int):
            parse, fmt = int, str
        elif isinstance(f.default, float):
            parse, fmt = float, repr
        elif isinstance(f.default, tuple):
            parse, fmt = _parse_int_tuple, _fmt_int_tuple
        else:
            parse, fmt = lambda s: s.strip(), str
        out[key] = (f.name, parse, fmt)
    return out


def loads_config(text: str) -> RunConfig:
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("# spectrl config") and stripped != MAGIC:
            raise ConfigError(f"unsupported config version line: {stripped!r}")
        break
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from None

    blocks = {}
    for section in parser.sections():
        if section not in _BLOCKS:
            raise ConfigError(f"unknown section [{section}]")
        schema = _schema(section)
        values = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            attr, parse, _ = schema[key]
            try:
                values[attr] = parse(raw)
            except ConfigError:
                raise
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}") from None
        blocks[section] = _BLOCKS[section](**values)
    cfg = RunConfig(**{name: blocks.get(name, cls())
                       for name, cls in _BLOCKS.items()})
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    return loads_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    """All keys materialized, loadable, resolving back to `cfg`."""
    lines = [MAGIC, ""]
    for section, cls in _BLOCKS.items():
        block = getattr(cfg, section)
        lines.append(f"[{section}]")
        for key, (attr, _, fmt) in _schema(section).items():
            lines.append(f"{key} = {fmt(getattr(block, attr))}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# validation


def _require(ok: bool, where: str, what: str) -> None:
    if not ok:
        raise ConfigError(f"{where}: {what}")


def _validate(cfg: RunConfig) -> None:
    env, model, train, ev = cfg.env, cfg.model, cfg.train, cfg.eval

    _require(env.name in ("letter", "walk"), "[env] name",
             f"must be 'letter' or 'walk', got {env.name!r}")
    _require(1 <= env.letters <= 26, "[env] letters", "must be in [1, 26]")
    _require(env.horizon >= 1, "[env] horizon", "must be >= 1")
    if env.name == "letter":
        _require(env.grid >= 2, "[env] grid", "must be >= 2")
        _require(env.letters < env.cells <= env.grid * env.grid - 1,
                 "[env] cells",
                 f"need letters < cells <= grid^2 - 1, got {env.cells}")
    alphabet = set(string.ascii_lowercase[:env.letters])
    for rule in env.bonuses:
        for prop in (rule.goal, rule.pre, rule.avoid):
            _require(prop is None or prop in alphabet, "[env] bonuses",
                     f"proposition {prop!r} outside the alphabet")
    if env.layout:
        _require(env.name == "walk", "[env] layout", "only the walk env takes one")
        _require(sorted(s for s, _, _ in env.layout) == sorted(alphabet),
                 "[env] layout", "must cover exactly the alphabet")

    for name in ("latent", "gnn_dim", "gnn_steps", "future_dim", "low_gnn_steps"):
        _require(getattr(model, name) >= 1, f"[model] {name}", "must be >= 1")
    _require(model.activation in ("relu", "tanh"), "[model] activation",
             f"must be 'relu' or 'tanh', got {model.activation!r}")
    for name in ("enc_hidden", "trans_hidden", "policy_hidden", "value_hidden",
                 "actor_hidden", "critic_hidden", "reach_hidden", "conv",
                 "gnn_hidden"):
        _require(all(v >= 1 for v in getattr(model, name)),
                 f"[model] {name}", "sizes must be >= 1")

    _require(train.total_steps >= 0, "[train] total_steps", "must be >= 0")
    _require(0.0 < train.gamma <= 1.0, "[train] gamma", "range (0, 1]")
    _require(train.lr > 0.0, "[train] lr", "must be > 0")
    _require(0.0 < train.clip_eps < 1.0, "[train] clip_eps", "range (0, 1)")
    _require(train.entropy_coef >= 0.0, "[train] entropy_coef", "must be >= 0")
    _require(train.vf_coef >= 0.0, "[train] vf_coef", "must be >= 0")
    _require(train.reach_coef >= 0.0, "[train] reach_coef", "must be >= 0")
    _require(0.0 <= train.gae_lambda <= 1.0, "[train] gae_lambda", "range [0, 1]")
    _require(train.transe_weight >= 0.0, "[train] lambda", "must be >= 0")
    _require(train.margin > 0.0, "[train] xi", "must be > 0")
    _require(0.0 < train.nu < 1.0, "[train] nu", "range (0, 1)")
    _require(train.avoid_candidates >= 1, "[train] avoid_candidates", "must be >= 1")
    _require(0.0 < train.threshold <= 1.0, "[train] threshold", "range (0, 1]")
    _require(0.0 <= train.neg_prob < 1.0, "[train] neg_prob", "range [0, 1)")
    for name in ("levels", "window", "low_interval", "high_interval",
                 "epochs", "minibatch", "replay"):
        _require(getattr(train, name) >= 1, f"[train] {name}", "must be >= 1")

    _require(ev.kind in ("chain", "dag"), "[eval] kind",
             f"must be 'chain' or 'dag', got {ev.kind!r}")
    for name in ("interval", "tasks", "episodes", "depth"):
        _require(getattr(ev, name) >= 1, f"[eval] {name}", "must be >= 1")


# ---------------------------------------------------------------------------
# builders


def build_env_factory(cfg: RunConfig):
    env = cfg.env
    if env.name == "letter":
        return lambda rng: LetterEnv(n=env.grid, m=env.cells, k=env.letters,
                                     horizon=env.horizon, rng=rng)
    layout = {s: (x, y) for s, x, y in env.layout} or None
    return lambda rng: WalkEnv(k=env.letters, horizon=env.horizon, rng=rng,
                               fixed_layout=layout)


def build_high_config(cfg: RunConfig) -> HighConfig:
    m, t = cfg.model, cfg.train
    return HighConfig(
        latent_dim=m.latent, gnn_dim=m.gnn_dim, gnn_steps=m.gnn_steps,
        enc_hidden=m.enc_hidden, conv_channels=m.conv or None,
        trans_hidden=m.trans_hidden, gnn_hidden=m.gnn_hidden or None,
        policy_hidden=m.policy_hidden, value_hidden=m.value_hidden,
        lr=t.lr, clip_eps=t.clip_eps, vf_coef=t.vf_coef,
        entropy_coef=t.entropy_coef, transe_coef=t.transe_weight,
        margin=t.margin, gamma=t.gamma, epochs=t.epochs,
        activation=m.activation,
    )


def build_low_config(cfg: RunConfig) -> LowConfig:
    m, t = cfg.model, cfg.train
    walk = cfg.env.name == "walk"
    return LowConfig(
        latent_dim=m.latent, enc_hidden=m.enc_hidden,
        conv_channels=m.conv or None, actor_hidden=m.actor_hidden,
        critic_hidden=m.critic_hidden, reach_hidden=m.reach_hidden,
        future_dim=m.future_dim, gnn_steps=m.low_gnn_steps,
        continuous=walk, action_dim=2 if walk else 4,
        lr=t.lr, clip_eps=t.clip_eps, vf_coef=t.vf_coef,
        entropy_coef=t.entropy_coef, reach_coef=t.reach_coef,
        gamma=t.gamma, gae_lambda=t.gae_lambda, epochs=t.epochs,
        minibatch=t.minibatch, myopic=t.myopic, activation=m.activation,
    )


def build_train_config(cfg: RunConfig) -> TrainConfig:
    t, ev = cfg.train, cfg.eval
    return TrainConfig(
        total_steps=t.total_steps, gamma=t.gamma,
        low_interval=t.low_interval, high_interval=t.high_interval,
        eval_interval=ev.interval, eval_task_count=ev.tasks,
        eval_episodes=ev.episodes, eval_task_kind=ev.kind,
        eval_task_depth=ev.depth, replay_capacity=t.replay,
        relabel=t.relabel, neg_prob=t.neg_prob, curriculum_cap=t.levels,
        curriculum_window=t.window, curriculum_threshold=t.threshold,
        eval_greedy=ev.greedy,
    )


def load_task_file(path, alphabet=None):
    path = Path(path)
    if path.suffix == ".json":
        return graph_from_json(path.read_text())
    return compile_abstract_graph(parse_spec(path.read_text(), alphabet))


def _eval_tasks_from_dir(cfg: RunConfig):
    if not cfg.eval.tasks_dir:
        return None
    directory = Path(cfg.eval.tasks_dir)
    files = sorted(p for p in directory.iterdir()
                   if p.suffix in (".json", ".spec"))
    if not files:
        raise ConfigError(f"[eval] tasks_dir: no task files in {directory}")
    alphabet = list(string.ascii_lowercase[:cfg.env.letters])
    return [load_task_file(p, alphabet) for p in files]


def build_runner(cfg: RunConfig, seed: int | None = None,
                 eval_tasks=None) -> Runner:
    if eval_tasks is None:
        eval_tasks = _eval_tasks_from_dir(cfg)
    return Runner(
        build_env_factory(cfg),
        seed=cfg.train.seed if seed is None else seed,
        cfg=build_train_config(cfg),
        high_config=build_high_config(cfg),
        low_config=build_low_config(cfg),
        avoidance=AvoidanceConfig(nu=cfg.train.nu,
                                  candidates=cfg.train.avoid_candidates),
        scheme=RewardScheme(cfg.env.completion_reward, cfg.env.bonuses),
        eval_tasks=eval_tasks,
    )


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """The same config with the seed pinned (for the resolved echo)."""
    return replace(cfg, train=replace(cfg.train, seed=seed))
