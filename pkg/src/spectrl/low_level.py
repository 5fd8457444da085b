"""Goal-conditioned controller executing one sub-task at a time.

The policy and value function see the current observation's latent, the
reach/avoid bits of the assigned sub-task, and a fixed-size embedding of the
remaining task produced by a small GNN over its tree (zero-initialized node
features, reach bits as edge features).  Training is PPO with the value
targets switched to a max against the planner's estimate at sub-task
completion steps, plus auxiliary reach heads used by the avoidance override.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import AbstractGraph, SubTask, dag_to_tree, encode_subtask, graph_signature
from .nn import Adam, ParamStore, Tensor, losses, tape
from .nn.layers import conv_stack, gnn_step, linear, mlp_forward

__all__ = ["LowConfig", "AvoidanceConfig", "LowInput", "LowTransition",
           "ActResult", "value_target", "LowLevel"]


@dataclass
class LowConfig:
    latent_dim: int = 64
    enc_hidden: tuple = (128, 128)
    conv_channels: tuple | None = None
    actor_hidden: tuple = (64, 64, 64)
    critic_hidden: tuple = (64, 64)
    reach_hidden: tuple = (64, 64)
    future_dim: int = 32        # node feature size of the task GNN
    gnn_steps: int = 8
    gnn_hidden: tuple | None = None
    continuous: bool = False
    action_dim: int = 4         # move count (discrete) or action size
    lr: float = 3e-4
    clip_eps: float = 0.2
    vf_coef: float = 0.5
    entropy_coef: float = 0.01
    reach_coef: float = 0.5     # weight of the auxiliary reach TD losses
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch: int = 256
    log_std_bounds: tuple = (-5.0, 2.0)
    myopic: bool = False        # ablation: zero out the future embedding
    activation: str = "relu"


@dataclass(frozen=True)
class AvoidanceConfig:
    """Safety override: when some avoided proposition looks imminent, steer
    away from it instead of following the nominal policy."""

    nu: float = 0.9             # reach-value threshold that arms the override
    candidates: int = 16        # sampled actions for the continuous argmin

    def __post_init__(self):
        if not 0.0 < self.nu < 1.0:
            raise ValueError(f"nu must be in (0, 1), got {self.nu}")
        if self.candidates < 1:
            raise ValueError("need at least one candidate action")


@dataclass(frozen=True)
class LowInput:
    """Everything the controller conditions on at one step.

    `future` is the task left after the assigned sub-task; its embedding is
    recomputed from current parameters whenever the input is consumed.
    """

    obs: np.ndarray
    pos_bits: np.ndarray
    neg_bits: np.ndarray
    future: AbstractGraph


@dataclass(frozen=True)
class LowTransition:
    inp: LowInput
    action: object              # move index, or the raw pre-squash sample
    reward: float
    next_inp: LowInput
    done: bool
    completed: bool             # assigned sub-task finished at this step
    v_high: float | None = None  # planner value at completion

    def __post_init__(self):
        if (self.v_high is not None) != self.completed:
            raise ValueError("v_high must be given exactly at completion steps")


@dataclass(frozen=True)
class ActResult:
    action: object              # what the environment consumes
    raw: object                 # what the update replays (== action if discrete)
    logp: float


def value_target(reward: float, gamma: float, v_low_next: float,
                 v_high: float | None = None) -> float:
    """One-step target; at completion steps takes the max with the planner's
    estimate so returns of future sub-tasks arrive without a long TD chain."""
    boot = reward + gamma * v_low_next
    if v_high is None:
        return boot
    return max(boot, v_high)


class LowLevel:
    def __init__(self, store: ParamStore, alphabet, obs_shape,
                 config: LowConfig | None = None,
                 avoidance: AvoidanceConfig | None = None):
        self.store = store
        self.alphabet = list(alphabet)
        self.obs_shape = tuple(obs_shape)
        self.cfg = config or LowConfig()
        self.avoid = avoidance or AvoidanceConfig()
        hidden = self.cfg.gnn_hidden
        self._gnn_sizes = [*(hidden if hidden is not None else (self.cfg.future_dim,)),
                           self.cfg.future_dim]
        self._act = {"relu": tape.relu, "tanh": tape.tanh}[self.cfg.activation]
        self.opt = Adam(store, lr=self.cfg.lr, scope="low/")
        self._fut_cache: dict[str, tuple[int, np.ndarray]] = {}

    # ------------------------------------------------------------------
    # input assembly

    def assemble(self, obs, subtask: SubTask, future: AbstractGraph) -> LowInput:
        bits = encode_subtask(subtask, self.alphabet)
        n = len(self.alphabet)
        return LowInput(obs=np.asarray(obs, dtype=np.float64),
                        pos_bits=bits[:n], neg_bits=bits[n:], future=future)

    def encode(self, obs_batch) -> Tensor:
        x = obs_batch if isinstance(obs_batch, Tensor) else Tensor(np.asarray(obs_batch, dtype=np.float64))
        if self.cfg.conv_channels:
            h = conv_stack(self.store, "low/enc_conv", x, self.cfg.conv_channels)
            return linear(self.store, "low/enc_out", h, self.cfg.latent_dim)
        flat = tape.reshape(x, (x.data.shape[0], -1))
        return mlp_forward(self.store, "low/enc", flat,
                           [*self.cfg.enc_hidden, self.cfg.latent_dim],
                           hidden_activation=self._act)

    def embed_future(self, graph: AbstractGraph) -> Tensor:
        """(1, future_dim) root feature of the remaining task; zeros if none."""
        d = self.cfg.future_dim
        if graph.is_empty:
            return Tensor(np.zeros((1, d)))
        tree = dag_to_tree(graph)
        n_props = len(self.alphabet)
        rev_edges = []
        edge_feats = []
        for node in tree.nodes[1:]:
            rev_edges.append((node.id, node.parent))
            edge_feats.append(encode_subtask(node.subtask, self.alphabet)[:n_props])
        edge_feats = (np.array(edge_feats) if edge_feats
                      else np.zeros((0, n_props)))
        h = Tensor(np.zeros((1, len(tree.nodes), d)))
        sizes = self._gnn_sizes
        for _ in range(self.cfg.gnn_steps):
            h = gnn_step(self.store, h, rev_edges, edge_feats,
                         "low/gnn_m", "low/gnn_u", sizes, sizes,
                         activation=self._act)
        return tape.reshape(tape.gather_axis1(h, [0]), (1, d))

    def _future_row(self, graph: AbstractGraph) -> np.ndarray:
        """Cached no-grad embedding, refreshed after every optimizer step."""
        if self.cfg.myopic or graph.is_empty:
            return np.zeros(self.cfg.future_dim)
        sig = graph_signature(graph)
        hit = self._fut_cache.get(sig)
        if hit is not None and hit[0] == self.store.version:
            return hit[1]
        row = self.embed_future(graph).data[0].copy()
        self._fut_cache[sig] = (self.store.version, row)
        return row

    def _features(self, inputs, taped: bool = False) -> Tensor:
        """(B, latent+2P+future) matrix the heads run on."""
        obs = np.stack([i.obs for i in inputs])
        latents = self.encode(obs)
        bits = Tensor(np.stack([np.concatenate([i.pos_bits, i.neg_bits])
                                for i in inputs]))
        if taped and not self.cfg.myopic:
            uniq: dict[str, int] = {}
            embs = []
            idx = []
            for i in inputs:
                sig = graph_signature(i.future)
                if sig not in uniq:
                    uniq[sig] = len(embs)
                    embs.append(self.embed_future(i.future))
                idx.append(uniq[sig])
            stack = tape.reshape(tape.concat(embs, axis=0), (1, len(embs), -1))
            fut = tape.reshape(tape.gather_axis1(stack, idx),
                               (len(inputs), self.cfg.future_dim))
        else:
            fut = Tensor(np.stack([self._future_row(i.future) for i in inputs]))
        return tape.concat([latents, bits, fut], axis=1)

    # ------------------------------------------------------------------
    # heads

    def _actor_trunk(self, feats: Tensor) -> Tensor:
        return mlp_forward(self.store, "low/pi", feats, list(self.cfg.actor_hidden),
                           hidden_activation=self._act, output_activation=self._act)

    def _policy_params(self, feats: Tensor):
        trunk = self._actor_trunk(feats)
        if not self.cfg.continuous:
            return linear(self.store, "low/pi_out", trunk, self.cfg.action_dim)
        lo, hi = self.cfg.log_std_bounds
        mean = linear(self.store, "low/mu", trunk, self.cfg.action_dim)
        log_std = tape.clip(linear(self.store, "low/log_std", trunk,
                                   self.cfg.action_dim), lo, hi)
        return mean, log_std

    def _value(self, feats: Tensor) -> Tensor:
        v = mlp_forward(self.store, "low/v", feats, [*self.cfg.critic_hidden, 1],
                        hidden_activation=tape.tanh)
        return tape.reshape(v, (feats.data.shape[0],))

    def _logp(self, feats: Tensor, raws) -> Tensor:
        if not self.cfg.continuous:
            logits = self._policy_params(feats)
            return losses.categorical_logp(logits, np.asarray(raws, dtype=int))
        mean, log_std = self._policy_params(feats)
        u = np.asarray(raws, dtype=np.float64)
        base = losses.gaussian_logp(mean, log_std, u)
        # change of variables for the tanh squash
        corr = np.sum(np.log(1.0 - np.tanh(u) ** 2 + 1e-6), axis=-1)
        return base - Tensor(corr)

    def values(self, inputs) -> np.ndarray:
        return self._value(self._features(inputs)).data.copy()

    def action_logp(self, inputs, raws) -> np.ndarray:
        return self._logp(self._features(inputs), raws).data.copy()

    # ------------------------------------------------------------------
    # acting

    def act(self, inp: LowInput, rng: np.random.Generator | None = None,
            greedy: bool = False) -> ActResult:
        feats = self._features([inp])
        if not self.cfg.continuous:
            logits = self._policy_params(feats)
            logp = tape.log_softmax(logits, axis=-1).data[0]
            if greedy:
                a = int(np.argmax(logp))
            else:
                if rng is None:
                    raise ValueError("sampling requires an rng")
                cum = np.cumsum(np.exp(logp))
                a = min(int(np.searchsorted(cum, rng.random(), side="right")),
                        len(cum) - 1)
            return ActResult(action=a, raw=a, logp=float(logp[a]))
        mean, log_std = self._policy_params(feats)
        mu, ls = mean.data[0], log_std.data[0]
        if greedy:
            u = mu.copy()
        else:
            if rng is None:
                raise ValueError("sampling requires an rng")
            u = mu + np.exp(ls) * rng.standard_normal(len(mu))
        logp = float(self._logp(feats, u[None]).data[0])
        return ActResult(action=np.tanh(u), raw=u, logp=logp)

    # ------------------------------------------------------------------
    # reach heads and avoidance

    def _goal_bits(self, goal: str) -> np.ndarray:
        bits = np.zeros(len(self.alphabet))
        bits[self.alphabet.index(goal)] = 1.0
        return bits

    def _reach_v(self, latents: Tensor, goal_bits) -> Tensor:
        x = tape.concat([latents, Tensor(np.asarray(goal_bits, dtype=np.float64))], axis=1)
        v = mlp_forward(self.store, "low/reach_v", x, [*self.cfg.reach_hidden, 1],
                        hidden_activation=self._act, output_activation=tape.sigmoid)
        return tape.reshape(v, (x.data.shape[0],))

    def _reach_q(self, latents: Tensor, goal_bits, actions=None) -> Tensor:
        gb = Tensor(np.asarray(goal_bits, dtype=np.float64))
        if not self.cfg.continuous:
            x = tape.concat([latents, gb], axis=1)
            return mlp_forward(self.store, "low/reach_q", x,
                               [*self.cfg.reach_hidden, self.cfg.action_dim],
                               hidden_activation=self._act,
                               output_activation=tape.sigmoid)
        x = tape.concat([latents, gb,
                         Tensor(np.asarray(actions, dtype=np.float64))], axis=1)
        q = mlp_forward(self.store, "low/reach_q", x, [*self.cfg.reach_hidden, 1],
                        hidden_activation=self._act, output_activation=tape.sigmoid)
        return tape.reshape(q, (x.data.shape[0],))

    def reach_values(self, obs, goals: list[str]) -> np.ndarray:
        """P(soon hit goal) per goal, from one observation."""
        latents = self.encode(np.stack([obs] * len(goals)))
        gbits = np.stack([self._goal_bits(g) for g in goals])
        return self._reach_v(latents, gbits).data.copy()

    def reach_q_values(self, obs, goal: str, actions=None) -> np.ndarray:
        """Per-action hit estimates; `actions` required in continuous mode."""
        if not self.cfg.continuous:
            latents = self.encode(obs[None])
            return self._reach_q(latents, self._goal_bits(goal)[None]).data[0].copy()
        acts = np.asarray(actions, dtype=np.float64)
        latents = self.encode(np.stack([obs] * len(acts)))
        gbits = np.stack([self._goal_bits(goal)] * len(acts))
        return self._reach_q(latents, gbits, acts).data.copy()

    def avoidance_action(self, inp: LowInput, nominal,
                         rng: np.random.Generator | None = None):
        """Nominal action, unless some avoided proposition is imminent; then
        the action minimizing the chance of hitting the most imminent one."""
        goals = [self.alphabet[i] for i in np.nonzero(inp.neg_bits)[0]]
        if not goals:
            return nominal
        vals = self.reach_values(inp.obs, goals)
        k = int(np.argmax(vals))
        if vals[k] < self.avoid.nu:
            return nominal
        worst = goals[k]
        if not self.cfg.continuous:
            return int(np.argmin(self.reach_q_values(inp.obs, worst)))
        if rng is None:
            raise ValueError("continuous avoidance samples candidate actions")
        cands = rng.uniform(-1.0, 1.0,
                            size=(self.avoid.candidates, self.cfg.action_dim))
        q = self.reach_q_values(inp.obs, worst, cands)
        return cands[int(np.argmin(q))]

    # ------------------------------------------------------------------
    # training

    def _prepare(self, trs: list[LowTransition]) -> "LowBatch":
        cfg = self.cfg
        n = len(trs)
        rewards = np.array([t.reward for t in trs])
        dones = np.array([t.done for t in trs], dtype=bool)
        completed = np.array([t.completed for t in trs], dtype=bool)
        raws = (np.array([t.action for t in trs], dtype=int)
                if not cfg.continuous
                else np.stack([np.asarray(t.action, dtype=np.float64) for t in trs]))

        feats = self._features([t.inp for t in trs])
        feats_next = self._features([t.next_inp for t in trs])
        v = self._value(feats).data
        v_next = np.where(dones, 0.0, self._value(feats_next).data)
        old_logp = self._logp(feats, raws).data

        targets = np.empty(n)
        for i, t in enumerate(trs):
            targets[i] = value_target(rewards[i], cfg.gamma, v_next[i], t.v_high)

        # GAE on the modified deltas, cut at episode ends
        adv = np.empty(n)
        carry = 0.0
        for i in range(n - 1, -1, -1):
            delta = targets[i] - v[i]
            carry = delta + (0.0 if dones[i] else cfg.gamma * cfg.gae_lambda * carry)
            adv[i] = carry
        returns = adv + v
        if adv.std() > 1e-8:
            adv = (adv - adv.mean()) / adv.std()

        # reach TD data: rows pursuing a single goal keep their own goal bits
        single = np.array([t.inp.pos_bits.sum() == 1.0 for t in trs], dtype=bool)
        reach_idx = np.nonzero(single)[0]
        reach_targets = np.empty(len(reach_idx))
        if len(reach_idx):
            next_obs = np.stack([trs[i].next_inp.obs for i in reach_idx])
            gbits = np.stack([trs[i].inp.pos_bits for i in reach_idx])
            v_reach_next = self._reach_v(self.encode(next_obs), gbits).data
            for j, i in enumerate(reach_idx):
                if completed[i]:
                    reach_targets[j] = 1.0
                else:
                    reach_targets[j] = (0.0 if dones[i]
                                        else cfg.gamma * v_reach_next[j])

        return LowBatch(inputs=[t.inp for t in trs], raws=raws,
                        old_logp=old_logp, advantages=adv, targets=returns,
                        reach_idx=reach_idx, reach_targets=reach_targets)

    def _minibatch_loss(self, batch: "LowBatch", idx: np.ndarray):
        """Combined loss on a subset of rows; call inside tape.record()."""
        cfg = self.cfg
        feats = self._features([batch.inputs[i] for i in idx], taped=True)
        new_logp = self._logp(feats, batch.raws[idx])
        values = self._value(feats)
        pol, vloss, _ = losses.ppo_losses(
            batch.old_logp[idx], new_logp, batch.advantages[idx],
            values, batch.targets[idx],
            clip_eps=cfg.clip_eps, entropy_coef=cfg.entropy_coef)

        sel = batch.reach_idx[np.isin(batch.reach_idx, idx)]
        if len(sel):
            pos_in_reach = np.searchsorted(batch.reach_idx, sel)
            latents = self.encode(np.stack([batch.inputs[i].obs for i in sel]))
            gbits = np.stack([batch.inputs[i].pos_bits for i in sel])
            rt = batch.reach_targets[pos_in_reach]
            vr = self._reach_v(latents, gbits)
            if not cfg.continuous:
                q_all = self._reach_q(latents, gbits)
                q = tape.gather_rows(q_all, batch.raws[sel])
            else:
                acts = np.tanh(batch.raws[sel])
                q = self._reach_q(latents, gbits, acts)
            aux = tape.mean(tape.square(vr - rt)) + tape.mean(tape.square(q - rt))
        else:
            aux = Tensor(np.zeros(()))
        total = pol + cfg.vf_coef * vloss + cfg.reach_coef * aux
        return total, pol, vloss, aux

    def low_update(self, transitions, rng: np.random.Generator) -> dict:
        """PPO epochs over shuffled minibatches plus the reach TD losses."""
        trs = list(transitions)
        if not trs:
            raise ValueError("empty low-level batch")
        batch = self._prepare(trs)
        n = len(trs)
        sums = np.zeros(3)
        count = 0
        for _ in range(self.cfg.epochs):
            perm = rng.permutation(n)
            for lo in range(0, n, self.cfg.minibatch):
                idx = perm[lo:lo + self.cfg.minibatch]
                with tape.record() as tp:
                    total, pol, vloss, aux = self._minibatch_loss(batch, idx)
                tp.backward(total)
                self.opt.step()
                sums += [float(pol.data), float(vloss.data), float(aux.data)]
                count += 1
        avg = sums / count
        return {"low_policy_loss": float(avg[0]), "low_value_loss": float(avg[1]),
                "q_aux_loss": float(avg[2])}


@dataclass
class LowBatch:
    """Fixed quantities for one update, shared by every epoch."""

    inputs: list
    raws: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    targets: np.ndarray
    reach_idx: np.ndarray
    reach_targets: np.ndarray
