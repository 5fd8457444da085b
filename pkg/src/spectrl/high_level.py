"""High-level planner over the task graph.

A forward pass spans a latent tree over the remaining task: the root is the
encoded state, and each child is the parent latent plus a learned transition
conditioned on the child sub-task's goal bits.  A backward pass runs a GNN
over the tree with every edge reversed, so information about future sub-tasks
flows into the root embedding; the policy scores the feasible out-edges of
the current node against that embedding, and a value head estimates the
return for finishing the rest of the task.  Training couples PPO on recorded
sub-task transitions with a TransE loss that shapes the latent space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import (
    AbstractGraph,
    Edge,
    GraphError,
    SubTask,
    dag_to_tree,
    encode_subtask,
    graph_signature,
)
from .nn import Adam, ParamStore, Tensor, losses, tape
from .nn.layers import conv_stack, linear, mlp_forward
from .nn.layers import gnn_step

__all__ = ["HighConfig", "HighTransition", "TaskView", "LatentTree",
           "PlannerOutput", "HighBatch", "HighLevel"]


@dataclass
class HighConfig:
    latent_dim: int = 64        # d, latent state size
    gnn_dim: int = 64           # F, node feature size in the backward pass
    gnn_steps: int = 8
    enc_hidden: tuple = (128, 128)
    conv_channels: tuple | None = None  # e.g. (16, 32, 64) for image input
    trans_hidden: tuple = (128, 128, 128)
    gnn_hidden: tuple | None = None  # hidden layers in M and U; None = (gnn_dim,)
    policy_hidden: tuple = (128, 128, 128)
    value_hidden: tuple = (128, 128)
    lr: float = 3e-4
    clip_eps: float = 0.2
    vf_coef: float = 0.5
    entropy_coef: float = 0.01
    transe_coef: float = 0.01   # lambda in the combined loss
    margin: float = 1.0         # xi, TransE hinge margin
    gamma: float = 0.99
    epochs: int = 4
    activation: str = "relu"    # hidden activation for the MLPs


@dataclass(frozen=True)
class HighTransition:
    """One completed sub-task: from `state` under task `graph`, pursuing
    `subtask` finished at `next_state` after `dt` steps, collecting `reward`
    (discounted within the segment); `next_graph` is the progressed task."""

    state: np.ndarray
    graph: AbstractGraph
    edge: Edge
    subtask: SubTask
    reward: float
    dt: int
    next_state: np.ndarray
    next_graph: AbstractGraph


@dataclass
class TaskView:
    """Parameter-free structure of one task graph, cached by signature."""

    graph: AbstractGraph
    tree: object                    # SubTaskTree
    rev_edges: list                 # (child, parent) pairs for the GNN
    edge_feats: np.ndarray          # (E, 2P) derived sub-task encodings
    goal_bits: np.ndarray           # (N, P) subgoal bits per tree node
    candidates: list[Edge]          # out-edges of the current (root) node
    cand_subtasks: list[SubTask]
    cand_enc: np.ndarray            # (C, 2P)


@dataclass
class LatentTree:
    view: TaskView
    feats: Tensor  # (B, N, d)


@dataclass
class PlannerOutput:
    edge: Edge
    subtask: SubTask
    index: int
    logp: float
    value: float
    probs: np.ndarray
    embedding: np.ndarray  # root feature after the backward pass


@dataclass
class HighBatch:
    """Fixed quantities for one PPO update, shared by every epoch."""

    groups: list            # (view, positions, states, chosen candidate idx)
    old_logp: np.ndarray
    advantages: np.ndarray
    targets: np.ndarray
    states: np.ndarray      # grouped order, matches positions
    pos_bits: np.ndarray
    next_states: np.ndarray
    neg_states: np.ndarray


class HighLevel:
    """Planner, value function and trainer for sub-task selection."""

    def __init__(self, store: ParamStore, alphabet, obs_shape,
                 config: HighConfig | None = None):
        self.store = store
        self.alphabet = list(alphabet)
        self.obs_shape = tuple(obs_shape)
        self.cfg = config or HighConfig()
        hidden = self.cfg.gnn_hidden
        self._gnn_sizes = [*(hidden if hidden is not None else (self.cfg.gnn_dim,)),
                           self.cfg.gnn_dim]
        self._act = {"relu": tape.relu, "tanh": tape.tanh}[self.cfg.activation]
        self.opt = Adam(store, lr=self.cfg.lr, scope="high/")
        self._views: dict[str, TaskView] = {}
        self._prop_index = {p: i for i, p in enumerate(self.alphabet)}

    # ------------------------------------------------------------------
    # task structure

    def task_view(self, remaining: AbstractGraph) -> TaskView:
        sig = graph_signature(remaining)
        view = self._views.get(sig)
        if view is None:
            view = self._build_view(remaining)
            self._views[sig] = view
        return view

    def _build_view(self, g: AbstractGraph) -> TaskView:
        if g.is_empty:
            raise GraphError("empty task has nothing to plan")
        tree = dag_to_tree(g)
        n_props = len(self.alphabet)
        goal_bits = np.zeros((len(tree.nodes), n_props))
        rev_edges = []
        edge_feats = []
        for node in tree.nodes[1:]:
            rev_edges.append((node.id, node.parent))
            edge_feats.append(encode_subtask(node.subtask, self.alphabet))
            for p in node.subtask.positives:
                goal_bits[node.id, self._prop_index[p]] = 1.0
        edge_feats = (np.array(edge_feats) if edge_feats
                      else np.zeros((0, 2 * n_props)))
        roots = [tree.nodes[c] for c in tree.root.children]
        if not roots:
            raise GraphError("current task node has no outgoing sub-task")
        return TaskView(
            graph=g,
            tree=tree,
            rev_edges=rev_edges,
            edge_feats=edge_feats,
            goal_bits=goal_bits,
            candidates=[n.edge for n in roots],
            cand_subtasks=[n.subtask for n in roots],
            cand_enc=np.array([encode_subtask(n.subtask, self.alphabet)
                               for n in roots]),
        )

    # ------------------------------------------------------------------
    # networks

    def encode(self, states) -> Tensor:
        x = states if isinstance(states, Tensor) else Tensor(np.asarray(states, dtype=np.float64))
        batch = x.data.shape[0]
        if self.cfg.conv_channels:
            h = conv_stack(self.store, "high/enc_conv", x, self.cfg.conv_channels)
            return linear(self.store, "high/enc_out", h, self.cfg.latent_dim)
        flat = tape.reshape(x, (batch, -1))
        return mlp_forward(self.store, "high/enc", flat,
                           [*self.cfg.enc_hidden, self.cfg.latent_dim],
                           hidden_activation=self._act)

    def _transition(self, latents: Tensor, pos_bits: np.ndarray) -> Tensor:
        x = tape.concat([latents, Tensor(np.asarray(pos_bits, dtype=np.float64))], axis=1)
        return mlp_forward(self.store, "high/trans", x,
                           [*self.cfg.trans_hidden, self.cfg.latent_dim],
                           hidden_activation=self._act)

    def forward_pass(self, states, remaining: AbstractGraph) -> LatentTree:
        return self._forward(self.encode(states), self.task_view(remaining))

    def _forward(self, h0: Tensor, view: TaskView) -> LatentTree:
        batch = h0.data.shape[0]
        d = self.cfg.latent_dim
        feats: list = [None] * len(view.tree.nodes)
        feats[0] = tape.reshape(h0, (batch, 1, d))
        for node in view.tree.nodes[1:]:
            parent = tape.reshape(feats[node.parent], (batch, d))
            bits = np.broadcast_to(view.goal_bits[node.id], (batch, len(self.alphabet)))
            child = parent + self._transition(parent, bits)
            feats[node.id] = tape.reshape(child, (batch, 1, d))
        return LatentTree(view, tape.concat(feats, axis=1))

    def backward_pass(self, latent: LatentTree) -> Tensor:
        """Root embedding after message passing over the reversed tree."""
        view = latent.view
        cfg = self.cfg
        batch, n_nodes = latent.feats.data.shape[:2]
        h = linear(self.store, "high/gnn_in",
                   tape.reshape(latent.feats, (batch * n_nodes, cfg.latent_dim)),
                   cfg.gnn_dim)
        h = tape.reshape(h, (batch, n_nodes, cfg.gnn_dim))
        goals = Tensor(np.broadcast_to(view.goal_bits[None],
                                       (batch, n_nodes, len(self.alphabet))))
        sizes = self._gnn_sizes
        for _ in range(cfg.gnn_steps):
            h = gnn_step(self.store, tape.concat([h, goals], axis=2),
                         view.rev_edges, view.edge_feats,
                         "high/gnn_m", "high/gnn_u", sizes, sizes,
                         activation=self._act)
        root = tape.gather_axis1(h, [0])
        return tape.reshape(root, (batch, cfg.gnn_dim))

    def _policy_logits(self, emb: Tensor, view: TaskView) -> Tensor:
        batch = emb.data.shape[0]
        n_cand = len(view.candidates)
        tiled = tape.reshape(emb, (batch, 1, self.cfg.gnn_dim)) * Tensor(np.ones((1, n_cand, 1)))
        enc = Tensor(np.broadcast_to(view.cand_enc[None],
                                     (batch, n_cand, view.cand_enc.shape[1])))
        scores = mlp_forward(self.store, "high/pi", tape.concat([tiled, enc], axis=2),
                             [*self.cfg.policy_hidden, 1],
                             hidden_activation=self._act)
        return tape.reshape(scores, (batch, n_cand))

    def _value_head(self, emb: Tensor) -> Tensor:
        v = mlp_forward(self.store, "high/v", emb, [*self.cfg.value_hidden, 1],
                        hidden_activation=tape.tanh)
        return tape.reshape(v, (emb.data.shape[0],))

    def _scores(self, view: TaskView, states) -> tuple[Tensor, Tensor]:
        emb = self.backward_pass(self._forward(self.encode(states), view))
        return self._policy_logits(emb, view), self._value_head(emb)

    # ------------------------------------------------------------------
    # acting

    def plan(self, state, remaining: AbstractGraph,
             rng: np.random.Generator | None = None,
             greedy: bool = False) -> PlannerOutput:
        view = self.task_view(remaining)
        emb = self.backward_pass(self._forward(self.encode(state[None]), view))
        logits = self._policy_logits(emb, view)
        logp = tape.log_softmax(logits, axis=-1).data[0]
        probs = np.exp(logp)
        value = float(self._value_head(emb).data[0])
        if greedy or len(probs) == 1:
            idx = int(np.argmax(probs))
        else:
            if rng is None:
                raise ValueError("sampling requires an rng")
            idx = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
            idx = min(idx, len(probs) - 1)
        return PlannerOutput(
            edge=view.candidates[idx],
            subtask=view.cand_subtasks[idx],
            index=idx,
            logp=float(logp[idx]),
            value=value,
            probs=probs,
            embedding=emb.data[0].copy(),
        )

    def values(self, states, remaining: AbstractGraph) -> np.ndarray:
        """V estimates for a batch of states under one task."""
        view = self.task_view(remaining)
        emb = self.backward_pass(self._forward(self.encode(states), view))
        return self._value_head(emb).data.copy()

    # ------------------------------------------------------------------
    # losses

    def _transe_terms(self, states, pos_bits, next_states, neg_states) -> Tensor:
        eps = 1e-12
        enc_s = self.encode(states)
        enc_next = self.encode(next_states)
        enc_neg = self.encode(neg_states)
        pred = enc_s + self._transition(enc_s, pos_bits)
        d_pos = tape.sqrt(tape.tsum(tape.square(pred - enc_next), axis=1) + eps)
        d_neg = tape.sqrt(tape.tsum(tape.square(enc_s - enc_neg), axis=1) + eps)
        return d_pos + tape.relu(self.cfg.margin - d_neg)

    def transe_loss(self, state, subtask: SubTask, next_state, neg_state) -> Tensor:
        """Latent-consistency loss of one transition (scalar tensor)."""
        bits = encode_subtask(subtask, self.alphabet)[None, :len(self.alphabet)]
        terms = self._transe_terms(state[None], bits, next_state[None], neg_state[None])
        return tape.tsum(terms)

    # ------------------------------------------------------------------
    # training

    def _prepare(self, trs, rng: np.random.Generator) -> HighBatch:
        cfg = self.cfg
        by_sig: dict[str, list[int]] = {}
        for i, tr in enumerate(trs):
            by_sig.setdefault(graph_signature(tr.graph), []).append(i)
        order = [i for sig in sorted(by_sig) for i in by_sig[sig]]
        groups = []  # (view, grouped positions, states, candidate indices)
        pos = 0
        for sig in sorted(by_sig):
            idxs = by_sig[sig]
            view = self.task_view(trs[idxs[0]].graph)
            states = np.stack([trs[i].state for i in idxs]).astype(np.float64)
            cand = np.array([view.candidates.index(trs[i].edge) for i in idxs])
            groups.append((view, np.arange(pos, pos + len(idxs)), states, cand))
            pos += len(idxs)

        batch = len(trs)
        rewards = np.array([trs[i].reward for i in order])
        dts = np.array([trs[i].dt for i in order], dtype=np.float64)
        next_states = np.stack([trs[i].next_state for i in order]).astype(np.float64)
        states_all = np.stack([trs[i].state for i in order]).astype(np.float64)
        pos_bits = np.stack([encode_subtask(trs[i].subtask, self.alphabet)[:len(self.alphabet)]
                             for i in order])

        # bootstrap values of the progressed task; terminal rows stay zero
        next_vals = np.zeros(batch)
        by_next: dict[str, list[int]] = {}
        for p, i in enumerate(order):
            if not trs[i].next_graph.is_empty:
                by_next.setdefault(graph_signature(trs[i].next_graph), []).append(p)
        for sig in sorted(by_next):
            ps = by_next[sig]
            g = trs[order[ps[0]]].next_graph
            next_vals[ps] = self.values(next_states[ps], g)
        targets = rewards + cfg.gamma ** dts * next_vals

        old_logp = np.zeros(batch)
        old_vals = np.zeros(batch)
        for view, ps, states, cand in groups:
            logits, vals = self._scores(view, states)
            lp = tape.log_softmax(logits, axis=-1).data
            old_logp[ps] = lp[np.arange(len(ps)), cand]
            old_vals[ps] = vals.data
        advantages = targets - old_vals

        # one negative per transition, drawn from the other arrival states
        neg_idx = np.zeros(batch, dtype=int)
        for p in range(batch):
            if batch > 1:
                j = int(rng.integers(batch - 1))
                neg_idx[p] = j + 1 if j >= p else j
        neg_states = next_states[neg_idx]

        return HighBatch(groups=groups, old_logp=old_logp,
                         advantages=advantages, targets=targets,
                         states=states_all, pos_bits=pos_bits,
                         next_states=next_states, neg_states=neg_states)

    def _batch_loss(self, batch: HighBatch):
        """Combined loss for one epoch; call inside tape.record()."""
        cfg = self.cfg
        parts_lp, parts_v = [], []
        for view, ps, states, cand in batch.groups:
            logits, vals = self._scores(view, states)
            parts_lp.append(losses.categorical_logp(logits, cand))
            parts_v.append(vals)
        new_logp = tape.concat(parts_lp, axis=0)
        values = tape.concat(parts_v, axis=0)
        pol, vloss, _ = losses.ppo_losses(
            batch.old_logp, new_logp, batch.advantages, values, batch.targets,
            clip_eps=cfg.clip_eps, entropy_coef=cfg.entropy_coef)
        transe = self._transe_terms(batch.states, batch.pos_bits,
                                    batch.next_states, batch.neg_states)
        total = pol + cfg.vf_coef * vloss + cfg.transe_coef * tape.tsum(transe)
        return total, pol, vloss, transe

    def high_update(self, transitions, rng: np.random.Generator) -> dict:
        """PPO plus weighted TransE over one batch of sub-task transitions."""
        trs = list(transitions)
        if not trs:
            raise ValueError("empty high-level batch")
        batch = self._prepare(trs, rng)
        report = {}
        for _ in range(self.cfg.epochs):
            with tape.record() as tp:
                total, pol, vloss, transe = self._batch_loss(batch)
            tp.backward(total)
            self.opt.step()
            report = {
                "high_policy_loss": float(pol.data),
                "high_value_loss": float(vloss.data),
                "transe_loss": float(np.mean(transe.data)),
            }
        return report
