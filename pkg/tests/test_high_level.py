"""Planner: latent tree passes, candidate scoring, PPO + TransE update."""

import numpy as np
import pytest

from spectrl.graph import (
    EMPTY_GRAPH,
    GraphError,
    compile_abstract_graph,
    encode_subtask,
    progress_task,
)
from spectrl.high_level import HighConfig, HighLevel, HighTransition
from spectrl.logic import parse_spec
from spectrl.nn import ParamStore, tape
from spectrl.taskgen import random_test_dag

from helpers import assert_grads_match

FIG_TASK = "achieve (b & !a & !d); achieve (c & !d) or achieve (a & !d)"

TINY = dict(latent_dim=6, gnn_dim=5, gnn_steps=3, enc_hidden=(8,),
            trans_hidden=(8,), gnn_hidden=(6,), policy_hidden=(8,),
            value_hidden=(8,))


def make(alphabet="abcd", obs=(3,), seed=0, **overrides):
    cfg = HighConfig(**{**TINY, **overrides})
    store = ParamStore(np.random.default_rng(seed))
    return HighLevel(store, alphabet, obs, cfg), store


def zero_params(store, prefix):
    for name in store.names():
        if name.startswith(prefix):
            store.tensor(name).data[:] = 0.0


class TestTaskView:
    def test_branching_structure(self):
        hl, _ = make()
        g = compile_abstract_graph(parse_spec(FIG_TASK))
        view = hl.task_view(g)
        assert len(view.tree.nodes) == 4
        assert view.rev_edges == [(1, 0), (2, 0), (3, 2)]
        assert [sorted(st.positives) for st in view.cand_subtasks] == [["a"], ["b"]]
        assert view.cand_enc.shape == (2, 8)
        assert view.edge_feats.shape == (3, 8)
        # subgoal bits: root all zero, others flag the reach proposition
        np.testing.assert_array_equal(view.goal_bits[0], np.zeros(4))
        np.testing.assert_array_equal(view.goal_bits[1], [1, 0, 0, 0])
        np.testing.assert_array_equal(view.goal_bits[2], [0, 1, 0, 0])
        np.testing.assert_array_equal(view.goal_bits[3], [0, 0, 1, 0])

    def test_cache_returns_same_object(self):
        hl, _ = make()
        g1 = compile_abstract_graph(parse_spec("achieve a; achieve b"))
        g2 = compile_abstract_graph(parse_spec("achieve a; achieve b"))
        assert hl.task_view(g1) is hl.task_view(g2)

    def test_empty_task_rejected(self):
        hl, _ = make()
        with pytest.raises(GraphError):
            hl.task_view(EMPTY_GRAPH)


class TestForwardPass:
    def test_child_is_parent_plus_transition(self):
        hl, _ = make()
        g = compile_abstract_graph(parse_spec(FIG_TASK))
        states = np.random.default_rng(1).normal(size=(2, 3))
        latent = hl.forward_pass(states, g)
        feats = latent.feats.data
        assert feats.shape == (2, 4, hl.cfg.latent_dim)
        for node in latent.view.tree.nodes[1:]:
            parent = feats[:, node.parent]
            bits = np.broadcast_to(latent.view.goal_bits[node.id], (2, 4))
            delta = hl._transition(tape.Tensor(parent.copy()), bits).data
            np.testing.assert_allclose(feats[:, node.id], parent + delta,
                                       atol=1e-12)

    def test_zero_transition_copies_root(self):
        hl, store = make()
        g = compile_abstract_graph(parse_spec(FIG_TASK))
        states = np.random.default_rng(2).normal(size=(3, 3))
        hl.forward_pass(states, g)  # materialize params
        zero_params(store, "high/trans")
        latent = hl.forward_pass(states, g)
        h0 = hl.encode(states).data
        for k in range(4):
            np.testing.assert_array_equal(latent.feats.data[:, k], h0)

    def test_single_subtask_tree(self):
        hl, _ = make(alphabet="ab", obs=(2,))
        g = compile_abstract_graph(parse_spec("achieve a"))
        latent = hl.forward_pass(np.zeros((1, 2)), g)
        assert latent.feats.data.shape == (1, 2, hl.cfg.latent_dim)


class TestBackwardPass:
    def test_root_embedding_shape_and_determinism(self):
        hl, _ = make()
        g = compile_abstract_graph(parse_spec(FIG_TASK))
        states = np.random.default_rng(3).normal(size=(2, 3))
        emb1 = hl.backward_pass(hl.forward_pass(states, g)).data
        emb2 = hl.backward_pass(hl.forward_pass(states, g)).data
        assert emb1.shape == (2, hl.cfg.gnn_dim)
        np.testing.assert_array_equal(emb1, emb2)

    def test_leaf_features_reach_root(self):
        # with enough message rounds the root gradient touches every node
        hl, _ = make(activation="tanh")
        g = compile_abstract_graph(parse_spec(FIG_TASK))
        view = hl.task_view(g)
        from spectrl.high_level import LatentTree
        feats = tape.Tensor(np.random.default_rng(4).normal(size=(1, 4, 6)))
        hl.backward_pass(LatentTree(view, feats))  # materialize params
        with tape.record() as tp:
            emb = hl.backward_pass(LatentTree(view, feats))
            loss = tape.tsum(emb)
        tp.backward(loss)
        for k in range(4):
            assert np.abs(feats.grad[0, k]).max() > 0, f"node {k} unreachable"

    def test_zero_gnn_gives_zero_embedding(self):
        hl, store = make()
        g = compile_abstract_graph(parse_spec(FIG_TASK))
        states = np.zeros((1, 3))
        hl.backward_pass(hl.forward_pass(states, g))
        zero_params(store, "high/gnn_m")
        zero_params(store, "high/gnn_u")
        emb = hl.backward_pass(hl.forward_pass(states, g)).data
        np.testing.assert_array_equal(emb, np.zeros((1, hl.cfg.gnn_dim)))


class TestPlan:
    def test_single_candidate_gets_all_mass(self):
        hl, _ = make(alphabet="ab", obs=(2,))
        g = compile_abstract_graph(parse_spec("achieve a; achieve b"))
        out = hl.plan(np.zeros(2), g, greedy=True)
        assert out.probs.shape == (1,)
        assert out.probs[0] == 1.0
        assert out.logp == 0.0
        assert out.subtask.positives == frozenset("a")

    def test_branching_probs_sum_to_one(self):
        hl, _ = make()
        g = compile_abstract_graph(parse_spec(FIG_TASK))
        out = hl.plan(np.zeros(3), g, greedy=True)
        assert out.probs.shape == (2,)
        assert abs(out.probs.sum() - 1.0) < 1e-12
        assert out.index == int(np.argmax(out.probs))

    def test_sampling_seeded(self):
        hl, _ = make()
        g = compile_abstract_graph(parse_spec("achieve a or achieve b"))
        picks1 = [hl.plan(np.zeros(3), g, np.random.default_rng(9)).index
                  for _ in range(5)]
        picks2 = [hl.plan(np.zeros(3), g, np.random.default_rng(9)).index
                  for _ in range(5)]
        assert picks1 == picks2

    def test_sampling_needs_rng(self):
        hl, _ = make()
        g = compile_abstract_graph(parse_spec("achieve a or achieve b"))
        with pytest.raises(ValueError):
            hl.plan(np.zeros(3), g)

    def test_candidates_are_exactly_current_out_edges(self):
        # walking random tasks to completion, mass only ever sits on the
        # out-edges of the current node
        hl, _ = make(alphabet="abc", obs=(2,))
        rng = np.random.default_rng(11)
        for _ in range(40):
            g = random_test_dag("abc", rng)
            state = rng.normal(size=2)
            for _ in range(20):
                if g.is_empty:
                    break
                out = hl.plan(state, g, rng)
                view = hl.task_view(g)
                assert set(view.candidates) == set(g.out_edges(g.initial))
                assert len(out.probs) == len(view.candidates)
                assert abs(out.probs.sum() - 1.0) < 1e-9
                g = progress_task(g, out.edge)

    def test_values_batch(self):
        hl, _ = make()
        g = compile_abstract_graph(parse_spec(FIG_TASK))
        vals = hl.values(np.zeros((4, 3)), g)
        assert vals.shape == (4,)
        assert np.all(vals == vals[0])


class TestTransE:
    def test_self_negative_pays_full_margin(self):
        hl, _ = make(alphabet="ab", obs=(2,))
        g = compile_abstract_graph(parse_spec("achieve a"))
        st = hl.task_view(g).cand_subtasks[0]
        rng = np.random.default_rng(5)
        s, s2 = rng.normal(size=2), rng.normal(size=2)
        loss = float(hl.transe_loss(s, st, s2, s).data)
        enc_s = hl.encode(s[None]).data
        bits = encode_subtask(st, hl.alphabet)[None, :2]
        pred = enc_s + hl._transition(tape.Tensor(enc_s.copy()), bits).data
        d_pos = np.sqrt(((pred - hl.encode(s2[None]).data) ** 2).sum() + 1e-12)
        assert abs(loss - (d_pos + hl.cfg.margin - 1e-6)) < 1e-9

    def test_distant_negative_drops_hinge(self):
        hl, _ = make(alphabet="ab", obs=(2,), margin=1e-9)
        g = compile_abstract_graph(parse_spec("achieve a"))
        st = hl.task_view(g).cand_subtasks[0]
        rng = np.random.default_rng(6)
        s, s2, neg = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
        loss = float(hl.transe_loss(s, st, s2, neg).data)
        enc_s = hl.encode(s[None]).data
        bits = encode_subtask(st, hl.alphabet)[None, :2]
        pred = enc_s + hl._transition(tape.Tensor(enc_s.copy()), bits).data
        d_pos = np.sqrt(((pred - hl.encode(s2[None]).data) ** 2).sum() + 1e-12)
        assert abs(loss - d_pos) < 1e-12

    def test_nonnegative(self):
        hl, _ = make(alphabet="ab", obs=(2,))
        g = compile_abstract_graph(parse_spec("achieve a"))
        st = hl.task_view(g).cand_subtasks[0]
        rng = np.random.default_rng(7)
        for _ in range(25):
            s, s2, neg = (rng.normal(size=2) for _ in range(3))
            assert float(hl.transe_loss(s, st, s2, neg).data) >= 0.0


def chain_batch(hl, rng):
    """Two scripted transitions on `achieve a; achieve b`, second terminal."""
    g = compile_abstract_graph(parse_spec("achieve a; achieve b"))
    s0, s1, s2 = rng.normal(size=(3, 2))
    out0 = hl.plan(s0, g, rng)
    g2 = progress_task(g, out0.edge)
    out1 = hl.plan(s1, g2, rng)
    trs = [
        HighTransition(s0, g, out0.edge, out0.subtask, 1.5, 3, s1, g2),
        HighTransition(s1, g2, out1.edge, out1.subtask, -0.5, 2, s2, EMPTY_GRAPH),
    ]
    return g, g2, trs, (out0, out1)


class TestHighUpdate:
    def test_first_epoch_losses_match_hand_computation(self):
        hl, _ = make(alphabet="ab", obs=(2,), epochs=1)
        rng = np.random.default_rng(21)
        g, g2, trs, (out0, out1) = chain_batch(hl, rng)
        gamma = hl.cfg.gamma
        v_boot = hl.values(trs[0].next_state[None], g2)[0]
        targets = np.array([trs[0].reward + gamma ** 3 * v_boot, trs[1].reward])
        old_vals = np.array([out0.value, out1.value])
        old_logp = np.array([out0.logp, out1.logp])
        adv = targets - old_vals

        report = hl.high_update(trs, np.random.default_rng(3))
        # before the first optimizer step the new policy equals the old one,
        # so the ratio is 1 and both losses reduce to closed forms
        want_value = np.mean(adv ** 2)
        want_policy = -np.mean(adv) + hl.cfg.entropy_coef * np.mean(old_logp)
        assert abs(report["high_value_loss"] - want_value) < 1e-8
        assert abs(report["high_policy_loss"] - want_policy) < 1e-8
        assert report["transe_loss"] >= 0.0

    def test_terminal_target_is_raw_reward(self):
        hl, _ = make(alphabet="ab", obs=(2,), epochs=1)
        rng = np.random.default_rng(22)
        _, _, trs, _ = chain_batch(hl, rng)
        batch = hl._prepare([trs[1]], np.random.default_rng(0))
        np.testing.assert_allclose(batch.targets, [trs[1].reward])

    def test_empty_batch_rejected(self):
        hl, _ = make()
        with pytest.raises(ValueError):
            hl.high_update([], np.random.default_rng(0))

    def test_same_seed_same_parameters(self):
        results = []
        for _ in range(2):
            hl, store = make(alphabet="ab", obs=(2,), seed=4)
            rng = np.random.default_rng(23)
            _, _, trs, _ = chain_batch(hl, rng)
            hl.high_update(trs, np.random.default_rng(5))
            results.append({n: store.tensor(n).data.tobytes()
                            for n in store.names()})
        assert results[0] == results[1]

    def test_update_moves_policy_toward_advantage(self):
        hl, _ = make(alphabet="ab", obs=(2,), lr=3e-3)
        g = compile_abstract_graph(parse_spec("achieve a or achieve b"))
        view = hl.task_view(g)
        a_idx = [sorted(st.positives) for st in view.cand_subtasks].index(["a"])
        edge = view.candidates[a_idx]
        subtask = view.cand_subtasks[a_idx]
        s = np.array([0.3, -0.2])
        s2 = np.array([1.0, 1.0])
        trs = [HighTransition(s, g, edge, subtask, 4.0, 1, s2, EMPTY_GRAPH)
               for _ in range(4)]
        before = hl.plan(s, g, greedy=True).probs[a_idx]
        rng = np.random.default_rng(24)
        for _ in range(25):
            hl.high_update(trs, rng)
        after = hl.plan(s, g, greedy=True).probs[a_idx]
        assert after > before + 0.2
        assert after > 0.7


class TestEndToEndGrads:
    def test_full_loss_gradients_match_finite_differences(self):
        # smooth configuration: tanh activations and a margin large enough
        # to keep the hinge in its linear region
        hl, store = make(alphabet="ab", obs=(2,), seed=8,
                         activation="tanh", margin=10.0, gnn_steps=2)
        rng = np.random.default_rng(25)
        _, _, trs, _ = chain_batch(hl, rng)
        batch = hl._prepare(trs, np.random.default_rng(1))
        assert_grads_match(store, lambda: hl._batch_loss(batch)[0],
                           h=1e-6, atol=1e-8, rtol=1e-4)
