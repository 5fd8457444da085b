"""Controller: input assembly, action heads, Eq-style max targets, avoidance."""

import numpy as np
import pytest

from spectrl.graph import (
    EMPTY_GRAPH,
    SubTask,
    compile_abstract_graph,
    derive_edge_subtask,
    progress_task,
)
from spectrl.logic import parse_spec
from spectrl.low_level import (
    ActResult,
    AvoidanceConfig,
    LowConfig,
    LowInput,
    LowLevel,
    LowTransition,
    value_target,
)
from spectrl.nn import ParamStore

from helpers import assert_grads_match

TINY = dict(latent_dim=6, enc_hidden=(8,), actor_hidden=(8, 8), critic_hidden=(8,),
            reach_hidden=(8,), future_dim=5, gnn_steps=3, minibatch=8)


def make(alphabet="ab", obs=(3,), seed=0, **overrides):
    cfg = LowConfig(**{**TINY, **overrides})
    store = ParamStore(np.random.default_rng(seed))
    return LowLevel(store, alphabet, obs, cfg), store


def zero_params(store, prefix):
    for name in store.names():
        if name.startswith(prefix):
            store.tensor(name).data[:] = 0.0


def chain_pieces(text="achieve a; achieve b"):
    g = compile_abstract_graph(parse_spec(text))
    edge = g.out_edges(g.initial)[0]
    return g, derive_edge_subtask(g, edge), progress_task(g, edge)


class TestValueTarget:
    def test_pinned_examples(self):
        assert value_target(0.0, 0.99, 1.0, 2.0) == 2.0
        assert value_target(5.0, 0.99, 0.0, 1.0) == 5.0
        assert value_target(1.0, 0.99, 2.0) == pytest.approx(2.98)

    def test_max_semantics(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            r, v_next, v_high = rng.normal(scale=5.0, size=3)
            gamma = rng.uniform(0.5, 1.0)
            boot = r + gamma * v_next
            got = value_target(r, gamma, v_next, v_high)
            assert got >= boot and got >= v_high
            assert got == boot or got == v_high

    def test_without_high_value_is_plain_bootstrap(self):
        assert value_target(1.0, 0.5, -3.0) == pytest.approx(-0.5)


class TestAssembly:
    def test_bit_split(self):
        ll, _ = make(alphabet="abcd", obs=(2,))
        st = SubTask(frozenset("b"), frozenset("ad"))
        inp = ll.assemble(np.zeros(2), st, EMPTY_GRAPH)
        np.testing.assert_array_equal(inp.pos_bits, [0, 1, 0, 0])
        np.testing.assert_array_equal(inp.neg_bits, [1, 0, 0, 1])

    def test_deterministic(self):
        ll, _ = make()
        _, st, fut = chain_pieces()
        obs = np.array([0.1, -0.2, 0.3])
        a = ll.assemble(obs, st, fut)
        b = ll.assemble(obs, st, fut)
        assert a.obs.tobytes() == b.obs.tobytes()
        assert a.pos_bits.tobytes() == b.pos_bits.tobytes()
        assert a.neg_bits.tobytes() == b.neg_bits.tobytes()
        assert a.future is b.future

    def test_v_high_requires_completion_flag(self):
        ll, _ = make()
        _, st, fut = chain_pieces()
        inp = ll.assemble(np.zeros(3), st, fut)
        with pytest.raises(ValueError):
            LowTransition(inp, 0, 0.0, inp, False, False, v_high=1.0)
        with pytest.raises(ValueError):
            LowTransition(inp, 0, 0.0, inp, False, True, v_high=None)


class TestEmbedFuture:
    def test_empty_task_is_zero(self):
        ll, _ = make()
        emb = ll.embed_future(EMPTY_GRAPH).data
        np.testing.assert_array_equal(emb, np.zeros((1, 5)))

    def test_zero_weights_ignore_structure(self):
        ll, store = make()
        g1 = compile_abstract_graph(parse_spec("achieve a"))
        g2 = compile_abstract_graph(parse_spec("achieve a; achieve b"))
        ll.embed_future(g2)  # materialize params
        zero_params(store, "low/gnn")
        e1 = ll.embed_future(g1).data
        e2 = ll.embed_future(g2).data
        np.testing.assert_array_equal(e1, e2)

    def test_random_weights_separate_structures(self):
        # needs real widths: tiny relu nets can kill the structural signal
        hits = 0
        for seed in range(5):
            ll, _ = make(seed=seed, future_dim=32)
            g1 = compile_abstract_graph(parse_spec("achieve a"))
            g2 = compile_abstract_graph(parse_spec("achieve a; achieve b"))
            d = np.abs(ll.embed_future(g1).data - ll.embed_future(g2).data).max()
            hits += d > 1e-8
        assert hits == 5

    def test_cached_row_matches_direct(self):
        ll, _ = make()
        g = compile_abstract_graph(parse_spec("achieve a; achieve b"))
        row = ll._future_row(g)
        np.testing.assert_array_equal(row, ll.embed_future(g).data[0])
        assert ll._future_row(g) is row  # cache hit until parameters move


class TestDiscreteActing:
    def test_uniform_when_logits_flat(self):
        ll, store = make()
        _, st, fut = chain_pieces()
        inp = ll.assemble(np.zeros(3), st, fut)
        ll.act(inp, np.random.default_rng(0))
        zero_params(store, "low/pi")
        counts = np.zeros(4)
        rng = np.random.default_rng(1)
        for _ in range(400):
            r = ll.act(inp, rng)
            counts[r.action] += 1
            assert r.logp == pytest.approx(np.log(0.25))
        assert counts.min() > 60

    def test_logp_matches_softmax(self):
        ll, _ = make()
        _, st, fut = chain_pieces()
        inp = ll.assemble(np.array([0.5, -1.0, 2.0]), st, fut)
        r = ll.act(inp, np.random.default_rng(2))
        logps = ll.action_logp([inp], [r.action])
        assert r.logp == pytest.approx(logps[0])
        assert 0.0 < np.exp(r.logp) <= 1.0

    def test_greedy_is_argmax_and_raw_equals_action(self):
        ll, _ = make()
        _, st, fut = chain_pieces()
        inp = ll.assemble(np.ones(3), st, fut)
        r = ll.act(inp, greedy=True)
        assert isinstance(r, ActResult)
        assert r.raw == r.action
        all_logps = ll.action_logp([inp] * 4, list(range(4)))
        assert r.action == int(np.argmax(all_logps))

    def test_sampling_needs_rng(self):
        ll, _ = make()
        _, st, fut = chain_pieces()
        with pytest.raises(ValueError):
            ll.act(ll.assemble(np.zeros(3), st, fut))


class TestContinuousActing:
    def make_cont(self, **kw):
        return make(continuous=True, action_dim=2, **kw)

    def test_action_is_squashed_raw(self):
        ll, _ = self.make_cont()
        _, st, fut = chain_pieces()
        r = ll.act(ll.assemble(np.zeros(3), st, fut), np.random.default_rng(3))
        np.testing.assert_allclose(r.action, np.tanh(r.raw))
        assert np.all(np.abs(r.action) < 1.0)

    def test_tiny_stddev_collapses_to_mean(self):
        ll, store = self.make_cont()
        _, st, fut = chain_pieces()
        inp = ll.assemble(np.zeros(3), st, fut)
        ll.act(inp, np.random.default_rng(0))
        store.tensor("low/log_std/b").data[:] = -40.0  # clipped to the bound
        zero_params(store, "low/log_std/w")
        greedy = ll.act(inp, greedy=True)
        rng = np.random.default_rng(4)
        for _ in range(10):
            r = ll.act(inp, rng)
            np.testing.assert_allclose(r.raw, greedy.raw, atol=0.05)

    def test_logp_matches_analytic_density(self):
        ll, _ = self.make_cont()
        _, st, fut = chain_pieces()
        inp = ll.assemble(np.array([1.0, 0.5, -0.5]), st, fut)
        r = ll.act(inp, np.random.default_rng(5))
        feats = ll._features([inp])
        mean, log_std = ll._policy_params(feats)
        mu, ls = mean.data[0], log_std.data[0]
        u = np.asarray(r.raw)
        gauss = np.sum(-0.5 * ((u - mu) / np.exp(ls)) ** 2 - ls
                       - 0.5 * np.log(2 * np.pi))
        corr = np.sum(np.log(1.0 - np.tanh(u) ** 2 + 1e-6))
        assert r.logp == pytest.approx(gauss - corr, abs=1e-10)
        assert ll.action_logp([inp], u[None])[0] == pytest.approx(r.logp)


class TestMyopicAblation:
    def test_future_invariance_when_myopic(self):
        ll, _ = make(myopic=True)
        _, st, _ = chain_pieces()
        g1 = compile_abstract_graph(parse_spec("achieve b"))
        g2 = compile_abstract_graph(parse_spec("achieve b; achieve a"))
        obs = np.array([0.3, 0.1, -0.7])
        lp1 = ll.action_logp([ll.assemble(obs, st, g1)] * 4, list(range(4)))
        lp2 = ll.action_logp([ll.assemble(obs, st, g2)] * 4, list(range(4)))
        np.testing.assert_array_equal(lp1, lp2)

    def test_future_matters_otherwise(self):
        ll, _ = make()
        _, st, _ = chain_pieces()
        g1 = compile_abstract_graph(parse_spec("achieve b"))
        g2 = compile_abstract_graph(parse_spec("achieve b; achieve a"))
        obs = np.array([0.3, 0.1, -0.7])
        lp1 = ll.action_logp([ll.assemble(obs, st, g1)] * 4, list(range(4)))
        lp2 = ll.action_logp([ll.assemble(obs, st, g2)] * 4, list(range(4)))
        assert np.abs(lp1 - lp2).max() > 1e-10


class TestAvoidance:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            AvoidanceConfig(nu=0.0)
        with pytest.raises(ValueError):
            AvoidanceConfig(nu=1.0)
        with pytest.raises(ValueError):
            AvoidanceConfig(candidates=0)

    def test_no_negatives_is_identity(self):
        ll, _ = make()
        st = SubTask(frozenset("a"), frozenset())
        inp = ll.assemble(np.zeros(3), st, EMPTY_GRAPH)
        assert ll.avoidance_action(inp, 3) == 3

    def test_safe_zone_is_identity(self):
        # fresh sigmoid heads sit near 0.5, well under the 0.9 threshold
        ll, _ = make()
        st = SubTask(frozenset("a"), frozenset("b"))
        inp = ll.assemble(np.zeros(3), st, EMPTY_GRAPH)
        assert ll.reach_values(inp.obs, ["b"]).max() < 0.9
        assert ll.avoidance_action(inp, 2) == 2

    def test_triggered_override_picks_min_q(self):
        ll, store = make()
        st = SubTask(frozenset("a"), frozenset("b"))
        inp = ll.assemble(np.zeros(3), st, EMPTY_GRAPH)
        ll.reach_values(inp.obs, ["b"])
        ll.reach_q_values(inp.obs, "b")
        zero_params(store, "low/reach_v")
        zero_params(store, "low/reach_q")
        store.tensor("low/reach_v/l1/b").data[:] = 20.0   # sigmoid -> ~1
        store.tensor("low/reach_q/l1/b").data[:] = [0.3, -0.5, 0.1, 0.4]
        assert ll.avoidance_action(inp, 0) == 1

    def test_override_moves_away_on_grid(self):
        # distance oracle standing in for trained heads: the override must
        # pick the move that gets farthest from the hazard
        moves = np.array([(1, 0), (-1, 0), (0, 1), (0, -1)])
        hazard = np.array([2.0, 2.0])

        class Oracle(LowLevel):
            def reach_values(self, obs, goals):
                d = np.abs(obs[:2] - hazard).sum()
                return np.array([0.97 ** d] * len(goals))

            def reach_q_values(self, obs, goal, actions=None):
                after = obs[:2] + moves
                return 0.97 ** np.abs(after - hazard).sum(axis=1)

        store = ParamStore(np.random.default_rng(0))
        ll = Oracle(store, "ab", (2,), LowConfig(**TINY))
        st = SubTask(frozenset("a"), frozenset("b"))
        near = ll.assemble(np.array([2.0, 1.0]), st, EMPTY_GRAPH)
        pick = ll.avoidance_action(near, 0)
        d_after = np.abs(near.obs[:2] + moves[pick] - hazard).sum()
        assert d_after == max(np.abs(near.obs[:2] + m - hazard).sum()
                              for m in moves)
        far = ll.assemble(np.array([-8.0, -8.0]), st, EMPTY_GRAPH)
        assert ll.avoidance_action(far, 3) == 3

    def test_continuous_override_prefers_low_q_candidates(self):
        ll, store = make(continuous=True, action_dim=2)
        st = SubTask(frozenset("a"), frozenset("b"))
        inp = ll.assemble(np.zeros(3), st, EMPTY_GRAPH)
        rng = np.random.default_rng(6)
        ll.reach_values(inp.obs, ["b"])
        ll.reach_q_values(inp.obs, "b", np.zeros((1, 2)))
        zero_params(store, "low/reach_v")
        store.tensor("low/reach_v/l1/b").data[:] = 20.0
        pick = ll.avoidance_action(inp, np.zeros(2), rng)
        assert pick.shape == (2,)
        assert np.all(np.abs(pick) <= 1.0)


def rollout(ll, st, fut, n=10, seed=7, v_high=1.2):
    """Synthetic in-order transitions, completion midway, episode end last."""
    rng = np.random.default_rng(seed)
    trs = []
    obs = rng.normal(size=3)
    for t in range(n):
        nxt = rng.normal(size=3)
        inp = ll.assemble(obs, st, fut)
        act = ll.act(inp, rng)
        done = t == n - 1
        comp = t == n // 2
        trs.append(LowTransition(inp, act.raw, float(rng.normal()),
                                 ll.assemble(nxt, st, fut), done, comp,
                                 v_high if comp else None))
        obs = nxt
    return trs


class TestLowUpdate:
    def test_empty_batch_rejected(self):
        ll, _ = make()
        with pytest.raises(ValueError):
            ll.low_update([], np.random.default_rng(0))

    def test_zero_advantage_zero_losses(self):
        ll, _ = make(entropy_coef=0.0, reach_coef=0.0, epochs=1, minibatch=64)
        _, st, fut = chain_pieces()
        rng = np.random.default_rng(8)
        # rewards chosen so every one-step target equals the current value
        pre = []
        obs = rng.normal(size=(5, 3))
        inputs = [ll.assemble(o, st, fut) for o in obs]
        vals = ll.values(inputs)
        for t in range(4):
            r = vals[t] - ll.cfg.gamma * vals[t + 1]
            act = ll.act(inputs[t], rng)
            pre.append(LowTransition(inputs[t], act.raw, float(r),
                                     inputs[t + 1], False, False, None))
        rep = ll.low_update(pre, np.random.default_rng(9))
        assert rep["low_policy_loss"] == 0.0
        assert rep["low_value_loss"] == 0.0

    def test_reach_targets(self):
        ll, _ = make()
        _, st, fut = chain_pieces()
        trs = rollout(ll, st, fut)
        batch = ll._prepare(trs)
        assert len(batch.reach_idx) == len(trs)  # single-goal sub-task
        comp = [i for i, t in enumerate(trs) if t.completed][0]
        done = len(trs) - 1
        assert batch.reach_targets[comp] == 1.0
        assert batch.reach_targets[done] == 0.0
        v_next = ll._reach_v(ll.encode(trs[0].next_inp.obs[None]),
                             trs[0].inp.pos_bits[None]).data[0]
        assert batch.reach_targets[0] == pytest.approx(ll.cfg.gamma * v_next)

    def test_completion_target_takes_max(self):
        # completion on the final step: no GAE carry, so the prepared return
        # equals the max target exactly
        ll, _ = make()
        _, st, fut = chain_pieces()
        rng = np.random.default_rng(30)
        inp = ll.assemble(rng.normal(size=3), st, fut)
        nxt = ll.assemble(rng.normal(size=3), st, fut)
        act = ll.act(inp, rng)
        high = LowTransition(inp, act.raw, 0.7, nxt, True, True, v_high=50.0)
        low = LowTransition(inp, act.raw, 0.7, nxt, True, True, v_high=-50.0)
        assert ll._prepare([high]).targets[0] == pytest.approx(50.0)
        assert ll._prepare([low]).targets[0] == pytest.approx(0.7)

    def test_gradient_reaches_future_gnn(self):
        ll, store = make()
        _, st, fut = chain_pieces()
        trs = rollout(ll, st, fut)
        batch = ll._prepare(trs)
        from spectrl.nn import tape
        with tape.record() as tp:
            total, *_ = ll._minibatch_loss(batch, np.arange(len(trs)))
        tp.backward(total)
        grads = store.collect_grads()
        gnn_norm = sum(np.abs(g).sum() for n, g in grads.items()
                       if n.startswith("low/gnn"))
        assert gnn_norm > 0.0

    def test_myopic_excludes_future_gnn(self):
        ll, store = make(myopic=True)
        _, st, fut = chain_pieces()
        trs = rollout(ll, st, fut)
        batch = ll._prepare(trs)
        from spectrl.nn import tape
        with tape.record() as tp:
            total, *_ = ll._minibatch_loss(batch, np.arange(len(trs)))
        tp.backward(total)
        grads = store.collect_grads()
        assert all(not n.startswith("low/gnn") or np.all(g == 0)
                   for n, g in grads.items())

    def test_same_seed_same_parameters(self):
        results = []
        for _ in range(2):
            ll, store = make(seed=11)
            _, st, fut = chain_pieces()
            trs = rollout(ll, st, fut, seed=12)
            ll.low_update(trs, np.random.default_rng(13))
            results.append({n: store.tensor(n).data.tobytes()
                            for n in store.names()})
        assert results[0] == results[1]

    def test_report_keys(self):
        ll, _ = make()
        _, st, fut = chain_pieces()
        rep = ll.low_update(rollout(ll, st, fut), np.random.default_rng(14))
        assert sorted(rep) == ["low_policy_loss", "low_value_loss", "q_aux_loss"]
        assert all(isinstance(v, float) and np.isfinite(v) for v in rep.values())


class TestEndToEndGrads:
    def test_discrete_loss_gradients_match_finite_differences(self):
        ll, store = make(seed=15, activation="tanh", gnn_steps=2)
        _, st, fut = chain_pieces()
        trs = rollout(ll, st, fut, n=4, seed=16)
        batch = ll._prepare(trs)
        idx = np.arange(len(trs))
        assert_grads_match(store, lambda: ll._minibatch_loss(batch, idx)[0],
                           h=1e-6, atol=1e-8, rtol=1e-4)

    def test_continuous_loss_gradients_match_finite_differences(self):
        ll, store = make(seed=17, activation="tanh", gnn_steps=2,
                         continuous=True, action_dim=2)
        _, st, fut = chain_pieces()
        trs = rollout(ll, st, fut, n=4, seed=18)
        batch = ll._prepare(trs)
        idx = np.arange(len(trs))
        assert_grads_match(store, lambda: ll._minibatch_loss(batch, idx)[0],
                           h=1e-6, atol=1e-8, rtol=1e-4)
