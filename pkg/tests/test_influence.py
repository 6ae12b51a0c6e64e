"""Social graph, GNN layer pieces, propagation invariants and subgraph sampling."""

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pegcascade import autodiff as ad
from pegcascade.influence import (
    CascadeInstance,
    DataError,
    GnnLayerParams,
    SocialGraph,
    build_batch,
    gamma,
    gat_attention,
    gnn_layer,
    init_activation,
    neighbor_influence,
    predict_size,
    propagate,
    sample_local_subgraph,
    update_activation,
    update_embedding,
)


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def random_graph(rng, n, p=0.3):
    edges = [(a, b) for a in range(n) for b in range(n) if a != b and rng.random() < p]
    return SocialGraph([f"u{i}" for i in range(n)], edges)


def random_layers(rng, d, k, n_layers):
    layers = [GnnLayerParams.init(d, k, rng, f"g{l}") for l in range(n_layers)]
    for p in layers:
        p.xi.data[:] = rng.normal(size=1)
        p.eta.data[:] = rng.normal(size=1)
    return layers


def literal_layer(graph, nodes, seeds, e, s, theta, p):
    """Per-node loop transcription of one layer over the induced subgraph."""
    nodes = sorted(nodes)
    pos = {u: i for i, u in enumerate(nodes)}
    W, WI, ws, a = p.w.data, p.w_i.data, p.w_s.data, p.a.data
    d = W.shape[0]
    xi, eta = sig(p.xi.data[0]), sig(p.eta.data[0])
    we = e @ W
    e_new, s_new = np.zeros_like(e), np.zeros_like(s)
    for v in nodes:
        i = pos[v]
        nbrs = [pos[u] for u in graph.in_neighbors(v) if u in pos]
        agg = np.zeros(d)
        mass = 0.0
        inner = 0.0
        if nbrs:
            raw = np.array([a[:d] @ we[i] + a[d:] @ we[j] for j in nbrs])
            raw = np.where(raw > 0, raw, 0.2 * raw)
            alpha = np.exp(raw - raw.max()) / np.exp(raw - raw.max()).sum()
            for aj, j in zip(alpha, nbrs):
                agg += s[j] * aj * we[j]
                mass += s[j]
                inner += (ws[:d] @ we[j] + ws[d:] @ we[i]) * s[j]
        infl = np.concatenate([agg, (1.0 if mass > 0 else 0.0) * theta[i]])
        e_new[i] = sig(xi * we[i] + (1 - xi) * infl @ WI)
        if s[i] == 0 and mass == 0:
            s_new[i] = 0.0
        else:
            s_new[i] = sig((1 - eta) * s[i] + eta * inner)
        if v in seeds:
            s_new[i] = 1.0
    return e_new, s_new


class TestSocialGraph:
    def test_drops_self_loops_and_duplicates(self):
        g = SocialGraph(["a", "b"], [(0, 1), (0, 1), (1, 1)])
        assert g.n_edges == 1

    def test_direction(self):
        # a follows b: b's posts reach a
        g = SocialGraph.from_named_edges(["a", "b"], [("a", "b")])
        assert g.in_neighbors(0) == [1]
        assert g.out_neighbors(1) == [0]
        assert g.named_edges() == [("a", "b")]

    def test_duplicate_users_rejected(self):
        with pytest.raises(DataError):
            SocialGraph(["a", "a"])

    def test_cascade_size_below_seed_count(self):
        with pytest.raises(DataError):
            CascadeInstance("m", [], ["a", "b"], 1)


class TestInit:
    def test_seed_count(self):
        g = random_graph(np.random.default_rng(0), 10)
        batch = build_batch(g, [range(10)], [[1, 4, 7]])
        s = init_activation(batch).data
        assert s.sum() == 3 and set(np.flatnonzero(s)) == {1, 4, 7}

    def test_all_seeded(self):
        g = random_graph(np.random.default_rng(0), 6)
        batch = build_batch(g, [range(6)], [range(6)])
        assert init_activation(batch).data.sum() == 6

    def test_no_seeds_warns(self, caplog):
        g = random_graph(np.random.default_rng(0), 4)
        batch = build_batch(g, [range(4)], [[]])
        with caplog.at_level(logging.WARNING):
            s = init_activation(batch).data
        assert s.sum() == 0 and "no seed" in caplog.text

    def test_seed_outside_node_set(self):
        g = random_graph(np.random.default_rng(0), 4)
        with pytest.raises(DataError):
            build_batch(g, [[0, 1]], [[3]])


class TestLayerPieces:
    def star_into_center(self, n_leaves):
        # every leaf is followed by node 0, so N(0) = leaves
        g = SocialGraph([f"n{i}" for i in range(n_leaves + 1)], [(0, i) for i in range(1, n_leaves + 1)])
        return g, build_batch(g, [range(n_leaves + 1)], [[1]])

    def test_singleton_attention(self):
        g, batch = self.star_into_center(1)
        alpha = gat_attention(ad.constant(np.random.default_rng(0).normal(size=(2, 3))), batch, ad.constant(np.ones(6)))
        np.testing.assert_array_equal(alpha.data, [1.0])

    def test_identical_neighbours_uniform(self):
        g, batch = self.star_into_center(4)
        we = np.tile(np.array([0.3, -0.1, 0.7]), (5, 1))
        alpha = gat_attention(ad.constant(we), batch, ad.constant(np.random.default_rng(1).normal(size=6)))
        np.testing.assert_allclose(alpha.data, 0.25, atol=1e-15)

    def test_attention_literal_formula(self):
        g, batch = self.star_into_center(3)
        rng = np.random.default_rng(2)
        we, a = rng.normal(size=(4, 3)), rng.normal(size=6)
        alpha = gat_attention(ad.constant(we), batch, ad.constant(a)).data
        raw = np.array([a[:3] @ we[0] + a[3:] @ we[u] for u in batch.src])
        raw = np.where(raw > 0, raw, 0.2 * raw)
        np.testing.assert_allclose(alpha, np.exp(raw) / np.exp(raw).sum(), rtol=0, atol=1e-14)

    def test_gamma(self):
        np.testing.assert_array_equal(gamma([0.5, 0.0, -1.0]), [1.0, 0.0, 0.0])

    def test_influence_with_inactive_neighbours(self):
        g, batch = self.star_into_center(2)
        we = ad.constant(np.ones((3, 2)))
        s = ad.constant(np.zeros(3))
        alpha = gat_attention(we, batch, ad.constant(np.zeros(4)))
        infl = neighbor_influence(we, s, alpha, batch, ad.constant(np.full((3, 2), 0.4))).data
        np.testing.assert_array_equal(infl, np.zeros((3, 4)))

    def test_influence_single_active_neighbour(self):
        g, batch = self.star_into_center(1)
        we = ad.constant([[0.0, 0.0], [0.3, -0.6]])
        s = ad.constant([0.0, 1.0])
        theta = ad.constant([[0.2, 0.9], [0.2, 0.9]])
        alpha = gat_attention(we, batch, ad.constant(np.zeros(4)))
        infl = neighbor_influence(we, s, alpha, batch, theta).data
        np.testing.assert_allclose(infl[0], [0.3, -0.6, 0.2, 0.9], atol=1e-15)

    def test_embedding_gate_saturation(self):
        rng = np.random.default_rng(3)
        p = GnnLayerParams.init(3, 2, rng)
        p.xi.data[:] = 50.0
        we = rng.normal(size=(4, 3))
        out = update_embedding(ad.constant(we), ad.constant(rng.normal(size=(4, 5))), p).data
        np.testing.assert_allclose(out, sig(we), atol=1e-12)

    def test_embedding_zero_weights(self):
        p = GnnLayerParams.init(3, 2, np.random.default_rng(0))
        p.w_i.data[:] = 0.0
        out = update_embedding(ad.constant(np.zeros((4, 3))), ad.constant(np.ones((4, 5))), p).data
        np.testing.assert_array_equal(out, np.full((4, 3), 0.5))

    def test_isolated_node_stays_inactive(self):
        g = SocialGraph(["a", "b", "c"], [(1, 0)])
        batch = build_batch(g, [range(3)], [[0]])
        p = GnnLayerParams.init(2, 2, np.random.default_rng(0))
        s = update_activation(ad.constant(np.ones((3, 2))), init_activation(batch), batch, p).data
        assert s[2] == 0.0 and s[0] == 1.0 and 0 < s[1] < 1

    def test_isolated_node_literal_update_gives_half(self):
        g = SocialGraph(["a", "b"], [])
        batch = build_batch(g, [range(2)], [[0]])
        p = GnnLayerParams.init(2, 2, np.random.default_rng(0))
        s = update_activation(ad.constant(np.ones((2, 2))), init_activation(batch), batch, p,
                              keep_untouched=False).data
        assert s[1] == 0.5

    def test_eta_to_zero_keeps_state(self):
        g = SocialGraph(["a", "b", "c"], [(1, 0)])
        batch = build_batch(g, [range(3)], [[0]])
        p = GnnLayerParams.init(2, 2, np.random.default_rng(0))
        p.eta.data[:] = -60.0
        s0 = ad.constant([1.0, 0.3, 0.0])
        s = update_activation(ad.constant(np.ones((3, 2))), s0, batch, p).data
        np.testing.assert_allclose(s, [1.0, sig(0.3), 0.0], atol=1e-12)

    def test_two_node_literal_activation(self):
        g = SocialGraph(["a", "b"], [(1, 0)])
        batch = build_batch(g, [range(2)], [[0]])
        p = GnnLayerParams.init(2, 2, np.random.default_rng(0))
        p.w_s.data[:] = [0.5, -1.0, 2.0, 0.25]
        p.eta.data[:] = 0.4
        we = np.array([[0.2, 0.6], [-0.3, 0.8]])
        s = update_activation(ad.constant(we), ad.constant([1.0, 0.0]), batch, p).data
        eta = sig(0.4)
        inner = (0.5 * 0.2 - 1.0 * 0.6) + (2.0 * -0.3 + 0.25 * 0.8)
        assert s[1] == pytest.approx(sig(eta * inner), abs=1e-15)


class TestPropagation:
    def test_layer_matches_literal_oracle(self):
        rng = np.random.default_rng(4)
        g = random_graph(rng, 8, 0.35)
        nodes, seeds = [0, 1, 2, 3, 5, 6, 7], {1, 5}
        batch = build_batch(g, [nodes], [sorted(seeds)])
        d, k = 4, 3
        e = rng.normal(size=(7, d))
        theta = rng.uniform(size=(7, k))
        (p,) = random_layers(rng, d, k, 1)
        s0 = np.array([0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        e1, s1, _ = gnn_layer(ad.constant(e), ad.constant(s0), batch, ad.constant(theta), p)
        oe, os_ = literal_layer(g, nodes, seeds, e, s0, theta, p)
        np.testing.assert_allclose(e1.data, oe, rtol=0, atol=1e-12)
        np.testing.assert_allclose(s1.data, os_, rtol=0, atol=1e-12)

    def test_one_layer_is_one_application(self):
        rng = np.random.default_rng(5)
        g = random_graph(rng, 6)
        batch = build_batch(g, [range(6)], [[2]])
        e0, theta = ad.constant(rng.normal(size=(6, 3))), ad.constant(rng.uniform(size=(6, 2)))
        layers = random_layers(rng, 3, 2, 1)
        trace = propagate(batch, e0, theta, layers)
        e1, s1, _ = gnn_layer(e0, init_activation(batch), batch, theta, layers[0])
        np.testing.assert_array_equal(trace.final.data, s1.data)
        np.testing.assert_array_equal(trace.embeddings[-1].data, e1.data)

    def test_predict_size_sums(self):
        batch = build_batch(SocialGraph(list("abcde")), [range(5)], [[0, 2, 4]])
        assert predict_size(init_activation(batch), batch).data.tolist() == [3.0]
        assert predict_size(ad.constant(np.ones(5)), batch).data.tolist() == [5.0]

    def test_disjoint_batch_equals_separate_runs(self):
        rng = np.random.default_rng(6)
        g = random_graph(rng, 7)
        e_all, th_all = rng.normal(size=(7, 3)), rng.uniform(size=(7, 2))
        layers = random_layers(rng, 3, 2, 2)
        sets, seeds = [[0, 1, 2, 3, 4], [2, 3, 5, 6]], [[0], [5, 6]]
        batch = build_batch(g, sets, seeds)
        joint = propagate(batch, ad.constant(e_all[batch.node_user]), ad.constant(th_all[batch.node_user]), layers)
        sizes = predict_size(joint.final, batch).data
        for c in range(2):
            b = build_batch(g, [sets[c]], [seeds[c]])
            one = propagate(b, ad.constant(e_all[b.node_user]), ad.constant(th_all[b.node_user]), layers)
            assert predict_size(one.final, b).data[0] == pytest.approx(sizes[c], abs=1e-12)

    def test_zero_layers_rejected(self):
        batch = build_batch(SocialGraph(["a"]), [[0]], [[0]])
        with pytest.raises(ValueError):
            propagate(batch, ad.constant(np.zeros((1, 2))), ad.constant(np.zeros((1, 2))), [])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_invariants_and_relabeling(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 10))
        g = random_graph(rng, n, float(rng.uniform(0.1, 0.5)))
        seeds = sorted(rng.choice(n, size=int(rng.integers(1, n)), replace=False).tolist())
        d, k = 3, 2
        e0, theta = rng.normal(size=(n, d)), rng.uniform(size=(n, k))
        layers = random_layers(rng, d, k, 3)
        batch = build_batch(g, [range(n)], [seeds])
        trace = propagate(batch, ad.constant(e0), ad.constant(theta), layers)
        for s in trace.activations:
            assert np.all((s.data >= 0) & (s.data <= 1))
            assert np.all(s.data[seeds] == 1.0)
        for alpha in trace.attention:
            sums = np.zeros(n)
            np.add.at(sums, batch.dst, alpha.data)
            has_in = np.bincount(batch.dst, minlength=n) > 0
            np.testing.assert_allclose(sums[has_in], 1.0, atol=1e-9)
        size = predict_size(trace.final, batch).data[0]
        assert len(seeds) - 1e-12 <= size <= n + 1e-12

        perm = rng.permutation(n)  # old id -> new id
        inv = np.argsort(perm)
        g2 = SocialGraph([g.users[i] for i in inv], [(perm[a], perm[b]) for a, b in zip(g.follower, g.followee)])
        b2 = build_batch(g2, [range(n)], [[int(perm[s]) for s in seeds]])
        t2 = propagate(b2, ad.constant(e0[inv]), ad.constant(theta[inv]), layers)
        assert abs(predict_size(t2.final, b2).data[0] - size) < 1e-9
        np.testing.assert_allclose(t2.final.data[perm], trace.final.data, atol=1e-12)


class TestSampler:
    def star_followers(self, n_leaves):
        # node 0 is followed by every leaf
        return SocialGraph([f"n{i}" for i in range(n_leaves + 1)], [(i, 0) for i in range(1, n_leaves + 1)])

    def brute_hops(self, g, seeds, hops):
        reach = set(seeds)
        frontier = set(seeds)
        for _ in range(hops):
            frontier = {v for u in frontier for v in g.out_neighbors(u)} - reach
            reach |= frontier
        return sorted(reach)

    def test_zero_hops_is_seeds(self):
        g = self.star_followers(4)
        assert sample_local_subgraph(g, [0], 0, None, np.random.default_rng(0)) == [0]

    def test_star_cap(self):
        g = self.star_followers(6)
        got = sample_local_subgraph(g, [0], 1, 2, np.random.default_rng(0))
        assert len(got) == 3 and got[0] == 0
        assert set(got) <= set(self.brute_hops(g, [0], 1))

    def test_large_cap_is_exact(self):
        rng = np.random.default_rng(1)
        g = random_graph(rng, 15, 0.2)
        for hops in (1, 2, 3):
            assert sample_local_subgraph(g, [0, 3], hops, 100, rng) == self.brute_hops(g, [0, 3], hops)

    def test_deterministic(self):
        g = random_graph(np.random.default_rng(2), 20, 0.3)
        a = sample_local_subgraph(g, [1], 2, 3, np.random.default_rng(9))
        b = sample_local_subgraph(g, [1], 2, 3, np.random.default_rng(9))
        assert a == b

    def test_empty_seeds_rejected(self):
        with pytest.raises(ValueError):
            sample_local_subgraph(self.star_followers(2), [], 1, None, np.random.default_rng(0))
