import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metaembed.data import ConceptVocabulary
from metaembed.exceptions import ContractViolation
from metaembed.gae import (
    GraphAutoencoder,
    gae_forward,
    gae_loss_and_grads,
    gae_train,
    project_sources,
)
from metaembed.graph import ViewGraph, build_graph, normalize_adjacency
from metaembed.nn import max_relative_error, numeric_gradients


def graph_from_adjacency(a, features):
    n = len(a)
    vocab = ConceptVocabulary([f"D{i}" for i in range(n)])
    return ViewGraph("dem", vocab, a, normalize_adjacency(a), features, (), np.zeros((n, 1)))


def random_graph(r, n, f=3, p=0.4):
    a = np.triu((r.random((n, n)) < p).astype(float), 1)
    a = a + a.T
    return a, r.normal(size=(n, f))


class TestForward:
    def test_isolated_node_identity_weights(self):
        x = np.array([[1.0, -2.0]])
        z = gae_forward(np.eye(2), np.eye(2), normalize_adjacency(np.zeros((1, 1))), x)
        np.testing.assert_array_equal(z, [[1.0, 0.0]])

    def test_zero_features(self, rng):
        a, _ = random_graph(rng, 5)
        z = gae_forward(rng.normal(size=(3, 4)), rng.normal(size=(4, 2)),
                        normalize_adjacency(a), np.zeros((5, 3)))
        assert not z.any()

    def test_path_graph_message_passing(self, rng):
        a = np.zeros((4, 4))
        for u in range(3):
            a[u, u + 1] = a[u + 1, u] = 1.0
        x = rng.normal(size=(4, 3))
        w0, w1 = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
        deg = a.sum(axis=1) + 1
        nbrs = [[j for j in range(4) if a[i, j] or i == j] for i in range(4)]

        def propagate(h):
            return np.array([sum(h[j] / np.sqrt(deg[i] * deg[j]) for j in nbrs[i])
                             for i in range(4)])

        expected = propagate(np.maximum(propagate(x) @ w0, 0.0)) @ w1
        np.testing.assert_allclose(gae_forward(w0, w1, normalize_adjacency(a), x), expected,
                                   atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ContractViolation):
            gae_forward(np.ones((2, 3)), np.ones((3, 2)), np.eye(4), np.ones((4, 5)))

    @given(st.integers(0, 10_000))
    def test_permutation_equivariance(self, seed):
        r = np.random.default_rng(seed)
        a, x = random_graph(r, 8)
        w0, w1 = r.normal(size=(3, 6)), r.normal(size=(6, 2))
        perm = r.permutation(8)
        P = np.eye(8)[perm]
        z = gae_forward(w0, w1, normalize_adjacency(a), x)
        zp = gae_forward(w0, w1, normalize_adjacency(P @ a @ P.T), P @ x)
        assert np.array_equal(zp, P @ z)


class TestLoss:
    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_match_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        a, x = random_graph(r, 5)
        w0, w1 = r.normal(size=(3, 4)), r.normal(size=(4, 4))
        an = normalize_adjacency(a)
        pre = an @ x @ w0
        assert np.all(np.abs(pre) > 1e-3)
        _, grads, _ = gae_loss_and_grads(w0, w1, an, x, a)
        num = numeric_gradients(lambda: gae_loss_and_grads(w0, w1, an, x, a)[0], [w0, w1])
        assert max_relative_error(grads, num) < 1e-4

    def test_balanced_weights(self):
        # with Z = 0 every logit is 0, so the loss is log 2 regardless of balance
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        loss, _, _ = gae_loss_and_grads(np.zeros((2, 2)), np.zeros((2, 2)),
                                        normalize_adjacency(a), np.ones((2, 2)), a)
        assert loss == pytest.approx(np.log(2.0))


class TestTraining:
    def test_two_cliques_separate(self):
        a = np.zeros((8, 8))
        a[:4, :4] = 1.0
        a[4:, 4:] = 1.0
        np.fill_diagonal(a, 0.0)
        g = graph_from_adjacency(a, np.eye(8))
        model, z = gae_train(g, hidden_dim=8, embed_dim=4, epochs=200, lr=0.01, seed=0)
        s = 1 / (1 + np.exp(-(z @ z.T)))
        block = np.zeros((8, 8), bool)
        block[:4, :4] = block[4:, 4:] = True
        off = ~np.eye(8, dtype=bool)
        assert s[block & off].mean() > s[~block].mean()

    def test_single_edge(self):
        g = graph_from_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]), np.eye(2))
        _, z = gae_train(g, hidden_dim=4, embed_dim=2, epochs=100, seed=0)
        assert 1 / (1 + np.exp(-z[0] @ z[1])) > 0.5

    def test_loss_non_increasing_and_deterministic(self, small_data):
        records, vocab, _ = small_data
        g = build_graph(records, vocab, "notes", tau=2)
        est = GraphAutoencoder(hidden_dim=16, embed_dim=8, epochs=60, random_state=3).fit(g)
        c = est.loss_curve_
        assert c[-1] < c[0]
        assert all(b <= a + 1e-6 for a, b in zip(c, c[1:]))
        again = GraphAutoencoder(hidden_dim=16, embed_dim=8, epochs=60, random_state=3).fit(g)
        assert np.array_equal(est.embedding_, again.embedding_)
        np.testing.assert_array_equal(est.transform(g), est.embedding_)

    def test_within_cluster_cosine_exceeds_cross(self, small_data):
        records, vocab, truth = small_data
        g = build_graph(records, vocab, "lab", tau=2)
        _, z = gae_train(g, hidden_dim=16, embed_dim=8, epochs=100, seed=0)
        codes = sorted(truth.clusters)
        idx = [vocab.lookup(c) for c in codes]
        lab = np.array([truth.clusters[c] for c in codes])
        u = z[idx] / np.maximum(np.linalg.norm(z[idx], axis=1, keepdims=True), 1e-12)
        cos = u @ u.T
        same = lab[:, None] == lab[None, :]
        off = ~np.eye(len(idx), dtype=bool)
        assert cos[same & off].mean() > cos[~same].mean()

    def test_rejects_edgeless_graph(self):
        with pytest.raises(ContractViolation):
            GraphAutoencoder().fit(graph_from_adjacency(np.zeros((3, 3)), np.eye(3)))

    def test_get_params(self):
        assert GraphAutoencoder(hidden_dim=5).get_params()["hidden_dim"] == 5


class TestProjection:
    def test_lossless_when_rank_permits(self, rng):
        z = rng.normal(size=(12, 3)) @ rng.normal(size=(3, 4))
        src = project_sources(z, 3, "dem")
        d1 = np.linalg.norm(z[:, None] - z[None], axis=-1)
        d2 = np.linalg.norm(src.matrix[:, None] - src.matrix[None], axis=-1)
        np.testing.assert_allclose(d1, d2, atol=1e-8)
        assert src.dim == 3 and src.view == "dem"

    def test_dominant_direction(self, rng):
        z = np.outer(rng.normal(size=40), [3.0, 1.0, 0.5]) + 0.01 * rng.normal(size=(40, 3))
        proj = project_sources(z, 2).matrix
        centered = z - z.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        total = (sv ** 2).sum()
        assert (proj[:, 0] ** 2).sum() / total > 0.9
        np.testing.assert_allclose((proj[:, 0] ** 2).sum(), sv[0] ** 2, rtol=1e-8)

    def test_duplicate_rows(self, rng):
        z = rng.normal(size=(6, 4))
        z[3] = z[1]
        p = project_sources(z, 2).matrix
        np.testing.assert_array_equal(p[3], p[1])

    def test_dim_must_shrink(self, rng):
        with pytest.raises(ContractViolation):
            project_sources(rng.normal(size=(5, 3)), 3)
