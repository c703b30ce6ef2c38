import numpy as np
import pytest

from metaembed.data import ConceptVocabulary
from metaembed.exceptions import ContractViolation
from metaembed.gae import SourceEmbedding
from metaembed.graph import ViewGraph, normalize_adjacency, top_k_neighbors
from metaembed.meta import (
    VIEWS,
    DualMEAE,
    DualMEAEModel,
    MetaInputs,
    build_meta_inputs,
    loss_breakdown,
    meta_forward,
    meta_gradients,
    meta_loss,
    neighbor_average,
    train_dual_meae,
)
from metaembed.nn import Dense, max_relative_error, numeric_gradients


def random_inputs(r, n=5, d=4, views=VIEWS):
    return MetaInputs(tuple(views), {v: r.normal(size=(n, d)) for v in views},
                      {v: r.normal(size=(n, d)) for v in views})


def fake_graph(view, features, vocab):
    n = len(features)
    a = np.zeros((n, n))
    g = ViewGraph(view, vocab, a, normalize_adjacency(a), features, (), np.zeros((n, 1)))
    nbrs = tuple(tuple(top_k_neighbors(g, c)) for c in range(n))
    return ViewGraph(view, vocab, a, normalize_adjacency(a), features, nbrs, np.zeros((n, 1)))


class TestInputs:
    def test_identical_neighbors_average_to_them(self):
        src = np.array([[9.0, 9.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0]])
        avg = neighbor_average(src, [[(1, 1.0), (2, 1.0), (3, 1.0)]] + [[]] * 3)
        np.testing.assert_array_equal(avg[0], [1.0, 2.0])

    def test_two_concepts(self, rng):
        vocab = ConceptVocabulary(["D0", "D1"])
        feats = rng.random((2, 3))
        src = [SourceEmbedding(v, rng.normal(size=(2, 2)), vocab) for v in VIEWS]
        inputs = build_meta_inputs(src, [fake_graph(v, feats, vocab) for v in VIEWS])
        for s in src:
            np.testing.assert_array_equal(inputs.avg[s.view], s.matrix[::-1])

    def test_ten_concepts_match_neighbor_oracle(self, rng):
        vocab = ConceptVocabulary([f"D{i}" for i in range(10)])
        graphs, sources = [], []
        for v in VIEWS:
            feats = rng.integers(0, 3, size=(10, 4)).astype(float)
            graphs.append(fake_graph(v, feats, vocab))
            sources.append(SourceEmbedding(v, rng.normal(size=(10, 3)), vocab))
        inputs = build_meta_inputs(sources, graphs)
        for g, s in zip(graphs, sources):
            for c in range(10):
                idx = [j for j, _ in top_k_neighbors(g, c)]
                expected = (s.matrix[idx[0]] + s.matrix[idx[1]] + s.matrix[idx[2]]) / 3
                np.testing.assert_allclose(inputs.avg[g.view][c], expected, atol=1e-15)
            np.testing.assert_array_equal(inputs.src[g.view], s.matrix)

    def test_vocabulary_mismatch(self, rng):
        v1 = ConceptVocabulary(["D0", "D1"])
        v2 = ConceptVocabulary(["D1", "D0"])
        feats = rng.random((2, 2))
        src = [SourceEmbedding("dem", rng.normal(size=(2, 2)), v1),
               SourceEmbedding("lab", rng.normal(size=(2, 2)), v2)]
        with pytest.raises(ContractViolation):
            build_meta_inputs(src, [fake_graph("dem", feats, v1), fake_graph("lab", feats, v2)])

    def test_shape_mismatch(self, rng):
        with pytest.raises(ContractViolation):
            MetaInputs(("dem",), {"dem": np.ones((3, 2))}, {"dem": np.ones((3, 3))})


def straight_line(model, inputs, c):
    """Independent re-implementation of the forward composition."""
    relu = lambda z: np.maximum(z, 0.0)  # noqa: E731
    blocks = []
    for v in model.views:
        es, ea, vd = model.enc_src[v], model.enc_avg[v], model.view_dense[v]
        ts = relu(es.weight @ inputs.src[v][c] + es.bias)
        ta = relu(ea.weight @ inputs.avg[v][c] + ea.bias)
        blocks.append(vd.weight @ np.concatenate([ts, ta]) + vd.bias)
    h = np.concatenate(blocks)
    layers = model.decoder.layers
    for layer in layers[:-1]:
        h = relu(layer.weight @ h + layer.bias)
    out = layers[-1].weight @ h + layers[-1].bias
    return np.concatenate(blocks), out.reshape(6, model.dim)


class TestForward:
    @pytest.mark.parametrize("d", [4, 8, 16])
    def test_dimensions(self, d, rng):
        model = DualMEAEModel(VIEWS, d, rng=rng)
        m, dec, ts, ta = meta_forward(model, random_inputs(rng, d=d), 0)
        assert m.shape == (6 * d,) and dec.shape == (6, d)
        assert model.output_rows() == ["dem_src", "dem_avg", "lab_src", "lab_avg",
                                       "notes_src", "notes_avg"]

    def test_zero_propagation(self, rng):
        model = DualMEAEModel(VIEWS, 3, rng=rng)
        for layer in model.layers():
            layer.bias[:] = 0.0
        inputs = MetaInputs(VIEWS, {v: np.zeros((2, 3)) for v in VIEWS},
                            {v: np.zeros((2, 3)) for v in VIEWS})
        m, dec, _, _ = meta_forward(model, inputs, 1)
        assert not m.any() and not dec.any()

    def test_matches_straight_line_oracle(self, rng):
        inputs = random_inputs(rng, d=5)
        model = DualMEAEModel(VIEWS, 5, rng=rng)
        for layer in model.layers():
            layer.bias[:] = rng.normal(size=layer.bias.shape)
        for c in range(5):
            m, dec, _, _ = meta_forward(model, inputs, c)
            m_ref, dec_ref = straight_line(model, inputs, c)
            np.testing.assert_allclose(m, m_ref, atol=1e-12)
            np.testing.assert_allclose(dec, dec_ref, atol=1e-12)

    def test_batched_equals_single(self, rng):
        inputs = random_inputs(rng)
        model = DualMEAEModel(VIEWS, 4, rng=rng)
        batch = model.forward(inputs, np.arange(5))
        for c in range(5):
            np.testing.assert_allclose(batch["m"][c], meta_forward(model, inputs, c)[0], atol=1e-14)

    def test_index_out_of_range(self, rng):
        model = DualMEAEModel(VIEWS, 4, rng=rng)
        with pytest.raises(ContractViolation):
            meta_forward(model, random_inputs(rng), 5)

    def test_view_permutation_is_blockwise_exact(self, rng):
        d = 3
        inputs = random_inputs(rng, d=d)
        model = DualMEAEModel(VIEWS, d, rng=rng)
        order = ("notes", "dem", "lab")
        perm = model.permuted(order)
        a = model.forward(inputs, np.arange(5))
        b = perm.forward(inputs.restrict(order), np.arange(5))
        pos = [VIEWS.index(v) for v in order]
        m_ref = np.concatenate([a["m"][:, 2 * d * p:2 * d * (p + 1)] for p in pos], axis=1)
        dec_ref = np.concatenate([a["dec"][:, 2 * p:2 * p + 2] for p in pos], axis=1)
        assert np.array_equal(b["m"], m_ref) and np.array_equal(b["dec"], dec_ref)

    def test_single_encoder_variant_shapes(self, rng):
        model = DualMEAEModel(VIEWS, 4, dual=False, rng=rng)
        out = model.forward(random_inputs(rng), np.arange(5))
        assert out["m"].shape == (5, 24) and out["dec"].shape == (5, 3, 4)
        assert model.enc_avg == {} and len(model.layers()) == 2 * 3 + 3


class TestLoss:
    def test_perfect_reconstruction(self):
        d = 2
        inputs = MetaInputs(VIEWS, {v: np.array([[1.0, 2.0], [0.5, 3.0]]) for v in VIEWS},
                            {v: np.array([[1.0, 2.0], [0.5, 3.0]]) for v in VIEWS})
        layers = []
        for _ in VIEWS:
            layers += [Dense(np.eye(d), np.zeros(d), "relu"), Dense(np.eye(d), np.zeros(d), "relu"),
                       Dense(np.eye(2 * d), np.zeros(2 * d), "identity")]
        layers.append(Dense(np.eye(6 * d), np.zeros(6 * d), "identity"))
        model = DualMEAEModel(VIEWS, d, decoder_hidden=0, layers=layers)
        assert meta_loss(model, inputs) < 1e-12

    def test_hand_computed_reconstruction_terms(self, rng):
        d = 2
        model = DualMEAEModel(VIEWS, d, omega=(0.0, 1.0, 1.0), rng=rng)
        inputs = random_inputs(rng, n=3, d=d)
        c = 1
        _, dec, _, _ = meta_forward(model, inputs, c)
        targets = []
        for v in VIEWS:
            targets += [inputs.src[v][c], inputs.avg[v][c]]
        by_hand = sum(sum((dec[r][j] - t[j]) ** 2 for j in range(d)) for r, t in enumerate(targets))
        assert meta_loss(model, inputs, c) == pytest.approx(by_hand, rel=1e-12)

    def test_breakdown_sums_to_total(self, rng):
        model = DualMEAEModel(VIEWS, 4, rng=rng)
        inputs = random_inputs(rng)
        terms = loss_breakdown(model, inputs)
        assert abs(terms["align"] + terms["src"] + terms["avg"] - meta_loss(model, inputs)) < 1e-10
        assert meta_loss(model, inputs) == pytest.approx(sum(meta_loss(model, inputs, c) for c in range(5)))

    @pytest.mark.parametrize("which", [0, 1, 2])
    def test_omega_scales_term_linearly(self, which, rng):
        inputs = random_inputs(rng)
        base = DualMEAEModel(VIEWS, 4, rng=np.random.default_rng(5))
        omega = [1.0, 1.0, 1.0]
        omega[which] = 2.0
        scaled = DualMEAEModel(VIEWS, 4, omega=omega, rng=np.random.default_rng(5))
        key = ("align", "src", "avg")[which]
        a, b = loss_breakdown(base, inputs), loss_breakdown(scaled, inputs)
        assert b[key] == 2.0 * a[key]
        for other in set(("align", "src", "avg")) - {key}:
            assert b[other] == a[other]


class TestGradients:
    @pytest.mark.parametrize("dual", [True, False])
    def test_finite_differences(self, dual):
        r = np.random.default_rng(11)
        inputs = random_inputs(r)
        model = DualMEAEModel(VIEWS, 4, dual=dual, rng=r)
        grads = [g.copy() for g in meta_gradients(model, inputs)]
        num = numeric_gradients(lambda: meta_loss(model, inputs), model.params())
        assert max_relative_error(grads, num) < 1e-4


class TestTraining:
    def test_descends_and_is_deterministic(self, rng):
        inputs = random_inputs(rng, n=12, d=4)
        est = DualMEAE(epochs=80, lr=0.01, random_state=0).fit(inputs)
        c = est.loss_curve_
        assert c[-1] < 0.5 * c[0]
        assert all(b <= a * (1 + 1e-6) for a, b in zip(c[10:], c[11:]))
        again = DualMEAE(epochs=80, lr=0.01, random_state=0).fit(inputs)
        assert np.array_equal(est.embedding_, again.embedding_)
        assert est.embedding_.shape == (12, 24)

    def test_duplicate_concepts_share_embedding(self, rng):
        inputs = random_inputs(rng, n=6, d=3)
        for v in VIEWS:
            inputs.src[v][4] = inputs.src[v][2]
            inputs.avg[v][4] = inputs.avg[v][2]
        _, emb = train_dual_meae(inputs, seed=0, epochs=20)
        assert np.array_equal(emb.matrix[4], emb.matrix[2])

    def test_convergence_stops_early(self, rng):
        est = DualMEAE(epochs=5000, lr=0.05, tol=1e-3, patience=3).fit(random_inputs(rng))
        assert est.n_epochs_ < 5001

    def test_invalid(self, rng):
        with pytest.raises(ContractViolation):
            DualMEAE(omega=(0.0, 1.0, 1.0)).fit(random_inputs(rng))
        with pytest.raises(ContractViolation):
            DualMEAE().fit(random_inputs(rng, n=1))

    def test_transform_checks_views(self, rng):
        est = DualMEAE(epochs=3).fit(random_inputs(rng))
        with pytest.raises(ContractViolation):
            est.transform(random_inputs(rng).restrict(("dem",)))

    def test_sklearn_params(self):
        assert DualMEAE(lr=0.5).get_params()["lr"] == 0.5
