import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metaembed.exceptions import ContractViolation, NumericError
from metaembed.linalg import PCA, matmul, pca_fit_transform, read_matrix_csv, svd, write_matrix_csv


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def matrices(max_side=6):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite))


class TestMatmul:
    def test_hand_example(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        assert np.array_equal(matmul(a, b), [[17.0], [39.0]])

    def test_identity(self, rng):
        a = rng.normal(size=(4, 3))
        assert np.array_equal(matmul(a, np.eye(3)), a)

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
    def test_matches_triple_loop(self, n, k, m, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(n, k)), r.normal(size=(k, m))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            matmul(np.array([[np.inf]]), np.ones((1, 1)))


class TestSvd:
    @given(matrices())
    def test_reconstruction_and_orthonormality(self, m):
        u, s, vt = svd(m)
        r = min(m.shape)
        assert u.shape == (m.shape[0], r) and vt.shape == (r, m.shape[1])
        scale = max(1.0, np.abs(m).max())
        np.testing.assert_allclose(u @ np.diag(s) @ vt, m, atol=1e-10 * scale)
        np.testing.assert_allclose(u.T @ u, np.eye(r), atol=1e-10)
        np.testing.assert_allclose(vt @ vt.T, np.eye(r), atol=1e-10)
        assert np.all(s >= 0) and np.all(np.diff(s) <= 1e-12 * scale)

    @given(matrices())
    def test_singular_values_match_numpy(self, m):
        np.testing.assert_allclose(svd(m)[1], np.linalg.svd(m, compute_uv=False),
                                   atol=1e-9 * max(1.0, np.abs(m).max()))

    def test_diagonal(self):
        u, s, vt = svd(np.diag([1.0, 3.0, 2.0]))
        np.testing.assert_allclose(s, [3.0, 2.0, 1.0])

    def test_rank_deficient_completes_basis(self):
        m = np.outer([1.0, 2.0, 3.0], [1.0, 1.0])
        u, s, vt = svd(m)
        assert s[1] < 1e-12
        np.testing.assert_allclose(u.T @ u, np.eye(2), atol=1e-12)

    def test_zero_matrix(self):
        u, s, vt = svd(np.zeros((3, 2)))
        assert np.all(s == 0)
        np.testing.assert_allclose(u.T @ u, np.eye(2), atol=1e-12)

    def test_non_convergence_raises(self, rng):
        with pytest.raises(NumericError):
            svd(rng.normal(size=(6, 6)), max_sweeps=1)


class TestPca:
    def test_lossless_when_rank_permits(self, rng):
        m = rng.normal(size=(10, 3)) @ rng.normal(size=(3, 5))
        proj, comps, mean = pca_fit_transform(m, 3)
        d_orig = np.linalg.norm(m[:, None] - m[None], axis=-1)
        d_proj = np.linalg.norm(proj[:, None] - proj[None], axis=-1)
        np.testing.assert_allclose(d_proj, d_orig, atol=1e-8)

    def test_matches_sklearn_up_to_sign(self, rng):
        from sklearn.decomposition import PCA as SkPCA

        m = rng.normal(size=(30, 6))
        ours, _, _ = pca_fit_transform(m, 3)
        ref = SkPCA(3, svd_solver="full").fit_transform(m)
        for j in range(3):
            sign = np.sign(ours[:, j] @ ref[:, j])
            np.testing.assert_allclose(ours[:, j], sign * ref[:, j], atol=1e-8)

    def test_sign_convention(self, rng):
        _, comps, _ = pca_fit_transform(rng.normal(size=(12, 4)), 2)
        idx = np.argmax(np.abs(comps), axis=1)
        assert np.all(comps[np.arange(2), idx] > 0)

    def test_duplicate_rows_stay_duplicate(self, rng):
        m = rng.normal(size=(8, 4))
        m[5] = m[2]
        proj, _, _ = pca_fit_transform(m, 2)
        np.testing.assert_array_equal(proj[5], proj[2])

    @pytest.mark.parametrize("dim", [0, 5])
    def test_bad_dim(self, dim):
        with pytest.raises(ContractViolation):
            pca_fit_transform(np.ones((4, 4)), dim)

    def test_single_row(self):
        with pytest.raises(ContractViolation):
            pca_fit_transform(np.ones((1, 3)), 1)

    def test_estimator(self, rng):
        X = rng.normal(size=(20, 5))
        est = PCA(n_components=2)
        Z = est.fit_transform(X)
        np.testing.assert_allclose(est.transform(X), Z, atol=1e-12)
        assert est.get_params() == {"n_components": 2}
        assert 0 < est.explained_variance_ratio_.sum() <= 1 + 1e-12
        with pytest.raises(ContractViolation):
            est.transform(X[:, :3])


def test_matrix_csv_roundtrip(tmp_path, rng):
    m = rng.normal(size=(3, 4))
    path = tmp_path / "m.csv"
    write_matrix_csv(path, m)
    assert path.read_text().splitlines()[0] == "3,4"
    np.testing.assert_array_equal(read_matrix_csv(path), m)


def test_matrix_csv_bad_row(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("2,2\n1,2\n3\n")
    with pytest.raises(ValueError, match=":3:"):
        read_matrix_csv(path)
