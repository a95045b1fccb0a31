import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfmsteer.kernels import (
    KernelParams,
    KrrModel,
    kernel_eval,
    kernel_matrix,
    krr_fit,
    krr_input_gradients,
    krr_predict,
    pairwise_distances,
)


def fd_gradient(model, x, ch, h=1e-5):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (krr_predict(model, x + e)[0, ch] - krr_predict(model, x - e)[0, ch]) / (2 * h)
    return g


class TestKernelParams:
    @pytest.mark.parametrize("kw", [dict(bandwidth=0.0), dict(bandwidth=-1.0), dict(bandwidth=1.0, q=0.0),
                                    dict(bandwidth=1.0, q=1.5, p=1.2), dict(bandwidth=1.0, p=2.5, q=1.0),
                                    dict(bandwidth=float("nan"))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            KernelParams(**kw)


class TestKernelEval:
    def test_same_point_is_one(self):
        x = np.array([0.3, -1.2, 5.0])
        assert kernel_eval(x, x, KernelParams(3.0, q=0.8, p=1.1)) == 1.0

    def test_laplace_hand_value(self):
        v = kernel_eval([0, 0], [2, 0], KernelParams(bandwidth=2.0, q=1.0, p=2.0))
        assert v == pytest.approx(np.exp(-1.0), abs=1e-12)

    def test_gaussian_hand_value(self):
        v = kernel_eval([1, 1], [0, 0], KernelParams(bandwidth=1.0, q=2.0, p=2.0))
        assert v == pytest.approx(np.exp(-2.0), abs=1e-12)

    def test_general_p_matches_formula(self):
        x, z = np.array([0.5, -1.0, 2.0]), np.array([1.5, 0.0, 0.0])
        pr = KernelParams(bandwidth=1.7, q=0.9, p=1.3)
        r = np.sum(np.abs(x - z) ** 1.3) ** (1 / 1.3)
        assert kernel_eval(x, z, pr) == pytest.approx(np.exp(-(r**0.9) / 1.7**0.9), rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kernel_eval([1, 2], [1, 2, 3], KernelParams(1.0))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            kernel_eval([np.nan, 0], [0, 0], KernelParams(1.0))

    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.lists(st.floats(-50, 50), min_size=3, max_size=3),
           st.floats(0.1, 100), st.floats(0.3, 2.0))
    def test_value_in_unit_interval(self, x, z, bw, q):
        v = kernel_eval(x, z, KernelParams(bw, q=q, p=2.0))
        assert 0.0 <= v <= 1.0


class TestKernelMatrix:
    def test_single_point(self):
        assert kernel_matrix([[1.0, 2.0]], [[1.0, 2.0]], KernelParams(1.0)).tolist() == [[1.0]]

    def test_symmetric_unit_diagonal(self, rng):
        X = rng.normal(size=(30, 5)) * 10
        for pr in (KernelParams(2.0), KernelParams(3.0, q=1.2, p=1.5)):
            K = kernel_matrix(X, X, pr)
            assert np.array_equal(K, K.T)
            assert np.all(np.diag(K) == 1.0)

    def test_separated_points_small_bandwidth(self):
        X = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        K = kernel_matrix(X, X, KernelParams(bandwidth=0.5, q=1.0))
        # hand oracle: off-diagonal = exp(-10 / 0.5) or exp(-sqrt(200) / 0.5)
        assert K[0, 1] == pytest.approx(np.exp(-20.0), rel=1e-9)
        assert K[1, 2] == pytest.approx(np.exp(-np.sqrt(200) / 0.5), rel=1e-9)
        assert np.all(K[~np.eye(3, dtype=bool)] < 1e-6)

    def test_entries_match_kernel_eval(self, rng):
        X, Z = rng.normal(size=(6, 4)), rng.normal(size=(5, 4))
        pr = KernelParams(1.3, q=0.8, p=1.4)
        K = kernel_matrix(X, Z, pr)
        ref = np.array([[kernel_eval(x, z, pr) for z in Z] for x in X])
        assert np.allclose(K, ref, rtol=1e-12, atol=0)

    def test_gram_distance_exact_zero_on_duplicates(self, rng):
        X = rng.normal(size=(10, 8)) * 1e3
        D = pairwise_distances(X, X.copy())
        assert np.all(np.diag(D) == 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kernel_matrix(np.zeros((2, 3)), np.zeros((2, 4)), KernelParams(1.0))


class TestKrr:
    def test_single_point_interpolates(self):
        m = krr_fit([[1.0, 2.0]], [3.5], KernelParams(1.0), 0.0)
        assert krr_predict(m, [[1.0, 2.0]])[0, 0] == 3.5

    def test_two_point_hand_solve(self):
        X = np.array([[0.0], [1.0]])
        y = np.array([1.0, -2.0])
        pr = KernelParams(bandwidth=1.0, q=1.0)
        k = np.exp(-1.0)
        # (K) alpha = y with K = [[1, k], [k, 1]]
        alpha = np.array([y[0] - k * y[1], y[1] - k * y[0]]) / (1 - k * k)
        m = krr_fit(X, y, pr, 0.0)
        assert np.allclose(m.alpha[:, 0], alpha, atol=1e-12)
        assert np.allclose(krr_predict(m, X)[:, 0], y, atol=1e-8)

    def test_residual_of_linear_system(self, rng):
        X, Y = rng.normal(size=(40, 3)), rng.normal(size=(40, 2))
        pr = KernelParams(2.0, q=1.1)
        m = krr_fit(X, Y, pr, 0.1)
        K = kernel_matrix(X, X, pr)
        assert np.linalg.norm((K + 0.1 * np.eye(40)) @ m.alpha - Y) < 1e-9

    def test_large_ridge_shrinks(self, rng):
        X = rng.normal(size=(25, 3))
        y = rng.uniform(-1, 1, 25)
        m = krr_fit(X, y, KernelParams(1.0), 1e6)
        assert np.max(np.abs(krr_predict(m, X))) < 1e-3

    @pytest.mark.parametrize("n", [2, 7, 20])
    def test_interpolation_at_zero_ridge(self, rng, n):
        X = rng.normal(size=(n, 4))
        y = rng.normal(size=n)
        m = krr_fit(X, y, KernelParams(2.0, q=1.0), 0.0)
        pred = krr_predict(m, X)[:, 0]
        assert np.allclose(pred, y, rtol=1e-6, atol=1e-6 * np.abs(y).max())

    def test_singular_system_recovers_with_jitter(self, caplog):
        # duplicated points make the Gaussian Gram matrix exactly singular
        X = np.array([[0.0], [0.0], [1.0]])
        m = krr_fit(X, [1.0, 1.0, 0.0], KernelParams(1.0, q=2.0, p=2.0), 0.0)
        assert np.all(np.isfinite(m.alpha))
        assert np.allclose(krr_predict(m, X)[:, 0], [1.0, 1.0, 0.0], atol=1e-4)

    def test_far_query_predicts_zero(self, rng):
        m = krr_fit(rng.normal(size=(10, 2)), rng.normal(size=10), KernelParams(1.0), 1e-3)
        assert np.allclose(krr_predict(m, [[1e6, 1e6]]), 0.0)

    def test_zero_alpha_predicts_zero(self, rng):
        X = rng.normal(size=(5, 3))
        m = KrrModel(KernelParams(1.0), X, np.zeros((5, 2)), 0.0)
        assert np.all(krr_predict(m, rng.normal(size=(4, 3))) == 0)
        assert np.all(krr_input_gradients(m, rng.normal(size=(4, 3))) == 0)

    def test_linearity_in_labels(self, rng):
        X = rng.normal(size=(30, 4))
        Y1, Y2 = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
        pr = KernelParams(2.5, q=0.9)
        Xq = rng.normal(size=(12, 4))
        f = lambda Y: krr_predict(krr_fit(X, Y, pr, 1e-2), Xq)
        assert np.allclose(f(Y1 + Y2), f(Y1) + f(Y2), atol=1e-8)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            krr_fit(np.zeros((3, 2)), np.zeros(4), KernelParams(1.0), 0.1)
        with pytest.raises(ValueError):
            krr_fit(np.zeros((3, 2)), [0, np.inf, 0], KernelParams(1.0), 0.1)
        with pytest.raises(ValueError):
            krr_fit(np.zeros((3, 2)), np.zeros(3), KernelParams(1.0), -1.0)
        m = krr_fit(rng.normal(size=(3, 2)), np.zeros(3), KernelParams(1.0), 0.1)
        with pytest.raises(ValueError):
            krr_predict(m, np.zeros((1, 3)))


class TestGradients:
    def test_matches_finite_differences_laplace_like(self, rng):
        X = rng.normal(size=(30, 5))
        m = krr_fit(X, rng.normal(size=(30, 2)), KernelParams(2.0, q=1.2, p=2.0), 1e-2)
        xq = rng.normal(size=5)
        G = krr_input_gradients(m, xq[None, :])
        for ch in range(2):
            ref = fd_gradient(m, xq, ch)
            assert np.linalg.norm(G[0, ch] - ref) <= 1e-4 * np.linalg.norm(ref)

    def test_matches_finite_differences_general_p(self, rng):
        X = rng.normal(size=(25, 4))
        m = krr_fit(X, rng.normal(size=25), KernelParams(1.5, q=0.8, p=1.6), 1e-2)
        xq = rng.normal(size=4)
        g = krr_input_gradients(m, xq[None, :], "summed")[0]
        ref = fd_gradient(m, xq, 0)
        assert np.linalg.norm(g - ref) <= 1e-4 * np.linalg.norm(ref)

    def test_gaussian_single_sample_direction(self, rng):
        x1 = rng.normal(size=6)
        m = krr_fit(x1[None, :], [1.0], KernelParams(2.0, q=2.0, p=2.0), 0.0)
        x = rng.normal(size=6)
        g = krr_input_gradients(m, x[None, :], "summed")[0]
        # d/dx exp(-|x - x1|^2 / L^2) = -2 (x - x1) / L^2 * k, so g is parallel to (x1 - x)
        cos = g @ (x1 - x) / (np.linalg.norm(g) * np.linalg.norm(x1 - x))
        assert cos == pytest.approx(1.0, abs=1e-12)

    def test_coincident_points_stay_finite(self, rng):
        X = rng.normal(size=(10, 3))
        m = krr_fit(X, rng.normal(size=10), KernelParams(1.0, q=0.8, p=1.5), 1e-3)
        G = krr_input_gradients(m, X)
        assert np.all(np.isfinite(G))

    def test_summed_equals_sum_of_channels(self, rng):
        X = rng.normal(size=(20, 3))
        m = krr_fit(X, rng.normal(size=(20, 3)), KernelParams(1.5, q=1.0), 1e-2)
        Xq = rng.normal(size=(4, 3))
        assert np.allclose(krr_input_gradients(m, Xq, "summed"), krr_input_gradients(m, Xq).sum(axis=1))

    def test_bad_mode(self, rng):
        m = krr_fit(rng.normal(size=(3, 2)), np.zeros(3), KernelParams(1.0), 0.1)
        with pytest.raises(ValueError):
            krr_input_gradients(m, np.zeros((1, 2)), "mean")

    @pytest.mark.parametrize("draw", range(100))
    def test_random_configurations(self, draw):
        r = np.random.default_rng([99, draw])
        q = r.uniform(0.7, 1.4)
        p = 2.0 if draw % 2 == 0 else r.uniform(q, 2.0)
        n, d = int(r.integers(5, 30)), int(r.integers(2, 8))
        X = r.normal(size=(n, d))
        m = krr_fit(X, r.normal(size=(n, 2)), KernelParams(r.uniform(1.0, 5.0), q=q, p=p), 10 ** r.uniform(-3, 0))
        xq = r.normal(size=d)
        G = krr_input_gradients(m, xq[None, :])[0]
        for ch in range(2):
            ref = fd_gradient(m, xq, ch)
            assert np.linalg.norm(G[ch] - ref) <= 1e-4 * max(np.linalg.norm(ref), 1e-8)
