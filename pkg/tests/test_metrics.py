import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ortho_group

from rfmsteer.kernels import KernelParams
from rfmsteer.metrics import (
    TemporalTrace,
    causal_pool,
    frechet_distance,
    median_bandwidth,
    mmd,
    moving_average,
    probe_accuracy,
    temporal_trace,
    trend_stats,
)
from rfmsteer.rfm import RfmConfig, multiclass_predict, rfm_train


@pytest.fixture(scope="module")
def mc_probe():
    r = np.random.default_rng(0)
    y = np.repeat(np.arange(3), 50)
    X = np.eye(5)[y] * 4 + r.normal(size=(150, 5))
    return rfm_train(X[::2], y[::2], X[1::2], y[1::2], "multiclass", RfmConfig(KernelParams(5.0), iterations=3)), X, y


class TestAccuracy:
    def test_perfect_and_adversarial(self, mc_probe):
        probe, X, _ = mc_probe
        pred = probe.predict(X)
        assert probe_accuracy(probe, X, pred) == 1.0
        assert probe_accuracy(probe, X, (pred + 1) % 3) == 0.0

    def test_train_not_below_val(self, mc_probe):
        probe, X, y = mc_probe
        assert probe_accuracy(probe, X[::2], y[::2]) >= probe_accuracy(probe, X[1::2], y[1::2]) - 0.05

    def test_random_labels_near_chance(self, mc_probe):
        probe, X, _ = mc_probe
        r = np.random.default_rng(1)
        Xr = np.repeat(X, 20, axis=0)
        acc = probe_accuracy(probe, Xr, r.integers(0, 3, len(Xr)))
        n = len(Xr)
        assert abs(acc - 1 / 3) <= 3 * np.sqrt((1 / 3) * (2 / 3) / n)

    def test_refuses_regression(self):
        r = np.random.default_rng(0)
        X = r.normal(size=(40, 2))
        probe = rfm_train(X[:30], X[:30, 0], X[30:], X[30:, 0], "regression", RfmConfig(KernelParams(2.0), iterations=1))
        with pytest.raises(ValueError):
            probe_accuracy(probe, X, np.zeros(40))

    def test_label_range(self, mc_probe):
        probe, X, _ = mc_probe
        with pytest.raises(ValueError):
            probe_accuracy(probe, X[:2], [0, 3])


sets = st.integers(0, 2**31 - 1)


class TestFrechet:
    def test_identical(self, rng):
        A = rng.normal(size=(50, 4))
        assert frechet_distance(A, A) == 0.0
        assert frechet_distance(A, A.copy() + 0.0) < 1e-6

    def test_1d_mean_shift(self, rng):
        a = rng.normal(size=200)
        b = a + 3.0
        assert frechet_distance(a, b) == pytest.approx(9.0, abs=1e-6)

    def test_rotation_invariant(self, rng):
        A, B = rng.normal(size=(80, 5)), rng.normal(size=(80, 5)) * 2 + 1
        R = ortho_group.rvs(5, random_state=3)
        assert frechet_distance(A @ R, B @ R) == pytest.approx(frechet_distance(A, B), abs=1e-6)

    @given(sets)
    def test_symmetric_and_translation_invariant(self, seed):
        r = np.random.default_rng(seed)
        A, B = r.normal(size=(30, 3)), r.normal(size=(25, 3)) * r.uniform(0.5, 2)
        fab, fba = frechet_distance(A, B), frechet_distance(B, A)
        assert abs(fab - fba) <= 1e-10 * max(1.0, fab)
        t = r.normal(size=3) * 10
        assert frechet_distance(A + t, B + t) == pytest.approx(fab, abs=1e-6)
        assert fab >= 0

    def test_degenerate_covariance_finite(self):
        A = np.zeros((5, 10))
        B = np.ones((5, 10))
        assert np.isfinite(frechet_distance(A, B))

    def test_errors(self):
        with pytest.raises(ValueError):
            frechet_distance(np.zeros((1, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            frechet_distance(np.zeros((3, 2)), np.zeros((3, 3)))


def brute_mmd(A, B, bw):
    k = lambda x, y: np.exp(-np.sum((x - y) ** 2) / (2 * bw**2))
    m, n = len(A), len(B)
    aa = sum(k(A[i], A[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    bb = sum(k(B[i], B[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    ab = sum(k(A[i], B[j]) for i in range(m) for j in range(n)) / (m * n)
    return aa + bb - 2 * ab


class TestMmd:
    def test_identical_is_zero(self, rng):
        A = rng.normal(size=(40, 3))
        assert abs(mmd(A, A)) < 1e-6

    def test_brute_force_separated(self, rng):
        A = rng.normal(size=(15, 2)) * 0.1
        B = rng.normal(size=(12, 2)) * 0.1 + 100
        bw = 1.0
        assert mmd(A, B, bw) == pytest.approx(brute_mmd(A, B, bw), abs=1e-3)
        assert mmd(A, B, bw) > 1.5

    def test_brute_force_overlapping(self, rng):
        A, B = rng.normal(size=(20, 3)), rng.normal(size=(17, 3)) + 0.5
        bw = median_bandwidth(A, B)
        assert mmd(A, B) == pytest.approx(brute_mmd(A, B, bw), abs=1e-10)

    def test_permutation_null(self, rng):
        pool = rng.normal(size=(120, 3))
        A, B = pool[:60], pool[60:]
        bw = median_bandwidth(pool)
        stat = mmd(A, B, bw)
        reps = []
        for _ in range(200):
            p = rng.permutation(120)
            reps.append(mmd(pool[p[:60]], pool[p[60:]], bw))
        assert abs(stat) <= np.percentile(np.abs(reps), 95)

    @given(sets)
    def test_symmetric(self, seed):
        r = np.random.default_rng(seed)
        A, B = r.normal(size=(20, 2)), r.normal(size=(15, 2)) + 1
        assert abs(mmd(A, B) - mmd(B, A)) <= 1e-10

    def test_errors(self):
        with pytest.raises(ValueError):
            mmd(np.zeros((1, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            mmd(np.zeros((3, 2)), np.ones((3, 2)), bandwidth=0.0)


class TestTraces:
    def test_causal_pool(self):
        S = np.arange(10, dtype=float)[:, None]
        assert causal_pool(S)[:, 0].tolist() == [np.mean(range(t + 1)) for t in range(10)]
        w = causal_pool(S, window=3)[:, 0]
        assert w[1] == 0.5 and w[5] == 4.0

    def test_moving_average(self):
        assert moving_average([1.0, 2.0, 3.0, 4.0], 2).tolist() == [1.0, 1.5, 2.5, 3.5]
        assert moving_average([1.0, 2.0], 1).tolist() == [1.0, 2.0]

    def test_constant_states_constant_trace(self, mc_probe):
        probe = mc_probe[0]
        tr = temporal_trace(probe, np.tile(np.eye(5)[1] * 4, (30, 1)), 1, smoothing=4)
        assert isinstance(tr, TemporalTrace)
        assert np.allclose(tr.values, tr.values[0])

    def test_values_and_rows(self, mc_probe, rng):
        probe = mc_probe[0]
        tr = temporal_trace(probe, rng.normal(size=(50, 5)) * 3, 2, smoothing=5, window=10)
        assert np.all((tr.values >= 0) & (tr.values <= 1))
        assert np.allclose(tr.probs.sum(axis=1), 1.0)

    def test_unrecorded_layer(self, mc_probe):
        with pytest.raises(ValueError):
            temporal_trace(mc_probe[0], np.full((5, 5), np.nan), 0)

    def test_matches_pooled_softmax(self, mc_probe, rng):
        probe = mc_probe[0]
        S = rng.normal(size=(12, 5))
        tr = temporal_trace(probe, S, 0)
        assert tr.values[7] == pytest.approx(multiclass_predict(probe, S[:8].mean(axis=0)[None])[0, 0])


class TestTrend:
    def test_increasing(self):
        st_ = trend_stats([1, 2, 3, 4], [0.1, 0.2, 0.5, 0.9])
        assert st_["spearman"] == 1.0 and st_["monotone_violations"] == 0

    def test_negative(self):
        assert trend_stats([1, 2, 3], [-1, -2, -3])["pearson"] == pytest.approx(-1.0)

    def test_hand_counted_violations(self):
        ys = [0.10, 0.09, 0.20, 0.15, 0.30, 0.29, 0.40, 0.35]
        # drops: -0.01 (ok), -0.05 (violation), -0.01 (ok), -0.05 (violation)
        assert trend_stats(range(8), ys, tol=0.02)["monotone_violations"] == 2
        assert trend_stats(range(8), ys)["monotone_violations"] == 4

    def test_relative_tolerance(self):
        assert trend_stats([1, 2, 3], [1.0, 0.96, 1.2], rel_tol=0.05)["monotone_violations"] == 0

    def test_sorted_by_x(self):
        assert trend_stats([3, 1, 2], [3.0, 1.0, 2.0])["monotone_violations"] == 0

    def test_zero_variance(self):
        st_ = trend_stats([1, 2, 3], [5, 5, 5])
        assert st_["pearson"] is None and st_["spearman"] is None

    def test_errors(self):
        with pytest.raises(ValueError):
            trend_stats([1, 2], [1, 2])
