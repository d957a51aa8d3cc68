import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from corrreid import gcm
from corrreid.errors import ConfigError, ShapeError
from corrreid.numerics import MulCounter, grad_check
from oracles import oracle_mask, oracle_softmax


def random_params(rng, d, landmarks=4, mask_k=3, sign="negative"):
    p = gcm.init_gcm(d, landmarks, mask_k, sign, seed=int(rng.integers(1 << 30)))
    for name in ("phi_q", "phi_k", "phi_v"):
        setattr(p, name, rng.normal(size=(d, d)) / math.sqrt(d))
    return p


class TestAffinity:
    def test_dense_oracle(self, rng):
        g = rng.normal(size=(6, 4))
        p = random_params(rng, 4)
        a = gcm.affinity_dense(g, p).scores
        for i in range(6):
            for j in range(6):
                ref = (g[i] @ p.phi_q) @ (g[j] @ p.phi_k) / 2.0
                assert abs(a[i, j] - ref) < 1e-12

    def test_landmark_oracle(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 33))
            d = int(rng.integers(1, 9))
            ell = int(rng.integers(1, min(n, d) + 1))
            g = rng.normal(size=(n, d))
            p = random_params(rng, d)
            g_l = g[rng.choice(n, ell, replace=False)]
            q2 = (g @ p.phi_q) @ (g_l @ p.phi_k).T
            k2 = (g @ p.phi_k) @ (g_l @ p.phi_q).T
            ref = np.array([[sum(q2[i, t] * k2[j, t] for t in range(ell)) for j in range(n)]
                            for i in range(n)]) / math.sqrt(d)
            np.testing.assert_allclose(gcm.affinity_landmark(g, g_l, p).scores, ref,
                                       atol=1e-10, rtol=0)

    def test_duplicate_rows(self, rng):
        g = rng.normal(size=(8, 16))
        g[5] = g[2]
        p = random_params(rng, 16)
        a = gcm.affinity_landmark(g, g[:4], p).scores
        np.testing.assert_array_equal(a[2], a[5])
        np.testing.assert_array_equal(a[:, 2], a[:, 5])

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            gcm.affinity_landmark(rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), gcm.init_gcm(4))


class TestMultiplyCount:
    def test_tally_matches_formula(self, rng):
        n, d, ell = 256, 64, 8
        g = rng.normal(size=(n, d))
        p = gcm.init_gcm(d)
        t_dense, t_land = MulCounter(), MulCounter()
        gcm.affinity_dense(g, p, t_dense)
        gcm.affinity_landmark(g, gcm.sample_landmarks(g, ell, 0), p, t_land)
        assert t_dense["affinity"] == gcm.dense_multiplies(n, d)
        assert t_land["affinity"] == gcm.landmark_multiplies(n, d, ell)
        measured = t_land["affinity"] / t_dense["affinity"]
        analytic = gcm.landmark_multiplies(n, d, ell) / gcm.dense_multiplies(n, d)
        assert abs(measured - analytic) <= 0.15 * analytic
        assert measured < 1.0

    def test_linear_in_landmarks(self, rng):
        g = rng.normal(size=(64, 16))
        p = gcm.init_gcm(16)
        counts = []
        for ell in range(1, 9):
            t = MulCounter()
            gcm.affinity_landmark(g, g[:ell], p, t)
            counts.append(t["affinity"])
        steps = np.diff(counts)
        assert np.all(steps == steps[0]) and steps[0] > 0


class TestSampling:
    def test_all_rows_is_permutation(self, rng):
        g = rng.normal(size=(7, 3))
        picked = gcm.sample_landmarks(g, 7, seed=4)
        assert sorted(map(tuple, picked)) == sorted(map(tuple, g))

    def test_deterministic(self, rng):
        g = rng.normal(size=(20, 3))
        np.testing.assert_array_equal(gcm.sample_landmarks(g, 5, 9), gcm.sample_landmarks(g, 5, 9))

    def test_too_many(self):
        with pytest.raises(ConfigError):
            gcm.sample_landmark_indices(4, 5, 0)

    def test_uniform(self):
        n, ell, seeds = 10, 3, 100_000
        counts = np.zeros(n)
        for s in range(seeds):
            counts[gcm.sample_landmark_indices(n, ell, s)] += 1
        assert stats.chisquare(counts).pvalue > 0.01


class TestMask:
    def test_oracle(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 33))
            k = int(rng.integers(1, n + 2))
            # rounding makes ties common so the index tie-break is exercised
            a = np.round(rng.normal(size=(n, n)), 1)
            np.testing.assert_array_equal(gcm.reciprocal_mask(a, k).bits, oracle_mask(a, k))

    def test_k_equals_n_all_true(self, rng):
        assert gcm.reciprocal_mask(rng.normal(size=(5, 5)), 5).bits.all()

    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
    def test_symmetric_input_gives_symmetric_mask(self, n, k, seed):
        a = np.random.default_rng(seed).normal(size=(n, n))
        m = gcm.reciprocal_mask(a + a.T, k).bits
        np.testing.assert_array_equal(m, m.T)
        assert m.diagonal().all()

    def test_bad_k(self, rng):
        with pytest.raises(ConfigError):
            gcm.reciprocal_mask(rng.normal(size=(3, 3)), 0)


class TestSoftmax:
    @pytest.mark.parametrize("sign", ["negative", "positive"])
    def test_oracle(self, rng, sign):
        s = gcm.AFFINITY_SIGNS[sign]
        for _ in range(100):
            n = int(rng.integers(1, 33))
            a = rng.normal(size=(n, n)) * 3
            mask = rng.random((n, n)) < 0.4
            np.fill_diagonal(mask, True)
            np.testing.assert_allclose(gcm.sparse_softmax(a, mask, s), oracle_softmax(a, mask, s),
                                       atol=1e-12, rtol=0)

    def test_rows_are_distributions(self, rng):
        a = rng.normal(size=(9, 9))
        m = gcm.reciprocal_mask(a, 3)
        w = gcm.sparse_softmax(a, m, -1.0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(w[~m.bits] == 0)


class TestAggregate:
    def test_oracle(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 33))
            d = int(rng.integers(1, 9))
            w = rng.random((n, n))
            w /= w.sum(axis=1, keepdims=True)
            g = rng.normal(size=(n, d))
            phi = rng.normal(size=(d, d))
            ref = np.array([sum(w[i, j] * (g[j] @ phi) for j in range(n)) for i in range(n)])
            np.testing.assert_allclose(gcm.aggregate(w, g, phi), ref, atol=1e-10, rtol=0)

    def test_identity_weights(self, rng):
        g = rng.normal(size=(5, 3))
        np.testing.assert_allclose(gcm.aggregate(np.eye(5), g, np.eye(3)), g, atol=1e-15)


class TestForward:
    def test_composition(self, rng):
        g = rng.normal(size=(12, 6))
        p = random_params(rng, 6, landmarks=4, mask_k=3)
        res = gcm.gcm_forward(g, p)
        idx = gcm.sample_landmark_indices(12, 4, p.seed)
        a = gcm.affinity_landmark(g, g[idx], p)
        m = gcm.reciprocal_mask(a, 3)
        w = gcm.sparse_softmax(a, m, p.sign)
        np.testing.assert_allclose(res.u, gcm.aggregate(w, g, p.phi_v), atol=1e-12)
        np.testing.assert_array_equal(res.mask.bits, m.bits)
        assert res.diagnostics["landmark_indices"] == [int(i) for i in idx]

    def test_single_item(self, rng):
        g = rng.normal(size=(1, 4))
        p = random_params(rng, 4, landmarks=1)
        np.testing.assert_allclose(gcm.gcm_forward(g, p).u, g @ p.phi_v, atol=1e-14)

    @given(st.integers(2, 16), st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_convex_hull_with_identity_value(self, n, d, seed):
        rng = np.random.default_rng(seed)
        g = rng.normal(size=(n, d))
        p = gcm.init_gcm(d, landmarks=min(2, d), mask_k=3)
        u = gcm.gcm_forward(g, p).u
        assert np.all(u <= g.max(axis=0) + 1e-12) and np.all(u >= g.min(axis=0) - 1e-12)

    def test_landmarks_above_dim(self, rng):
        with pytest.raises(ConfigError):
            gcm.gcm_forward(rng.normal(size=(10, 3)), gcm.init_gcm(3, landmarks=4))


@pytest.mark.parametrize("sign", ["negative", "positive"])
def test_gradients_with_fixed_mask(rng, sign):
    n, d = 10, 5
    g = rng.normal(size=(n, d))
    p = random_params(rng, d, landmarks=3, mask_k=4, sign=sign)
    ref = gcm.gcm_forward(g, p)
    idx, mask = ref.cache["idx"], ref.mask
    c = rng.normal(size=(n, d))

    def objective():
        return float((gcm.gcm_forward(g, p, idx, mask).u * c).sum())

    grads = gcm.gcm_backward(ref, p, c)
    for name in ("phi_q", "phi_k", "phi_v"):
        rep = grad_check(lambda _: objective(), getattr(p, name), grads[name], probes=64)
        assert rep.passed, (name, rep)
    rep = grad_check(lambda _: objective(), g, grads["g"], probes=50)
    assert rep.passed, rep
