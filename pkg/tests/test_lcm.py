import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from corrreid import lcm
from corrreid.errors import ConfigError, ShapeError, StateError, ZeroNormError
from corrreid.numerics import grad_check
from oracles import oracle_loss


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def filled_bank(rng, n, p, d, m=0.2):
    return lcm.bank_update(lcm.MemoryBank.empty(p, n, d, m), unit(rng.normal(size=(n, p, d))), 0)


class TestBank:
    def test_init_copies(self, rng):
        l = unit(rng.normal(size=(5, 2, 4)))
        b = lcm.bank_update(lcm.MemoryBank.empty(2, 5, 4, 0.3), l, 0)
        np.testing.assert_array_equal(b.banks, l.transpose(1, 0, 2))
        assert b.epoch == 1

    def test_zero_momentum_keeps_bank(self, rng):
        b = filled_bank(rng, 5, 2, 4, m=0.0)
        b2 = lcm.bank_update(b, unit(rng.normal(size=(5, 2, 4))), 1)
        np.testing.assert_allclose(b2.banks, b.banks, atol=1e-15)

    def test_hand_blend(self):
        b = lcm.bank_update(lcm.MemoryBank.empty(1, 1, 2, 0.5), np.array([[[1.0, 0.0]]]), 0)
        b = lcm.bank_update(b, np.array([[[0.0, 1.0]]]), 1)
        np.testing.assert_allclose(b.banks[0, 0], [math.sqrt(2) / 2] * 2, atol=1e-15)

    def test_regression_rejected(self, rng):
        b = filled_bank(rng, 3, 1, 2)
        b = lcm.bank_update(b, unit(rng.normal(size=(3, 1, 2))), 1)
        with pytest.raises(StateError):
            lcm.bank_update(b, unit(rng.normal(size=(3, 1, 2))), 1)

    def test_uninitialized_rejected(self, rng):
        with pytest.raises(StateError):
            lcm.bank_update(lcm.MemoryBank.empty(1, 3, 2, 0.2), unit(rng.normal(size=(3, 1, 2))), 2)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            lcm.bank_update(lcm.MemoryBank.empty(1, 3, 2, 0.2), rng.normal(size=(4, 1, 2)), 0)

    def test_bad_momentum(self):
        with pytest.raises(ConfigError):
            lcm.MemoryBank.empty(1, 2, 2, 1.5)

    @given(st.floats(0, 1), st.integers(0, 2**31 - 1))
    def test_rows_unit_norm(self, m, seed):
        rng = np.random.default_rng(seed)
        b = filled_bank(rng, 4, 2, 3, m)
        for t in (1, 2, 3):
            b = lcm.bank_update(b, unit(rng.normal(size=(4, 2, 3))), t)
            np.testing.assert_allclose(np.linalg.norm(b.banks, axis=-1), 1.0, atol=1e-9)


class TestMining:
    def test_self_slot(self, rng):
        bank = unit(rng.normal(size=(6, 4)))
        pos = lcm.mine_positives(bank[3], bank, 1)
        assert list(pos.members) == [3]
        assert abs(pos.similarities[0] - 1.0) < 1e-12

    def test_k_beyond_bank(self, rng):
        bank = unit(rng.normal(size=(4, 3)))
        assert sorted(lcm.mine_positives(bank[0], bank, 9).members) == [0, 1, 2, 3]

    def test_sort_oracle(self, rng):
        for _ in range(100):
            size = int(rng.integers(1, 33))
            k = int(rng.integers(1, size + 1))
            # small integers make exact ties common
            bank = rng.integers(-2, 3, size=(size, 3)).astype(float)
            f = rng.integers(-2, 3, size=3).astype(float)
            sims = [float(bank[s] @ f) for s in range(size)]
            ref = sorted(range(size), key=lambda s: (-sims[s], s))[:k]
            pos = lcm.mine_positives(f, bank, k)
            assert list(pos.members) == ref
            np.testing.assert_allclose(pos.similarities, [sims[s] for s in ref], atol=1e-12)

    def test_all_positives_exclusion(self, rng):
        b = filled_bank(rng, 6, 2, 3)
        l = b.banks.transpose(1, 0, 2)
        with_self = lcm.mine_all_positives(l, b, 2, include_anchor=True)
        without = lcm.mine_all_positives(l, b, 2, include_anchor=False)
        assert np.all(with_self[:, :, 0] == np.arange(6)[:, None])
        assert not np.any(without == np.arange(6)[:, None, None])

    def test_empty_bank(self):
        with pytest.raises(ShapeError):
            lcm.mine_positives(np.ones(2), np.zeros((0, 2)), 1)


class TestClusteringLoss:
    def test_single_slot_zero(self, rng):
        b = filled_bank(rng, 1, 1, 3)
        loss, _ = lcm.clustering_loss(unit(rng.normal(size=(1, 1, 3))), b, np.zeros((1, 1, 1), int), 0.1)
        assert abs(loss) < 1e-15

    def test_full_bank_positives_zero(self, rng):
        b = filled_bank(rng, 5, 2, 3)
        pos = np.tile(np.arange(5), (5, 2, 1))
        loss, grad = lcm.clustering_loss(unit(rng.normal(size=(5, 2, 3))), b, pos, 0.1)
        assert abs(loss) < 1e-12 and np.abs(grad).max() < 1e-12

    def test_oracle(self, rng):
        b = filled_bank(rng, 6, 2, 4)
        l = unit(rng.normal(size=(6, 2, 4)))
        pos = lcm.mine_all_positives(l, b, 2)
        loss, _ = lcm.clustering_loss(l, b, pos, 0.1)
        assert abs(loss - oracle_loss(l, b, pos, 0.1)) < 1e-12

    def test_gradient(self, rng):
        b = filled_bank(rng, 6, 2, 4)
        l = unit(rng.normal(size=(6, 2, 4)))
        pos = lcm.mine_all_positives(l, b, 2)
        _, grad = lcm.clustering_loss(l, b, pos, 0.1)
        rep = grad_check(lambda x: lcm.clustering_loss(x, b, pos, 0.1)[0], l, grad, probes=48, tolerance=1e-5)
        assert rep.passed, rep

    @given(st.integers(0, 2**31 - 1))
    def test_one_step_decreases(self, seed):
        rng = np.random.default_rng(seed)
        b = filled_bank(rng, 6, 2, 4)
        l = unit(rng.normal(size=(6, 2, 4)))
        pos = lcm.mine_all_positives(l, b, 2, include_anchor=False)
        before, grad = lcm.clustering_loss(l, b, pos, 0.1)
        after, _ = lcm.clustering_loss(l - 1e-3 * grad, b, pos, 0.1)
        assert before >= 0
        assert after < before or np.abs(grad).max() < 1e-12

    def test_uniform_limit(self, rng):
        b = filled_bank(rng, 8, 1, 4)
        l = unit(rng.normal(size=(8, 1, 4)))
        pos = lcm.mine_all_positives(l, b, 3)
        loss, _ = lcm.clustering_loss(l, b, pos, 1e3)
        assert abs(loss - (-math.log(3 / 8))) < 1e-3

    def test_stable_at_small_tau(self, rng):
        b = filled_bank(rng, 8, 1, 4)
        l = unit(rng.normal(size=(8, 1, 4)))
        loss, grad = lcm.clustering_loss(l, b, lcm.mine_all_positives(l, b, 2, False), 1e-4)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))

    def test_bad_tau(self, rng):
        b = filled_bank(rng, 2, 1, 2)
        with pytest.raises(ConfigError):
            lcm.clustering_loss(b.banks.transpose(1, 0, 2), b, np.zeros((2, 1, 1), int), 0.0)


class TestFuseLocal:
    def test_single_part_identity(self, rng):
        l = unit(rng.normal(size=(4, 1, 3)))
        np.testing.assert_allclose(lcm.fuse_local(l, np.eye(3)), l[:, 0], atol=1e-15)

    def test_zero_map(self, rng):
        with pytest.raises(ZeroNormError):
            lcm.fuse_local(rng.normal(size=(2, 2, 3)), np.zeros((6, 3)))

    def test_concat_oracle(self, rng):
        l = rng.normal(size=(5, 3, 4))
        reduce = rng.normal(size=(12, 4))
        raw = np.stack([np.concatenate([l[j, 0], l[j, 1], l[j, 2]]) @ reduce for j in range(5)])
        np.testing.assert_allclose(lcm.fuse_local(l, reduce), unit(raw), atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            lcm.fuse_local(rng.normal(size=(2, 2, 3)), np.zeros((5, 3)))

    def test_gradient(self, rng):
        l = rng.normal(size=(4, 2, 3))
        reduce = rng.normal(size=(6, 3))
        c = rng.normal(size=(4, 3))
        _, state = lcm.fuse_local_with_grad(l, reduce)
        grads = lcm.fuse_local_backward(state, reduce, c)
        f = lambda _: float((lcm.fuse_local(l, reduce) * c).sum())
        assert grad_check(f, reduce, grads["reduce"]).passed
        assert grad_check(f, l, grads["l"]).passed


def test_adapter_gradient(rng):
    params = lcm.init_lcm(2, 3)
    params.adapters += 0.3 * rng.normal(size=params.adapters.shape)
    l = unit(rng.normal(size=(4, 2, 3)))
    c = rng.normal(size=(4, 2, 3))
    _, state = lcm.adapt_parts(l, params.adapters)
    grads = lcm.adapt_parts_backward(state, params.adapters, c)
    f = lambda _: float((lcm.adapt_parts(l, params.adapters)[0] * c).sum())
    assert grad_check(f, params.adapters, grads["adapters"]).passed
    assert grad_check(f, l, grads["l"]).passed


def test_init_is_part_average(rng):
    p = lcm.init_lcm(3, 4)
    l = unit(rng.normal(size=(5, 3, 4)))
    np.testing.assert_allclose(lcm.fuse_local(lcm.adapt_parts(l, p.adapters)[0], p.reduce),
                               unit(l.mean(axis=1)), atol=1e-12)
