import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tbps.errors import PreconditionError
from tbps.reid import (CircularQueue, LookupTable, Temperatures, build_lut, cfa_loss, cq_push,
                       infonce_loss, is_unknown, lut_update, nae_split, oim_loss, positive_targets,
                       reid_loss, restore, sdm_kl_loss, snapshot)

E = np.eye(3)


def _kl_oracle(p, q, eps):
    return sum(pi * math.log(pi / (qi + eps)) for pi, qi in zip(p, q) if pi > 0)


def test_sdm_examples():
    # p is one-hot to double precision: only the stabilizer term remains
    s = 2 * np.eye(4) - 1
    assert sdm_kl_loss(s, np.eye(4, dtype=bool), rho=1e-3) == pytest.approx(0.0, abs=1e-7)

    p = [math.exp(1) / (math.exp(1) + 1), 1 / (math.exp(1) + 1)]
    assert p == pytest.approx([0.7311, 0.2689], abs=1e-4)
    one_dir = _kl_oracle(p, [1.0, 0.0], 1e-8)
    value = sdm_kl_loss(np.eye(2), np.eye(2, dtype=bool), rho=1.0, eps_kl=1e-8)
    assert value == pytest.approx(2 * one_dir, rel=1e-12)

    rng = np.random.default_rng(0)
    s = rng.uniform(-1, 1, (5, 5))
    pos = rng.random((5, 5)) < 0.3
    np.fill_diagonal(pos, True)
    assert sdm_kl_loss(3 * s, pos, rho=0.06) == pytest.approx(sdm_kl_loss(s, pos, rho=0.02),
                                                             rel=1e-12)


def test_sdm_matches_direct_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = 6
        ids = rng.integers(0, 3, n)
        pos = ids[:, None] == ids[None, :]
        s = rng.uniform(-1, 1, (n, n))
        total = 0.0
        for mat, msk in ((s, pos), (s.T, pos.T)):
            for i in range(n):
                e = np.exp(mat[i] / 0.02 - (mat[i] / 0.02).max())
                p = e / e.sum()
                q = msk[i] / msk[i].sum()
                total += _kl_oracle(p, q, 1e-8) / n
        assert sdm_kl_loss(s, pos) == pytest.approx(total, rel=1e-10, abs=1e-12)


def test_sdm_errors():
    with pytest.raises(PreconditionError):
        sdm_kl_loss(np.eye(2), np.array([[True, False], [False, False]]))
    with pytest.raises(PreconditionError):
        positive_targets(np.zeros((2, 2), dtype=bool))
    with pytest.raises(PreconditionError):
        sdm_kl_loss(np.ones((2, 3)), np.ones((2, 3), dtype=bool))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_sdm_nonnegative_up_to_stabilizer(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, (n, n))
    pos = rng.random((n, n)) < 0.4
    np.fill_diagonal(pos, True)
    assert sdm_kl_loss(s, pos) >= -2 * n * 1e-8


def test_infonce_examples():
    assert infonce_loss([[0.3]]) == 0.0
    expected = -math.log(math.exp(1 / 0.07) / (math.exp(1 / 0.07) + 1))
    assert infonce_loss(np.eye(2), 0.07) == pytest.approx(expected, rel=1e-6)
    assert infonce_loss(np.eye(2), 0.07) == pytest.approx(6.2e-7, rel=0.05)
    rng = np.random.default_rng(2)
    s = rng.uniform(-1, 1, (4, 4))
    shifted = s.copy()
    shifted[2] += 0.7
    assert infonce_loss(shifted) == pytest.approx(infonce_loss(s), rel=1e-13)
    with pytest.raises(PreconditionError):
        infonce_loss(s, 0.0)


def test_infonce_monotone_in_diagonal():
    rng = np.random.default_rng(3)
    s = rng.uniform(-1, 1, (5, 5))
    values = []
    for d in np.linspace(-1, 1, 30):
        t = s.copy()
        t[1, 1] = d
        values.append(infonce_loss(t))
    assert np.all(np.diff(values) < 0)


def test_sum_losses():
    assert cfa_loss(0, 0) == 0 and cfa_loss(0.5, 0) == 0.5
    assert reid_loss(0, 0) == 0 and reid_loss(1, 2) == 3
    rng = np.random.default_rng(4)
    for a, b in rng.random((10, 2)):
        assert cfa_loss(a, b) == a + b == reid_loss(a, b)


def test_nae_split_examples():
    conf, d = nae_split(np.array([0.6, 0.8, 0.0]), a=1.0)
    assert conf == 0.5
    conf, d = nae_split(3 * E[0], a=1.0, b=0.25)
    assert conf == pytest.approx(1 / (1 + math.exp(-8)), rel=1e-15)
    assert conf == pytest.approx(0.99966, abs=1e-5)
    np.testing.assert_array_equal(d, E[0])
    f = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(nae_split(f)[1], nae_split(7.5 * f)[1], rtol=1e-15)
    with pytest.raises(PreconditionError):
        nae_split(np.zeros(3))


def test_oim_examples():
    lut = build_lut([0], [E[0]], 3)
    cq = CircularQueue(10, 3)
    assert oim_loss(E[0], 0, lut, cq, temp=0.3) == 0.0
    lut = build_lut([0, 1], [E[0], E[1]], 3)
    assert oim_loss(E[0], 0, lut, cq, temp=1.0) == pytest.approx(
        -math.log(math.e / (math.e + 1)), rel=1e-15)
    assert oim_loss(E[0], 0, lut, cq, temp=1.0) == pytest.approx(0.3133, abs=1e-4)
    before = lut.matrix.copy()
    assert oim_loss(E[2], None, lut, cq) == 0.0
    assert oim_loss(E[2], -1, lut, cq) == 0.0
    np.testing.assert_array_equal(lut.matrix, before)
    with pytest.raises(PreconditionError):
        oim_loss(E[0], 5, lut, cq)
    with pytest.raises(PreconditionError):
        oim_loss(2 * E[0], 0, lut, cq)


def test_oim_counts_queue_negatives():
    lut = build_lut([0], [E[0]], 3)
    cq = CircularQueue(10, 3)
    cq_push(cq, E[0])
    assert oim_loss(E[0], 0, lut, cq, temp=1.0) == pytest.approx(math.log(2))


def test_lut_update_examples():
    lut = build_lut(["a"], [E[0]], 3)
    lut_update(lut, "a", E[1], gamma=1.0)
    np.testing.assert_array_equal(lut.vector("a"), E[0])
    lut_update(lut, "a", E[1], gamma=0.0)
    np.testing.assert_array_equal(lut.vector("a"), E[1])
    lut = build_lut(["a"], [E[0]], 3)
    lut_update(lut, "a", E[1], gamma=0.5)
    np.testing.assert_allclose(lut.vector("a"), (E[0] + E[1]) / math.sqrt(2), rtol=1e-15)
    with pytest.raises(PreconditionError):
        lut_update(lut, "b", E[1])
    with pytest.raises(PreconditionError):
        lut.add("a", E[2])


def test_cq_examples():
    cq = CircularQueue(2, 3)
    cq_push(cq, E[0])
    assert len(cq) == 1
    cq_push(cq, E[1])
    cq_push(cq, E[2])
    np.testing.assert_array_equal(cq.matrix, E[1:])
    big = CircularQueue(500, 3)
    for k in range(1000):
        cq_push(big, E[k % 3])
        assert len(big) == min(k + 1, 500)
    with pytest.raises(PreconditionError):
        cq_push(cq, np.array([1.0, 1.0, 0.0]))


def test_snapshot_roundtrip_and_labels():
    lut = build_lut([3, 7], [E[0], E[1]], 3)
    cq = CircularQueue(4, 3)
    cq_push(cq, E[2])
    lut2, cq2 = restore(snapshot(lut, cq))
    np.testing.assert_array_equal(lut2.matrix, lut.matrix)
    np.testing.assert_array_equal(cq2.matrix, cq.matrix)
    assert lut2.labels == [3, 7] and cq2.capacity == 4
    assert is_unknown(None) and is_unknown(-1) and not is_unknown(0)


def test_temperatures_positive():
    with pytest.raises(PreconditionError):
        Temperatures(rho=0.0)
    assert Temperatures().eps_itc == 0.07
