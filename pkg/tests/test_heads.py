import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_params, random_partition
from posglab.corpus import PosPartition
from posglab.heads import (CategoricalDist, joint_distribution, marginal_log_probs, marginal_token_distribution,
                           mle_distribution, mle_log_probs, mle_loss, pos_distribution, posg_loss,
                           token_distribution_given_pos)
from posglab.net import ModelConfig, forward


def _setup(seed, vocab=50, n_pos=6, d=8):
    cfg = ModelConfig(vocab_size=vocab, pos_count=n_pos, n_layers=1, n_heads=1, d_model=d, d_ff=8,
                      context_len=4)
    rng = np.random.default_rng(seed)
    params = random_params(cfg, seed, scale=1.0)
    return params, random_partition(rng, vocab, n_pos), rng.standard_normal(d)


def _softmax_loop(logits):
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    s = math.fsum(e)
    return [v / s for v in e]


def test_categorical_validation():
    with pytest.raises(ValueError):
        CategoricalDist(np.array([1, 0]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        CategoricalDist(np.array([0, 1]), np.array([0.5, 0.6]))
    d = CategoricalDist(np.array([2, 5]), np.array([0.25, 0.75]))
    assert d.prob(5) == 0.75 and d.prob(3) == 0.0
    assert d.dense(6).tolist() == [0, 0, 0.25, 0, 0, 0.75]


def test_mle_zero_embeddings_uniform():
    params, _, h = _setup(0)
    params.tensors["tok_out"][:] = 0
    np.testing.assert_allclose(mle_distribution(params, h).probs, 1 / 50, rtol=0, atol=1e-15)


def test_mle_forced_arithmetic():
    params, _, _ = _setup(0, vocab=2, n_pos=1, d=2)
    params.tensors["tok_out"][:] = [[0.0, 0.0], [math.log(3), 0.0]]
    np.testing.assert_allclose(mle_distribution(params, np.array([1.0, 0.0])).probs, [0.25, 0.75], atol=1e-15)


@given(st.integers(0, 10_000))
def test_mle_and_pos_match_exhaustive_softmax(seed):
    params, _, h = _setup(seed)
    want = _softmax_loop([float(w @ h) for w in params.tok_out])
    assert np.max(np.abs(mle_distribution(params, h).probs - want)) < 1e-12
    want = _softmax_loop([float(o @ h) for o in params.pos_out])
    assert np.max(np.abs(pos_distribution(params, h).probs - want)) < 1e-12


def test_pos_zero_embeddings_and_size():
    params, _, h = _setup(1, n_pos=46)
    assert len(pos_distribution(params, h)) == 46
    params.tensors["pos_out"][:] = 0
    np.testing.assert_allclose(pos_distribution(params, h).probs, 1 / 46, atol=1e-15)


def test_conditional_singleton_cell():
    params, _, h = _setup(2, vocab=6, n_pos=2)
    part = PosPartition.from_tag_sets([{0}] * 5 + [{1}], 2)
    d = token_distribution_given_pos(params, part, h, 1)
    assert d.support.tolist() == [5] and d.probs.tolist() == [1.0]


def test_conditional_full_cell_equals_mle():
    params, _, h = _setup(3, n_pos=1)
    part = PosPartition.from_tag_sets([{0}] * 50, 1)
    a = token_distribution_given_pos(params, part, h, 0)
    b = mle_distribution(params, h)
    assert np.array_equal(a.support, b.support) and np.array_equal(a.probs, b.probs)


@given(st.integers(0, 10_000))
def test_conditional_is_masked_full_softmax(seed):
    params, part, h = _setup(seed)
    full = np.array([float(w @ h) for w in params.tok_out])
    for rho in range(part.n_pos):
        cell = part.members[rho].tolist()
        want = _softmax_loop([full[x] for x in cell])
        got = token_distribution_given_pos(params, part, h, rho)
        assert got.support.tolist() == cell
        assert np.max(np.abs(got.probs - want)) < 1e-12


def test_joint_zero_embeddings():
    params, part, h = _setup(4)
    params.tensors["tok_out"][:] = 0
    params.tensors["pos_out"][:] = 0
    j = joint_distribution(params, part, h)
    for rho in range(part.n_pos):
        for x in range(50):
            want = 1 / part.n_pos / len(part.members[rho]) if part.contains(x, rho) else 0.0
            assert abs(j.joint_prob(x, rho) - want) < 1e-15


def test_joint_multi_pos_token_has_mass_in_both_cells():
    params, _, h = _setup(5, vocab=8, n_pos=3)
    part = PosPartition.from_tag_sets([{0}] * 4 + [{1, 2}, {1}, {2}, {1}], 3)
    j = joint_distribution(params, part, h)
    assert j.joint_prob(4, 1) > 0 and j.joint_prob(4, 2) > 0
    assert j.joint_prob(5, 2) == 0.0


@given(st.integers(0, 10_000))
def test_joint_table_sums_to_one(seed):
    params, part, h = _setup(seed)
    j = joint_distribution(params, part, h)
    total = math.fsum(j.joint_prob(x, rho) for rho in range(part.n_pos) for x in range(50))
    assert abs(total - 1) < 1e-9


def test_marginal_disjoint_cells_is_scaled_concatenation():
    params, _, h = _setup(6, vocab=12, n_pos=3)
    part = PosPartition.from_tag_sets([{0}] * 4 + [{1}] * 4 + [{2}] * 4, 3)
    j = joint_distribution(params, part, h)
    m = marginal_token_distribution(j)
    for rho, p, cond in j.cells():
        np.testing.assert_allclose(m.probs[cond.support], p * cond.probs, rtol=0, atol=1e-15)


def test_marginal_single_class_is_softmax():
    params, _, h = _setup(7, n_pos=1)
    part = PosPartition.from_tag_sets([{0}] * 50, 1)
    m = marginal_token_distribution(joint_distribution(params, part, h))
    assert np.max(np.abs(m.probs - mle_distribution(params, h).probs)) < 1e-12


@given(st.integers(0, 10_000))
def test_marginal_matches_double_loop(seed):
    params, part, h = _setup(seed)
    j = joint_distribution(params, part, h)
    m = marginal_token_distribution(j)
    want = np.zeros(50)
    for rho in range(part.n_pos):
        for x in range(50):
            want[x] += j.joint_prob(x, rho)
    assert np.max(np.abs(m.dense(50) - want)) < 1e-12
    lp = marginal_log_probs(params, part, h[None, :].repeat(50, 0), np.arange(50))
    assert np.max(np.abs(np.exp(lp) - want)) < 1e-12


def test_posg_loss_zero_embeddings():
    params, part, h = _setup(8)
    params.tensors["tok_out"][:] = 0
    params.tensors["pos_out"][:] = 0
    x = 17
    rho = min(part.tag_sets[x])
    want = math.log(part.n_pos) + math.log(len(part.members[rho]))
    assert abs(posg_loss(params, part, h[None], [x], [rho]) - want) < 1e-12


@given(st.integers(0, 10_000))
def test_posg_loss_is_negative_log_joint(seed):
    params, part, _ = _setup(seed)
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((5, 8))
    xs = rng.integers(0, 50, 5).tolist()
    rhos = [int(rng.choice(sorted(part.tag_sets[x]))) for x in xs]
    want = -np.mean([math.log(joint_distribution(params, part, H[t]).joint_prob(xs[t], rhos[t]))
                     for t in range(5)])
    assert abs(posg_loss(params, part, H, xs, rhos) - want) < 1e-10


def test_posg_loss_single_class_equals_mle_loss():
    params, _, _ = _setup(9, n_pos=1)
    part = PosPartition.from_tag_sets([{0}] * 50, 1)
    H = forward(params, [1, 2, 3, 4])
    gold = [2, 3, 4, 40]
    assert abs(posg_loss(params, part, H, gold, [0] * 4) - mle_loss(params, H, gold)) < 1e-10
    np.testing.assert_allclose(marginal_log_probs(params, part, H, gold), mle_log_probs(params, H, gold),
                               rtol=0, atol=1e-12)


def test_posg_loss_rejects_inconsistent_gold():
    params, _, h = _setup(10, vocab=8, n_pos=2)
    part = PosPartition.from_tag_sets([{0}] * 4 + [{1}] * 4, 2)
    with pytest.raises(ValueError, match="position 1"):
        posg_loss(params, part, np.stack([h, h]), [5, 6], [1, 0])


def test_hidden_shape_checked():
    params, part, _ = _setup(11)
    with pytest.raises(ValueError):
        mle_distribution(params, np.zeros(3))
    with pytest.raises(ValueError):
        joint_distribution(params, part, np.full(8, np.nan))
