import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import erf, logsumexp

from conftest import random_params, random_partition
from posglab.corpus import PosPartition
from posglab.net import (MLE, POSG, AdamConfig, CheckpointShapeError, CheckpointVersionError,
                         GoldConsistencyError, ModelConfig, ModelParams, TruncatedCheckpoint, collate,
                         evaluate_loss, forward, init_params, load_checkpoint, loss_and_grads,
                         make_windows, save_checkpoint, train)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def reference_forward(params: ModelParams, tokens):
    """Straight-line numpy transformer, one position and one head at a time."""
    cfg, P = params.config, params.tensors
    d, nh = cfg.d_model, cfg.n_heads
    dh = d // nh
    T = len(tokens)
    x = np.array([P["tok_emb"][tok] + P["pos_emb"][t] for t, tok in enumerate(tokens)])
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        a = _ln(x, P[p + "ln1_g"], P[p + "ln1_b"])
        qkv = a @ P[p + "w_qkv"] + P[p + "b_qkv"]
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        y = np.zeros((T, d))
        for hd in range(nh):
            s = slice(hd * dh, (hd + 1) * dh)
            for t in range(T):
                scores = np.array([q[t, s] @ k[u, s] / math.sqrt(dh) for u in range(t + 1)])
                w = np.exp(scores - scores.max())
                w /= w.sum()
                y[t, s] = sum(w[u] * v[u, s] for u in range(t + 1))
        x = x + y @ P[p + "w_o"] + P[p + "b_o"]
        f = _ln(x, P[p + "ln2_g"], P[p + "ln2_b"]) @ P[p + "w_ff1"] + P[p + "b_ff1"]
        f = 0.5 * f * (1.0 + erf(f / math.sqrt(2.0)))
        x = x + f @ P[p + "w_ff2"] + P[p + "b_ff2"]
    return _ln(x, P["lnf_g"], P["lnf_b"])


def test_single_token_shape(tiny_params):
    h = forward(tiny_params, [1])
    assert h.shape == (1, tiny_params.config.d_model)
    assert np.all(np.isfinite(h))


def test_causality(tiny_params):
    a = forward(tiny_params, [1, 5, 7])
    b = forward(tiny_params, [1, 5, 9])
    np.testing.assert_array_equal(a[:2], b[:2])
    assert not np.allclose(a[2], b[2])


@given(st.integers(0, 2**31 - 1), st.lists(st.integers(0, 12), min_size=1, max_size=8))
def test_forward_matches_reference(seed, tokens):
    cfg = ModelConfig(vocab_size=13, pos_count=3, n_layers=2, n_heads=2, d_model=8, d_ff=16,
                      context_len=8, dropout_rate=0.1)
    params = random_params(cfg, seed)
    got = forward(params, tokens)
    want = reference_forward(params, tokens)
    assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-3)) < 1e-10


def test_forward_rejects_long_input(tiny_params):
    with pytest.raises(ValueError):
        forward(tiny_params, [1] * 9)
    with pytest.raises(ValueError):
        forward(tiny_params, [13])


def test_dropout_only_in_train_mode(tiny_config):
    params = random_params(dataclasses.replace(tiny_config, dropout_rate=0.5))
    a = forward(params, [1, 2, 3])
    np.testing.assert_array_equal(a, forward(params, [1, 2, 3]))
    assert not np.allclose(a, forward(params, [1, 2, 3], train_mode=True))


def _batch(rng, cfg, partition, n_seqs=3, max_len=10):
    encoded = []
    for _ in range(n_seqs):
        toks = rng.integers(4, cfg.vocab_size, size=int(rng.integers(1, max_len))).tolist()
        tags = [min(partition.tag_sets[x]) for x in toks]
        encoded.append((toks, tags))
    return collate(make_windows(encoded, cfg.context_len))


def _flat_loss(params, batch, head, partition, name, idx, value):
    p = params.copy()
    p.tensors[name][idx] = value
    return loss_and_grads(p, batch, head, partition)[0]


@pytest.mark.parametrize("head", [MLE, POSG])
def test_gradients_match_finite_differences(head, tiny_config):
    """Central differences with step 1e-4 on every tensor; tolerance is
    relative with a small floor for coordinates whose gradient is ~0."""
    rng = np.random.default_rng(0)
    params = random_params(tiny_config, seed=2)
    assert params.n_parameters() <= 10_000
    partition = random_partition(rng, tiny_config.vocab_size, tiny_config.pos_count)
    partition = PosPartition.from_tag_sets(
        [s | {0} if x < 4 else s for x, s in enumerate(partition.tag_sets)], partition.n_pos)
    batch = _batch(rng, tiny_config, partition)
    _, grads = loss_and_grads(params, batch, head, partition)
    eps = 1e-4
    worst = 0.0
    for name, g in grads.items():
        if head == MLE and name == "pos_out":
            assert not g.any()
            continue
        for flat in rng.choice(g.size, size=min(6, g.size), replace=False):
            idx = np.unravel_index(flat, g.shape)
            x0 = params.tensors[name][idx]
            fd = (_flat_loss(params, batch, head, partition, name, idx, x0 + eps)
                  - _flat_loss(params, batch, head, partition, name, idx, x0 - eps)) / (2 * eps)
            err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6)
            worst = max(worst, err)
    assert worst < 1e-4


def test_posg_single_class_equals_mle(tiny_config):
    cfg = dataclasses.replace(tiny_config, pos_count=1)
    params = random_params(cfg, seed=4)
    one = PosPartition.from_tag_sets([{0}] * cfg.vocab_size, 1)
    batch = _batch(np.random.default_rng(1), cfg, one)
    lm, gm = loss_and_grads(params, batch, MLE, one)
    lp, gp = loss_and_grads(params, batch, POSG, one)
    assert abs(lm - lp) < 1e-8
    np.testing.assert_allclose(gp["tok_emb"], gm["tok_emb"], atol=1e-10)


def test_zero_output_embeddings_give_uniform_loss(tiny_params):
    p = tiny_params.copy()
    p.tensors["tok_out"][:] = 0
    batch = collate([(np.array([1]), np.array([6]), np.array([1]))])
    loss, _ = loss_and_grads(p, batch, MLE)
    assert abs(loss - math.log(p.config.vocab_size)) < 1e-12


def test_gold_consistency_error(tiny_params, tiny_partition):
    x = next(x for x in range(4, 13) if 1 not in tiny_partition.tag_sets[x])
    batch = collate([(np.array([1, 5]), np.array([5, x]), np.array([min(tiny_partition.tag_sets[5]), 1]))])
    with pytest.raises(GoldConsistencyError, match="position 1"):
        loss_and_grads(tiny_params, batch, POSG, tiny_partition)


def test_make_windows_framing():
    w = make_windows([([5, 6, 7], [1, 2, 3])], context_len=2)
    assert [a.tolist() for a, _, _ in w] == [[1, 5], [6, 7]]
    assert [b.tolist() for _, b, _ in w] == [[5, 6], [7, 2]]
    assert [c.tolist() for _, _, c in w] == [[1, 2], [3, 0]]


def _tiny_data(cfg, partition, n=20, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        toks = rng.integers(4, cfg.vocab_size, size=int(rng.integers(3, 12))).tolist()
        out.append((toks, [min(partition.tag_sets[x]) for x in toks]))
    return out


def _consistent(partition):
    # specials must sit in cell 0 for EOS targets
    return PosPartition.from_tag_sets(
        [{0} if x < 4 else s for x, s in enumerate(partition.tag_sets)], partition.n_pos)


def test_training_lowers_validation_loss(tiny_config, tiny_partition):
    part = _consistent(tiny_partition)
    cfg = dataclasses.replace(tiny_config, dropout_rate=0.1)
    # a learnable pattern: each token is followed by a fixed successor
    data = [([4 + (i % 9) for i in range(k, k + 10)], None) for k in range(40)]
    data = [(t, [min(part.tag_sets[x]) for x in t]) for t, _ in data]
    res = train(cfg, data, POSG, 3, part, data[:10], AdamConfig(lr=3e-2))
    assert res.log[0]["train_loss"] is None
    assert res.log[-1]["valid_loss"] < res.log[0]["valid_loss"]
    assert [e["epoch"] for e in res.log] == [0, 1, 2, 3]


def test_zero_learning_rate_is_null_update(tiny_config, tiny_partition):
    part = _consistent(tiny_partition)
    data = _tiny_data(tiny_config, part)
    start = init_params(tiny_config)
    res = train(tiny_config, data, MLE, 1, part, opt=AdamConfig(lr=0.0, weight_decay=0.0), params=start)
    for k in start.tensors:
        np.testing.assert_array_equal(res.params.tensors[k], start.tensors[k])


@pytest.mark.parametrize("head", [MLE, POSG])
def test_training_is_deterministic(head, tiny_config, tiny_partition):
    part = _consistent(tiny_partition)
    cfg = dataclasses.replace(tiny_config, dropout_rate=0.2)
    data = _tiny_data(cfg, part)
    a = train(cfg, data, head, 2, part, data[:4])
    b = train(cfg, data, head, 2, part, data[:4])
    assert save_checkpoint(a.params) == save_checkpoint(b.params)
    strip = lambda log: [{k: v for k, v in e.items() if k != "wall_seconds"} for e in log]
    assert strip(a.log) == strip(b.log)


def test_evaluate_loss_matches_batched_loss(tiny_params, tiny_partition):
    part = _consistent(tiny_partition)
    data = _tiny_data(tiny_params.config, part, 5)
    w = make_windows(data, tiny_params.config.context_len)
    full = loss_and_grads(tiny_params, collate(w), POSG, part)[0]
    assert abs(evaluate_loss(tiny_params, w, POSG, part, batch_size=3) - full) < 1e-12


def test_checkpoint_roundtrip(tiny_params):
    blob = save_checkpoint(tiny_params)
    params, cfg = load_checkpoint(blob)
    assert cfg == tiny_params.config
    for k, v in tiny_params.tensors.items():
        assert params.tensors[k].tobytes() == v.tobytes()


def test_checkpoint_truncated(tiny_params):
    blob = save_checkpoint(tiny_params)
    with pytest.raises(TruncatedCheckpoint):
        load_checkpoint(blob[:-1])
    with pytest.raises(TruncatedCheckpoint):
        load_checkpoint(blob[:20])


def test_checkpoint_version_gate(tiny_params):
    blob = save_checkpoint(tiny_params, version=3)
    assert load_checkpoint(blob, expected_version=3)[1] == tiny_params.config
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(blob, expected_version=4)


def test_checkpoint_rejects_garbage_and_bad_shapes(tiny_params):
    from posglab.net import CheckpointError

    with pytest.raises(CheckpointError):
        load_checkpoint(b"NOTACKPT" + bytes(40))
    blob = save_checkpoint(tiny_params)
    with pytest.raises(CheckpointError):
        load_checkpoint(blob + b"\0")
    # claim a larger vocabulary in the embedded config; tensor shapes no longer fit
    old = tiny_params.config.to_json().encode()
    new = dataclasses.replace(tiny_params.config, vocab_size=99).to_json().encode()
    assert len(old) == len(new)
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(blob.replace(old, new))
