import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posglab.heads import CategoricalDist
from posglab.oracle import (ToyJoint, bound_chain_report, entropy, entropy_posg, entropy_report_json,
                            entropy_topk, exact_equal_z_joint, log_sum_inequality_check, random_toy_joint,
                            run_entropy_check)
from posglab.decode import truncate_top_k


def test_entropy_closed_forms():
    assert abs(entropy(np.full(7, 1 / 7)) - math.log(7)) < 1e-12
    assert entropy([0.0, 1.0, 0.0]) == 0.0


@given(st.integers(0, 10_000))
def test_entropy_extended_precision(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(30))
    mpmath.mp.dps = 40
    want = -mpmath.fsum(mpmath.mpf(float(x)) * mpmath.log(mpmath.mpf(float(x))) for x in p if x > 0)
    assert abs(entropy(p) - float(want)) < 1e-12


def test_entropy_topk_examples():
    u = CategoricalDist(np.arange(4), np.full(4, 0.25))
    assert abs(entropy_topk(u, 2) - math.log(2)) < 1e-15
    assert entropy_topk(u, 1) == 0.0


@given(st.integers(0, 10_000), st.integers(1, 25))
def test_entropy_topk_composition(seed, k):
    p = np.random.default_rng(seed).dirichlet(np.ones(20))
    d = CategoricalDist(np.arange(20), p)
    assert entropy_topk(d, k) == entropy(truncate_top_k(d, k))


def test_entropy_posg_single_class():
    j = random_toy_joint(np.random.default_rng(0), 1, 20)
    assert entropy_posg(j, 5) == entropy_topk(j.marginal(), 5)


def test_entropy_posg_small_cells_untruncated():
    j = random_toy_joint(np.random.default_rng(1), 4, 5)
    assert abs(entropy_posg(j, 5) - entropy(j.marginal())) < 1e-12


@given(st.integers(0, 10_000), st.integers(1, 8), st.sampled_from([0, 2]))
def test_entropy_posg_enumeration(seed, k, shared):
    j = random_toy_joint(np.random.default_rng(seed), 4, 6, shared=shared)
    mix = {}
    for rho in range(j.n_pos):
        cond = CategoricalDist(j.cells[rho], j.cond_probs[rho])
        top = truncate_top_k(cond, k)
        for x, q in top.as_dict().items():
            mix[x] = mix.get(x, 0.0) + j.pos_probs[rho] * q
    want = -math.fsum(p * math.log(p) for p in mix.values() if p > 0)
    assert abs(entropy_posg(j, k) - want) < 1e-12


def test_log_sum_inequality_examples():
    lhs, rhs, ok = log_sum_inequality_check([0.2, 0.3], [0.2, 0.3])
    assert lhs == 0.0 and rhs == 0.0 and ok
    lhs, rhs, ok = log_sum_inequality_check([1, 0], [1, 1])
    assert lhs == 0.0 and rhs == pytest.approx(math.log(0.5)) and ok
    with pytest.raises(ValueError):
        log_sum_inequality_check([1], [0])


def test_log_sum_inequality_sweep():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(1, 10))
        a = rng.random(n) * (rng.random(n) > 0.3)
        b = rng.random(n) + 1e-9
        assert log_sum_inequality_check(a, b)[2]


def test_bound_chain_single_class_collapse():
    rep = bound_chain_report(random_toy_joint(np.random.default_rng(2), 1, 20), 5)
    assert rep.lb_posg == rep.lb_topk
    assert rep.z2 == rep.z_k


@pytest.mark.parametrize("shared", [0, 3])
def test_bound_chain_random_instances(shared):
    rng = np.random.default_rng(3)
    for _ in range(200):
        rep = bound_chain_report(random_toy_joint(rng, 5, 20, shared=shared), 5)
        assert rep.topk_bound_holds and rep.posg_bound_holds and rep.lsi_holds
        assert all(z <= 1 + 1e-15 for z in rep.z2_per_pos)


def test_bound_comparison_at_equal_normalisers():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        rep = bound_chain_report(exact_equal_z_joint(rng, 5, 20, 5), 5)
        assert rep.z_k == pytest.approx(1.0) and all(z == pytest.approx(1.0) for z in rep.z2_per_pos)
        assert rep.lb_posg >= rep.lb_topk - 1e-12
        rep = bound_chain_report(random_toy_joint(rng, 5, 20), 5)
        assert rep.lb_posg_at_zk >= rep.lb_topk - 1e-12


def test_toy_joint_validation():
    with pytest.raises(ValueError):
        ToyJoint(np.array([0.5, 0.5]), (np.arange(2),), (np.array([0.5, 0.5]),))


def test_run_entropy_check_defaults_and_determinism():
    report = run_entropy_check(trials=300, seed=0)
    s = report["summary"]
    assert s["hard_assertions_pass"]
    assert s["mean_h_gap"] == s["mean_h_posg"] - s["mean_h_topk"] > 0
    one = entropy_report_json(run_entropy_check(trials=1, seed=7))
    assert one == entropy_report_json(run_entropy_check(trials=1, seed=7))
    json.loads(one)


def test_run_entropy_check_single_class():
    report = run_entropy_check(trials=20, n_pos=1, seed=1)
    for t in report["random_trials"]:
        assert abs(t["lb_posg"] - t["lb_topk"]) <= 1e-12
