"""Numerical checks of the entropy argument for two-stage sampling.

Setting: the POS stage samples purely, the token stage keeps the top-k of
each cell.  One-stage top-k keeps the top-k of the marginal.  For each
instance we evaluate both entropies and their log-sum lower bounds

    LB_topk = -log|P| - sum_rho sum_{x in V_k, rho in POS(x)} (p(x,rho)/Z_k) log(p(x,rho)/Z_k)
    LB_posg = -log|P| - sum_rho sum_{x in V_{rho,k}} (p(x,rho)/Z2_rho) log(p(x,rho)/Z2_rho)

where Z_k is the kept marginal mass and Z2_rho the kept conditional mass of
cell rho.  |P| is the full inventory size.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .decode import SamplingConfig, StageStrategy, posg_truncated_marginal, truncate_top_k
from .heads import CategoricalDist, JointDist, marginal_token_distribution

LSI_TOL = 1e-12


@dataclass(frozen=True)
class ToyJoint:
    """p(rho) over a small inventory and p(x | rho) over explicit cells."""

    pos_probs: np.ndarray
    cells: tuple[np.ndarray, ...]
    cond_probs: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.cells) != len(self.pos_probs) or len(self.cond_probs) != len(self.cells):
            raise ValueError("one cell and one conditional per POS")
        if abs(float(np.sum(self.pos_probs)) - 1.0) > 1e-12:
            raise ValueError("pos_probs must sum to 1")
        for cell, probs in zip(self.cells, self.cond_probs):
            if len(cell) == 0 or len(cell) != len(probs):
                raise ValueError("cells must be non-empty and match their conditionals")
            if abs(float(np.sum(probs)) - 1.0) > 1e-12:
                raise ValueError("each conditional must sum to 1")

    @property
    def n_pos(self) -> int:
        return len(self.pos_probs)

    def to_joint(self) -> JointDist:
        pos = CategoricalDist(np.arange(self.n_pos), self.pos_probs)
        conds = {rho: CategoricalDist(self.cells[rho], self.cond_probs[rho])
                 for rho in range(self.n_pos) if self.pos_probs[rho] > 0}
        return JointDist(pos, conds)

    def marginal(self) -> CategoricalDist:
        return marginal_token_distribution(self.to_joint())

    def pos_of(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for rho, cell in enumerate(self.cells):
            for x in cell.tolist():
                out.setdefault(x, set()).add(rho)
        return out


def random_toy_joint(rng: np.random.Generator, n_pos: int, cell_size: int, shared: int = 0) -> ToyJoint:
    """Dirichlet(1) POS and per-cell token probabilities.  Cells are disjoint
    blocks of ``cell_size`` ids; with ``shared`` > 0 the last ``shared``
    ids of each block also belong to the next cell (cyclically)."""
    if not 0 <= shared < cell_size:
        raise ValueError("shared must be in [0, cell_size)")
    stride = cell_size - shared
    n_tokens = stride * n_pos if shared else cell_size * n_pos
    cells = []
    for rho in range(n_pos):
        ids = (np.arange(cell_size) + rho * stride) % n_tokens if shared else np.arange(cell_size) + rho * cell_size
        cells.append(np.sort(ids))
    pos = rng.dirichlet(np.ones(n_pos))
    conds = tuple(rng.dirichlet(np.ones(cell_size)) for _ in range(n_pos))
    return ToyJoint(pos / pos.sum(), tuple(cells), tuple(c / c.sum() for c in conds))


def entropy(dist: CategoricalDist | Sequence[float]) -> float:
    """Natural-log entropy with 0 log 0 = 0."""
    p = dist.probs if isinstance(dist, CategoricalDist) else np.asarray(dist, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def entropy_topk(dist: CategoricalDist, k: int) -> float:
    return entropy(truncate_top_k(dist, k))


def posg_topk_config(k: int) -> SamplingConfig:
    return SamplingConfig(pos_stage=StageStrategy.pure(), token_stage=StageStrategy.top_k(k))


def entropy_posg(joint: ToyJoint, k: int) -> float:
    return entropy(posg_truncated_marginal(joint.to_joint(), posg_topk_config(k)))


def log_sum_inequality_check(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, bool]:
    """sum a_i log(a_i / b_i) >= (sum a) log(sum a / sum b), a_i >= 0, b_i > 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("a and b must have equal length")
    if np.any(a < 0) or np.any(b <= 0):
        raise ValueError("need a >= 0 and b > 0")
    nz = a > 0
    lhs = float(np.sum(a[nz] * np.log(a[nz] / b[nz])))
    sa, sb = float(a.sum()), float(b.sum())
    rhs = sa * math.log(sa / sb) if sa > 0 else 0.0
    return lhs, rhs, lhs >= rhs - LSI_TOL


def _xlogx_sum(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    v = v[v > 0]
    return float(np.sum(v * np.log(v)))


@dataclass
class BoundReport:
    h_topk: float
    lb_topk: float
    h_posg: float
    lb_posg: float
    z_k: float
    z2: float                  # p(rho)-weighted mean of the per-cell kept masses
    z2_per_pos: list[float]
    lb_posg_at_zk: float       # LB_posg with every Z2_rho replaced by Z_k
    lsi_checks: int
    lsi_holds: bool
    topk_bound_holds: bool
    posg_bound_holds: bool

    def as_dict(self) -> dict:
        return asdict(self)


def bound_chain_report(joint: ToyJoint, k: int, tol: float = 1e-12) -> BoundReport:
    n_pos = joint.n_pos
    log_p = math.log(n_pos)
    marg = joint.marginal()
    kept = truncate_top_k(marg, k)
    z_k = float(marg.probs[np.isin(marg.support, kept.support)].sum())
    in_vk = set(kept.support.tolist())

    # joint mass per (x, rho), with the same column layout for both bounds
    pxr: dict[int, dict[int, float]] = {}
    for rho in range(n_pos):
        for x, q in zip(joint.cells[rho].tolist(), joint.cond_probs[rho].tolist()):
            pxr.setdefault(x, {})[rho] = joint.pos_probs[rho] * q

    lsi_ok, lsi_n = True, 0
    topk_terms = []
    for x in sorted(in_vk):
        a = [pxr.get(x, {}).get(rho, 0.0) / z_k for rho in range(n_pos)]
        topk_terms.extend(a)
        lsi_n += 1
        lsi_ok &= log_sum_inequality_check(a, np.ones(n_pos))[2]
    lb_topk = -log_p - _xlogx_sum(topk_terms)

    z2s, posg_terms, at_zk_terms = [], [], []
    cond_kept: dict[int, dict[int, float]] = {}
    for rho in range(n_pos):
        cond = CategoricalDist(joint.cells[rho], joint.cond_probs[rho])
        top = truncate_top_k(cond, k)
        z2 = float(cond.probs[np.isin(cond.support, top.support)].sum())
        z2s.append(z2)
        for x in top.support.tolist():
            p = joint.pos_probs[rho] * cond.prob(x)
            posg_terms.append(p / z2)
            at_zk_terms.append(p / z_k)
            cond_kept.setdefault(x, {})[rho] = p / z2
    lb_posg = -log_p - _xlogx_sum(posg_terms)
    lb_posg_at_zk = -log_p - _xlogx_sum(at_zk_terms)
    for x in sorted(cond_kept):
        a = [cond_kept[x].get(rho, 0.0) for rho in range(n_pos)]
        lsi_n += 1
        lsi_ok &= log_sum_inequality_check(a, np.ones(n_pos))[2]

    h_topk = entropy(kept)
    h_posg = entropy_posg(joint, k)
    return BoundReport(
        h_topk=h_topk, lb_topk=lb_topk, h_posg=h_posg, lb_posg=lb_posg,
        z_k=z_k, z2=float(np.dot(joint.pos_probs, z2s)), z2_per_pos=z2s, lb_posg_at_zk=lb_posg_at_zk,
        lsi_checks=lsi_n, lsi_holds=bool(lsi_ok),
        topk_bound_holds=h_topk >= lb_topk - tol, posg_bound_holds=h_posg >= lb_posg - tol,
    )


def exact_equal_z_joint(rng: np.random.Generator, n_pos: int, cell_size: int, k: int) -> ToyJoint:
    """Disjoint cells whose nonzero mass fits in the top-k both globally and
    per cell, so Z2_rho = Z_k = 1 holds exactly."""
    if k < n_pos or k > cell_size * n_pos:
        raise ValueError("need n_pos <= k <= n_pos * cell_size")
    # split k nonzero slots over the cells, each cell >= 1 and <= min(k, cell_size)
    sizes = np.ones(n_pos, dtype=int)
    for _ in range(k - n_pos):
        open_ = np.flatnonzero(sizes < min(cell_size, k))
        if open_.size == 0:
            break
        sizes[rng.choice(open_)] += 1
    cells, conds = [], []
    for rho in range(n_pos):
        cells.append(np.arange(cell_size) + rho * cell_size)
        q = np.zeros(cell_size)
        q[:sizes[rho]] = rng.dirichlet(np.ones(sizes[rho]))
        conds.append(q / q.sum())
    pos = rng.dirichlet(np.ones(n_pos))
    return ToyJoint(pos / pos.sum(), tuple(cells), tuple(conds))


def run_entropy_check(trials: int = 1000, n_pos: int = 5, cell_size: int = 20, k: int = 5,
                      seed: int = 0) -> dict:
    """Random-instance sweep plus the equal-normaliser comparisons.

    Hard assertions (``summary["hard_assertions_pass"]``): each entropy is at
    least its own bound, every log-sum inequality holds, and with the common
    normaliser Z2 = Z_k the POSG bound is at least the top-k bound.  The mean
    entropy gap is reported, not asserted.
    """
    if min(trials, n_pos, cell_size, k) < 1:
        raise ValueError("all parameters must be positive")
    rng = np.random.default_rng(seed)
    random_trials = []
    for _ in range(trials):
        rep = bound_chain_report(random_toy_joint(rng, n_pos, cell_size), k)
        d = rep.as_dict()
        d["bound_cmp_at_zk_holds"] = rep.lb_posg_at_zk >= rep.lb_topk - 1e-12
        random_trials.append(d)
    exact_trials = []
    if n_pos <= k <= n_pos * cell_size:
        for _ in range(trials):
            rep = bound_chain_report(exact_equal_z_joint(rng, n_pos, cell_size, k), k)
            d = rep.as_dict()
            d["bound_cmp_holds"] = rep.lb_posg >= rep.lb_topk - 1e-12
            exact_trials.append(d)

    h_posg = np.array([t["h_posg"] for t in random_trials])
    h_topk = np.array([t["h_topk"] for t in random_trials])
    counts = {
        "topk_bound_violations": sum(not t["topk_bound_holds"] for t in random_trials + exact_trials),
        "posg_bound_violations": sum(not t["posg_bound_holds"] for t in random_trials + exact_trials),
        "lsi_violations": sum(not t["lsi_holds"] for t in random_trials + exact_trials),
        "bound_cmp_at_zk_violations": sum(not t["bound_cmp_at_zk_holds"] for t in random_trials),
        "exact_equal_z_bound_cmp_violations": sum(not t["bound_cmp_holds"] for t in exact_trials),
    }
    summary = {
        **counts,
        "lsi_checks": sum(t["lsi_checks"] for t in random_trials + exact_trials),
        "mean_h_posg": float(h_posg.mean()),
        "mean_h_topk": float(h_topk.mean()),
        "mean_h_gap": float(h_posg.mean() - h_topk.mean()),
        "per_instance_h_posg_gt_h_topk": int(np.sum(h_posg > h_topk)),
        "hard_assertions_pass": all(v == 0 for v in counts.values()),
    }
    return {
        "settings": {"trials": trials, "n_pos": n_pos, "cell_size": cell_size, "k": k, "seed": seed,
                     "generator": "symmetric Dirichlet(1) per level, disjoint cells", "log": "natural"},
        "summary": summary,
        "random_trials": random_trials,
        "exact_equal_z_trials": exact_trials,
    }


def entropy_report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"
