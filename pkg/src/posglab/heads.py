"""Output heads: the plain softmax over the vocabulary and the POS-guided
factorisation p(x, rho | ctx) = p(rho | ctx) * p(x | rho, ctx).

Both heads read the same hidden state h; the POS head uses the rows of
``pos_out`` (o_rho) and the token conditionals reuse ``tok_out`` (w_x)
renormalised inside each partition cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .corpus import PosPartition
from .net import ModelParams

NORM_TOL = 1e-9


@dataclass(frozen=True)
class CategoricalDist:
    """Probabilities over an explicit, sorted, duplicate-free support of ids."""

    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        if support.shape != probs.shape or support.ndim != 1 or support.size == 0:
            raise ValueError("support and probs must be matching non-empty 1-d arrays")
        if np.any(np.diff(support) <= 0):
            raise ValueError("support must be sorted and duplicate-free")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(probs.sum() - 1.0) > NORM_TOL:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        support.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return len(self.support)

    @classmethod
    def from_logits(cls, support: Sequence[int], logits: np.ndarray) -> "CategoricalDist":
        logits = np.asarray(logits, dtype=np.float64)
        z = np.exp(logits - logits.max())
        return cls(np.asarray(support), z / z.sum())

    @classmethod
    def from_weights(cls, support: Sequence[int], weights: np.ndarray) -> "CategoricalDist":
        w = np.asarray(weights, dtype=np.float64)
        return cls(np.asarray(support), w / w.sum())

    def prob(self, item: int) -> float:
        i = np.searchsorted(self.support, item)
        if i < len(self.support) and self.support[i] == item:
            return float(self.probs[i])
        return 0.0

    def dense(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        out[self.support] = self.probs
        return out

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.support.tolist(), self.probs.tolist()))


@dataclass(frozen=True)
class JointDist:
    """p(rho) plus, for every rho with p(rho) > 0, p(x | rho) over a subset of V_rho."""

    pos_dist: CategoricalDist
    conditionals: dict[int, CategoricalDist]

    def __post_init__(self):
        for rho, p in zip(self.pos_dist.support.tolist(), self.pos_dist.probs.tolist()):
            if p > 0 and rho not in self.conditionals:
                raise ValueError(f"missing token conditional for pos {rho}")

    def joint_prob(self, token: int, pos: int) -> float:
        cond = self.conditionals.get(pos)
        return 0.0 if cond is None else self.pos_dist.prob(pos) * cond.prob(token)

    def cells(self):
        """Yield (rho, p(rho), conditional) for the POS ids with mass."""
        for rho, p in zip(self.pos_dist.support.tolist(), self.pos_dist.probs.tolist()):
            if p > 0:
                yield rho, p, self.conditionals[rho]


def _check_h(h: np.ndarray, d: int) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (d,):
        raise ValueError(f"hidden state must have shape ({d},), got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("hidden state is not finite")
    return h


def mle_distribution(params: ModelParams, h: np.ndarray) -> CategoricalDist:
    h = _check_h(h, params.config.d_model)
    W = params.tok_out
    return CategoricalDist.from_logits(np.arange(len(W)), W @ h)


def pos_distribution(params: ModelParams, h: np.ndarray) -> CategoricalDist:
    h = _check_h(h, params.config.d_model)
    O = params.pos_out
    return CategoricalDist.from_logits(np.arange(len(O)), O @ h)


def token_distribution_given_pos(params: ModelParams, partition: PosPartition, h: np.ndarray,
                                 pos: int) -> CategoricalDist:
    h = _check_h(h, params.config.d_model)
    if not 0 <= pos < partition.n_pos:
        raise ValueError(f"invalid pos id {pos}")
    cell = partition.members[pos]
    if len(cell) == 0:
        raise ValueError(f"partition cell {pos} is empty")
    return CategoricalDist.from_logits(cell, params.tok_out[cell] @ h)


def joint_distribution(params: ModelParams, partition: PosPartition, h: np.ndarray) -> JointDist:
    h = _check_h(h, params.config.d_model)
    pos = pos_distribution(params, h)
    logits = params.tok_out @ h
    conds = {}
    for rho, p in zip(pos.support.tolist(), pos.probs.tolist()):
        if p > 0:
            cell = partition.members[rho]
            conds[rho] = CategoricalDist.from_logits(cell, logits[cell])
    return JointDist(pos, conds)


def marginal_token_distribution(joint: JointDist) -> CategoricalDist:
    """p(x) = sum over rho in POS(x) of p(rho) p(x | rho)."""
    support = np.unique(np.concatenate([c.support for _, _, c in joint.cells()]))
    probs = np.zeros(len(support))
    for _, p, cond in joint.cells():
        probs[np.searchsorted(support, cond.support)] += p * cond.probs
    return CategoricalDist(support, probs)


def mle_loss(params: ModelParams, hidden: np.ndarray, gold_tokens: Sequence[int]) -> float:
    """Mean over t of -log p(x_t | ctx) under the plain softmax head."""
    logits = np.asarray(hidden) @ params.tok_out.T
    gold = np.asarray(gold_tokens)
    return float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(len(gold)), gold]))


def posg_loss(params: ModelParams, partition: PosPartition, hidden: np.ndarray,
              gold_tokens: Sequence[int], gold_pos: Sequence[int]) -> float:
    """Mean over t of -[log p(rho_t | ctx) + log p(x_t | rho_t, ctx)]."""
    hidden = np.asarray(hidden)
    total = 0.0
    for t, (x, rho) in enumerate(zip(gold_tokens, gold_pos)):
        if not partition.contains(int(x), int(rho)):
            raise ValueError(f"position {t}: token {x} is not in the cell of pos {rho}")
        h = hidden[t]
        pos_logits = params.pos_out @ h
        cell = partition.members[rho]
        cell_logits = params.tok_out[cell] @ h
        total -= pos_logits[rho] - logsumexp(pos_logits)
        total -= params.tok_out[x] @ h - logsumexp(cell_logits)
    return total / len(gold_tokens)


def marginal_log_probs(params: ModelParams, partition: PosPartition, hidden: np.ndarray,
                       tokens: Sequence[int]) -> np.ndarray:
    """Vectorised log p(x_t | ctx) of the POS-guided marginal for many positions."""
    H = np.asarray(hidden)
    tokens = np.asarray(tokens)
    log_pos = H @ params.pos_out.T
    log_pos -= logsumexp(log_pos, axis=1, keepdims=True)
    logits = H @ params.tok_out.T
    cell_lse = np.stack([logsumexp(logits[:, cell], axis=1) for cell in partition.members], axis=1)
    gold_logit = logits[np.arange(len(tokens)), tokens]
    out = np.empty(len(tokens))
    for i, x in enumerate(tokens.tolist()):
        rhos = list(partition.tag_sets[x])
        out[i] = logsumexp(log_pos[i, rhos] + gold_logit[i] - cell_lse[i, rhos])
    return out


def mle_log_probs(params: ModelParams, hidden: np.ndarray, tokens: Sequence[int]) -> np.ndarray:
    logits = np.asarray(hidden) @ params.tok_out.T
    tokens = np.asarray(tokens)
    return logits[np.arange(len(tokens)), tokens] - logsumexp(logits, axis=1)
