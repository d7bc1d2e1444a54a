"""Truncation strategies, two-stage POS-guided sampling with POS control, and
autoregressive generation for both heads.

Ordering convention for every truncation: probability descending, ties to
the lower id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import PosPartition
from .heads import CategoricalDist, JointDist, joint_distribution, mle_distribution
from .net import MLE, POSG, ModelParams, forward_batch

# cumulative mass within this of alpha counts as reaching it
NUCLEUS_SLACK = 1e-12


def _ranked(dist: CategoricalDist) -> np.ndarray:
    """Positions into ``dist.support`` sorted by (-prob, id)."""
    return np.lexsort((dist.support, -dist.probs))


def _keep(dist: CategoricalDist, positions: np.ndarray) -> CategoricalDist:
    positions = np.sort(positions)
    kept = dist.probs[positions]
    return CategoricalDist(dist.support[positions], kept / kept.sum())


def truncate_top_k(dist: CategoricalDist, k: int) -> CategoricalDist:
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= len(dist):
        return dist
    return _keep(dist, _ranked(dist)[:k])


def truncate_nucleus(dist: CategoricalDist, alpha: float) -> CategoricalDist:
    """Smallest high-probability prefix with mass >= alpha (boundary item kept)."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    if alpha >= 1:
        return dist
    order = _ranked(dist)
    cum = np.cumsum(dist.probs[order])
    n = int(np.searchsorted(cum, alpha - NUCLEUS_SLACK, side="left")) + 1
    n = min(n, len(order))
    if n == len(order):
        return dist
    return _keep(dist, order[:n])


def apply_temperature(dist: CategoricalDist, tau: float) -> CategoricalDist:
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    if tau == 1:
        return dist
    with np.errstate(divide="ignore"):
        logp = np.log(dist.probs) / tau
    return CategoricalDist.from_logits(dist.support, logp)


def greedy(dist: CategoricalDist) -> int:
    return int(dist.support[_ranked(dist)[0]])


def apply_pos_control(pos_dist: CategoricalDist, control: Mapping[int, float]) -> CategoricalDist:
    """p'(rho) proportional to m_rho * p(rho); unspecified multipliers are 1."""
    if all(v == 1.0 for v in control.values()):
        return pos_dist
    m = np.array([control.get(int(r), 1.0) for r in pos_dist.support], dtype=np.float64)
    if np.any(m <= 0) or not np.all(np.isfinite(m)):
        raise ValueError("control multipliers must be positive and finite")
    return CategoricalDist.from_weights(pos_dist.support, m * pos_dist.probs)


@dataclass(frozen=True)
class StageStrategy:
    """One sampling stage: pure, greedy, top_k(k), nucleus(alpha) or temperature(tau)."""

    kind: str = "pure"
    value: float | None = None

    def __post_init__(self):
        if self.kind in ("pure", "greedy"):
            if self.value is not None:
                raise ValueError(f"{self.kind} takes no parameter")
        elif self.kind == "top_k":
            if self.value is None or self.value < 1 or int(self.value) != self.value:
                raise ValueError("top_k needs an integer k >= 1")
        elif self.kind == "nucleus":
            if self.value is None or not 0 < self.value <= 1:
                raise ValueError("nucleus needs 0 < alpha <= 1")
        elif self.kind == "temperature":
            if self.value is None or not self.value > 0:
                raise ValueError("temperature needs tau > 0")
        else:
            raise ValueError(f"unknown stage strategy {self.kind!r}")

    @classmethod
    def pure(cls) -> "StageStrategy":
        return cls("pure")

    @classmethod
    def greedy(cls) -> "StageStrategy":
        return cls("greedy")

    @classmethod
    def top_k(cls, k: int) -> "StageStrategy":
        return cls("top_k", int(k))

    @classmethod
    def nucleus(cls, alpha: float) -> "StageStrategy":
        return cls("nucleus", float(alpha))

    @classmethod
    def temperature(cls, tau: float) -> "StageStrategy":
        return cls("temperature", float(tau))

    @classmethod
    def parse(cls, text: str) -> "StageStrategy":
        """``pure``, ``greedy``, ``top_k:20``, ``nucleus:0.5``, ``temperature:0.7``."""
        kind, _, arg = text.strip().partition(":")
        kind = kind.replace("-", "_").lower()
        if kind in ("pure", "greedy"):
            if arg:
                raise ValueError(f"{kind} takes no parameter")
            return cls(kind)
        if not arg:
            raise ValueError(f"{kind} needs a parameter, e.g. {kind}:1")
        value = float(arg)
        return cls(kind, int(value) if kind == "top_k" else value)

    def __str__(self) -> str:
        return self.kind if self.value is None else f"{self.kind}:{self.value:g}"

    def apply(self, dist: CategoricalDist) -> CategoricalDist:
        if self.kind == "pure":
            return dist
        if self.kind == "greedy":
            return CategoricalDist(np.array([greedy(dist)]), np.array([1.0]))
        if self.kind == "top_k":
            return truncate_top_k(dist, int(self.value))
        if self.kind == "nucleus":
            return truncate_nucleus(dist, self.value)
        return apply_temperature(dist, self.value)


@dataclass(frozen=True)
class SamplingConfig:
    pos_stage: StageStrategy = field(default_factory=lambda: StageStrategy.top_k(20))
    token_stage: StageStrategy = field(default_factory=lambda: StageStrategy.nucleus(0.5))
    control: Mapping[int, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for rho, m in self.control.items():
            if not m > 0 or not np.isfinite(m):
                raise ValueError(f"control multiplier for pos {rho} must be positive")

    def describe(self) -> dict:
        return {"pos_stage": str(self.pos_stage), "token_stage": str(self.token_stage),
                "control": {str(k): v for k, v in sorted(self.control.items())}, "seed": self.seed}


# --------------------------------------------------------------------------
# two-stage sampling


def _draw(dist: CategoricalDist, u: np.ndarray | float):
    """Inverse-CDF draw(s) of support ids for uniform(s) ``u``."""
    cdf = np.cumsum(dist.probs)
    idx = np.minimum(np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right"), len(cdf) - 1)
    return dist.support[idx]


class TwoStageSampler:
    """Truncated stage distributions for one decoding step.

    ``pos`` is p'(rho) after control and the POS-stage truncation;
    ``tokens[rho]`` is p'(x | rho) after the token-stage truncation.
    """

    def __init__(self, joint: JointDist, config: SamplingConfig):
        controlled = apply_pos_control(joint.pos_dist, config.control)
        pos = config.pos_stage.apply(controlled)
        # drop tags that carry no mass (they have no conditional)
        live = pos.probs > 0
        self.pos = CategoricalDist(pos.support[live], pos.probs[live] / pos.probs[live].sum())
        self.tokens = {int(rho): config.token_stage.apply(joint.conditionals[int(rho)])
                       for rho in self.pos.support}

    def marginal(self) -> CategoricalDist:
        """p'(x) = sum over rho of p'(rho) p'(x | rho)."""
        support = np.unique(np.concatenate([c.support for c in self.tokens.values()]))
        probs = np.zeros(len(support))
        for rho, p in zip(self.pos.support.tolist(), self.pos.probs.tolist()):
            cond = self.tokens[rho]
            probs[np.searchsorted(support, cond.support)] += p * cond.probs
        return CategoricalDist(support, probs)

    def prob(self, token: int) -> float:
        return sum(p * self.tokens[rho].prob(token)
                   for rho, p in zip(self.pos.support.tolist(), self.pos.probs.tolist()))

    def step(self, rng: np.random.Generator) -> tuple[int, int]:
        rho = int(_draw(self.pos, rng.random()))
        return rho, int(_draw(self.tokens[rho], rng.random()))

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` independent two-stage draws, vectorised per sampled tag."""
        rhos = _draw(self.pos, rng.random(n))
        toks = np.empty(n, dtype=np.int64)
        u = rng.random(n)
        for rho in np.unique(rhos).tolist():
            sel = rhos == rho
            toks[sel] = _draw(self.tokens[rho], u[sel])
        return rhos, toks


def posg_truncated_marginal(joint: JointDist, config: SamplingConfig) -> CategoricalDist:
    return TwoStageSampler(joint, config).marginal()


def posg_step(joint: JointDist, config: SamplingConfig, rng: np.random.Generator) -> tuple[int, int]:
    """Sample rho from the truncated POS distribution, then x from the
    truncated conditional of rho."""
    return TwoStageSampler(joint, config).step(rng)


# --------------------------------------------------------------------------
# generation


@dataclass
class GenerationRecord:
    prefix: list[int]
    continuation: list[int]
    sampled_pos: list[int] | None
    step_logprobs: list[float]
    # log p(x) under the untruncated next-token distribution
    model_logprobs: list[float] = field(default_factory=list)


def generation_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _window(ctx: list[int], context_len: int) -> list[int]:
    return ctx if len(ctx) <= context_len else ctx[-(context_len - 1):]


def generate_many(params: ModelParams, partition: PosPartition | None, head_kind: str,
                  prefixes: Sequence[Sequence[int]], length: int, config: SamplingConfig,
                  first_index: int = 0, batch_size: int = 64) -> list[GenerationRecord]:
    """Generate a continuation for every prefix.  Prefix ``i`` draws from its
    own RNG stream ``(config.seed, first_index + i)``, so results do not
    depend on how prefixes are batched."""
    if head_kind not in (MLE, POSG):
        raise ValueError(f"unknown head kind {head_kind!r}")
    if head_kind == POSG and partition is None:
        raise ValueError("POSG generation needs the POS partition")
    L = params.config.context_len
    for p in prefixes:
        if not p:
            raise ValueError("prefix must be non-empty")
        if len(p) > L:
            raise ValueError(f"prefix longer than context_len {L}")
    records = [GenerationRecord(list(p), [], [] if head_kind == POSG else None, []) for p in prefixes]
    rngs = [generation_rng(config.seed, first_index + i) for i in range(len(prefixes))]
    for start in range(0, len(records), batch_size):
        group = list(range(start, min(start + batch_size, len(records))))
        for _ in range(length):
            # rows with equal window length share one batched forward pass
            windows = {i: _window(records[i].prefix + records[i].continuation, L) for i in group}
            by_len: dict[int, list[int]] = {}
            for i, w in windows.items():
                by_len.setdefault(len(w), []).append(i)
            for rows in by_len.values():
                H = forward_batch(params, np.array([windows[i] for i in rows]))[:, -1]
                for i, h in zip(rows, H):
                    _step(params, partition, head_kind, config, h, rngs[i], records[i])
    return records


def _step(params, partition, head_kind, config, h, rng, rec: GenerationRecord) -> None:
    if head_kind == POSG:
        joint = joint_distribution(params, partition, h)
        sampler = TwoStageSampler(joint, config)
        rho, x = sampler.step(rng)
        rec.sampled_pos.append(rho)
        p = sampler.prob(x)
        p_model = sum(q * cond.prob(x) for _, q, cond in joint.cells())
    else:
        full = mle_distribution(params, h)
        dist = config.token_stage.apply(full)
        x = int(_draw(dist, rng.random()))
        p = dist.prob(x)
        p_model = full.prob(x)
    rec.continuation.append(x)
    rec.step_logprobs.append(float(np.log(p)))
    rec.model_logprobs.append(float(np.log(p_model)))


def generate(params: ModelParams, partition: PosPartition | None, head_kind: str,
             prefix: Sequence[int], length: int, config: SamplingConfig,
             index: int = 0) -> GenerationRecord:
    return generate_many(params, partition, head_kind, [prefix], length, config, first_index=index)[0]
