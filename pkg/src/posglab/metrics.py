"""Diversity and quality metrics for generated text.

Texts are lists of token strings (or any hashable tokens).  Corpus-level
metrics pool n-grams over the whole set.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .corpus import EOS_ID, PosPartition
from .heads import marginal_log_probs, mle_log_probs
from .net import MLE, POSG, ModelParams, forward_batch, make_windows

Text = Sequence[Hashable]


def ngrams(text: Text, n: int) -> list[tuple]:
    return [tuple(text[i:i + n]) for i in range(len(text) - n + 1)]


def _check_texts(texts: Sequence[Text], what: str = "texts") -> None:
    if len(texts) == 0:
        raise ValueError(f"{what} must be non-empty")
    for i, t in enumerate(texts):
        if len(t) == 0:
            raise ValueError(f"{what}[{i}] is empty")


# --------------------------------------------------------------------------
# BLEU


def _closest_ref_len(hyp_len: int, ref_lengths: Sequence[int]) -> int:
    return min(ref_lengths, key=lambda r: (abs(r - hyp_len), r))


def _bleu_core(hyp_counts: Sequence[Counter], hyp_len: int, max_ref: Callable[[int, tuple], int],
               ref_len: int, max_n: int) -> float:
    """Geometric mean of clipped n-gram precisions times the brevity penalty.

    A zero precision for n >= 2 is add-one smoothed, (m + 1) / (l + 1); a zero
    unigram precision gives 0.
    """
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = hyp_counts[n - 1]
        total = max(hyp_len - n + 1, 0)
        matched = sum(min(c, max_ref(n, g)) for g, c in counts.items())
        if matched == 0:
            if n == 1:
                return 0.0
            matched, total = 1, total + 1
        log_p += math.log(matched / total)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def _counts(text: Text, max_n: int) -> list[Counter]:
    return [Counter(ngrams(text, n)) for n in range(1, max_n + 1)]


def bleu(hypothesis: Text, references: Sequence[Text], max_n: int = 4) -> float:
    """Sentence BLEU in [0, 100] against one or more references."""
    if len(hypothesis) == 0:
        raise ValueError("hypothesis is empty")
    _check_texts(references, "references")
    ref_counts = [_counts(r, max_n) for r in references]
    merged = [Counter() for _ in range(max_n)]
    for rc in ref_counts:
        for n in range(max_n):
            for g, c in rc[n].items():
                if c > merged[n][g]:
                    merged[n][g] = c
    return _bleu_core(_counts(hypothesis, max_n), len(hypothesis),
                      lambda n, g: merged[n - 1].get(g, 0),
                      _closest_ref_len(len(hypothesis), [len(r) for r in references]), max_n)


def corpus_bleu_vs_reference(hypotheses: Sequence[Text], references: Sequence[Text], max_n: int = 4) -> float:
    """Mean sentence BLEU of each hypothesis against the whole reference set."""
    _check_texts(hypotheses, "hypotheses")
    _check_texts(references, "references")
    merged = [Counter() for _ in range(max_n)]
    for r in references:
        for n, rc in enumerate(_counts(r, max_n)):
            for g, c in rc.items():
                if c > merged[n][g]:
                    merged[n][g] = c
    lengths = sorted({len(r) for r in references})
    scores = [_bleu_core(_counts(h, max_n), len(h), lambda n, g: merged[n - 1].get(g, 0),
                         _closest_ref_len(len(h), lengths), max_n) for h in hypotheses]
    return float(np.mean(scores))


def self_bleu(texts: Sequence[Text], max_n: int = 4, max_references: int | None = None,
              seed: int = 0) -> float:
    """Mean BLEU of each text against all the others.

    With ``max_references`` set and more texts than that, each hypothesis
    is scored against a uniform random subset of the others instead.
    """
    _check_texts(texts)
    if len(texts) < 2:
        raise ValueError("self-BLEU needs at least 2 texts")
    if max_references is not None and len(texts) - 1 > max_references:
        rng = np.random.default_rng(seed)
        scores = []
        for i, h in enumerate(texts):
            others = [j for j in range(len(texts)) if j != i]
            pick = rng.choice(len(others), size=max_references, replace=False)
            scores.append(bleu(h, [texts[others[j]] for j in sorted(pick)], max_n))
        return float(np.mean(scores))

    counts = [_counts(t, max_n) for t in texts]
    # per n-gram: best count, its text, and the best count among the other texts
    best: list[dict[tuple, list]] = [{} for _ in range(max_n)]
    for i, tc in enumerate(counts):
        for n in range(max_n):
            table = best[n]
            for g, c in tc[n].items():
                entry = table.get(g)
                if entry is None:
                    table[g] = [c, i, 0]
                elif c > entry[0]:
                    entry[2], entry[0], entry[1] = entry[0], c, i
                elif c > entry[2]:
                    entry[2] = c
    lengths = np.array([len(t) for t in texts])
    scores = []
    for i, t in enumerate(texts):
        def max_ref(n: int, g: tuple, i=i) -> int:
            c1, owner, c2 = best[n - 1][g]
            return c2 if owner == i else c1

        others = np.delete(lengths, i)
        scores.append(_bleu_core(counts[i], len(t), max_ref,
                                 _closest_ref_len(len(t), others.tolist()), max_n))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# diversity


def distinct_n(texts: Sequence[Text], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across the set."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen = set()
    total = 0
    for t in texts:
        grams = ngrams(t, n)
        total += len(grams)
        seen.update(grams)
    if total == 0:
        raise ValueError(f"no text has {n} or more tokens")
    return len(seen) / total


def distinct_npos(pos_sequences: Sequence[Text], n: int) -> float:
    return distinct_n(pos_sequences, n)


def uniq(texts: Sequence[Text]) -> int:
    _check_texts(texts)
    return len({tok for t in texts for tok in t})


def ends_in_loop(text: Text, max_phrase: int = 10, min_repeats: int = 3) -> bool:
    """True when the text ends with >= ``min_repeats`` consecutive copies of
    some phrase of 1..``max_phrase`` tokens."""
    text = list(text)
    for size in range(1, max_phrase + 1):
        if size * min_repeats > len(text):
            break
        tail = text[-size:]
        if all(text[len(text) - (j + 1) * size: len(text) - j * size] == tail for j in range(1, min_repeats)):
            return True
    return False


def rep(texts: Sequence[Text], max_phrase: int = 10, min_repeats: int = 3) -> float:
    _check_texts(texts)
    return sum(ends_in_loop(t, max_phrase, min_repeats) for t in texts) / len(texts)


# --------------------------------------------------------------------------
# quality


def kld_unigram(generated: Sequence[Text], reference: Sequence[Text]) -> float:
    """KL(P_ref || P_gen) of add-one-smoothed unigram distributions over the
    union vocabulary (natural log)."""
    _check_texts(generated, "generated")
    _check_texts(reference, "reference")
    cg = Counter(tok for t in generated for tok in t)
    cr = Counter(tok for t in reference for tok in t)
    support = sorted(set(cg) | set(cr), key=repr)
    ng, nr, u = sum(cg.values()), sum(cr.values()), len(support)
    kl = 0.0
    for w in support:
        p = (cr[w] + 1) / (nr + u)
        q = (cg[w] + 1) / (ng + u)
        kl += p * math.log(p / q)
    return max(kl, 0.0)


def ms_jaccard(generated: Sequence[Text], reference: Sequence[Text], n: int) -> float:
    """sum_g min(f_gen(g), f_ref(g)) / sum_g max(f_gen(g), f_ref(g)) with
    relative n-gram frequencies f, evaluated exactly in integers."""
    cg = Counter(g for t in generated for g in ngrams(t, n))
    cr = Counter(g for t in reference for g in ngrams(t, n))
    A, B = sum(cg.values()), sum(cr.values())
    if A == 0 or B == 0:
        raise ValueError(f"both sets need at least one {n}-gram")
    lo = hi = 0
    for g in set(cg) | set(cr):
        a, b = cg[g] * B, cr[g] * A
        lo += min(a, b)
        hi += max(a, b)
    return lo / hi


def ppmcc(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson product-moment correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("x and y must be equal-length vectors with >= 2 entries")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance: correlation undefined")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def sequence_log_probs(params: ModelParams, partition: PosPartition | None, head_kind: str,
                       encoded: Sequence[tuple[Sequence[int], Sequence[int]]],
                       batch_size: int = 64) -> np.ndarray:
    """log p(x_t | ctx) for every non-padded target of ``encoded`` (BOS/EOS
    framed, split into context windows as in training)."""
    windows = make_windows(encoded, params.config.context_len)
    out = []
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        by_len: dict[int, list] = {}
        for w in chunk:
            by_len.setdefault(len(w[0]), []).append(w)
        for ws in by_len.values():
            H = forward_batch(params, np.stack([w[0] for w in ws]))
            for h, (_, tgt, _) in zip(H, ws):
                if head_kind == POSG:
                    out.append(marginal_log_probs(params, partition, h, tgt))
                elif head_kind == MLE:
                    out.append(mle_log_probs(params, h, tgt))
                else:
                    raise ValueError(f"unknown head kind {head_kind!r}")
    lp = np.concatenate(out)
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("non-finite log-probability")
    return lp


def perplexity(params: ModelParams, partition: PosPartition | None, head_kind: str,
               testset: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    """exp of the mean negative log-likelihood; the POSG head is scored with
    its marginal next-token distribution."""
    lp = sequence_log_probs(params, partition, head_kind, testset)
    return float(np.exp(-lp.mean()))


def unigram_perplexity(train: Sequence[tuple[Sequence[int], Sequence[int]]],
                       test: Sequence[tuple[Sequence[int], Sequence[int]]], vocab_size: int) -> float:
    """Add-one-smoothed unigram baseline over the same targets as
    ``perplexity`` (tokens plus the closing EOS)."""
    counts = np.ones(vocab_size)
    for toks, _ in train:
        np.add.at(counts, list(toks) + [EOS_ID], 1)
    logp = np.log(counts / counts.sum())
    targets = np.concatenate([np.asarray(list(toks) + [EOS_ID]) for toks, _ in test])
    return float(np.exp(-logp[targets].mean()))


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    values: dict[str, float] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_json(self) -> str:
        for k, v in self.values.items():
            if not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite")
        return json.dumps({"metrics": self.values, "settings": self.settings}, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        return cls(doc["metrics"], doc["settings"])


def evaluate_texts(generated: Sequence[Text], reference: Sequence[Text],
                   generated_pos: Sequence[Text] | None = None,
                   orders: Sequence[int] = (1, 2, 3), bleu_n: int = 4,
                   rep_max_phrase: int = 10, rep_min_repeats: int = 3,
                   self_bleu_max_references: int | None = 500, seed: int = 0) -> MetricsReport:
    """Diversity and quality report for a set of generations against references."""
    _check_texts(generated, "generated")
    _check_texts(reference, "reference")
    v: dict[str, float] = {}
    if len(generated) >= 2:
        v[f"self_bleu{bleu_n}"] = self_bleu(generated, bleu_n, self_bleu_max_references, seed)
    v[f"bleu{bleu_n}_vs_reference"] = corpus_bleu_vs_reference(generated, reference, bleu_n)
    v["rep"] = rep(generated, rep_max_phrase, rep_min_repeats)
    v["uniq"] = float(uniq(generated))
    for n in orders:
        v[f"distinct_{n}"] = distinct_n(generated, n)
    v["kld"] = kld_unigram(generated, reference)
    for n in orders:
        v[f"ms_jaccard_{n}"] = ms_jaccard(generated, reference, n)
    if generated_pos is not None:
        for n in orders:
            v[f"distinct_pos_{n}"] = distinct_npos(generated_pos, n)
    settings = {
        "ngram_orders": list(orders),
        "bleu_max_n": bleu_n,
        "bleu_smoothing": "add-one on zero precisions for n >= 2",
        "self_bleu_max_references": self_bleu_max_references,
        "self_bleu_subsample_seed": seed,
        "kld_direction": "KL(reference || generated), add-one smoothing over union unigram support",
        "ms_jaccard": "sum min / sum max of relative n-gram frequencies, per n",
        "distinct": "pooled over the set",
        "rep_max_phrase": rep_max_phrase,
        "rep_min_repeats": rep_min_repeats,
        "n_generated": len(generated),
        "n_reference": len(reference),
    }
    return MetricsReport(v, settings)
