"""Glue between the modules: prefix construction, generation record I/O,
record evaluation, sweeps and controllability tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import (BOS_ID, Lexicon, TaggedCorpus, build_lexicon, count_tags, desk_grammar, encode_corpus,
                     generate_synthetic_corpus, tag_with_lexicon)
from .decode import GenerationRecord, SamplingConfig, StageStrategy, generate_many
from .metrics import MetricsReport, evaluate_texts, perplexity
from .net import POSG, ModelConfig, ModelParams


@dataclass
class ExperimentConfig:
    model: ModelConfig | None = None
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    head: str = POSG
    prefix_len: int = 50
    continuation_len: int = 100
    max_prefixes: int = 200
    orders: tuple[int, ...] = (1, 2, 3)
    self_bleu_max_references: int | None = 500

    def __post_init__(self):
        if self.prefix_len < 1:
            raise ValueError("prefix_len must be >= 1")
        if self.continuation_len < 0 or self.max_prefixes < 1:
            raise ValueError("continuation_len must be >= 0 and max_prefixes >= 1")


@dataclass
class Prompt:
    prefix: list[int]       # token ids, without BOS
    reference: list[int]    # held-out continuation (may be shorter than requested)


def build_prompts(test: TaggedCorpus, lexicon: Lexicon, prefix_len: int, continuation_len: int,
                  max_prefixes: int = 200) -> list[Prompt]:
    """First ``prefix_len`` tokens of every test sequence longer than that,
    in corpus order, capped at ``max_prefixes``."""
    prompts = []
    for toks, _ in encode_corpus(test, lexicon):
        if len(toks) >= prefix_len + 1:
            prompts.append(Prompt(toks[:prefix_len], toks[prefix_len:prefix_len + continuation_len]))
            if len(prompts) == max_prefixes:
                break
    return prompts


def model_context(prefix: Sequence[int], context_len: int) -> list[int]:
    ctx = [BOS_ID, *prefix]
    return ctx[-context_len:]


def run_generation(params: ModelParams, lexicon: Lexicon, prompts: Sequence[Prompt], head: str,
                   length: int, sampling: SamplingConfig) -> list[GenerationRecord]:
    contexts = [model_context(p.prefix, params.config.context_len) for p in prompts]
    records = generate_many(params, lexicon.partition, head, contexts, length, sampling)
    for rec, p in zip(records, prompts):
        rec.prefix = list(p.prefix)
    return records


def records_to_jsonl(records: Sequence[GenerationRecord], prompts: Sequence[Prompt], lexicon: Lexicon,
                     head: str, sampling: SamplingConfig) -> str:
    vocab, tags = lexicon.vocab, lexicon.inventory.tags
    echo = {"head": head, **sampling.describe()}
    lines = []
    for i, (rec, p) in enumerate(zip(records, prompts)):
        doc = {
            "index": i,
            "prefix": vocab.decode(rec.prefix),
            "continuation": vocab.decode(rec.continuation),
            "sampled_pos": None if rec.sampled_pos is None else [tags[r] for r in rec.sampled_pos],
            "step_logprobs": rec.step_logprobs,
            "reference_continuation": vocab.decode(p.reference),
            "config": echo,
        }
        lines.append(json.dumps(doc, ensure_ascii=False, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def read_records(text: str) -> list[dict]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"line {lineno}: invalid JSON record ({e.msg})") from None
    if not out:
        raise ValueError("no generation records")
    return out


def pos_sequences_for(records: Sequence[GenerationRecord], lexicon: Lexicon,
                      tag_counts: dict[int, dict[int, int]]) -> list[list[int]]:
    """Sampled tags where the head recorded them, lexicon-tagger tags otherwise."""
    out = []
    for rec in records:
        if rec.sampled_pos is not None:
            out.append(list(rec.sampled_pos))
        else:
            out.append(tag_with_lexicon(lexicon.partition, tag_counts, rec.continuation))
    return out


def evaluate_records(records: Sequence[GenerationRecord], references: Sequence[Sequence[int]],
                     lexicon: Lexicon, tag_counts: dict[int, dict[int, int]],
                     orders: Sequence[int] = (1, 2, 3), self_bleu_max_references: int | None = 500,
                     seed: int = 0) -> MetricsReport:
    gen = [r.continuation for r in records if r.continuation]
    kept = [r for r in records if r.continuation]
    refs = [list(r) for r in references if len(r)]
    return evaluate_texts(gen, refs, pos_sequences_for(kept, lexicon, tag_counts), orders=orders,
                          self_bleu_max_references=self_bleu_max_references, seed=seed)


def continuation_ppl(records: Sequence[GenerationRecord]) -> float:
    """exp of the mean negative model log-probability of the generated tokens
    under the untruncated next-token distribution."""
    lp = np.concatenate([r.model_logprobs for r in records if r.model_logprobs])
    return float(np.exp(-lp.mean()))


SWEEP_COLUMNS = ("head", "pos_stage", "token_stage", "self_bleu4", "distinct_2", "rep",
                 "continuation_ppl", "model_ppl", "kld", "ms_jaccard_2")


def sweep(params: ModelParams, lexicon: Lexicon, tag_counts, prompts: Sequence[Prompt], test_encoded,
          head: str, pos_stages: Sequence[StageStrategy], token_stages: Sequence[StageStrategy],
          length: int, seed: int = 0, control: dict[int, float] | None = None,
          self_bleu_max_references: int | None = 500) -> list[dict]:
    if not pos_stages or not token_stages:
        raise ValueError("empty sweep grid")
    model_ppl = perplexity(params, lexicon.partition, head, test_encoded)
    refs = [p.reference for p in prompts]
    rows = []
    for ps in pos_stages:
        for ts in token_stages:
            cfg = SamplingConfig(pos_stage=ps, token_stage=ts, control=dict(control or {}), seed=seed)
            records = run_generation(params, lexicon, prompts, head, length, cfg)
            rep = evaluate_records(records, refs, lexicon, tag_counts,
                                   self_bleu_max_references=self_bleu_max_references, seed=seed)
            rows.append({
                "head": head, "pos_stage": str(ps), "token_stage": str(ts),
                "self_bleu4": rep.values.get("self_bleu4", float("nan")),
                "distinct_2": rep["distinct_2"], "rep": rep["rep"],
                "continuation_ppl": continuation_ppl(records), "model_ppl": model_ppl,
                "kld": rep["kld"], "ms_jaccard_2": rep["ms_jaccard_2"],
            })
    return rows


def control_table(params: ModelParams, lexicon: Lexicon, prompts: Sequence[Prompt], tag: str,
                  multipliers: Sequence[float], length: int, base: SamplingConfig,
                  self_bleu_max_references: int | None = 500) -> list[dict]:
    """Per multiplier: mean number of steps per continuation that sampled
    ``tag`` plus diversity/quality figures."""
    rho = lexicon.inventory.id(tag)
    refs = [p.reference for p in prompts]
    rows = []
    for m in multipliers:
        cfg = SamplingConfig(base.pos_stage, base.token_stage, {**base.control, rho: float(m)}, base.seed)
        records = run_generation(params, lexicon, prompts, POSG, length, cfg)
        counts = [sum(1 for r in rec.sampled_pos if r == rho) for rec in records]
        rep = evaluate_records(records, refs, lexicon, {},
                               self_bleu_max_references=self_bleu_max_references, seed=base.seed)
        rows.append({
            "tag": tag, "multiplier": float(m), "mean_tag_count": float(np.mean(counts)),
            "self_bleu4": rep.values.get("self_bleu4", float("nan")),
            "bleu4_vs_reference": rep["bleu4_vs_reference"], "distinct_2": rep["distinct_2"],
        })
    return rows


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns})
    return buf.getvalue()


@dataclass
class DeskData:
    """Synthetic train/valid/test split drawn from one grammar."""

    train: TaggedCorpus
    valid: TaggedCorpus
    test: TaggedCorpus
    lexicon: Lexicon
    tag_counts: dict[int, dict[int, int]]


def desk_data(n_train: int = 2900, n_valid: int = 150, n_test: int = 250, seed: int = 0,
              grammar_seed: int = 0) -> DeskData:
    """About 200k training tokens and a ~1.5k vocabulary with the defaults."""
    grammar = desk_grammar(grammar_seed)
    train = generate_synthetic_corpus(grammar, n_train, seed)
    valid = generate_synthetic_corpus(grammar, n_valid, seed + 1)
    test = generate_synthetic_corpus(grammar, n_test, seed + 2)
    lexicon = build_lexicon(train)
    return DeskData(train, valid, test, lexicon, count_tags(train, lexicon))
