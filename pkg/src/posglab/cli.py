"""``posglab`` command line: ingest, synth-corpus, train, generate, evaluate,
sweep, control, entropy-check.

Every command accepts ``--config FILE`` (JSON object keyed by long option
names, dashes or underscores); explicit flags override it.

Exit status: 0 success, 2 usage error, 3 data error, 4 runtime failure,
5 failed entropy-check assertion.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import experiment as ex
from .corpus import (CorpusFormatError, SyntheticGrammar, build_lexicon, count_tags, desk_grammar,
                     encode_corpus, generate_synthetic_corpus, lexicon_from_json, lexicon_to_json,
                     read_tagged_corpus, write_tagged_corpus)
from .decode import GenerationRecord, SamplingConfig, StageStrategy
from .metrics import evaluate_texts, perplexity
from .net import (HEAD_KINDS, AdamConfig, CheckpointError, GoldConsistencyError, ModelConfig,
                  TrainingDiverged, load_checkpoint, save_checkpoint, train)
from .oracle import entropy_report_json, run_entropy_check

log = logging.getLogger("posglab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME, EXIT_ASSERT = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _write(path: str, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as f:
            return f.read()
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None


def _corpus(path: str):
    try:
        return read_tagged_corpus(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except CorpusFormatError as e:
        raise DataError(f"{path}: {e}") from None


def _lexicon(path: str):
    try:
        return lexicon_from_json(_read(path))
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


def _checkpoint(path: str):
    try:
        with open(path, "rb") as f:
            return load_checkpoint(f.read())[0]
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except CheckpointError as e:
        raise DataError(f"{path}: {e}") from None


def _stage(text: str) -> StageStrategy:
    try:
        return StageStrategy.parse(text)
    except ValueError as e:
        raise UsageError(f"bad stage strategy {text!r}: {e}") from None


def _control(items: Sequence[str], lexicon) -> dict[int, float]:
    out = {}
    for item in items or ():
        tag, _, value = item.rpartition("=")
        if not tag:
            raise UsageError(f"--control expects TAG=MULTIPLIER, got {item!r}")
        try:
            out[lexicon.inventory.id(tag)] = float(value)
        except KeyError as e:
            raise UsageError(str(e.args[0])) from None
        except ValueError:
            raise UsageError(f"bad multiplier in {item!r}") from None
    return out


def _check_head(params, head: str) -> None:
    if head not in HEAD_KINDS:
        raise UsageError(f"unknown head {head!r}")


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    corpus = _corpus(args.corpus)
    try:
        lexicon = build_lexicon(corpus, args.max_vocab, args.min_freq)
    except ValueError as e:
        raise DataError(f"gold tags outside the lexicon partition: {e}") from None
    _write(args.out, lexicon_to_json(lexicon, count_tags(corpus, lexicon)))
    log.info("vocabulary %d tokens, %d POS tags -> %s", len(lexicon.vocab), len(lexicon.inventory), args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.grammar:
        try:
            grammar = SyntheticGrammar.from_json(_read(args.grammar))
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"{args.grammar}: {e}") from None
    else:
        grammar = desk_grammar(args.grammar_seed)
    if args.dump_grammar:
        _write(args.dump_grammar, grammar.to_json())
    corpus = generate_synthetic_corpus(grammar, args.n_sequences, args.seed)
    write_tagged_corpus(corpus, args.out)
    log.info("%d sequences, %d tokens -> %s", len(corpus), corpus.n_tokens, args.out)
    return EXIT_OK


def _model_config(args, lexicon) -> ModelConfig:
    return ModelConfig(vocab_size=len(lexicon.vocab), pos_count=len(lexicon.inventory),
                       n_layers=args.n_layers, n_heads=args.n_heads, d_model=args.d_model,
                       d_ff=args.d_ff, context_len=args.context_len, dropout_rate=args.dropout,
                       seed=args.seed)


def cmd_train(args) -> int:
    lexicon, _ = _lexicon(args.lexicon)
    train_data = encode_corpus(_corpus(args.corpus), lexicon)
    valid_data = encode_corpus(_corpus(args.valid), lexicon) if args.valid else None
    try:
        config = _model_config(args, lexicon)
    except ValueError as e:
        raise UsageError(str(e)) from None
    opt = AdamConfig(lr=args.lr, beta1=args.beta1, beta2=args.beta2, eps=args.eps,
                     clip_norm=args.clip, weight_decay=args.weight_decay, batch_size=args.batch_size)
    log_lines = []

    def on_epoch(entry):
        # timings go to stderr only so the log file stays byte-reproducible
        log_lines.append(json.dumps({k: v for k, v in entry.items() if k != "wall_seconds"}, sort_keys=True))
        log.info("epoch %d train %s valid %s (%.1fs)", entry["epoch"], entry["train_loss"],
                 entry["valid_loss"], entry["wall_seconds"])

    try:
        result = train(config, train_data, args.head, args.epochs, lexicon.partition, valid_data, opt,
                       on_epoch=on_epoch)
    except GoldConsistencyError as e:
        raise DataError(f"gold tags outside the lexicon partition: {e}") from None
    except TrainingDiverged as e:
        _write(args.out, "")
        Path(args.out).write_bytes(save_checkpoint(e.last_good))
        if args.log:
            _write(args.log, "\n".join(log_lines) + "\n")
        log.error("%s; last good checkpoint kept at %s", e, args.out)
        return EXIT_RUNTIME
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(save_checkpoint(result.params))
    if args.log:
        _write(args.log, "\n".join(log_lines) + "\n")
    return EXIT_OK


def _generation_setup(args):
    lexicon, tag_counts = _lexicon(args.lexicon)
    params = _checkpoint(args.checkpoint)
    if params.config.vocab_size != len(lexicon.vocab) or params.config.pos_count != len(lexicon.inventory):
        raise DataError(f"{args.checkpoint}: model shape does not match lexicon {args.lexicon}")
    test = _corpus(args.corpus)
    try:
        cfg = ex.ExperimentConfig(model=params.config, head=args.head, prefix_len=args.prefix_len,
                                  continuation_len=args.continuation_len, max_prefixes=args.max_prefixes)
    except ValueError as e:
        raise UsageError(str(e)) from None
    prompts = ex.build_prompts(test, lexicon, cfg.prefix_len, cfg.continuation_len, cfg.max_prefixes)
    if not prompts:
        raise DataError(f"{args.corpus}: no sequence longer than prefix_len={cfg.prefix_len}")
    return lexicon, tag_counts, params, test, cfg, prompts


def cmd_generate(args) -> int:
    lexicon, _, params, _, cfg, prompts = _generation_setup(args)
    sampling = SamplingConfig(_stage(args.pos_stage), _stage(args.token_stage),
                              _control(args.control, lexicon), args.seed)
    records = ex.run_generation(params, lexicon, prompts, cfg.head, cfg.continuation_len, sampling)
    _write(args.out, ex.records_to_jsonl(records, prompts, lexicon, cfg.head, sampling))
    log.info("%d continuations -> %s", len(records), args.out)
    return EXIT_OK


def _records_from_json(docs, lexicon) -> tuple[list[GenerationRecord], list[list[int]]]:
    records, refs = [], []
    tags = lexicon.inventory
    for d in docs:
        sp = d.get("sampled_pos")
        records.append(GenerationRecord(
            lexicon.vocab.encode(d["prefix"]), lexicon.vocab.encode(d["continuation"]),
            None if sp is None else [tags.id(t) for t in sp], list(d.get("step_logprobs", []))))
        refs.append(lexicon.vocab.encode(d.get("reference_continuation", [])))
    return records, refs


def cmd_evaluate(args) -> int:
    if bool(args.records) == bool(args.generated):
        raise UsageError("give exactly one of --records or --generated")
    settings_extra = {}
    if args.records:
        if not args.lexicon:
            raise UsageError("--records needs --lexicon")
        lexicon, tag_counts = _lexicon(args.lexicon)
        try:
            records, refs = _records_from_json(ex.read_records(_read(args.records)), lexicon)
        except (ValueError, KeyError) as e:
            raise DataError(f"{args.records}: {e}") from None
        if args.references:
            refs = [lexicon.vocab.encode(s) for s in _corpus(args.references).surfaces()]
        if not any(refs):
            raise DataError("no reference texts (records carry none and --references not given)")
        vocab = lexicon.vocab
        gen = [vocab.decode(r.continuation) for r in records if r.continuation]
        gen_pos = [[lexicon.inventory.tags[t] for t in seq]
                   for seq in ex.pos_sequences_for([r for r in records if r.continuation], lexicon, tag_counts)]
        refs = [vocab.decode(r) for r in refs if r]
    else:
        if not args.references:
            raise UsageError("--generated needs --references")
        corpus = _corpus(args.generated)
        gen, gen_pos = corpus.surfaces(), corpus.tags()
        refs = _corpus(args.references).surfaces()
    report = evaluate_texts(gen, refs, gen_pos, self_bleu_max_references=args.self_bleu_max_references,
                            seed=args.seed)
    if args.checkpoint and args.test:
        if not args.lexicon:
            raise UsageError("perplexity needs --lexicon")
        lexicon, _ = _lexicon(args.lexicon)
        params = _checkpoint(args.checkpoint)
        report.values["ppl"] = perplexity(params, lexicon.partition, args.head,
                                          encode_corpus(_corpus(args.test), lexicon))
        settings_extra["ppl_head"] = args.head
    report.settings.update(settings_extra)
    _write(args.out, report.to_json())
    return EXIT_OK


def cmd_sweep(args) -> int:
    lexicon, tag_counts, params, test, cfg, prompts = _generation_setup(args)
    pos_stages = [_stage(s) for s in args.pos_stages]
    token_stages = [_stage(s) for s in args.token_stages]
    if not pos_stages or not token_stages:
        raise UsageError("empty sweep grid")
    rows = ex.sweep(params, lexicon, tag_counts, prompts, encode_corpus(test, lexicon), cfg.head,
                    pos_stages, token_stages, cfg.continuation_len, args.seed,
                    _control(args.control, lexicon))
    _write(args.out, ex.rows_to_csv(rows, ex.SWEEP_COLUMNS))
    return EXIT_OK


def cmd_control(args) -> int:
    lexicon, _, params, _, cfg, prompts = _generation_setup(args)
    if args.tag not in lexicon.inventory.index:
        raise UsageError(f"unknown tag {args.tag!r}")
    base = SamplingConfig(_stage(args.pos_stage), _stage(args.token_stage), {}, args.seed)
    if any(m <= 0 for m in args.multipliers):
        raise UsageError("multipliers must be positive")
    rows = ex.control_table(params, lexicon, prompts, args.tag, args.multipliers, cfg.continuation_len, base)
    _write(args.out, ex.rows_to_csv(rows))
    return EXIT_OK


def cmd_entropy_check(args) -> int:
    if min(args.trials, args.n_pos, args.cell_size, args.k) < 1:
        raise UsageError("trials, n-pos, cell-size and k must be positive")
    report = run_entropy_check(args.trials, args.n_pos, args.cell_size, args.k, args.seed)
    _write(args.out, entropy_report_json(report))
    s = report["summary"]
    log.info("mean H_posg - mean H_topk = %.6f; hard assertions %s",
             s["mean_h_gap"], "pass" if s["hard_assertions_pass"] else "FAIL")
    return EXIT_OK if s["hard_assertions_pass"] else EXIT_ASSERT


# --------------------------------------------------------------------------
# parser


def _add_generation_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--corpus", required=True, help="held-out tagged corpus supplying the prefixes")
    p.add_argument("--head", choices=HEAD_KINDS, default="posg")
    p.add_argument("--prefix-len", type=int, default=50)
    p.add_argument("--continuation-len", type=int, default=100)
    p.add_argument("--max-prefixes", type=int, default=200)
    p.add_argument("--control", action="append", default=[], metavar="TAG=MULT")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posglab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of option defaults")
        p.set_defaults(func=func)
        return p

    p = command("ingest", cmd_ingest, "build vocabulary, POS inventory and partition")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-vocab", type=int, default=1 << 30)
    p.add_argument("--min-freq", type=int, default=1)

    p = command("synth-corpus", cmd_synth, "sample a tagged corpus from a grammar")
    p.add_argument("--grammar", help="grammar JSON (default: bundled desk grammar)")
    p.add_argument("--grammar-seed", type=int, default=0)
    p.add_argument("--dump-grammar")
    p.add_argument("--n-sequences", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train an MLE or POSG model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--valid")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--head", choices=HEAD_KINDS, default="posg")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    d = ModelConfig(vocab_size=4, pos_count=1)
    p.add_argument("--n-layers", type=int, default=d.n_layers)
    p.add_argument("--n-heads", type=int, default=d.n_heads)
    p.add_argument("--d-model", type=int, default=d.d_model)
    p.add_argument("--d-ff", type=int, default=d.d_ff)
    p.add_argument("--context-len", type=int, default=d.context_len)
    p.add_argument("--dropout", type=float, default=d.dropout_rate)
    p.add_argument("--seed", type=int, default=0)
    o = AdamConfig()
    p.add_argument("--lr", type=float, default=o.lr)
    p.add_argument("--beta1", type=float, default=o.beta1)
    p.add_argument("--beta2", type=float, default=o.beta2)
    p.add_argument("--eps", type=float, default=o.eps)
    p.add_argument("--clip", type=float, default=o.clip_norm)
    p.add_argument("--weight-decay", type=float, default=o.weight_decay)
    p.add_argument("--batch-size", type=int, default=o.batch_size)

    p = command("generate", cmd_generate, "continue held-out prefixes")
    _add_generation_args(p)
    p.add_argument("--pos-stage", default="top_k:20")
    p.add_argument("--token-stage", default="nucleus:0.5")
    p.add_argument("--out", required=True)

    p = command("evaluate", cmd_evaluate, "metric report for generations vs references")
    p.add_argument("--records", help="generation records (JSON lines)")
    p.add_argument("--generated", help="tagged corpus of generated texts")
    p.add_argument("--references", help="tagged corpus of reference texts")
    p.add_argument("--lexicon")
    p.add_argument("--checkpoint")
    p.add_argument("--test", help="tagged corpus for held-out perplexity")
    p.add_argument("--head", choices=HEAD_KINDS, default="posg")
    p.add_argument("--self-bleu-max-references", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("sweep", cmd_sweep, "quality/diversity grid over stage settings")
    _add_generation_args(p)
    p.add_argument("--pos-stages", nargs="+", default=["top_k:20"])
    p.add_argument("--token-stages", nargs="+", default=["nucleus:0.5"])
    p.add_argument("--out", required=True)

    p = command("control", cmd_control, "POS-control table for one tag")
    _add_generation_args(p)
    p.add_argument("--tag", required=True)
    p.add_argument("--multipliers", type=float, nargs="+", default=[0.1, 1.0, 10.0])
    p.add_argument("--pos-stage", default="top_k:20")
    p.add_argument("--token-stage", default="nucleus:0.5")
    p.add_argument("--out", required=True)

    p = command("entropy-check", cmd_entropy_check, "numerical check of the entropy bounds")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--n-pos", type=int, default=5)
    p.add_argument("--cell-size", type=int, default=20)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _parse(parser: argparse.ArgumentParser, argv: Sequence[str] | None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in subparsers.choices), None)
    if known.config and command:
        try:
            defaults = json.loads(_read(known.config))
        except json.JSONDecodeError as e:
            raise DataError(f"{known.config}: line {e.lineno} column {e.colno}: {e.msg}") from None
        if not isinstance(defaults, dict):
            raise DataError(f"{known.config}: expected a JSON object")
        sub = subparsers.choices[command]
        defaults = {k.replace("-", "_"): v for k, v in defaults.items()}
        unknown = set(defaults) - {a.dest for a in sub._actions}
        if unknown:
            raise UsageError(f"{known.config}: unknown option(s) {sorted(unknown)} for {command}")
        for a in sub._actions:
            if a.dest in defaults:
                a.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        import torch

        torch.set_num_threads(1)
        return args.func(args)
    except UsageError as e:
        print(f"posglab: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"posglab: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except (RuntimeError, FloatingPointError, MemoryError) as e:
        print(f"posglab: runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
