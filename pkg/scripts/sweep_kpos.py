"""Diversity/quality sweeps on a trained desk model.

1. k of the POS stage over {1, 5, 20, |P|} with the token stage fixed at
   nucleus 0.5; reports whether Distinct-2 is non-decreasing in k.
2. Matched-diversity comparison: grid over one-stage top-k / nucleus on the
   MLE model and POS-stage k on the POSG model; pairs whose Distinct-2
   differ by < 0.01 are listed with both perplexities.

    python scripts/sweep_kpos.py --run runs/desk --out runs/desk/sweeps
"""

import argparse
import logging
from pathlib import Path

from posglab.corpus import encode_corpus, lexicon_from_json, read_tagged_corpus
from posglab.decode import StageStrategy
from posglab.experiment import SWEEP_COLUMNS, build_prompts, rows_to_csv, sweep
from posglab.net import MLE, POSG, load_checkpoint

log = logging.getLogger("sweep")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--run", type=Path, default=Path("runs/desk"), help="output dir of desk_pipeline.sh")
    ap.add_argument("--out", type=Path)
    ap.add_argument("--continuation-len", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = args.out or args.run / "sweeps"
    out.mkdir(parents=True, exist_ok=True)

    lexicon, tag_counts = lexicon_from_json((args.run / "lexicon.json").read_text())
    test = read_tagged_corpus(args.run / "test.txt")
    test_enc = encode_corpus(test, lexicon)
    prompts = build_prompts(test, lexicon, 50, args.continuation_len)
    models = {h: load_checkpoint((args.run / f"{h}.ckpt").read_bytes())[0] for h in (MLE, POSG)}

    n_pos = len(lexicon.inventory)
    ks = [StageStrategy.top_k(k) for k in (1, 5, 20, n_pos) if k <= n_pos]
    rows = sweep(models[POSG], lexicon, tag_counts, prompts, test_enc, POSG, ks,
                 [StageStrategy.nucleus(0.5)], args.continuation_len, args.seed)
    (out / "kpos.csv").write_text(rows_to_csv(rows, SWEEP_COLUMNS))
    d2 = [r["distinct_2"] for r in rows]
    drops = [(rows[i]["pos_stage"], rows[i + 1]["pos_stage"]) for i in range(len(d2) - 1) if d2[i + 1] < d2[i]]
    if drops:
        log.warning("Distinct-2 decreased between %s", drops)
    else:
        log.info("Distinct-2 non-decreasing in k: %s", ", ".join(f"{x:.3f}" for x in d2))

    base = sweep(models[MLE], lexicon, tag_counts, prompts, test_enc, MLE, [StageStrategy.pure()],
                 [StageStrategy.top_k(k) for k in (5, 10, 20, 40, 80)]
                 + [StageStrategy.nucleus(a) for a in (0.3, 0.5, 0.7, 0.9)], args.continuation_len, args.seed)
    ours = sweep(models[POSG], lexicon, tag_counts, prompts, test_enc, POSG,
                 [StageStrategy.top_k(k) for k in range(1, n_pos + 1)],
                 [StageStrategy.nucleus(a) for a in (0.3, 0.5, 0.7)], args.continuation_len, args.seed)
    (out / "grid.csv").write_text(rows_to_csv(base + ours, SWEEP_COLUMNS))
    matched = []
    for b in base:
        for o in ours:
            if abs(b["distinct_2"] - o["distinct_2"]) < 0.01:
                matched.append({"mle_setting": b["token_stage"], "posg_setting": f"{o['pos_stage']}/{o['token_stage']}",
                                "mle_distinct_2": b["distinct_2"], "posg_distinct_2": o["distinct_2"],
                                "mle_continuation_ppl": b["continuation_ppl"],
                                "posg_continuation_ppl": o["continuation_ppl"]})
    if matched:
        (out / "matched.csv").write_text(rows_to_csv(matched))
    log.info("%d matched-diversity pairs; tables in %s", len(matched), out)


if __name__ == "__main__":
    main()
