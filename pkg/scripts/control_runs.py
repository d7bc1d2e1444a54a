"""POS-control tables for several tags on a trained POSG desk model.

    python scripts/control_runs.py --run runs/desk --tags JJ NN RB
"""

import argparse
from pathlib import Path

from posglab.corpus import lexicon_from_json, read_tagged_corpus
from posglab.decode import SamplingConfig
from posglab.experiment import build_prompts, control_table, rows_to_csv
from posglab.net import load_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--run", type=Path, default=Path("runs/desk"))
    ap.add_argument("--tags", nargs="+", default=["JJ"])
    ap.add_argument("--multipliers", type=float, nargs="+", default=[0.1, 1.0, 10.0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    lexicon, _ = lexicon_from_json((args.run / "lexicon.json").read_text())
    prompts = build_prompts(read_tagged_corpus(args.run / "test.txt"), lexicon, 50, 100)
    params = load_checkpoint((args.run / "posg.ckpt").read_bytes())[0]
    rows = []
    for tag in args.tags:
        rows += control_table(params, lexicon, prompts, tag, args.multipliers, 100, SamplingConfig(seed=args.seed))
    text = rows_to_csv(rows)
    (args.run / "control.csv").write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
