"""ATT versus NO-ATT on one shapeworld split, over one or more training seeds.

    python3 scripts/ablation.py --data runs/data --seeds 1 2 3 --out runs/ablation.json

Generates the default split first if --data does not exist yet.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from abccnn.metrics import Taxonomy
from abccnn.model import ModelDims
from abccnn.shapeworld import GeneratorConfig, write_dataset
from abccnn.training import TrainConfig, dataset_vocabularies, evaluate, infer, load_split, train


def localization(model, split) -> float:
    """Share of correct color/location answers whose map puts more than 1/N^2 on the object cell."""
    preds, _, maps = infer(model, split)
    uniform = 1 / model.dims.grid**2
    hits = [
        sum(maps[i][r, c] for r, c in it.gt_cells) > uniform
        for i, it in enumerate(split.items)
        if it.category in ("color", "location") and preds[i] == it.answer
    ]
    return float(np.mean(hits)) if hits else float("nan")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", default="runs/data")
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1])
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--out", help="optional JSON dump of every run")
    args = ap.parse_args()

    data = Path(args.data)
    if not (data / "train.jsonl").exists():
        write_dataset(GeneratorConfig(seed=args.data_seed), data)
    cache: dict = {}
    tr, te = load_split(data, "train", cache=cache), load_split(data, "test", cache=cache)
    qv, av = dataset_vocabularies(data)
    tax = Taxonomy.load(data / "taxonomy.txt")

    rows = []
    for seed in args.seeds:
        for att in (True, False):
            cfg = TrainConfig(epochs=args.epochs, lr=args.lr, seed=seed, dims=ModelDims(attention=att))
            model, hist = train(cfg, tr, te, qv, av)
            rep = evaluate(model, te, tax)
            row = {
                "seed": seed,
                "model": "ATT" if att else "NO-ATT",
                "train_acc": hist.rows[-1]["train_acc"] if hist.rows else float("nan"),
                **rep.to_dict(),
                "localization": localization(model, te) if att else float("nan"),
            }
            rows.append(row)
            cats = "  ".join(f"{k} {v:.3f}" for k, v in row["per_category"].items())
            print(f"seed {seed} {row['model']:6s} train {row['train_acc']:.3f} test {row['acc']:.3f}  {cats}"
                  f"  loc {row['localization']:.2f}", flush=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
