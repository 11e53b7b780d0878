#!/usr/bin/env python3
"""Structural ablation over the three architecture switches.

Trains four configurations on the same synthetic corpus and seed:

    1  baseline       refinement off, vanilla op order, unmasked attention
    2  +DGSR          dynamic edge refinement on
    3  +DGSR+CAF      ... and cross-attention before self-attention
    4  all on         ... and relation-aware masking of node attention

then scores each on a held-out split with ground-truth boxes and prints
one table row per configuration.
"""

import argparse
import json
import time
from pathlib import Path

from ctbg.metrics import ScenePrediction, evaluate
from ctbg.model import ModelConfig
from ctbg.synth import easy_preset, generate_corpus
from ctbg.train import TrainConfig, train

ROWS = [
    ("baseline", dict(dynamic_refine=False, cross_first=False, relation_mask=False)),
    ("+DGSR", dict(dynamic_refine=True, cross_first=False, relation_mask=False)),
    ("+DGSR+CAF", dict(dynamic_refine=True, cross_first=True, relation_mask=False)),
    ("all on", dict(dynamic_refine=True, cross_first=True, relation_mask=True)),
]


def score(model, scenes):
    preds = []
    for sc in scenes:
        res = model.forward_scene(sc)
        preds.append(ScenePrediction([list(b.units) for b in res.blocks], sc.units))
    return evaluate(preds, scenes, thresholds=(0.5,)).values["iou_0.50"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="ablation_out", help="directory for results")
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--data-seed", type=int, default=11)
    ap.add_argument("--train-count", type=int, default=2000)
    ap.add_argument("--eval-count", type=int, default=200)
    ap.add_argument("--iters", type=int, default=5000)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    corpus = generate_corpus(
        args.data_seed, args.train_count + args.eval_count, easy_preset()
    )
    train_scenes = corpus[: args.train_count]
    eval_scenes = corpus[args.train_count :]
    train_cfg = TrainConfig(total_iters=args.iters)

    results = []
    header = f"{'#':>2} {'method':<12} {'DGSR':^5} {'CAF':^5} {'RASA':^5} {'LA':>7} {'LC':>7} {'GA':>7}"
    print(header)
    print("-" * len(header))
    for idx, (name, toggles) in enumerate(ROWS, start=1):
        cfg = ModelConfig(**toggles)
        t0 = time.time()
        model, rows = train(
            train_scenes, cfg, train_cfg, seed=args.seed, out_dir=out / f"row{idx}"
        )
        v = score(model, eval_scenes)
        mark = lambda b: "x" if b else ""
        print(
            f"{idx:>2} {name:<12} {mark(cfg.dynamic_refine):^5} {mark(cfg.cross_first):^5} "
            f"{mark(cfg.relation_mask):^5} {v['la']:>7.4f} {v['lc']:>7.4f} {v['ga']:>7.4f}"
            f"   ({(time.time() - t0) / 60:.1f} min, final loss {rows[-1].loss_total:.3f})"
        )
        results.append({"row": idx, "method": name, **toggles, **v})

    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "seed": args.seed,
                "data_seed": args.data_seed,
                "train_count": args.train_count,
                "eval_count": args.eval_count,
                "iters": args.iters,
                "rows": results,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    print(f"wrote {out / 'ablation.json'}")


if __name__ == "__main__":
    main()
