"""Single-pass vs near/far pyramid inference on thin-far-road synthetic scenes.

    python scripts/pyramid_comparison.py --model runs/learning/best.ckpt
"""

import argparse

from roadgru.checkpoint import load_checkpoint
from roadgru.evaluate import report_from_counts
from roadgru.experiments import PYRAMID_SEEDS, compare_pyramid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", required=True)
    ap.add_argument("--count", type=int, default=len(PYRAMID_SEEDS))
    ap.add_argument("--fusion", choices=("union", "intersection"), default="union")
    args = ap.parse_args()

    params = load_checkpoint(args.model)
    seeds = PYRAMID_SEEDS[:args.count]
    cmp = compare_pyramid(params, seeds, fusion=args.fusion)
    for label, counts in (("single", cmp.single), (f"pyramid/{args.fusion}", cmp.pyramid)):
        rep = report_from_counts(counts)
        print(f"{label:<20} F1 {rep.f1:.4f}  PRE {rep.precision:.4f}  REC {rep.recall:.4f}")
    print(f"pyramid mask contains near mask on every scene: {cmp.superset_everywhere}")


if __name__ == "__main__":
    main()
