"""Desk-scale learning run: 200 synthetic scenes, batch 25, lr 1e-4, 200 epochs.

Writes the loss history CSV and best checkpoint, then reports held-out F1 and
the single-pass vs pyramid comparison on thin-far-road scenes.

    python scripts/learning_check.py --out runs/learning
"""

import argparse
import logging
from pathlib import Path

from roadgru.experiments import compare_pyramid, run_learning_check
from roadgru.train import write_history


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/learning")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--batch-size", type=int, default=25)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    check = run_learning_check(args.epochs, args.batch_size, args.lr, args.seed,
                               checkpoint_path=str(out / "best.ckpt"))
    write_history(check.result.history, out / "loss_history.csv")
    print(f"epoch-1 val MAE {check.first_val:.5f}  final val MAE {check.final_val:.5f}  "
          f"best epoch {check.result.best_epoch}")
    print(f"held-out pixel-pooled F1 {check.heldout_f1:.4f}  ({check.seconds / 60:.1f} min)")

    cmp = compare_pyramid(check.result.best_params)
    print(f"thin-far scenes: single F1 {cmp.single_f1:.4f}  pyramid F1 {cmp.pyramid_f1:.4f}  "
          f"pyramid superset of near: {cmp.superset_everywhere}")


if __name__ == "__main__":
    main()
