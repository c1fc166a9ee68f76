"""Train every mixing strategy on the same data and print the comparison table.

    python demos/compare_strategies.py --iters 2000 --out runs/compare

Each strategy sees the identical data stream (the ``stream_checksum`` column
proves it); only how the two images' supervision is combined changes. The
AP50 delta vs LossMix is reported, not judged: at this scale one seed is noisy.
"""
import argparse

from lossmix_lab.config import TrainConfig
from lossmix_lab.harness import comparison_csv, run_comparison

parser = argparse.ArgumentParser()
parser.add_argument("--iters", type=int, default=2000)
parser.add_argument("--seed", type=int, default=7)
parser.add_argument("--out", default="runs/compare")
args = parser.parse_args()

cfg = TrainConfig(iters=args.iters, seed=args.seed)
rows = run_comparison(cfg, ["none", "union", "noise", "lossmix"], output_dir=args.out)

print(comparison_csv(rows))
for r in rows:
    print(f"{r['label']:>8}: AP50 {r['ap50']:.3f}  AP {r['ap']:.3f}  "
          f"best@{r['best_iter']}  delta vs lossmix {r['ap50_delta_vs_lossmix']:+.3f}")
print(f"shared data stream: {len({r['stream_checksum'] for r in rows}) == 1}")
