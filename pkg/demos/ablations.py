"""Which sub-losses to interpolate, and how strongly to mix.

    python demos/ablations.py --iters 1000

Toggle rows interpolate only the named terms with the mixing weight; the
other terms fall back to the union of both label sets at full weight. The
alpha rows sweep Beta(alpha, alpha) from near-binary to near-0.5 mixing.
"""
import argparse

from lossmix_lab.config import TrainConfig
from lossmix_lab.harness import alpha_grid, comparison_csv, run_comparison, toggle_grid

parser = argparse.ArgumentParser()
parser.add_argument("--iters", type=int, default=1000)
parser.add_argument("--out", default="runs/ablations")
args = parser.parse_args()

cfg = TrainConfig(iters=args.iters)
rows = run_comparison(cfg, [], toggle_grid() + alpha_grid([0.2, 1.0, 5.0, 20.0]), output_dir=args.out)
print(comparison_csv(rows))
for r in rows:
    print(f"{r['label']:>10}: AP50 {r['ap50']:.3f}")
