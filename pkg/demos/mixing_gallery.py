"""Write a few mixed images as PPM files to eyeball the input mixers.

    python demos/mixing_gallery.py --out runs/gallery
"""
import argparse
import os

from lossmix_lab.mixing import mix_pair
from lossmix_lab.scenegen import SceneConfig, generate_scene, make_rng, save_ppm

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="runs/gallery")
args = parser.parse_args()
os.makedirs(args.out, exist_ok=True)

cfg = SceneConfig()
a, b = generate_scene(1, cfg), generate_scene(2, cfg, "target")
save_ppm(a.image, f"{args.out}/source.ppm")
save_ppm(b.image, f"{args.out}/target.ppm")
for lam in (0.2, 0.5, 0.8):
    for mixer in ("pixel", "region"):
        m = mix_pair(a, b, "lossmix", lam, mixer, make_rng(0))
        save_ppm(m.image, f"{args.out}/{mixer}_{lam}.ppm")
        sets = ", ".join(f"{len(y)} boxes at weight {w:.2f}" for y, w in m.weighted_labels)
        print(f"{mixer:>6} lam={lam}: {sets}")
