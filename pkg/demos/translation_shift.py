"""Does the objectness map move with the object? (reported, not asserted)

    python demos/translation_shift.py --iters 2000

Trains on the easy preset (or loads ``--checkpoint``), then takes
single-object scenes, shifts each image right by one feature-grid cell
(8 pixels) and checks whether the argmax objectness cell moves by exactly
one column.
"""
import argparse
import dataclasses

import numpy as np

from lossmix_lab import detector as D
from lossmix_lab.config import TrainConfig
from lossmix_lab.harness import detector_config, run_supervised
from lossmix_lab.scenegen import generate_scene

parser = argparse.ArgumentParser()
parser.add_argument("--iters", type=int, default=2000)
parser.add_argument("--checkpoint")
parser.add_argument("--scenes", type=int, default=50)
args = parser.parse_args()

cfg = TrainConfig(iters=args.iters)
det = detector_config(cfg)
params = D.load_params(args.checkpoint) if args.checkpoint else run_supervised(cfg).best_params
one = dataclasses.replace(cfg.scene, min_objects=1, max_objects=1)
cell = cfg.scene.width // det.grid_w


def argmax_cell(image):
    obj = D.forward(params, image, det).s1_obj.value.ravel()
    return divmod(int(np.argmax(obj)), det.grid_w)


moved = tried = 0
seed = 0
while tried < args.scenes:
    s = generate_scene(10_000 + seed, one)
    seed += 1
    if s.instances[0].box[2] + cell > cfg.scene.width:
        continue
    shifted = np.zeros_like(s.image)
    shifted[:, cell:] = s.image[:, :-cell]
    shifted[:, :cell] = s.image[:, :1]
    (r0, c0), (r1, c1) = argmax_cell(s.image), argmax_cell(shifted)
    moved += (r1, c1) == (r0, c0 + 1)
    tried += 1
print(f"argmax objectness moved by exactly one cell in {moved}/{tried} shifted scenes")
