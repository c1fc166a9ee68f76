"""Finite-difference verification of the full mini-detector LossMix loss."""
from __future__ import annotations

import numpy as np

from . import detector as D
from . import tensor as T
from .losses import batch_loss
from .mixing import mix_pair, sample_lambda
from .scenegen import SceneConfig, generate_scene, make_rng

SMALL_SCENE = SceneConfig(height=32, width=32, min_size=8, max_size=16, max_objects=2)


def flatten(params: dict):
    names = list(params)
    sizes = [params[k].size for k in names]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = np.concatenate([params[k].ravel() for k in names])
    return flat, names, offsets


def unflatten_node(x: T.Node, params: dict, names, offsets) -> dict:
    return {k: T.reshape(T.take(x, np.arange(offsets[i], offsets[i + 1])), params[k].shape)
            for i, k in enumerate(names)}


def lossmix_problem(seed: int, scene: SceneConfig = SMALL_SCENE, batch: int = 2):
    """Random-init params and a LossMix batch built from fresh scenes for ``seed``."""
    det_cfg = D.DetectorConfig.from_scene(scene)
    params = D.init_params(seed, det_cfg)
    rng = make_rng(seed, 77)
    mixed = []
    for b in range(batch):
        si = generate_scene(int(rng.integers(2**31)), scene)
        sj = generate_scene(int(rng.integers(2**31)), scene)
        mixed.append(mix_pair(si, sj, "lossmix", sample_lambda(1.0, rng)))
    return params, mixed, det_cfg


def detector_loss_fn(params: dict, mixed: list, det_cfg: D.DetectorConfig):
    """``f(flat_params_node) -> total loss node`` for :func:`tensor.grad_check`.

    Proposal boxes are a stop-gradient choice, so they are frozen at their values
    for ``params``; otherwise the difference quotient would also see the
    regression targets move with the boxes.
    """
    _, names, offsets = flatten(params)
    images = np.stack([m.image for m in mixed])
    frozen = D.forward(params, images, det_cfg).proposals

    def f(x: T.Node) -> T.Node:
        p = unflatten_node(x, params, names, offsets)
        out = D.forward(p, images, det_cfg, proposals=frozen)
        return batch_loss(out, mixed).total

    return f


def sample_coords(params: dict, per_tensor: int, rng: np.random.Generator) -> list:
    """Up to ``per_tensor`` flat coordinates from every parameter tensor."""
    _, names, offsets = flatten(params)
    coords = []
    for i in range(len(names)):
        n = offsets[i + 1] - offsets[i]
        pick = np.arange(n) if n <= per_tensor else rng.choice(n, per_tensor, replace=False)
        coords.extend(int(offsets[i] + c) for c in np.sort(pick))
    return coords


def check_detector_gradients(seed: int, eps: float = 1e-5, per_tensor: int = 16,
                             scene: SceneConfig = SMALL_SCENE, skip_kinks: bool = True,
                             report: dict | None = None) -> float:
    """Max relative error of the analytic gradient of the full LossMix loss.

    Coordinates whose probes cross a relu, max-pool or smooth-L1 kink are skipped
    by default; their counts land in ``report``.
    """
    params, mixed, det_cfg = lossmix_problem(seed, scene)
    flat, _, _ = flatten(params)
    f = detector_loss_fn(params, mixed, det_cfg)
    coords = sample_coords(params, per_tensor, make_rng(seed, 78))
    return T.grad_check(f, flat, eps, coords, skip_kinks=skip_kinks, report=report)
