"""Plain SGD with optional linear learning-rate warmup and global-norm clipping."""
from __future__ import annotations

import numpy as np


def lr_at(it: int, base_lr: float, warmup_iters: int = 0, warmup_factor: float = 1.0) -> float:
    """Learning rate at 0-based iteration ``it``; linear ramp from ``warmup_factor * base_lr``."""
    if it >= warmup_iters:
        return base_lr
    alpha = it / warmup_iters
    return base_lr * (warmup_factor * (1.0 - alpha) + alpha)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def sgd_update(params: dict, grads: dict, lr: float, clip_norm: float = 0.0) -> dict:
    """Return ``params - lr * grads`` (grads rescaled if their global norm exceeds ``clip_norm``)."""
    step = lr
    if clip_norm > 0:
        norm = global_norm(grads)
        if norm > clip_norm:
            step = lr * clip_norm / norm
    return {k: params[k] - step * grads[k] for k in params}
