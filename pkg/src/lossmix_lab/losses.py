"""Target assignment, the four-term two-stage detection loss and its mixed forms.

A mixed sample carries weighted label sets ``[(y_1, w_1), (y_2, w_2), ...]``.
:func:`mixed_detection_loss` runs a full assignment and loss evaluation per set
against a single shared forward pass and interpolates the terms:
``t = sum_k w_k * t_k``. Terms whose mixing toggle is off are computed once
against the plain union of all instances at weight 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import boxes as bx
from . import tensor as T
from .detector import DetectorOutput, anchors
from .mixing import SUB_LOSSES, MixedSample

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
FG_IOU = 0.5
BG_IOU = 0.3
SMOOTH_L1_BETA = 1.0
ALL_ON = dict.fromkeys(SUB_LOSSES, True)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str):
        self.term = term
        super().__init__(f"non-finite loss in term {term!r}")


@dataclass
class Stage1Targets:
    labels: np.ndarray  # (cells,) POSITIVE / NEGATIVE / IGNORE
    deltas: np.ndarray  # (cells, 4), zero where not positive
    matched: np.ndarray  # (cells,) GT index or -1
    weights: np.ndarray  # (cells,) matched GT mix_weight, 0 where not positive


@dataclass
class Stage2Targets:
    classes: np.ndarray  # (K,) in [0, C]; C is background
    deltas: np.ndarray  # (K, 4), zero for background
    matched: np.ndarray  # (K,) GT index or -1
    weights: np.ndarray  # (K,) matched mix_weight; 1.0 for background


@dataclass
class LossBreakdown:
    rpn_cls: T.Node
    rpn_reg: T.Node
    roi_cls: T.Node
    roi_reg: T.Node
    total: T.Node

    def values(self) -> dict:
        return {k: float(getattr(self, k).value) for k in SUB_LOSSES + ("total",)}

    def terms(self) -> dict:
        return {k: getattr(self, k) for k in SUB_LOSSES}


def _gt_arrays(gt):
    if len(gt) == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=int), np.zeros(0)
    return (np.array([g.box for g in gt], dtype=np.float64),
            np.array([g.class_id for g in gt], dtype=int),
            np.array([g.mix_weight for g in gt], dtype=np.float64))


def assign_stage1(anchor_boxes: np.ndarray, gt) -> Stage1Targets:
    """Faster-RCNN style anchor labelling: IoU >= 0.5 or best anchor of a GT is positive,
    max IoU < 0.3 negative, the rest ignored. Ties resolve to the lowest index."""
    n = len(anchor_boxes)
    gboxes, _, gw = _gt_arrays(gt)
    labels = np.full(n, NEGATIVE, dtype=int)
    deltas = np.zeros((n, 4))
    matched = np.full(n, -1, dtype=int)
    weights = np.zeros(n)
    if len(gboxes) == 0:
        return Stage1Targets(labels, deltas, matched, weights)
    ious = bx.iou_matrix(anchor_boxes, gboxes)  # (anchors, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= BG_IOU] = IGNORE
    labels[best_iou < BG_IOU] = NEGATIVE
    pos = best_iou >= FG_IOU
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    for g in range(len(gboxes)):
        a = int(ious[:, g].argmax())
        if ious[a, g] <= 0.0 or labels[a] == POSITIVE:
            continue
        labels[a] = POSITIVE
        matched[a] = g
    pos = labels == POSITIVE
    deltas[pos] = bx.encode(anchor_boxes[pos], gboxes[matched[pos]])
    weights[pos] = gw[matched[pos]]
    return Stage1Targets(labels, deltas, matched, weights)


def assign_stage2(proposals: np.ndarray, gt, num_classes: int) -> Stage2Targets:
    """Foreground (matched GT class) if IoU >= 0.5, background (class C) otherwise."""
    k = len(proposals)
    gboxes, gcls, gw = _gt_arrays(gt)
    classes = np.full(k, num_classes, dtype=int)
    deltas = np.zeros((k, 4))
    matched = np.full(k, -1, dtype=int)
    weights = np.ones(k)
    if len(gboxes) == 0:
        return Stage2Targets(classes, deltas, matched, weights)
    ious = bx.iou_matrix(proposals, gboxes)
    best_gt = ious.argmax(axis=1)
    fg = ious[np.arange(k), best_gt] >= FG_IOU
    matched[fg] = best_gt[fg]
    classes[fg] = gcls[best_gt[fg]]
    deltas[fg] = bx.encode(proposals[fg], gboxes[best_gt[fg]])
    weights[fg] = gw[best_gt[fg]]
    return Stage2Targets(classes, deltas, matched, weights)


def _zero():
    return T.const(0.0)


def _check(name, node):
    if not np.all(np.isfinite(node.value)):
        raise NonFiniteLoss(name)
    return node


def detection_loss(out: DetectorOutput, gt, enabled: dict | None = None,
                   image_index: int = 0) -> LossBreakdown:
    """Four-term loss of one image of a (possibly batched) forward pass against ``gt``."""
    cfg = out.cfg
    enabled = ALL_ON if enabled is None else enabled
    G2, K, C = cfg.num_cells, cfg.num_proposals, cfg.num_classes
    base1 = image_index * G2
    base2 = image_index * K

    t1 = assign_stage1(anchors(cfg), gt)
    valid = np.flatnonzero(t1.labels != IGNORE)
    if valid.size:
        z = T.reshape(T.take(out.s1_obj, base1 + valid), (valid.size,))
        tz = T.mul(z, T.const((t1.labels[valid] == POSITIVE).astype(np.float64)))
        rpn_cls = T.mean(T.sub(T.softplus(z), tz))
    else:
        rpn_cls = _zero()
    pos = np.flatnonzero(t1.labels == POSITIVE)
    if pos.size:
        r = T.sub(T.take(out.s1_delta, base1 + pos), T.const(t1.deltas[pos]))
        rpn_reg = T.scale(T.sum(T.smooth_l1(r, SMOOTH_L1_BETA)), 1.0 / pos.size)
    else:
        rpn_reg = _zero()

    props = out.proposals[image_index]
    t2 = assign_stage2(props, gt, C)
    logp = T.log_softmax(T.take(out.s2_cls, base2 + np.arange(K)))
    onehot = np.zeros((K, C + 1))
    onehot[np.arange(K), t2.classes] = 1.0
    roi_cls = T.scale(T.sum(T.mul(logp, T.const(onehot))), -1.0 / K)
    fg = np.flatnonzero(t2.classes < C)
    if fg.size:
        per_class = T.reshape(out.s2_delta, (out.s2_delta.value.shape[0] * C, 4))
        rows = (base2 + fg) * C + t2.classes[fg]
        r = T.sub(T.take(per_class, rows), T.const(t2.deltas[fg]))
        roi_reg = T.scale(T.sum(T.smooth_l1(r, SMOOTH_L1_BETA)), 1.0 / fg.size)
    else:
        roi_reg = _zero()

    terms = {"rpn_cls": rpn_cls, "rpn_reg": rpn_reg, "roi_cls": roi_cls, "roi_reg": roi_reg}
    for k, v in terms.items():
        _check(k, v)
    on = [terms[k] for k in SUB_LOSSES if enabled.get(k, True)]
    total = T.add_n(on) if on else _zero()
    return LossBreakdown(total=total, **terms)


def mixed_detection_loss(out: DetectorOutput, mixed: MixedSample, toggles: dict | None = None,
                         image_index: int = 0) -> LossBreakdown:
    """Interpolated loss ``sum_k w_k * L_det(out, y_k)`` over the sample's label sets.

    ``toggles[name] = False`` computes that term against the union of all
    instances at weight 1 instead of interpolating it.
    """
    toggles = ALL_ON if toggles is None else toggles
    sets = mixed.weighted_labels
    if mixed.strategy == "lossmix" and abs(sum(w for _, w in sets) - 1.0) > 1e-12:
        raise ValueError(f"lossmix weights must sum to 1, got {[w for _, w in sets]}")
    per_set = [(detection_loss(out, insts, image_index=image_index), w) for insts, w in sets]
    union = None
    terms = {}
    for name in SUB_LOSSES:
        if toggles.get(name, True):
            parts = [T.scale(getattr(b, name), w) for b, w in per_set]
            terms[name] = parts[0] if len(parts) == 1 else T.add_n(parts)
        else:
            if union is None:
                union = detection_loss(out, mixed.union_instances(), image_index=image_index)
            terms[name] = getattr(union, name)
    total = T.add_n([terms[k] for k in SUB_LOSSES])
    return LossBreakdown(total=total, **terms)


lossmix_detection_loss = mixed_detection_loss


def batch_loss(out: DetectorOutput, samples: Sequence[MixedSample], toggles=None) -> LossBreakdown:
    """Mean over the batch of per-image mixed losses."""
    n = len(samples)
    if n != out.batch_size:
        raise ValueError("batch size mismatch between output and samples")
    parts = [mixed_detection_loss(out, s, toggles, image_index=b) for b, s in enumerate(samples)]
    if n == 1:
        return parts[0]
    fields = {k: T.scale(T.add_n([getattr(p, k) for p in parts]), 1.0 / n)
              for k in SUB_LOSSES + ("total",)}
    return LossBreakdown(**fields)


# ---------------------------------------------------------------------------
# classification: label mixing vs loss mixing


def cross_entropy(logits, target) -> T.Node:
    """CE(softmax(logits), target) for a (soft) target distribution over the last axis."""
    logits = logits if isinstance(logits, T.Node) else T.const(logits)
    return T.scale(T.sum(T.mul(T.log_softmax(logits), T.const(target))), -1.0)


def label_mix_ce(logits, y_i, y_j, lam: float) -> T.Node:
    """Cross-entropy against the interpolated label lam * y_i + (1 - lam) * y_j."""
    target = lam * np.asarray(y_i, dtype=np.float64) + (1.0 - lam) * np.asarray(y_j, dtype=np.float64)
    return cross_entropy(logits, target)


def loss_mix_ce(logits, y_i, y_j, lam: float) -> T.Node:
    """Interpolated cross-entropies lam * CE(y_i) + (1 - lam) * CE(y_j)."""
    return T.add(T.scale(cross_entropy(logits, y_i), lam), T.scale(cross_entropy(logits, y_j), 1.0 - lam))
