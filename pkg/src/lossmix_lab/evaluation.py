"""COCO-style average precision (101-point interpolation) for the mini-detector."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import iou_matrix
from .detector import DetectorConfig, predict_batch

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_class: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def match_class(dets, gts, class_id: int, iou_thresh: float):
    """Greedy matching of one class over all images.

    ``dets``/``gts`` are per-image lists. Detections are visited in descending score
    order (stable: image order, then list order) and each takes the unmatched GT of
    highest IoU >= ``iou_thresh``. Returns ``(tp_flags, num_gt)``.
    """
    pool = []
    for img, ds in enumerate(dets):
        for k, d in enumerate(ds):
            if d.class_id == class_id:
                pool.append((-d.score, img, k, d))
    pool.sort(key=lambda t: t[:3])
    gt_boxes = [np.array([g.box for g in gs if g.class_id == class_id]).reshape(-1, 4) for gs in gts]
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    num_gt = int(sum(len(b) for b in gt_boxes))
    tp = np.zeros(len(pool), dtype=bool)
    for n, (_, img, _, d) in enumerate(pool):
        cand = gt_boxes[img]
        if not len(cand):
            continue
        ious = iou_matrix(np.asarray(d.box)[None], cand)[0]
        ious[used[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            used[img][best] = True
            tp[n] = True
    return tp, num_gt


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """Area under the monotone precision envelope sampled at 101 recall points."""
    if num_gt == 0:
        return 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def class_ids(gts) -> list:
    return sorted({g.class_id for gs in gts for g in gs})


def per_class_ap(dets, gts, iou_thresh: float) -> dict:
    return {c: interpolated_ap(*match_class(dets, gts, c, iou_thresh)) for c in class_ids(gts)}


def average_precision(dets: Sequence, gts: Sequence, iou_thresh: float = 0.5) -> float:
    """Mean over GT classes of the 101-point AP at ``iou_thresh``.

    ``dets`` and ``gts`` are per-image lists of detections / instances. A single
    image may be passed as a flat list.
    """
    if gts and not isinstance(gts[0], (list, tuple)):
        gts, dets = [list(gts)], [list(dets)]
    elif not gts and dets and not isinstance(dets[0], (list, tuple)):
        dets = [list(dets)]
    aps = per_class_ap(dets, gts, iou_thresh)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def evaluate_detections(dets, gts) -> EvalResult:
    if not gts:
        raise ValueError("evaluate: empty dataset")
    table = [per_class_ap(dets, gts, t) for t in IOU_THRESHOLDS]
    classes = class_ids(gts)
    if not classes:
        return EvalResult(0.0, 0.0, 0.0, {})
    by_thresh = [float(np.mean([row[c] for c in classes])) for row in table]
    per_class = {c: float(np.mean([row[c] for row in table])) for c in classes}
    return EvalResult(float(np.mean(by_thresh)), by_thresh[0], by_thresh[5], per_class)


def evaluate(params, dataset, cfg: DetectorConfig, score_thresh: float = 0.05,
             nms_iou: float = 0.5, batch_size: int = 32) -> EvalResult:
    """Run the detector on every sample and score it against the sample instances."""
    if not dataset:
        raise ValueError("evaluate: empty dataset")
    dets = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        dets.extend(predict_batch(params, np.stack([s.image for s in chunk]), cfg,
                                  score_thresh, nms_iou))
    return evaluate_detections(dets, [s.instances for s in dataset])
