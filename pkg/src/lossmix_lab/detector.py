"""A miniature two-stage detector.

Backbone: conv3x3(8) -> relu -> pool -> pool -> conv3x3(16) -> relu -> pool, so
the feature grid is G = H / 8. Stage 1 predicts one objectness logit and four
box deltas per grid cell against a single square anchor (side 2 * stride)
centered on the cell. The top-K decoded boxes are pooled as a PxP
nearest-neighbor crop of the feature map and fed to a two-layer perceptron
predicting C + 1 class logits (index C is background) and 4 * C per-class
refinement deltas.

Proposal selection and pooling coordinates are constants to the autodiff graph.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import boxes as bx
from . import tensor as T
from .scenegen import Instance, make_rng

CHECKPOINT_FORMAT = "lossmix-lab-params"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DetectorConfig:
    height: int = 64
    width: int = 64
    channels: int = 3
    num_classes: int = 3
    num_proposals: int = 16
    stride: int = 8
    pool_size: int = 4
    conv1: int = 8
    conv2: int = 16
    hidden: int = 64

    def __post_init__(self):
        if self.height % self.stride or self.width % self.stride:
            raise ValueError("image size must be a multiple of the stride (8)")
        if self.num_proposals > self.grid_h * self.grid_w:
            raise ValueError("num_proposals must not exceed the number of grid cells")

    @classmethod
    def from_scene(cls, scene, **kw) -> "DetectorConfig":
        return cls(height=scene.height, width=scene.width, channels=scene.channels,
                   num_classes=scene.num_classes, **kw)

    @property
    def grid_h(self) -> int:
        return self.height // self.stride

    @property
    def grid_w(self) -> int:
        return self.width // self.stride

    @property
    def num_cells(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: tuple
    score: float


@dataclass
class DetectorOutput:
    features: T.Node  # (N, G, G, conv2)
    s1_obj: T.Node  # (N * G * G, 1)
    s1_delta: T.Node  # (N * G * G, 4)
    proposals: np.ndarray  # (N, K, 4)
    proposal_scores: np.ndarray  # (N, K) objectness logits
    s2_cls: T.Node  # (N * K, C + 1)
    s2_delta: T.Node  # (N * K, 4 * C)
    cfg: DetectorConfig

    @property
    def batch_size(self) -> int:
        return self.proposals.shape[0]


def param_shapes(cfg: DetectorConfig) -> dict:
    C = cfg.num_classes
    pooled = cfg.pool_size * cfg.pool_size * cfg.conv2
    return {
        "conv1.w": (3, 3, cfg.channels, cfg.conv1),
        "conv1.b": (cfg.conv1,),
        "conv2.w": (3, 3, cfg.conv1, cfg.conv2),
        "conv2.b": (cfg.conv2,),
        "rpn.obj.w": (cfg.conv2, 1),
        "rpn.obj.b": (1,),
        "rpn.delta.w": (cfg.conv2, 4),
        "rpn.delta.b": (4,),
        "roi.fc.w": (pooled, cfg.hidden),
        "roi.fc.b": (cfg.hidden,),
        "roi.cls.w": (cfg.hidden, C + 1),
        "roi.cls.b": (C + 1,),
        "roi.delta.w": (cfg.hidden, 4 * C),
        "roi.delta.b": (4 * C,),
    }


def fan_in(shape) -> int:
    return int(np.prod(shape[:-1]))


def init_params(seed: int, cfg: DetectorConfig) -> dict:
    """Weights ~ U(-sqrt(6 / fan_in), sqrt(6 / fan_in)), biases zero."""
    rng = make_rng(seed, 0xD37)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / fan_in(shape))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def anchors(cfg: DetectorConfig) -> np.ndarray:
    """One square anchor per cell (row-major), side 2 * stride, centered on the cell."""
    s = cfg.stride
    ys, xs = np.meshgrid(np.arange(cfg.grid_h), np.arange(cfg.grid_w), indexing="ij")
    cx = (xs.ravel() + 0.5) * s
    cy = (ys.ravel() + 0.5) * s
    return np.stack([cx - s, cy - s, cx + s, cy + s], axis=1)


def _leaf(p):
    return p if isinstance(p, T.Node) else T.const(p)


def linear(x: T.Node, w, b) -> T.Node:
    return T.add(T.matmul(x, _leaf(w)), T.broadcast_rows(_leaf(b), x.value.shape[0]))


def backbone(params, images) -> T.Node:
    x = images if isinstance(images, T.Node) else T.const(images)
    x = T.relu(T.conv2d(x, _leaf(params["conv1.w"]), _leaf(params["conv1.b"])))
    x = T.max_pool2(T.max_pool2(x))
    x = T.relu(T.conv2d(x, _leaf(params["conv2.w"]), _leaf(params["conv2.b"])))
    return T.max_pool2(x)


def select_proposals(s1_obj: np.ndarray, s1_delta: np.ndarray, k: int, cfg: DetectorConfig):
    """Decode one image's stage-1 deltas and keep the top-k cells by objectness.

    Ties go to the lower row-major cell index. Returns ``(boxes (k, 4), logits (k,), cells (k,))``.
    """
    logits = np.asarray(s1_obj, dtype=np.float64).ravel()
    if k > logits.size:
        raise ValueError("k exceeds number of cells")
    decoded = bx.decode(anchors(cfg), s1_delta)
    decoded = bx.clip(decoded, cfg.height, cfg.width)
    # keep at least one pixel of extent so pooling and encoding stay defined
    for lo, hi, lim in ((0, 2, cfg.width), (1, 3, cfg.height)):
        thin = decoded[:, hi] - decoded[:, lo] < 1.0
        decoded[thin, lo] = np.minimum(decoded[thin, lo], lim - 1.0)
        decoded[thin, hi] = decoded[thin, lo] + 1.0
    cells = np.argsort(-logits, kind="stable")[:k]
    return decoded[cells], logits[cells], cells


def pool_indices(props: np.ndarray, cfg: DetectorConfig, image_index: int) -> np.ndarray:
    """Flat feature-row indices of the PxP nearest-neighbor samples of each proposal."""
    P, s = cfg.pool_size, cfg.stride
    t = (np.arange(P) + 0.5) / P
    fx = (props[:, 0:1] + t[None, :] * (props[:, 2:3] - props[:, 0:1])) / s
    fy = (props[:, 1:2] + t[None, :] * (props[:, 3:4] - props[:, 1:2])) / s
    cols = np.clip(np.floor(fx).astype(np.intp), 0, cfg.grid_w - 1)
    rows = np.clip(np.floor(fy).astype(np.intp), 0, cfg.grid_h - 1)
    base = image_index * cfg.num_cells
    idx = base + rows[:, :, None] * cfg.grid_w + cols[:, None, :]  # (K, P, P)
    return idx.reshape(-1)


def roi_head(params, features: T.Node, proposals: np.ndarray, cfg: DetectorConfig):
    n = proposals.shape[0]
    k = proposals.shape[1]
    feat2d = T.reshape(features, (n * cfg.num_cells, cfg.conv2))
    idx = np.concatenate([pool_indices(proposals[b], cfg, b) for b in range(n)])
    pooled = T.reshape(T.take(feat2d, idx), (n * k, cfg.pool_size * cfg.pool_size * cfg.conv2))
    h = T.relu(linear(pooled, params["roi.fc.w"], params["roi.fc.b"]))
    return (linear(h, params["roi.cls.w"], params["roi.cls.b"]),
            linear(h, params["roi.delta.w"], params["roi.delta.b"]))


def forward(params, images, cfg: DetectorConfig, proposals=None) -> DetectorOutput:
    """Batched forward pass; ``images`` is (N, H, W, ch) or a single (H, W, ch) image.

    ``proposals`` (N, K, 4) overrides proposal selection; finite-difference checks
    use it to hold the stop-gradient proposal boxes fixed.
    """
    images = np.asarray(images.value if isinstance(images, T.Node) else images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise T.ShapeError("detector.forward", images.shape[1:],
                           (cfg.height, cfg.width, cfg.channels))
    n = images.shape[0]
    feats = backbone(params, images)
    f2d = T.reshape(feats, (n * cfg.num_cells, cfg.conv2))
    s1_obj = linear(f2d, params["rpn.obj.w"], params["rpn.obj.b"])
    s1_delta = linear(f2d, params["rpn.delta.w"], params["rpn.delta.b"])
    K = cfg.num_proposals
    props = np.empty((n, K, 4))
    scores = np.empty((n, K))
    obj = s1_obj.value.reshape(n, cfg.num_cells)
    dl = s1_delta.value.reshape(n, cfg.num_cells, 4)
    for b in range(n):
        props[b], scores[b], _ = select_proposals(obj[b], dl[b], K, cfg)
    if proposals is not None:
        props = np.asarray(proposals, dtype=np.float64).reshape(n, K, 4)
    s2_cls, s2_delta = roi_head(params, feats, props, cfg)
    return DetectorOutput(feats, s1_obj, s1_delta, props, scores, s2_cls, s2_delta, cfg)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def detections_from_output(out: DetectorOutput, image_index: int, score_thresh: float,
                           nms_iou: float) -> list:
    cfg = out.cfg
    if score_thresh >= 1.0:
        return []
    K, C = cfg.num_proposals, cfg.num_classes
    rows = slice(image_index * K, (image_index + 1) * K)
    probs = _softmax_rows(out.s2_cls.value[rows])
    deltas = out.s2_delta.value[rows].reshape(K, C, 4)
    props = out.proposals[image_index]
    dets = []
    for c in range(C):
        sc = probs[:, c]
        keep = np.flatnonzero(sc >= score_thresh)
        if keep.size == 0:
            continue
        bxs = bx.clip(bx.decode(props[keep], deltas[keep, c]), cfg.height, cfg.width)
        ok = (bxs[:, 2] > bxs[:, 0]) & (bxs[:, 3] > bxs[:, 1])
        keep, bxs = keep[ok], bxs[ok]
        for i in bx.nms(bxs, sc[keep], nms_iou):
            dets.append(Detection(c, tuple(float(v) for v in bxs[i]), float(sc[keep[i]])))
    dets.sort(key=lambda d: -d.score)
    return dets


def predict_batch(params, images, cfg: DetectorConfig, score_thresh: float = 0.05,
                  nms_iou: float = 0.5) -> list:
    out = forward(params, images, cfg)
    return [detections_from_output(out, b, score_thresh, nms_iou) for b in range(out.batch_size)]


def predict(params, image, cfg: DetectorConfig, score_thresh: float = 0.05,
            nms_iou: float = 0.5) -> list:
    return predict_batch(params, np.asarray(image)[None], cfg, score_thresh, nms_iou)[0]


def detections_to_instances(dets) -> list:
    return [Instance(d.class_id, d.box) for d in dets]


# ---------------------------------------------------------------------------
# checkpoints


def params_to_json(params: dict, meta: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
                   for k, v in params.items()},
    }


def params_from_json(payload: dict) -> dict:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a lossmix-lab checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in payload["params"].items()}


def save_params(params: dict, path, meta: dict | None = None) -> str:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(params_to_json(params, meta), fh)
    os.replace(tmp, path)
    return path


def load_params(path) -> dict:
    with open(os.fspath(path)) as fh:
        return params_from_json(json.load(fh))


def load_checkpoint_meta(path) -> dict:
    with open(os.fspath(path)) as fh:
        return json.load(fh).get("meta", {})
