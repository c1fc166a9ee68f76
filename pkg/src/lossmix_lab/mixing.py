"""Input and target mixing for LossMix and the baseline strategies.

Strategies:

* ``none``        -- no mixing, the sample's own labels at weight 1.
* ``lossmix``     -- blended image, two label sets weighted ``lam`` and ``1 - lam``;
                     the detection loss is evaluated per set and interpolated.
* ``union``       -- blended image, plain union of both label sets at weight 1.
* ``noise``       -- a small amount ``lam ~ U(0, noise_lambda_max)`` of image j is
                     blended into image i; only i's labels are kept.
* ``label_mixup`` -- classic soft-label mixing; only meaningful for classification
                     (see :func:`mix_onehot`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scenegen import Instance

STRATEGIES = ("none", "lossmix", "union", "noise", "label_mixup")
INPUT_MIXERS = ("pixel", "region")
SUB_LOSSES = ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg")


@dataclass(frozen=True)
class MixConfig:
    strategy: str = "lossmix"
    alpha: float = 1.0
    input_mixer: str = "pixel"
    noise_lambda_max: float = 0.2
    rpn_cls: bool = True
    rpn_reg: bool = True
    roi_cls: bool = True
    roi_reg: bool = True
    reg_style: bool = False
    partial_stop_fraction: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"mix.strategy: unknown strategy {self.strategy!r}")
        if not self.alpha > 0:
            raise ValueError(f"mix.alpha must be > 0, got {self.alpha}")
        if self.input_mixer not in INPUT_MIXERS:
            raise ValueError(f"mix.input_mixer: unknown mixer {self.input_mixer!r}")
        if not (0.0 < self.noise_lambda_max < 0.5):
            raise ValueError("mix.noise_lambda_max must lie in (0, 0.5)")
        if not (0.0 < self.partial_stop_fraction <= 1.0):
            raise ValueError("mix.partial_stop_fraction must lie in (0, 1]")

    @property
    def toggles(self) -> dict:
        return {k: getattr(self, k) for k in SUB_LOSSES}


@dataclass
class MixedSample:
    image: np.ndarray
    weighted_labels: list  # [(list[Instance], weight), ...]
    lam: float
    strategy: str = "lossmix"
    offsets: tuple = ((0, 0), (0, 0))
    rect: tuple | None = None

    @property
    def weights(self) -> list:
        return [w for _, w in self.weighted_labels]

    def union_instances(self) -> list:
        return [inst.with_weight(1.0) for insts, _ in self.weighted_labels for inst in insts]


# ---------------------------------------------------------------------------
# mixing coefficient


def sample_beta(alpha: float, rng: np.random.Generator, size=None):
    """Beta(alpha, alpha) via two independent Gamma(alpha, 1) variates."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    g1 = rng.standard_gamma(alpha, size=size)
    g2 = rng.standard_gamma(alpha, size=size)
    return g1 / (g1 + g2)


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    return float(sample_beta(alpha, rng))


def sample_noise_lambda(noise_lambda_max: float, rng: np.random.Generator) -> float:
    return float(rng.uniform(0.0, noise_lambda_max))


def make_batch_pairs(batch_size: int, rng: np.random.Generator) -> list:
    """Pair each index k with perm[k] for a uniformly random permutation (self-pairs allowed)."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    perm = rng.permutation(batch_size)
    return [(k, int(perm[k])) for k in range(batch_size)]


# ---------------------------------------------------------------------------
# input mixing


def center_offset(shape, canvas_hw) -> tuple:
    """(dx, dy) placing an image of ``shape`` at the center of ``canvas_hw``."""
    return ((canvas_hw[1] - shape[1]) // 2, (canvas_hw[0] - shape[0]) // 2)


def pad_to(img: np.ndarray, canvas_hw, offset) -> np.ndarray:
    dx, dy = offset
    out = np.zeros((canvas_hw[0], canvas_hw[1], img.shape[2]))
    out[dy:dy + img.shape[0], dx:dx + img.shape[1]] = img
    return out


def mix_images_pixel(img_i: np.ndarray, img_j: np.ndarray, lam: float):
    """Center-align both images on a zero canvas of the max size and blend them.

    Returns ``(mixed, offset_i, offset_j)`` with offsets as integer (dx, dy).
    """
    if img_i.shape[2] != img_j.shape[2]:
        raise ValueError(f"channel mismatch: {img_i.shape[2]} vs {img_j.shape[2]}")
    canvas = (max(img_i.shape[0], img_j.shape[0]), max(img_i.shape[1], img_j.shape[1]))
    off_i = center_offset(img_i.shape, canvas)
    off_j = center_offset(img_j.shape, canvas)
    if img_i.shape == img_j.shape:
        mixed = lam * img_i + (1.0 - lam) * img_j
    else:
        mixed = lam * pad_to(img_i, canvas, off_i) + (1.0 - lam) * pad_to(img_j, canvas, off_j)
    return mixed, off_i, off_j


def resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = np.minimum((np.arange(height) * img.shape[0]) // height, img.shape[0] - 1)
    cols = np.minimum((np.arange(width) * img.shape[1]) // width, img.shape[1] - 1)
    return img[rows][:, cols]


def region_mask(height: int, width: int, lam: float, rng: np.random.Generator):
    """Mask of exactly round((1 - lam) * H * W) pixels laid out as a near-square rectangle.

    The rectangle is ``w`` wide and ``h`` tall; every row is full except possibly the
    last, which holds the remainder. Returns ``(mask, rect)`` where ``rect`` is the
    bounding box (x1, y1, x2, y2) of the cut.
    """
    area = int(round((1.0 - lam) * height * width))
    mask = np.zeros((height, width), dtype=bool)
    if area <= 0:
        return mask, (0, 0, 0, 0)
    w = int(np.ceil(np.sqrt(area * width / height)))
    w = min(max(w, -(-area // height)), width)
    h = -(-area // w)
    x1 = int(rng.integers(0, width - w + 1))
    y1 = int(rng.integers(0, height - h + 1))
    full_rows = area // w
    mask[y1:y1 + full_rows, x1:x1 + w] = True
    rem = area - full_rows * w
    if rem:
        mask[y1 + full_rows, x1:x1 + rem] = True
    return mask, (x1, y1, x1 + w, y1 + h)


def mix_images_region(img_i: np.ndarray, img_j: np.ndarray, lam: float,
                      rng: np.random.Generator):
    """CutMix-style: paste a region of img_j covering (1 - lam) of img_i's area.

    Returns ``(mixed, rect, effective_lambda)``.
    """
    H, W = img_i.shape[:2]
    if img_j.shape[:2] != (H, W):
        img_j = resize_nearest(img_j, H, W)
    if img_i.shape[2] != img_j.shape[2]:
        raise ValueError(f"channel mismatch: {img_i.shape[2]} vs {img_j.shape[2]}")
    mask, rect = region_mask(H, W, lam, rng)
    mixed = np.where(mask[:, :, None], img_j, img_i)
    return mixed, rect, 1.0 - mask.sum() / (H * W)


# ---------------------------------------------------------------------------
# target mixing


def adjust_boxes(instances: Sequence[Instance], offset) -> list:
    dx, dy = offset
    if dx == 0 and dy == 0:
        return list(instances)
    return [Instance(i.class_id, (i.box[0] + dx, i.box[1] + dy, i.box[2] + dx, i.box[3] + dy),
                     i.mix_weight) for i in instances]


def clip_instances(instances: Sequence[Instance], height: int, width: int) -> list:
    """Clip boxes to the canvas; drop boxes left with no area."""
    out = []
    for inst in instances:
        x1, y1, x2, y2 = inst.box
        c = (min(max(x1, 0.0), width), min(max(y1, 0.0), height),
             min(max(x2, 0.0), width), min(max(y2, 0.0), height))
        if c[2] > c[0] and c[3] > c[1]:
            out.append(inst if c == inst.box else Instance(inst.class_id, c, inst.mix_weight))
    return out


def _weighted(instances, w):
    return [inst.with_weight(w) for inst in instances]


def mix_targets(strategy: str, y_i: Sequence[Instance], y_j: Sequence[Instance],
                lam: float) -> list:
    """Build the weighted label sets for a mixed image (boxes already offset).

    For ``lossmix`` and ``union`` ``lam`` is image i's coefficient. For ``noise``
    ``lam`` is the small amount of image j blended in, so i's coefficient is
    ``1 - lam`` and the labels of the larger side are kept. Zero-weight sets are
    dropped so the endpoints reduce to a single full-weight set.
    """
    if strategy == "lossmix":
        return [(_weighted(y, w), w) for y, w in ((y_i, lam), (y_j, 1.0 - lam)) if w > 0.0]
    if strategy == "union":
        return [(_weighted(list(y_i) + list(y_j), 1.0), 1.0)]
    if strategy == "noise":
        keep = y_i if (1.0 - lam) >= lam else y_j
        return [(_weighted(keep, 1.0), 1.0)]
    if strategy == "none":
        return [(_weighted(y_i, 1.0), 1.0)]
    if strategy == "label_mixup":
        raise ValueError("label_mixup mixes one-hot class labels; use mix_onehot")
    raise ValueError(f"unknown strategy {strategy!r}")


def mix_onehot(y_i: np.ndarray, y_j: np.ndarray, lam: float) -> np.ndarray:
    return lam * np.asarray(y_i, dtype=np.float64) + (1.0 - lam) * np.asarray(y_j, dtype=np.float64)


# ---------------------------------------------------------------------------
# whole-sample mixing


def mix_pair(sample_i, sample_j, strategy: str, lam: float, input_mixer: str = "pixel",
             rng: np.random.Generator | None = None) -> MixedSample:
    """Mix two :class:`ImageSample` objects under ``strategy`` with coefficient ``lam``.

    ``lam`` follows the :func:`mix_targets` convention.
    """
    if strategy == "none":
        return MixedSample(sample_i.image, mix_targets("none", sample_i.instances, (), 1.0),
                           1.0, strategy)
    coef_i = 1.0 - lam if strategy == "noise" else lam
    rect = None
    if input_mixer == "pixel":
        image, off_i, off_j = mix_images_pixel(sample_i.image, sample_j.image, coef_i)
        H, W = image.shape[:2]
        y_i = clip_instances(adjust_boxes(sample_i.instances, off_i), H, W)
        y_j = clip_instances(adjust_boxes(sample_j.instances, off_j), H, W)
    elif input_mixer == "region":
        if rng is None:
            raise ValueError("region mixing needs an rng")
        image, rect, coef_i = mix_images_region(sample_i.image, sample_j.image, coef_i, rng)
        off_i = off_j = (0, 0)
        y_i, y_j = sample_i.instances, sample_j.instances
        if sample_j.image.shape[:2] != sample_i.image.shape[:2]:
            sy = sample_i.image.shape[0] / sample_j.image.shape[0]
            sx = sample_i.image.shape[1] / sample_j.image.shape[1]
            y_j = [Instance(t.class_id, (t.box[0] * sx, t.box[1] * sy, t.box[2] * sx, t.box[3] * sy),
                            t.mix_weight) for t in y_j]
        lam = 1.0 - coef_i if strategy == "noise" else coef_i
    else:
        raise ValueError(f"unknown input mixer {input_mixer!r}")
    labels = mix_targets(strategy, y_i, y_j, lam)
    return MixedSample(image, labels, float(lam), strategy, (off_i, off_j), rect)


def unmixed(sample) -> MixedSample:
    return mix_pair(sample, None, "none", 1.0)


def mix_batch(samples, cfg: MixConfig, rng: np.random.Generator, enabled: bool = True) -> list:
    """Mix a minibatch with a shuffled copy of itself under ``cfg``.

    With ``cfg.reg_style`` only the first half of the batch is mixed; the rest is
    used unmixed at full weight. ``enabled=False`` returns the batch unmixed.
    """
    if cfg.strategy == "label_mixup":
        raise ValueError("label_mixup is a classification oracle, not a detection strategy")
    if cfg.strategy == "none" or not enabled:
        return [unmixed(s) for s in samples]
    pairs = make_batch_pairs(len(samples), rng)
    n_mixed = len(samples) // 2 if cfg.reg_style else len(samples)
    out = []
    for k, (i, j) in enumerate(pairs):
        if k >= n_mixed:
            out.append(unmixed(samples[i]))
            continue
        if cfg.strategy == "noise":
            lam = sample_noise_lambda(cfg.noise_lambda_max, rng)
        else:
            lam = sample_lambda(cfg.alpha, rng)
        out.append(mix_pair(samples[i], samples[j], cfg.strategy, lam, cfg.input_mixer, rng))
    return out
