"""Mean-Teacher domain adaptation with intra- and inter-domain loss mixing.

Warmup trains the student on
    L_warm = w_mss * L_mss + w_nst * L_nst
(source x source mixing, plus source images with a small amount of an
unlabeled target image blended in). Adaptation trains on
    L_adapt = w_mss * L_mss + w_mtt * L_mtt + w_mst * L_mst + w_disc * L_disc
where target labels are teacher pseudo-labels, source x target pairs are mixed
with a balanced coefficient, and L_disc is a domain classifier behind a
gradient-reversal node. The teacher follows the student by EMA and never
receives gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import detector as D
from . import tensor as T
from .losses import batch_loss
from .mixing import mix_batch, mix_pair, sample_lambda, sample_noise_lambda
from .optim import lr_at, sgd_update
from .scenegen import ImageSample, Instance, make_rng

WARM_TERMS = ("mss", "nst")
ADAPT_TERMS = ("mss", "mtt", "mst", "disc")

# RNG stream ids (the iteration index is appended); 1 and 2 are shared with
# supervised training so that zero-weighted DA terms reproduce it exactly
SOURCE_BATCH_STREAM = 1
SOURCE_MIX_STREAM = 2
TARGET_BATCH_STREAM = 10
NST_STREAM = 11
STRONG_AUG_STREAM = 12
MTT_STREAM = 13
MST_STREAM = 14


@dataclass
class TeacherStudent:
    teacher: dict
    student: dict
    ema_momentum: float = 0.999
    discriminator: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.teacher.keys() != self.student.keys() or any(
                self.teacher[k].shape != self.student[k].shape for k in self.teacher):
            raise ValueError("teacher and student parameter shapes differ")


def init_discriminator(seed: int, in_channels: int, hidden: int) -> dict:
    rng = make_rng(seed, 0xD15C)
    b1 = np.sqrt(6.0 / in_channels)
    b2 = np.sqrt(6.0 / hidden)
    return {
        "disc.fc1.w": rng.uniform(-b1, b1, size=(in_channels, hidden)),
        "disc.fc1.b": np.zeros(hidden),
        "disc.fc2.w": rng.uniform(-b2, b2, size=(hidden, 1)),
        "disc.fc2.b": np.zeros(1),
    }


def ema_update(ts: TeacherStudent) -> dict:
    """teacher <- m * teacher + (1 - m) * student, elementwise."""
    m = ts.ema_momentum
    return {k: m * ts.teacher[k] + (1.0 - m) * ts.student[k] for k in ts.teacher}


def pseudo_label(teacher: dict, image: np.ndarray, thresh: float, cfg: D.DetectorConfig,
                 nms_iou: float = 0.5) -> list:
    """Teacher detections with score >= thresh as full-weight instances, in canonical order."""
    if not 0.0 < thresh < 1.0:
        raise ValueError("pseudo-label threshold must lie in (0, 1)")
    values = {k: (v.value if isinstance(v, T.Node) else v) for k, v in teacher.items()}
    dets = D.predict(values, image, cfg, score_thresh=thresh, nms_iou=nms_iou)
    return canonical_instances(Instance(d.class_id, d.box) for d in dets)


def pseudo_label_batch(teacher: dict, images: np.ndarray, thresh: float, cfg: D.DetectorConfig,
                       nms_iou: float = 0.5) -> list:
    values = {k: (v.value if isinstance(v, T.Node) else v) for k, v in teacher.items()}
    dets = D.predict_batch(values, images, cfg, score_thresh=thresh, nms_iou=nms_iou)
    return [canonical_instances(Instance(d.class_id, d.box) for d in ds) for ds in dets]


def canonical_instances(instances) -> list:
    return sorted(instances, key=lambda i: (i.class_id, i.box))


def discriminator_loss(disc: dict, feature_map: T.Node, domain_tag: int,
                       reverse: bool = True) -> T.Node:
    """Binary CE of a 2-layer domain classifier on globally averaged features.

    With ``reverse`` a gradient-reversal node sits between the feature map and
    the classifier, so the detector sees negated gradients while the classifier
    parameters see ordinary ones.
    """
    n, gh, gw, c = feature_map.value.shape
    x = T.grad_reverse(feature_map) if reverse else feature_map
    pooled = T.mean(T.reshape(x, (n, gh * gw, c)), axis=1)
    h = T.relu(D.linear(pooled, disc["disc.fc1.w"], disc["disc.fc1.b"]))
    z = T.reshape(D.linear(h, disc["disc.fc2.w"], disc["disc.fc2.b"]), (n,))
    t = T.const(np.full(n, float(domain_tag)))
    return T.mean(T.sub(T.softplus(z), T.mul(z, t)))


def strong_augment(images: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Additive uniform pixel noise, clipped to [0, 1]."""
    if amplitude <= 0:
        return images
    return np.clip(images + rng.uniform(-amplitude, amplitude, size=images.shape), 0.0, 1.0)


def unlabeled(sample: ImageSample) -> ImageSample:
    return ImageSample(sample.image, [], sample.domain, sample.seed)


def with_labels(sample: ImageSample, image: np.ndarray, instances) -> ImageSample:
    return ImageSample(image, list(instances), sample.domain, sample.seed)


def _mst_lambda(da_cfg, alpha, rng):
    if da_cfg.mst_lambda == "beta":
        return sample_lambda(alpha, rng)
    return float(da_cfg.mst_lambda)


def noise_mixed_batch(src, tgt, da_cfg, seed, it) -> list:
    """Source images with U(0, noise_lambda_max) of a random target image blended in."""
    rng = make_rng(seed, NST_STREAM, it)
    picks = rng.integers(0, len(tgt), size=len(src))
    out = []
    for s, j in zip(src, picks):
        lam = sample_noise_lambda(da_cfg.noise_lambda_max, rng)
        out.append(mix_pair(s, unlabeled(tgt[int(j)]), "noise", lam))
    return out


def intra_mixed_batch(samples, alpha, rng) -> list:
    perm = rng.permutation(len(samples))
    return [mix_pair(samples[k], samples[int(perm[k])], "lossmix", sample_lambda(alpha, rng))
            for k in range(len(samples))]


def cross_mixed_batch(src, tgt, da_cfg, alpha, rng) -> list:
    picks = rng.integers(0, len(tgt), size=len(src))
    return [mix_pair(s, tgt[int(j)], "lossmix", _mst_lambda(da_cfg, alpha, rng))
            for s, j in zip(src, picks)]


def _images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _loss_on(student, samples: list, det_cfg, toggles):
    out = D.forward(student, _images(samples), det_cfg)
    return batch_loss(out, samples, toggles)


def warmup_terms(student: dict, src_mixed: list, src, tgt, cfg, it: int, det_cfg) -> dict:
    """Weighted-sum ingredients of L_warm as autodiff nodes; zero-weight terms are skipped."""
    da = cfg.da
    terms = {}
    if da.lambda_mss:
        terms["mss"] = _loss_on(student, src_mixed, det_cfg, cfg.mix.toggles).total
    if da.lambda_nst:
        terms["nst"] = _loss_on(student, noise_mixed_batch(src, tgt, da, cfg.seed, it),
                                det_cfg, cfg.mix.toggles).total
    return terms


def adapt_terms(student: dict, disc: dict, teacher: dict, src_mixed: list, src, tgt, cfg,
                it: int, det_cfg) -> tuple:
    """Ingredients of L_adapt; returns ``(terms, pseudo_labels)``."""
    da = cfg.da
    tgt_images = _images(tgt)
    pseudo = pseudo_label_batch(teacher, tgt_images, da.pseudo_thresh, det_cfg, cfg.nms_iou)
    strong = strong_augment(tgt_images, da.strong_noise, make_rng(cfg.seed, STRONG_AUG_STREAM, it))
    tgt_student = [with_labels(t, strong[k], pseudo[k]) for k, t in enumerate(tgt)]
    terms = {}
    if da.lambda_mss:
        terms["mss"] = _loss_on(student, src_mixed, det_cfg, cfg.mix.toggles).total
    if da.lambda_mtt:
        mixed = intra_mixed_batch(tgt_student, cfg.mix.alpha, make_rng(cfg.seed, MTT_STREAM, it))
        terms["mtt"] = _loss_on(student, mixed, det_cfg, cfg.mix.toggles).total
    if da.lambda_mst:
        mixed = cross_mixed_batch(src, tgt_student, da, cfg.mix.alpha,
                                  make_rng(cfg.seed, MST_STREAM, it))
        terms["mst"] = _loss_on(student, mixed, det_cfg, cfg.mix.toggles).total
    if da.lambda_disc:
        fs = D.backbone(student, _images(src))
        ft = D.backbone(student, strong)
        terms["disc"] = T.scale(T.add(discriminator_loss(disc, fs, 0),
                                      discriminator_loss(disc, ft, 1)), 0.5)
    return terms, pseudo


def weighted_total(terms: dict, weights: dict) -> T.Node:
    parts = [T.scale(terms[k], weights[k]) for k in terms]
    if not parts:
        return T.const(0.0)
    return parts[0] if len(parts) == 1 else T.add_n(parts)


def term_weights(da) -> dict:
    return {"mss": da.lambda_mss, "nst": da.lambda_nst, "mtt": da.lambda_mtt,
            "mst": da.lambda_mst, "disc": da.lambda_disc}


def source_mixed_batch(src, cfg, it: int, total_iters: int) -> list:
    """Source x source mixing for iteration ``it`` (honours early-stop partial mixing)."""
    enabled = it < cfg.mix.partial_stop_fraction * total_iters
    return mix_batch(src, cfg.mix, make_rng(cfg.seed, SOURCE_MIX_STREAM, it), enabled)


def _step_lr(cfg, it):
    return lr_at(it, cfg.lr, cfg.lr_warmup_iters, cfg.lr_warmup_factor)


def _grads(total, leaves):
    return T.backward(total, leaves) if total.requires_grad else {
        k: np.zeros(v.value.shape) for k, v in leaves.items()}


def warmup_step(ts: TeacherStudent, src_batch, tgt_batch, cfg, it: int, det_cfg,
                total_iters: int | None = None):
    """One student SGD step on L_warm. Returns ``(values, new_student)``.

    ``values`` holds each computed term, the total, and the LossBreakdown terms of
    L_mss under ``mss.<name>``.
    """
    total_iters = cfg.iters if total_iters is None else total_iters
    leaves = {k: T.var(v, k) for k, v in ts.student.items()}
    src_mixed = source_mixed_batch(src_batch, cfg, it, total_iters)
    terms = warmup_terms(leaves, src_mixed, src_batch, [unlabeled(t) for t in tgt_batch], cfg,
                         it, det_cfg)
    total = weighted_total(terms, term_weights(cfg.da))
    grads = _grads(total, leaves)
    student = sgd_update(ts.student, grads, _step_lr(cfg, it), cfg.clip_norm)
    values = {k: float(v.value) for k, v in terms.items()}
    values["total"] = float(total.value)
    return values, student


def adapt_step(ts: TeacherStudent, src_batch, tgt_batch, cfg, it: int, det_cfg,
               total_iters: int | None = None):
    """One adaptation step: student SGD on L_adapt, then EMA teacher update.

    Returns ``(values, new TeacherStudent)``.
    """
    total_iters = cfg.iters if total_iters is None else total_iters
    leaves = {k: T.var(v, k) for k, v in ts.student.items()}
    dleaves = {k: T.var(v, k) for k, v in ts.discriminator.items()}
    src_mixed = source_mixed_batch(src_batch, cfg, it, total_iters)
    terms, pseudo = adapt_terms(leaves, dleaves, ts.teacher, src_mixed, src_batch,
                                [unlabeled(t) for t in tgt_batch], cfg, it, det_cfg)
    total = weighted_total(terms, term_weights(cfg.da))
    lr = _step_lr(cfg, it)
    grads = _grads(total, leaves)
    student = sgd_update(ts.student, grads, lr, cfg.clip_norm)
    disc = ts.discriminator
    if "disc" in terms:
        dgrads = {k: (n.grad if n.grad is not None else np.zeros(n.value.shape))
                  for k, n in dleaves.items()}
        disc = sgd_update(disc, dgrads, lr, cfg.clip_norm)
    new = TeacherStudent(ts.teacher, student, ts.ema_momentum, disc)
    new.teacher = ema_update(new)
    values = {k: float(v.value) for k, v in terms.items()}
    values["total"] = float(total.value)
    values["pseudo_labels"] = float(sum(len(p) for p in pseudo))
    return values, new
