"""Seeded experiment driver: supervised strategy runs, comparisons and DA runs.

Every source of randomness is a counter-based stream keyed by (seed, purpose,
iteration), so two runs with the same resolved config write byte-identical
``metrics.csv`` files. Wall-clock time only goes to ``report.json``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import da as DA
from . import detector as D
from . import tensor as T
from .config import TrainConfig, config_to_json, emit_config, to_flat
from .evaluation import EvalResult, evaluate
from .losses import NonFiniteLoss, batch_loss
from .optim import lr_at, sgd_update
from .scenegen import child_seed, generate_dataset, make_rng

SCHEMA_VERSION = 1
METRIC_COLUMNS = (
    "schema_version", "phase", "iter", "strategy", "lr",
    "rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "total",
    "mss", "nst", "mtt", "mst", "disc", "pseudo_labels",
    "model", "ap", "ap50", "ap75", "stream_checksum",
)
COMPARISON_COLUMNS = (
    "schema_version", "label", "strategy", "alpha", "input_mixer", "rpn_cls_mix", "rpn_reg_mix",
    "roi_cls_mix", "roi_reg_mix", "reg_style", "partial_stop_fraction", "ap", "ap50", "ap75",
    "best_iter", "final_rpn_cls", "final_rpn_reg", "final_roi_cls", "final_roi_reg",
    "final_total", "ap50_delta_vs_lossmix", "stream_checksum",
)

TRAIN_DATA, VAL_DATA, TARGET_TRAIN_DATA, TARGET_VAL_DATA = 100, 101, 102, 103


class TrainingDiverged(RuntimeError):
    def __init__(self, it: int, checkpoint: str | None, term: str = "total"):
        self.iter = it
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss ({term}) at iteration {it}; "
                         f"last good checkpoint: {checkpoint}")


@dataclass
class RunReport:
    evals: list = field(default_factory=list)
    best: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)
    fingerprint: dict = field(default_factory=dict)
    stream_checksum: str = ""
    best_params: dict | None = None
    final_params: dict | None = None
    final_teacher: dict | None = None

    def to_json(self) -> dict:
        return {"evals": self.evals, "best": self.best, "losses": self.losses,
                "wall_clock": self.wall_clock, "config": self.config,
                "fingerprint": self.fingerprint, "stream_checksum": self.stream_checksum}


def build_fingerprint() -> dict:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return {"package": "lossmix_lab", "version": __version__, "source_sha256": h.hexdigest()}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """Fixed-schema CSV of per-iteration losses and per-eval metrics."""

    def __init__(self, path: str | None):
        self.path = path
        self._fh = None
        if path:
            self._fh = open(path, "w", newline="")
            self._w = csv.writer(self._fh, lineterminator="\n")
            self._w.writerow(METRIC_COLUMNS)

    def row(self, **values):
        if self._fh is None:
            return
        values["schema_version"] = SCHEMA_VERSION
        self._w.writerow([_fmt(values.get(c)) for c in METRIC_COLUMNS])

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class StreamChecksum:
    """Digest of the strategy-independent data stream (datasets and batch indices)."""

    def __init__(self):
        self._h = hashlib.sha256()

    def add_dataset(self, dataset):
        for s in dataset:
            self._h.update(np.ascontiguousarray(s.image).tobytes())
            self._h.update(repr([(i.class_id, i.box) for i in s.instances]).encode())

    def add_indices(self, idx):
        self._h.update(np.asarray(idx, dtype=np.int64).tobytes())

    def hexdigest(self) -> str:
        return self._h.copy().hexdigest()[:16]


@dataclass
class Datasets:
    train: list
    val: list
    target_train: list | None = None
    target_val: list | None = None


def build_datasets(cfg: TrainConfig, with_target: bool = False) -> Datasets:
    s = cfg.scene
    train = generate_dataset(child_seed(cfg.seed, TRAIN_DATA), cfg.n_train, s, "source")
    val = generate_dataset(child_seed(cfg.seed, VAL_DATA), cfg.n_val, s, "source")
    if not with_target:
        return Datasets(train, val)
    n_t = cfg.da.n_target_train if cfg.da is not None else cfg.n_train
    return Datasets(
        train, val,
        generate_dataset(child_seed(cfg.seed, TARGET_TRAIN_DATA), n_t, s, "target"),
        generate_dataset(child_seed(cfg.seed, TARGET_VAL_DATA), cfg.n_val, s, "target"),
    )


def detector_config(cfg: TrainConfig) -> D.DetectorConfig:
    d = cfg.detector
    return D.DetectorConfig.from_scene(cfg.scene, num_proposals=d.num_proposals,
                                       hidden=d.hidden, pool_size=d.pool_size)


def batch_indices(seed: int, stream: int, it: int, n: int, batch_size: int) -> np.ndarray:
    rng = make_rng(seed, stream, it)
    return rng.choice(n, size=min(batch_size, n), replace=False)


def supervised_step(params: dict, batch, cfg: TrainConfig, it: int, det_cfg,
                    total_iters: int | None = None):
    """One SGD step of mixed supervised training. Returns ``(values, new_params)``."""
    total_iters = cfg.iters if total_iters is None else total_iters
    leaves = {k: T.var(v, k) for k, v in params.items()}
    mixed = DA.source_mixed_batch(batch, cfg, it, total_iters)
    out = D.forward(leaves, np.stack([m.image for m in mixed]), det_cfg)
    lb = batch_loss(out, mixed, cfg.mix.toggles)
    grads = T.backward(lb.total, leaves)
    lr = lr_at(it, cfg.lr, cfg.lr_warmup_iters, cfg.lr_warmup_factor)
    return lb.values(), sgd_update(params, grads, lr, cfg.clip_norm)


def _prepare_dir(cfg: TrainConfig, output_dir) -> str | None:
    out = output_dir if output_dir is not None else (cfg.output_dir or None)
    if out:
        os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
        with open(os.path.join(out, "resolved_config.json"), "w") as fh:
            fh.write(config_to_json(cfg))
        with open(os.path.join(out, "resolved_config.txt"), "w") as fh:
            fh.write(emit_config(cfg))
    return out


def _ckpt(out, name):
    return os.path.join(out, "checkpoints", name) if out else None


def _save(params, path, meta):
    if path:
        D.save_params(params, path, meta)
    return path


def _eval_points(total: int, every: int) -> set:
    pts = {total - 1}
    if every > 0:
        pts |= set(range(every - 1, total, every))
    return pts


class _Tracker:
    """Keeps the best eval (by AP50, first wins on ties) and its parameters."""

    def __init__(self, report: RunReport, out, writer: MetricsWriter):
        self.report, self.out, self.writer = report, out, writer

    def record(self, it, model, params, res: EvalResult, strategy, checksum):
        entry = {"iter": it + 1, "model": model, **res.as_dict()}
        self.report.evals.append(entry)
        self.writer.row(phase="eval", iter=it + 1, strategy=strategy, model=model, ap=res.ap,
                        ap50=res.ap50, ap75=res.ap75, stream_checksum=checksum)
        best = self.report.best
        if not best or res.ap50 > best["ap50"]:
            path = _save(params, _ckpt(self.out, "best.json"),
                         {"iter": it + 1, "model": model, "ap50": res.ap50})
            self.report.best = {"iter": it + 1, "model": model, "ap": res.ap, "ap50": res.ap50,
                                "ap75": res.ap75, "checkpoint": path}
            self.report.best_params = params


def _finish(report: RunReport, out, writer, params, t0):
    writer.close()
    report.final_params = params
    _save(params, _ckpt(out, "last.json"), {"final": True})
    report.wall_clock = time.perf_counter() - t0
    if out:
        with open(os.path.join(out, "report.json"), "w") as fh:
            json.dump(report.to_json(), fh, indent=1)
    return report


def run_supervised(cfg: TrainConfig, output_dir=None, eval_domain: str = "source",
                   datasets: Datasets | None = None) -> RunReport:
    """Train the mini-detector with ``cfg.mix.strategy`` and track the best AP50 checkpoint."""
    if cfg.da is not None:
        raise ValueError("run_supervised: config has a da section; use run_da")
    t0 = time.perf_counter()
    out = _prepare_dir(cfg, output_dir)
    det_cfg = detector_config(cfg)
    if datasets is None:
        datasets = build_datasets(cfg, with_target=eval_domain == "target")
    val = datasets.target_val if eval_domain == "target" else datasets.val
    report = RunReport(config=to_flat(cfg), fingerprint=build_fingerprint())
    writer = MetricsWriter(os.path.join(out, "metrics.csv") if out else None)
    tracker = _Tracker(report, out, writer)
    checksum = StreamChecksum()
    checksum.add_dataset(datasets.train)
    params = D.init_params(cfg.seed, det_cfg)
    evals = _eval_points(cfg.iters, cfg.eval_every)
    strategy = cfg.mix.strategy
    try:
        for it in range(cfg.iters):
            idx = batch_indices(cfg.seed, DA.SOURCE_BATCH_STREAM, it, len(datasets.train),
                                cfg.batch_size)
            checksum.add_indices(idx)
            batch = [datasets.train[i] for i in idx]
            try:
                values, new_params = supervised_step(params, batch, cfg, it, det_cfg)
            except NonFiniteLoss as exc:
                raise TrainingDiverged(it, _save(params, _ckpt(out, "last_good.json"),
                                                 {"iter": it}), exc.term) from None
            if not all(np.all(np.isfinite(v)) for v in new_params.values()):
                raise TrainingDiverged(it, _save(params, _ckpt(out, "last_good.json"),
                                                 {"iter": it}), "params")
            params = new_params
            lr = lr_at(it, cfg.lr, cfg.lr_warmup_iters, cfg.lr_warmup_factor)
            report.losses.append({"iter": it + 1, **values})
            writer.row(phase="train", iter=it + 1, strategy=strategy, lr=lr,
                       stream_checksum=checksum.hexdigest(), **values)
            if it in evals:
                res = evaluate(params, val, det_cfg, cfg.score_thresh, cfg.nms_iou)
                tracker.record(it, "student", params, res, strategy, checksum.hexdigest())
    except TrainingDiverged:
        writer.close()
        raise
    report.stream_checksum = checksum.hexdigest()
    return _finish(report, out, writer, params, t0)


def run_da(cfg: TrainConfig, output_dir=None, datasets: Datasets | None = None) -> RunReport:
    """Warmup then adaptation; evaluates teacher and student on held-out target data."""
    if cfg.da is None:
        raise ValueError("run_da: config has no da section")
    t0 = time.perf_counter()
    da = cfg.da
    out = _prepare_dir(cfg, output_dir)
    det_cfg = detector_config(cfg)
    if datasets is None:
        datasets = build_datasets(cfg, with_target=True)
    total_iters = da.warmup_iters + da.adapt_iters
    if total_iters < 1:
        raise ValueError("run_da: warmup_iters + adapt_iters must be >= 1")
    report = RunReport(config=to_flat(cfg), fingerprint=build_fingerprint())
    writer = MetricsWriter(os.path.join(out, "metrics.csv") if out else None)
    tracker = _Tracker(report, out, writer)
    checksum = StreamChecksum()
    checksum.add_dataset(datasets.train)
    checksum.add_dataset(datasets.target_train)
    student = D.init_params(cfg.seed, det_cfg)
    ts = DA.TeacherStudent(dict(student), student, da.ema_momentum,
                           DA.init_discriminator(cfg.seed, det_cfg.conv2, da.disc_hidden))
    evals = _eval_points(total_iters, cfg.eval_every)
    strategy = f"da:{cfg.mix.strategy}"
    for it in range(total_iters):
        idx = batch_indices(cfg.seed, DA.SOURCE_BATCH_STREAM, it, len(datasets.train),
                            cfg.batch_size)
        tidx = batch_indices(cfg.seed, DA.TARGET_BATCH_STREAM, it, len(datasets.target_train),
                             cfg.batch_size)
        checksum.add_indices(idx)
        checksum.add_indices(tidx)
        src = [datasets.train[i] for i in idx]
        tgt = [datasets.target_train[i] for i in tidx]
        phase = "warmup" if it < da.warmup_iters else "adapt"
        try:
            if phase == "warmup":
                values, student = DA.warmup_step(ts, src, tgt, cfg, it, det_cfg, total_iters)
                new_ts = DA.TeacherStudent(student, student, ts.ema_momentum, ts.discriminator)
            else:
                values, new_ts = DA.adapt_step(ts, src, tgt, cfg, it, det_cfg, total_iters)
        except NonFiniteLoss as exc:
            raise TrainingDiverged(it, _save(ts.student, _ckpt(out, "last_good.json"),
                                             {"iter": it}), exc.term) from None
        if not np.isfinite(values["total"]):
            raise TrainingDiverged(it, _save(ts.student, _ckpt(out, "last_good.json"),
                                             {"iter": it}), "total")
        ts = new_ts
        lr = lr_at(it, cfg.lr, cfg.lr_warmup_iters, cfg.lr_warmup_factor)
        report.losses.append({"iter": it + 1, "phase": phase, **values})
        writer.row(phase=phase, iter=it + 1, strategy=strategy, lr=lr,
                   stream_checksum=checksum.hexdigest(), **values)
        if it in evals:
            for model, params in (("teacher", ts.teacher), ("student", ts.student)):
                res = evaluate(params, datasets.target_val, det_cfg, cfg.score_thresh, cfg.nms_iou)
                tracker.record(it, model, params, res, strategy, checksum.hexdigest())
    report.stream_checksum = checksum.hexdigest()
    _save(ts.teacher, _ckpt(out, "teacher_last.json"), {"final": True, "model": "teacher"})
    _save(ts.student, _ckpt(out, "student_last.json"), {"final": True, "model": "student"})
    report = _finish(report, out, writer, ts.student, t0)
    report.final_teacher = ts.teacher
    return report


# ---------------------------------------------------------------------------
# comparisons


def toggle_grid() -> list:
    """Table-style ablation over which sub-losses are interpolated."""
    off = {k: False for k in ("mix.rpn_cls", "mix.rpn_reg", "mix.roi_cls", "mix.roi_reg")}
    return [
        {"label": "cls-only", **off, "mix.rpn_cls": True, "mix.roi_cls": True},
        {"label": "reg-only", **off, "mix.rpn_reg": True, "mix.roi_reg": True},
        {"label": "all"},
    ]


def alpha_grid(alphas) -> list:
    return [{"label": f"alpha={a}", "mix.alpha": float(a)} for a in alphas]


def _comparison_row(label, cfg: TrainConfig, rep: RunReport) -> dict:
    m = cfg.mix
    last = rep.losses[-1] if rep.losses else {}
    return {
        "schema_version": SCHEMA_VERSION, "label": label, "strategy": m.strategy,
        "alpha": m.alpha, "input_mixer": m.input_mixer, "rpn_cls_mix": m.rpn_cls,
        "rpn_reg_mix": m.rpn_reg, "roi_cls_mix": m.roi_cls, "roi_reg_mix": m.roi_reg,
        "reg_style": m.reg_style, "partial_stop_fraction": m.partial_stop_fraction,
        "ap": rep.best.get("ap"), "ap50": rep.best.get("ap50"), "ap75": rep.best.get("ap75"),
        "best_iter": rep.best.get("iter"),
        **{f"final_{k}": last.get(k) for k in ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "total")},
        "ap50_delta_vs_lossmix": None, "stream_checksum": rep.stream_checksum,
    }


def comparison_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in COMPARISON_COLUMNS])
    return buf.getvalue()


def run_comparison(cfg_base: TrainConfig, strategies, ablations=None, output_dir=None) -> list:
    """One row per strategy (shared seed and data), plus optional ablation rows.

    ``ablations`` is a list of override dicts (dotted keys plus an optional
    ``label``) applied on top of a lossmix config, e.g. :func:`toggle_grid`.
    Rows carry ``ap50_delta_vs_lossmix`` = AP50(lossmix) - AP50(row) when a
    plain lossmix strategy row is present. Writes ``comparison.csv`` when an
    output directory is configured.
    """
    strategies = list(strategies)
    if not strategies and not ablations:
        raise ValueError("run_comparison: need at least one strategy")
    out = output_dir if output_dir is not None else (cfg_base.output_dir or None)
    datasets = build_datasets(cfg_base)
    runs = [(s, cfg_base.replace(**{"mix.strategy": s})) for s in strategies]
    for ab in ablations or []:
        ab = dict(ab)
        label = ab.pop("label", None) or ",".join(f"{k}={v}" for k, v in ab.items())
        runs.append((label, cfg_base.replace(**{"mix.strategy": "lossmix", **ab})))
    rows = []
    for label, cfg in runs:
        sub = os.path.join(out, _slug(label)) if out else None
        rep = run_supervised(cfg, output_dir=sub or "", datasets=datasets)
        rows.append(_comparison_row(label, cfg, rep))
    ref = next((r["ap50"] for r in rows if r["label"] == "lossmix"), None)
    if ref is not None:
        for r in rows:
            r["ap50_delta_vs_lossmix"] = ref - r["ap50"]
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "comparison.csv"), "w") as fh:
            fh.write(comparison_csv(rows))
    return rows


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)
