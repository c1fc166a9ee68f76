"""Command line entry point: ``python -m lossmix_lab <command> [key=value ...]``.

Every command except ``gradcheck`` accepts ``--config FILE`` plus any number of
dotted ``key=value`` overrides (``mix.alpha=0.2``, ``--iters=50``), the same keys
a config file uses.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

from . import detector as D
from .config import ConfigError, DAConfig, TrainConfig, parse_config, parse_flags
from .evaluation import evaluate
from .harness import (TrainingDiverged, build_datasets, detector_config, run_comparison, run_da,
                      run_supervised, toggle_grid)
from .mixing import STRATEGIES
from .scenegen import export_coco_json, generate_dataset, save_ppm


def _config(args, extra) -> TrainConfig:
    cfg = parse_config(args.config, parse_flags(extra))
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    return cfg


def _print_json(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_gen(args, extra) -> int:
    cfg = _config(args, extra)
    n = args.n or cfg.n_train
    data = generate_dataset(cfg.seed if args.seed is None else args.seed, n, cfg.scene, args.domain)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    path = export_coco_json(data, os.path.join(out, f"{args.domain}.json"), cfg.scene.num_classes)
    if args.images:
        img_dir = os.path.join(out, "images")
        os.makedirs(img_dir, exist_ok=True)
        for k, s in enumerate(data):
            save_ppm(s.image, os.path.join(img_dir, f"{k:06d}.ppm"))
    print(f"wrote {n} {args.domain} scenes to {path}")
    return 0


def _summary(rep) -> dict:
    return {"best": rep.best, "stream_checksum": rep.stream_checksum,
            "wall_clock": round(rep.wall_clock, 3)}


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    if cfg.da is not None:
        raise ConfigError("da", "train is supervised; use the da command")
    rep = run_supervised(cfg, eval_domain=args.eval_domain)
    _print_json(_summary(rep))
    return 0


def cmd_da(args, extra) -> int:
    cfg = _config(args, extra)
    if cfg.da is None:
        cfg = dataclasses.replace(cfg, da=DAConfig())
    rep = run_da(cfg)
    _print_json(_summary(rep))
    return 0


def cmd_compare(args, extra) -> int:
    cfg = _config(args, extra)
    strategies = [s for s in args.strategies.split(",") if s]
    rows = run_comparison(cfg, strategies, toggle_grid() if args.toggle_grid else None)
    for r in rows:
        print(f"{r['label']:<40} ap50={r['ap50']:.4f} ap={r['ap']:.4f}")
    return 0


def cmd_eval(args, extra) -> int:
    cfg = _config(args, extra)
    params = D.load_params(args.checkpoint)
    det_cfg = detector_config(cfg)
    data = build_datasets(cfg, with_target=args.domain == "target")
    split = {"source": data.val, "target": data.target_val}[args.domain]
    res = evaluate(params, split, det_cfg, cfg.score_thresh, cfg.nms_iou)
    _print_json({"checkpoint": args.checkpoint, "domain": args.domain, **res.as_dict()})
    return 0


def cmd_gradcheck(args, extra) -> int:
    from .gradcheck import check_detector_gradients

    if extra:
        raise ConfigError(extra[0], "gradcheck takes no config overrides")
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        info: dict = {}
        err = check_detector_gradients(seed, args.eps, args.per_tensor, report=info)
        worst = max(worst, err)
        print(f"seed {seed}: max rel err {err:.3e} "
              f"({info['checked']} coords, {info['skipped']} kink-straddling skipped)")
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'} max rel err {worst:.3e} (tol {args.tol:g}) "
          f"in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lossmix_lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_, out=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value config file")
        if out:
            sp.add_argument("--out", help="output directory (sets output_dir)")
        sp.set_defaults(fn=fn)
        return sp

    g = cmd("gen", cmd_gen, "generate a scene dataset and export COCO json")
    g.add_argument("--n", type=int, default=0, help="number of scenes (default n_train)")
    g.add_argument("--seed", type=int, default=None, help="dataset seed (default: seed)")
    g.add_argument("--domain", choices=("source", "target"), default="source")
    g.add_argument("--images", action="store_true", help="also write PPM images")

    t = cmd("train", cmd_train, "supervised training with one mixing strategy")
    t.add_argument("--eval-domain", choices=("source", "target"), default="source")

    cmd("da", cmd_da, "mean-teacher domain adaptation run")

    c = cmd("compare", cmd_compare, "run several strategies on shared data")
    c.add_argument("--strategies", default=",".join(s for s in STRATEGIES if s != "label_mixup"))
    c.add_argument("--toggle-grid", action="store_true", help="add per-sub-loss toggle ablations")

    e = cmd("eval", cmd_eval, "evaluate a checkpoint", out=False)
    e.add_argument("checkpoint")
    e.add_argument("--domain", choices=("source", "target"), default="source")

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full detector loss")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0, help="first seed")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--per-tensor", type=int, default=16)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.fn(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
