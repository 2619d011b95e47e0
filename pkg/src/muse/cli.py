"""Command-line entry point.

Commands: gen, pretrain, finetune, eval, gradcheck, views. Exit codes:
0 success, 1 gradcheck threshold failure, 2 configuration error,
3 I/O failure. MUSE_LOG selects the log level (error|info|debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import distill, evalsuite, finetune, gradchecks, sampler, synth
from .config import ConfigError, EvalConfig, RunConfig, load_run_config
from .numerics import SeededRng
from .synth import CorpusEntry

log = logging.getLogger("muse")


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("MUSE_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _split_entries(entries: list[CorpusEntry], test_fraction: float):
    n_test = max(int(round(len(entries) * test_fraction)), 1)
    return entries[:-n_test], entries[-n_test:]


def cmd_gen(args) -> int:
    cfg = _load(args)
    rng = SeededRng(cfg.seed)
    entries = synth.generate_corpus(cfg.synth, args.n, rng, args.out)
    log.info("wrote %d ROIs to %s", len(entries), args.out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    corpus = synth.load_corpus(args.data)
    ckpt = distill.pretrain(corpus, cfg.model, cfg.distill, cfg.sampler,
                            cfg.seed, args.out, resume_path=args.resume)
    log.info("checkpoint written to %s", ckpt)
    return 0


def cmd_finetune(args) -> int:
    cfg = _load(args)
    entries = synth.load_corpus(args.data)
    ckpt = finetune.finetune(args.ckpt, entries, cfg.finetune, cfg.seed, args.out)
    log.info("fine-tuned checkpoint written to %s", ckpt)
    return 0


def _eval_tiles(model, entries, ecfg: EvalConfig, seed: int):
    """Crop-level tile examples for the classification protocols."""
    rng = SeededRng(seed)
    tiles = []
    for e in entries:
        patch = e.patch()
        for c in range(ecfg.crops_per_roi):
            v = sampler.crop_with_provenance(patch, ecfg.mpp, ecfg.r_o,
                                             rng.child((e.roi_id, c)))
            if len(v.indices) == 0:
                continue
            tiles.append(evalsuite.TileExample(image=v.image, coords=v.coords,
                                               labels=e.classes[v.indices]))
    return tiles


def cmd_eval(args) -> int:
    cfg = _load(args)
    ecfg = cfg.eval
    entries = synth.load_corpus(args.data)
    model = distill.load_eval_model(args.ckpt)
    if args.task in ("knn", "linear"):
        train_e, test_e = _split_entries(entries, ecfg.test_fraction)
        train_fm = evalsuite.corpus_feature_matrix(
            model, train_e, ecfg.mpp, ecfg.r_o, ecfg.crops_per_roi, cfg.seed)
        test_fm = evalsuite.corpus_feature_matrix(
            model, test_e, ecfg.mpp, ecfg.r_o, ecfg.crops_per_roi, cfg.seed + 1)
        if args.task == "knn":
            report = evalsuite.knn_eval(train_fm, test_fm, ks=ecfg.ks,
                                        weighted=ecfg.weighted_knn, seed=cfg.seed)
        else:
            probe = evalsuite.ProbeConfig(lr=ecfg.probe_lr, epochs=ecfg.probe_epochs,
                                          seed=cfg.seed)
            report = evalsuite.linear_probe(train_fm, test_fm, probe)
    elif args.task == "ft":
        train_e, test_e = _split_entries(entries, ecfg.test_fraction)
        train_tiles = _eval_tiles(model, train_e, ecfg, cfg.seed)
        test_tiles = _eval_tiles(model, test_e, ecfg, cfg.seed + 1)
        report = evalsuite.finetune_cls_eval(
            model, train_tiles, test_tiles,
            evalsuite.FtClsConfig(lr=ecfg.ft_lr, epochs=ecfg.ft_epochs, seed=cfg.seed))
    elif args.task == "det":
        base_mpp = entries[0].mpp if entries else 0.25
        radius = ecfg.match_radius
        items = evalsuite.detect_tiles(model, entries, ecfg.score_floor,
                                       ecfg.suppression_radius)
        report = evalsuite.detection_f1_corpus(items, radius, model.cfg.k_cls,
                                               seed=cfg.seed)
    else:
        raise ConfigError(f"unknown eval task {args.task!r}")
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    _load(args)  # validates the config file
    reports = gradchecks.run_gradcheck()
    worst = max(reports.values(), key=lambda r: r.max_rel_error)
    summary = {name: r.max_rel_error for name, r in reports.items()}
    text = json.dumps({"max_rel_error": worst.max_rel_error,
                       "tolerance": worst.tolerance,
                       "per_check": summary}, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if not all(r.passed for r in reports.values()):
        log.error("gradcheck failed: %s at %.3e", worst.worst_param, worst.max_rel_error)
        return 1
    return 0


def cmd_views(args) -> int:
    cfg = _load(args)
    entries = synth.load_corpus(args.data)
    by_id = {e.roi_id: e for e in entries}
    if args.roi not in by_id:
        raise ConfigError(f"roi {args.roi!r} not in corpus")
    patch = by_id[args.roi].patch()
    rng = SeededRng(cfg.seed).child(("views", args.roi))
    vs = sampler.multi_crop(patch, cfg.sampler, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = {"roi_id": args.roi, "views": [], "matches": []}
    from PIL import Image
    for i, v in enumerate(vs.views):
        arr = (v.image.clamp(0, 1).numpy() * 255).round().astype(np.uint8)
        Image.fromarray(np.moveaxis(arr, 0, -1)).save(out / f"{args.roi}_view{i}.png")
        sidecar["views"].append({"mpp": v.mpp, "r_o": v.r_o,
                                 "coords": [[float(x), float(y)] for x, y in v.coords],
                                 "indices": [int(i) for i in v.indices]})
    match = sampler.match_views(vs.views[0], vs.views[1])
    sidecar["matches"] = [[int(a), int(b)] for a, b in match.pairs]
    (out / f"{args.roi}_views.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    log.info("wrote %d views for %s to %s", len(vs.views), args.roi, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="muse",
        description="Multi-scale dense self-distillation for nucleus detection.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap torch worker threads")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p, *, out=True, data=False, ckpt=False):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if out:
            p.add_argument("--out", required=True, help="output path")
        if data:
            p.add_argument("--data", required=True, help="corpus directory")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint path")

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--n", type=int, required=True, help="number of ROIs")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("pretrain", help="run self-distillation pretraining")
    common(p, data=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="semi-supervised detection fine-tuning")
    common(p, data=True, ckpt=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    common(p, data=True, ckpt=True)
    p.add_argument("--task", required=True, choices=["knn", "linear", "ft", "det"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("views", help="dump paired views with provenance")
    common(p, data=True)
    p.add_argument("--roi", required=True, help="roi_id to crop")
    p.set_defaults(fn=cmd_views)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.fn(args)
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return 2
    except OSError as e:
        log.error("I/O error: %s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
