"""Command-line entry point: ``todsynth <command> [options]``.

Commands follow the pipeline order (gen-data, train-flow, train-seg, synth,
eval, sweep) and share one JSON run configuration. Exit codes: 0 success,
2 configuration error, 3 numerical failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import load_config
from .flow import ConfigError, train_flow
from .model import SCHEMES, FlowNet
from .numerics import NumericalError
from .scenes import export_pixmap, generate_dataset, read_container, split_train_val, write_container
from .seeding import derive_seed
from .segment import SegNet, train_seg
from .synthpipe import (
    DownstreamConfig,
    EmptySynthesisError,
    SynthesisJob,
    ablation_sweep,
    feature_distance,
    run_downstream,
    sweep_grid,
    synthesize,
)

log = logging.getLogger("todsynth")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class MissingArtifact(FileNotFoundError):
    pass


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path} (run the earlier pipeline stage first)")
    return path


def _emit_loss(step, loss):
    print(f"step,{step},loss,{loss:.6f}", flush=True)


def _downstream_cfg(cfg):
    d = cfg.downstream
    return DownstreamConfig(steps=d.steps, batch_size=d.batch_size, lr=d.lr, width=d.width, augment=d.augment)


# -- commands --------------------------------------------------------------------
def cmd_gen_data(cfg, args):
    scene = cfg.scene.build(derive_seed(cfg.seed, "scenes"))
    samples = generate_dataset(scene, cfg.data.count)
    train, val = split_train_val(samples, cfg.data.val_fraction, seed=derive_seed(cfg.seed, "split"))
    train_path, val_path = cfg.paths.resolve("train"), cfg.paths.resolve("val")
    train_path.parent.mkdir(parents=True, exist_ok=True)
    write_container(train, train_path, num_classes=scene.num_classes)
    write_container(val, val_path, num_classes=scene.num_classes)
    print(f"train,{len(train)},{train_path}")
    print(f"val,{len(val)},{val_path}")


def cmd_train_flow(cfg, args):
    scheme = cfg.flow.scheme
    train, _ = read_container(_require(cfg.paths.resolve("train"), "training container"))
    start = 0
    if args.resume:
        net = FlowNet.load(_require(args.resume, "checkpoint to resume"))
        if net.cfg.scheme != scheme and args.scheme:
            raise ConfigError(f"--scheme {scheme} does not match the resumed checkpoint ({net.cfg.scheme})")
        scheme = net.cfg.scheme
        start = int((net.extra or {}).get("step", 0))
    else:
        net = FlowNet(cfg.flow.build(cfg.scene, scheme), seed=derive_seed(cfg.seed, "flow-init", scheme))
    out = Path(args.out) if args.out else cfg.paths.resolve("flow", scheme=scheme)
    t = cfg.flow.train
    log.info("training %s flow model (%d parameters) from step %d", scheme, net.num_params(), start)
    train_flow(net, train, steps=t.steps, batch_size=t.batch_size, lr=t.lr, weight_decay=t.weight_decay,
               seed=derive_seed(cfg.seed, "flow-train", scheme, start), log_every=t.log_every,
               on_log=_emit_loss, start_step=start)
    out.parent.mkdir(parents=True, exist_ok=True)
    net.save(out, extra={"step": start + t.steps})
    log.info("wrote %s", out)


def cmd_train_seg(cfg, args):
    train, _ = read_container(_require(cfg.paths.resolve("train"), "training container"))
    s = cfg.seg
    net = train_seg(train, augment=s.augment, seed=derive_seed(cfg.seed, "seg"), batch_size=s.batch_size,
                    lr=s.lr, weight_decay=s.weight_decay, width=s.width, num_classes=cfg.scene.num_classes,
                    steps=s.steps, log_every=cfg.flow.train.log_every, on_log=_emit_loss)
    out = Path(args.out) if args.out else cfg.paths.resolve("seg")
    out.parent.mkdir(parents=True, exist_ok=True)
    net.save(out, extra={"step": s.steps})
    log.info("wrote %s", out)


def _synthesis_job(cfg, scheme, sampler, output=None):
    f = cfg.filter
    return SynthesisJob(
        flow=_require(cfg.paths.resolve("flow", scheme=scheme), "flow checkpoint"),
        guidance=_require(cfg.paths.resolve("seg"), "segmentation checkpoint"),
        masks=_require(cfg.paths.resolve("train"), "training container"),
        sampler=sampler,
        seeds_per_mask=f.seeds_per_mask,
        class_filter=f.class_filter,
        pixel_filter=f.pixel_filter,
        rare_set=tuple(f.rare_set),
        min_classes=f.min_classes,
        phi=f.phi,
        calibration=_require(cfg.paths.resolve("val"), "validation container"),
        reference=cfg.paths.resolve("val"),
        output=output,
    )


def cmd_synth(cfg, args):
    sampler = cfg.sampler.build(derive_seed(cfg.seed, "synth"))
    out = cfg.paths.resolve("synth")
    samples, report = synthesize(_synthesis_job(cfg, cfg.flow.scheme, sampler, output=out))
    report.to_json(cfg.paths.resolve("report"), include_timing=False)
    log.info("synthesis took %.1f s", report.wall_clock)
    print(f"generated,{report.generated}")
    print(f"kept_class_count,{report.kept_class_count}")
    print(f"kept_pixel,{report.kept_pixel}")
    print(f"fd,{report.fd_prefilter:.6f}")
    if args.export_pixmaps:
        pix = cfg.paths.resolve("pixmaps")
        pix.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples[: args.export_pixmaps]):
            export_pixmap(s, pix / f"sample_{i:03d}")


def cmd_eval(cfg, args):
    train, _ = read_container(_require(cfg.paths.resolve("train"), "training container"))
    val, _ = read_container(_require(cfg.paths.resolve("val"), "validation container"))
    guide = SegNet.load(_require(cfg.paths.resolve("seg"), "segmentation checkpoint"))
    synth = []
    report_path = cfg.paths.resolve("report")
    if not args.real_only:
        synth, _ = read_container(_require(cfg.paths.resolve("synth"), "synthetic container"))
    if synth and report_path.exists():
        fd = json.loads(report_path.read_text())["fd_prefilter"]
    else:
        imgs = np.stack([s.image for s in (synth or train)])
        fd = feature_distance(guide, np.stack([s.image for s in val]), imgs)
    runs = [
        run_downstream(train, synth, val, seed=derive_seed(cfg.seed, "downstream", r), cfg=_downstream_cfg(cfg))
        for r in range(cfg.downstream.repeats)
    ]
    metrics = {
        "OA": float(np.mean([m.oa for m in runs])),
        "mIoU": float(np.mean([m.miou for m in runs])),
        "mAcc": float(np.mean([m.macc for m in runs])),
        "FD": float(fd),
        "per_class_IoU": [None if np.isnan(v) else float(v) for v in np.nanmean([m.iou for m in runs], axis=0)],
        "synthetic_samples": len(synth),
        "real_samples": len(train),
    }
    text = json.dumps(metrics, indent=2, sort_keys=True)
    out = cfg.paths.resolve("metrics")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n")
    print(text)


def cmd_sweep(cfg, args):
    train, _ = read_container(_require(cfg.paths.resolve("train"), "training container"))
    val, _ = read_container(_require(cfg.paths.resolve("val"), "validation container"))
    guide = SegNet.load(_require(cfg.paths.resolve("seg"), "segmentation checkpoint"))
    sw = cfg.sweep
    flows = {s: FlowNet.load(_require(cfg.paths.resolve("flow", scheme=s), "flow checkpoint")) for s in sw.schemes}
    f = cfg.filter
    job_kwargs = {
        "seeds_per_mask": f.seeds_per_mask, "class_filter": f.class_filter, "pixel_filter": f.pixel_filter,
        "rare_set": tuple(f.rare_set), "min_classes": f.min_classes, "phi": f.phi,
        "sampler": {"alpha": cfg.sampler.alpha, "alpha_ratio": cfg.sampler.alpha_ratio},
    }
    grid = sweep_grid(sw.schemes, sw.steps, sw.crfm_steps)
    out = cfg.paths.resolve("sweep")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = ablation_sweep(grid, flows, guide, train, val, seed=derive_seed(cfg.seed, "synth"),
                          job_kwargs=job_kwargs, downstream=_downstream_cfg(cfg), csv_path=out, jobs=args.jobs)
    failed = sum(bool(r["error"]) for r in rows)
    print(f"cells,{len(rows)},failed,{failed},{out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-flow": cmd_train_flow,
    "train-seg": cmd_train_seg,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="global seed; overrides the config")
    common.add_argument("--workdir", help="directory for relative artifact paths; overrides the config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps (default 1)")

    parser = argparse.ArgumentParser(prog="todsynth", description="Mask-conditioned toy scene synthesis pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="generate real train/val containers")
    p.add_argument("--count", type=int, help="number of scenes before the validation split")
    p = sub.add_parser("train-flow", parents=[common], help="train the mask-conditioned flow model")
    p.add_argument("--scheme", choices=SCHEMES, help="mask-injection scheme")
    p.add_argument("--steps", type=int, help="optimizer steps to run")
    p.add_argument("--resume", help="checkpoint to continue from; the step counter carries on")
    p.add_argument("--out", help="checkpoint path (default from config)")
    p = sub.add_parser("train-seg", parents=[common], help="train the guidance segmentation net")
    p.add_argument("--steps", type=int, help="optimizer steps to run")
    p.add_argument("--out", help="checkpoint path (default from config)")
    p = sub.add_parser("synth", parents=[common], help="synthesize and filter a dataset")
    p.add_argument("--scheme", choices=SCHEMES, help="which trained flow model to sample")
    p.add_argument("--steps", type=int, help="Euler steps")
    p.add_argument("--crfm-steps", type=int, help="rectified steps at the start of sampling")
    p.add_argument("--alpha-ratio", type=float, help="rectification strength relative to the velocity norm")
    p.add_argument("--export-pixmaps", type=int, default=0, metavar="N", help="also write N image/mask pixmaps")
    p = sub.add_parser("eval", parents=[common], help="train downstream on real+synthetic data and score it")
    p.add_argument("--real-only", action="store_true", help="ignore the synthetic container")
    sub.add_parser("sweep", parents=[common], help="ablation over schemes x steps x CRFM steps")
    return parser


def _overrides(args):
    o = {"seed": args.seed, "paths.workdir": args.workdir}
    if args.command == "gen-data":
        if args.count is not None and args.count < 1:
            raise ConfigError(f"--count must be >= 1, got {args.count}")
        o["data.count"] = args.count
    if args.command in ("train-flow", "synth"):
        o["flow.scheme"] = args.scheme
    if args.command == "train-flow":
        o["flow.train.steps"] = args.steps
    if args.command == "train-seg":
        o["seg.steps"] = args.steps
    if args.command == "synth":
        o.update({"sampler.steps": args.steps, "sampler.crfm_steps": args.crfm_steps,
                  "sampler.alpha_ratio": args.alpha_ratio})
    return o


def _setup_logging():
    level = os.environ.get("TODSYNTH_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"TODSYNTH_LOG must be one of {'|'.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        cfg = load_config(args.config, _overrides(args))
        log.debug("config: %s", json.dumps(asdict(cfg), sort_keys=True))
        COMMANDS[args.command](cfg, args)
    except (ConfigError, EmptySynthesisError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure at step {e.step}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


def entry():
    sys.exit(main())
