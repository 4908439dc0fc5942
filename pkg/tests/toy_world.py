"""Shared toy pipeline for the trend criteria.

One "world" per pipeline seed: 40 real scenes split 32/8, a 128-scene
held-out evaluation set, a guidance SegNet and one flow per scheme.
Everything is memoised so the criteria reuse networks within a session.
"""

import functools

import numpy as np

from todsynth.config import load_config
from todsynth.flow import SamplerConfig, train_flow
from todsynth.model import FlowNet, FlowNetConfig
from todsynth.scenes import SceneConfig, generate_dataset, split_train_val
from todsynth.segment import calibrate_pixel_filter, train_seg
from todsynth.synthpipe import DownstreamConfig, SynthesisJob, run_downstream, synthesize

SEEDS = (0, 1, 2)
STEPS = 16
RATIO = load_config().sampler.alpha_ratio
REAL_SCENES = 40
EVAL_SCENES = 128
DOWNSTREAM_REPEATS = 3
GUIDE_POOL = 256


@functools.lru_cache(maxsize=None)
def world(seed):
    cfg = SceneConfig(size=16, regions=(2, 4), seed=seed)
    train, val = split_train_val(generate_dataset(cfg, REAL_SCENES), 0.2, seed)
    held_out = val + generate_dataset(cfg, EVAL_SCENES, base_seed=10000)
    guide = train_seg(train, steps=300, width=8, seed=seed)
    return {"cfg": cfg, "train": train, "eval": held_out, "guide": guide,
            "cal": calibrate_pixel_filter(guide, held_out)}


@functools.lru_cache(maxsize=None)
def flow_net(seed, scheme):
    w = world(seed)
    net = FlowNet(FlowNetConfig(image_size=16, d_model=32, heads=2, depth=2, patch=2, scheme=scheme), seed=seed)
    train_flow(net, w["train"], steps=3000, batch_size=16, lr=2e-3, seed=seed)
    return net


@functools.lru_cache(maxsize=None)
def pool_guide(seed, size):
    """Guide trained on ``size`` extra labelled scenes (nested pools: 64 is a prefix of 256)."""
    pool = generate_dataset(world(seed)["cfg"], GUIDE_POOL, base_seed=20000)
    return train_seg(pool[:size], steps=300, width=8, seed=seed)


def downstream_miou(seed, synth):
    w = world(seed)
    cfg = DownstreamConfig(steps=300, width=8)
    scores = [run_downstream(w["train"], synth, w["eval"], seed=seed * 100 + d, cfg=cfg).miou
              for d in range(DOWNSTREAM_REPEATS)]
    return float(np.mean(scores))


@functools.lru_cache(maxsize=None)
def cell(seed, scheme="tri", k=0, guide="base", pixel_filter=True):
    """Synthesise from the training masks and score downstream; returns (mIoU, FD, report)."""
    w = world(seed)
    net = w["guide"] if guide == "base" else pool_guide(seed, guide)
    job = SynthesisJob(flow=flow_net(seed, scheme), guidance=net, masks=w["train"],
                       sampler=SamplerConfig(steps=STEPS, crfm_steps=k, seed=seed, alpha_ratio=RATIO),
                       calibration=w["cal"] if guide == "base" else w["eval"],
                       reference=w["eval"], pixel_filter=pixel_filter)
    synth, report = synthesize(job)
    return downstream_miou(seed, synth), report.fd_prefilter, report
