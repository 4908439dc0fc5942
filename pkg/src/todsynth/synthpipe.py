"""Synthesis, filtering, downstream training and ablation sweeps.

Every mask is synthesised with the same fixed sequence of noise seeds, so
two jobs that differ only in sampler settings see identical starting noise.
Filters run in a fixed order: class-count first, then the pixel filter.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .flow import ConfigError, SamplerConfig, crfm_sample
from .model import FlowNet
from .numerics import IGNORE_INDEX
from .scenes import SceneSample, class_histogram, read_container, write_container
from .seeding import derive_seed
from .segment import SegNet, calibrate_pixel_filter, evaluate, pixel_filter, train_seg

log = logging.getLogger(__name__)

FILTER_ORDER = ("class_count", "pixel")


class EmptySynthesisError(RuntimeError):
    pass


# -- filters -------------------------------------------------------------------
def class_count_filter(sample, rare_set=(), min_classes=3):
    """Keep masks with at least ``min_classes`` distinct classes or any rare class."""
    mask = sample.mask if isinstance(sample, SceneSample) else np.asarray(sample)
    present = set(np.unique(mask).tolist()) - {IGNORE_INDEX}
    return len(present) >= min_classes or bool(present & set(rare_set))


# -- Frechet distance ------------------------------------------------------------
def _sqrtm_psd(a):
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(feats_a, feats_b, jitter=1e-6):
    """Frechet distance between Gaussian fits of two feature sets (rows = samples)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a.reshape(-1, 1) if a.ndim == 1 else a
    b = b.reshape(-1, 1) if b.ndim == 1 else b
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("frechet_distance: non-finite features")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"frechet_distance: feature dims differ {a.shape[1]} vs {b.shape[1]}")
    D = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + jitter * np.eye(D)
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + jitter * np.eye(D)
    # Tr((A B)^1/2) = Tr((A^1/2 B A^1/2)^1/2), the inner product being symmetric PSD
    ra = _sqrtm_psd(cov_a)
    w = np.linalg.eigvalsh(ra @ cov_b @ ra)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    fd = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def feature_distance(seg_net, images_a, images_b):
    return frechet_distance(seg_net.pooled_features(images_a), seg_net.pooled_features(images_b))


# -- synthesis -----------------------------------------------------------------
@dataclass
class SynthesisJob:
    flow: object  # FlowNet or checkpoint path
    guidance: object  # SegNet or checkpoint path
    masks: object  # list of SceneSample or container path
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seeds_per_mask: int = 3
    class_filter: bool = True
    pixel_filter: bool = True
    rare_set: tuple = (5,)
    min_classes: int = 3
    phi: float = 1.25
    calibration: object = None  # class-mean CE array, or real validation samples / container path
    reference: object = None  # real images for FD (samples or container path)
    output: str | None = None
    batch_size: int = 32

    def __post_init__(self):
        if self.seeds_per_mask < 1:
            raise ConfigError("seeds_per_mask must be >= 1")
        for name in ("flow", "guidance", "masks", "calibration", "reference"):
            v = getattr(self, name)
            if isinstance(v, (str, Path)) and not Path(v).exists():
                raise FileNotFoundError(f"SynthesisJob.{name}: {v} does not exist")


@dataclass
class SynthesisReport:
    generated: int = 0
    kept_class_count: int = 0
    kept_pixel: int = 0
    ignored_fraction: float = 0.0
    fd_prefilter: float | None = None
    fd_postfilter: float | None = None
    ce_curve: list = field(default_factory=list)
    downstream: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    filter_order: tuple = FILTER_ORDER
    mask_source: str = "real training split masks, fixed noise-seed sequence per mask"
    sampler: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["filter_order"] = list(self.filter_order)
        return d

    def to_json(self, path=None, include_timing=True):
        d = self.to_dict()
        if not include_timing:
            d.pop("wall_clock")
        text = json.dumps(d, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def _load_samples(obj):
    if obj is None:
        return None
    if isinstance(obj, (str, Path)):
        return read_container(obj)[0]
    return list(obj)


def _load_net(obj, cls):
    return cls.load(obj) if isinstance(obj, (str, Path)) else obj


def noise_seed(job_seed, repeat):
    return derive_seed(job_seed, "noise", repeat)


def generate_candidates(flow, guidance, masks, sampler, seeds_per_mask=3, batch_size=32):
    """All ``len(masks) * seeds_per_mask`` synthetic images, mask-major order.

    Returns ``(images, source_index, ce_curve)``.
    """
    c = flow.cfg
    shape = (c.channels, c.image_size, c.image_size)
    noise = [np.random.default_rng(noise_seed(sampler.seed, r)).standard_normal(shape).astype(np.float32)
             for r in range(seeds_per_mask)]
    jobs = [(j, r) for j in range(len(masks)) for r in range(seeds_per_mask)]
    images = np.zeros((len(jobs),) + shape, dtype=np.float32)
    ce_sum, ce_n = None, 0
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start : start + batch_size]
        z1 = np.stack([noise[r] for _, r in chunk])
        m = np.stack([masks[j].mask for j, _ in chunk])
        h = np.stack([masks[j].cond_hist for j, _ in chunk])
        z0, logbook = crfm_sample(flow, guidance, z1, m, h, sampler, num_classes=c.num_classes)
        images[start : start + len(chunk)] = np.clip(z0, -1.0, 1.0)
        curve = np.array([ce.sum() for ce in logbook.ce_per_sample])
        if curve.size:
            ce_sum = curve if ce_sum is None else ce_sum + curve
            ce_n += len(chunk)
    ce_curve = [] if ce_sum is None else (ce_sum / ce_n).tolist()
    return images, [j for j, _ in jobs], ce_curve


def synthesize(job: SynthesisJob):
    """Run the job; returns ``(kept_samples, report)`` and writes ``job.output`` if set."""
    t0 = time.perf_counter()
    flow = _load_net(job.flow, FlowNet)
    guidance = _load_net(job.guidance, SegNet)
    masks = _load_samples(job.masks)
    K = flow.cfg.num_classes
    if guidance.cfg.num_classes != K:
        raise ConfigError(f"guidance net has {guidance.cfg.num_classes} classes, flow net {K}")
    images, src, ce_curve = generate_candidates(
        flow, guidance, masks, job.sampler, job.seeds_per_mask, job.batch_size
    )
    report = SynthesisReport(generated=len(images), ce_curve=ce_curve, sampler=asdict(job.sampler))

    reference = _load_samples(job.reference)
    if reference:
        ref_imgs = np.stack([s.image for s in reference])
        report.fd_prefilter = feature_distance(guidance, ref_imgs, images)

    cands = [(images[i], masks[j].mask) for i, j in enumerate(src)]
    if job.class_filter:
        cands = [(im, m) for im, m in cands if class_count_filter(m, job.rare_set, job.min_classes)]
    report.kept_class_count = len(cands)
    if not cands:
        raise EmptySynthesisError("no candidates survived the class-count filter")

    kept, ignored = [], []
    if job.pixel_filter:
        cal = job.calibration
        if cal is not None and not isinstance(cal, np.ndarray):
            cal = calibrate_pixel_filter(guidance, _load_samples(cal))
        for im, m in cands:
            fm, frac = pixel_filter(im, m, guidance, job.phi, cal)
            ignored.append(frac)
            if np.any(fm != IGNORE_INDEX):
                kept.append((im, fm))
    else:
        kept = cands
    report.kept_pixel = len(kept)
    report.ignored_fraction = float(np.mean(ignored)) if ignored else 0.0
    if not kept:
        raise EmptySynthesisError("no candidates survived the pixel filter")

    samples = [SceneSample(image=im.astype(np.float32), mask=m, cond_hist=class_histogram(m, K)) for im, m in kept]
    if reference:
        report.fd_postfilter = feature_distance(guidance, ref_imgs, np.stack([s.image for s in samples]))
    if job.output:
        write_container(samples, job.output, num_classes=K)
    report.wall_clock = time.perf_counter() - t0
    return samples, report


# -- downstream ----------------------------------------------------------------
@dataclass
class DownstreamConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 2e-3
    width: int = 16
    augment: bool = True


def run_downstream(real, synth, val, seed=0, cfg: DownstreamConfig | None = None, num_classes=None):
    """Train a fresh SegNet on ``real + synth`` and score it on the real validation split."""
    cfg = cfg or DownstreamConfig()
    real, synth, val = _load_samples(real), _load_samples(synth) or [], _load_samples(val)
    K = num_classes or len(real[0].cond_hist)
    for name, group in (("synthetic", synth), ("validation", val)):
        if group and len(group[0].cond_hist) != K:
            raise ConfigError(f"{name} data has {len(group[0].cond_hist)} classes, real data {K}")
    net = train_seg(
        list(real) + list(synth),
        augment=cfg.augment,
        seed=seed,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        width=cfg.width,
        num_classes=K,
        steps=cfg.steps,
    )
    return evaluate(net, val)


# -- ablation sweep ------------------------------------------------------------
SWEEP_COLUMNS = ["cell", "scheme", "N", "k", "OA", "mIoU", "mAcc", "FD", "FD_post", "kept", "error"]


def sweep_grid(schemes=("tri",), steps=(23,), crfm_steps=(0, 2, 4, 6)):
    return [(s, n, k) for s in schemes for n in steps for k in crfm_steps if k <= n]


def _sweep_cell(cell, scheme, n, k, flow, guidance, real_train, real_val, cal, seed, sampler_kwargs,
                job_kwargs, downstream):
    row = {"cell": cell, "scheme": scheme, "N": n, "k": k}
    try:
        if flow is None:
            raise KeyError(f"no flow model for scheme {scheme!r}")
        sampler = SamplerConfig(steps=n, crfm_steps=k, seed=seed, **sampler_kwargs)
        job = SynthesisJob(
            flow=flow, guidance=guidance, masks=real_train, sampler=sampler,
            calibration=cal, reference=real_val, **job_kwargs,
        )
        synth, rep = synthesize(job)
        m = run_downstream(real_train, synth, real_val, seed=derive_seed(seed, "downstream"), cfg=downstream)
        row.update(OA=m.oa, mIoU=m.miou, mAcc=m.macc, FD=rep.fd_prefilter, FD_post=rep.fd_postfilter,
                   kept=rep.kept_pixel, error="")
    except Exception as e:  # noqa: BLE001 - recorded per cell
        log.warning("sweep cell %d (%s, N=%d, k=%d) failed: %s", cell, scheme, n, k, e)
        row["error"] = f"{type(e).__name__}: {e}"
    return row


def ablation_sweep(grid, flows, guidance, real_train, real_val, seed=0, job_kwargs=None,
                   downstream=None, csv_path=None, jobs=1):
    """One row per ``(scheme, N, k)`` cell; failures are recorded and the sweep continues.

    ``flows`` maps scheme name to a trained FlowNet. All cells share the
    noise seeds and the downstream training seed, so rows differ only in
    the sampler settings. With ``jobs > 1`` cells run in worker processes;
    rows come back in cell order either way.
    """
    job_kwargs = dict(job_kwargs or {})
    sampler_kwargs = job_kwargs.pop("sampler", {})
    real_train, real_val = _load_samples(real_train), _load_samples(real_val)
    cal = calibrate_pixel_filter(guidance, real_val)
    tasks = [
        (cell, scheme, n, k, flows.get(scheme), guidance, real_train, real_val, cal, seed, sampler_kwargs,
         job_kwargs, downstream)
        for cell, (scheme, n, k) in enumerate(grid)
    ]
    rows = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_sweep_cell, *t) for t in tasks]
            for fut in as_completed(futures):
                rows.append(fut.result())
                if csv_path:
                    write_sweep_csv(rows, csv_path)
    else:
        for t in tasks:
            rows.append(_sweep_cell(*t))
            if csv_path:
                write_sweep_csv(rows, csv_path)
    rows.sort(key=lambda r: r["cell"])
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in sorted(rows, key=lambda r: r["cell"]):
            w.writerow({c: _fmt(r.get(c, "")) for c in SWEEP_COLUMNS})


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.6f}"
    return "" if x is None else x
