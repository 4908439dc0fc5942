"""Rectified-flow training, Euler sampling and control-rectified (CRFM) sampling.

Time runs from noise at ``t = 1`` to data at ``t = 0`` along
``z_t = (1 - t) z0 + t z1``; the regression target is ``z1 - z0`` and the
one-shot endpoint estimate from any state is ``z_t - t * v``.

CRFM replaces the velocity on the first ``k`` (highest-noise) Euler steps by
``v - alpha * grad_v CE(seg(z_t - t v), mask)``. The sampler state ``z_t`` is
only ever changed by the Euler update.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import IGNORE_INDEX, NumericalError  # noqa: F401 - re-exported

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class ModeCollapseWarning(UserWarning):
    pass


@dataclass
class SamplerConfig:
    steps: int = 23
    crfm_steps: int = 4
    alpha: float | None = None  # None -> calibrated on the first rectified step
    alpha_ratio: float = 0.1
    seed: int = 0
    schedule: str = "linear"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.crfm_steps <= self.steps:
            raise ConfigError(f"crfm_steps must lie in [0, {self.steps}], got {self.crfm_steps}")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.alpha_ratio < 0:
            raise ConfigError("alpha_ratio must be >= 0")
        if self.schedule != "linear":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")


@dataclass
class StepRecord:
    step: int
    t: float
    v_norm: float
    ce: float | None = None
    g_norm: float | None = None
    alpha: float | None = None
    rel_correction: float | None = None
    state_touched: bool = False


@dataclass
class TrajectoryLog:
    records: list = field(default_factory=list)
    ce_per_sample: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def ce_curve(self):
        return [r.ce for r in self.records if r.ce is not None]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "t", "ce", "v_norm", "g_norm", "alpha", "rel_correction"])
            for r in self.records:
                w.writerow(
                    [r.step, f"{r.t:.6f}"]
                    + ["" if x is None else f"{x:.6g}" for x in (r.ce, r.v_norm, r.g_norm, r.alpha, r.rel_correction)]
                )


# -- algebra -------------------------------------------------------------------
def interpolate(z0, z1, t):
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"interpolate: t={t} outside [0, 1]")
    z0, z1 = np.asarray(z0), np.asarray(z1)
    if z0.shape != z1.shape:
        raise nx.ShapeError(f"interpolate: {z0.shape} vs {z1.shape}")
    return (1.0 - t) * z0 + t * z1


def sigma(t):
    return t


def presynth(z_t, t, v_pred):
    """Endpoint estimate ``z_t - sigma_t * v`` (works on arrays and on tape tensors)."""
    s = _per_sample(sigma(t), z_t)
    if isinstance(v_pred, nx.Tensor):
        z_t = z_t if isinstance(z_t, nx.Tensor) else nx.Tensor(z_t, dtype=v_pred.dtype)
        return z_t - v_pred * s
    return np.asarray(z_t) - s * np.asarray(v_pred)


def _per_sample(t, like):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return float(t)
    shape = (-1,) + (1,) * (np.ndim(like.data if isinstance(like, nx.Tensor) else like) - 1)
    return t.reshape(shape)


# -- training ------------------------------------------------------------------
def _stack(batch):
    z0 = np.stack([s.image for s in batch])
    masks = np.stack([s.mask for s in batch])
    cond = np.stack([s.cond_hist for s in batch])
    return z0, masks, cond


def rf_training_loss(net, batch, rng):
    """MSE between the predicted velocity at a random ``t`` and ``z1 - z0``."""
    if not batch:
        raise ValueError("rf_training_loss: empty batch")
    z0, masks, cond = _stack(batch)
    z1 = rng.standard_normal(z0.shape)
    t = rng.uniform(0.0, 1.0, size=len(batch))
    tt = t.reshape(-1, 1, 1, 1)
    z_t = ((1.0 - tt) * z0 + tt * z1).astype(net._dtype)
    target = (z1 - z0).astype(net._dtype)
    v = net.forward(z_t, masks, cond, t)
    return nx.mse(v, target)


def zero_predictor_baseline(samples):
    """Analytic loss of the constant-zero velocity: E|z1 - z0|^2 / dim = 1 + E[z0^2]."""
    z0 = np.stack([s.image for s in samples]).astype(np.float64)
    return 1.0 + float(np.mean(z0 * z0))


def train_flow(net, samples, steps=2000, batch_size=16, lr=1e-3, weight_decay=0.01, seed=0,
               log_every=0, on_log=None, start_step=0):
    """AdamW on the rectified-flow loss; returns the per-step losses."""
    rng = np.random.default_rng(seed)
    opt = nx.AdamW(net.parameters(), lr=lr, weight_decay=weight_decay)
    opt.state.step = 0
    losses = []
    n = len(samples)
    for step in range(start_step, start_step + steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        loss = rf_training_loss(net, [samples[i] for i in idx], rng)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite flow loss at step {step}", step)
        opt.zero_grad()
        nx.backward(loss)
        opt.step()
        losses.append(value)
        if log_every and (step + 1) % log_every == 0 and on_log is not None:
            on_log(step + 1, float(np.mean(losses[-log_every:])))
    return losses


# -- sampling ------------------------------------------------------------------
def _velocity(net, z, mask, cond, t):
    if hasattr(net, "velocity"):
        return net.velocity(z, mask, cond, np.full(len(z) if z.ndim == 4 else 1, t))
    return np.asarray(net(z, mask, cond, t), dtype=z.dtype)


def timesteps(n):
    return [i / n for i in range(n, 0, -1)]


def euler_sample(net, z1, mask, cond_hist, n_steps):
    """Integrate from ``t = 1`` to ``t = 0`` in ``n_steps`` equal Euler steps.

    ``net`` is a FlowNet or any callable ``f(z, mask, cond, t) -> v``.
    """
    if n_steps < 1:
        raise ConfigError("euler_sample needs at least one step")
    z = np.array(z1, copy=True)
    dt = -1.0 / n_steps
    for i in range(n_steps, 0, -1):
        v = _velocity(net, z, mask, cond_hist, i / n_steps)
        z = (z + v * dt).astype(z.dtype, copy=False)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite sampler state at step {i}", i)
    return z


def crfm_rectify(v_pred, z_t, t, mask, seg_net, alpha, num_classes=None):
    """One control-rectify step.

    Returns ``(v_rectified, ce, grad)`` where ``ce`` holds the per-sample
    cross-entropy of the segmentation of ``z_t - t * v_pred`` against ``mask``
    and ``grad`` its gradient with respect to ``v_pred``. ``alpha`` may be a
    scalar or one value per sample.
    """
    K = seg_net.cfg.num_classes
    if num_classes is not None and num_classes != K:
        raise ConfigError(f"segmentation net predicts {K} classes, flow expects {num_classes}")
    v_pred = np.asarray(v_pred)
    z_t = np.asarray(z_t)
    single = v_pred.ndim == 3
    if single:
        v_pred, z_t, mask = v_pred[None], z_t[None], np.asarray(mask)[None]
    mask = np.asarray(mask)
    lab = mask.reshape(len(mask), -1)
    if np.any((lab >= K) & (lab != IGNORE_INDEX)):
        raise ConfigError(f"mask holds labels outside the segmentation net's {K} classes")
    v = nx.Tensor(v_pred.astype(seg_net._dtype), requires_grad=True)
    x0 = presynth(nx.Tensor(z_t.astype(seg_net._dtype)), _per_sample(t, z_t), v)
    logits = seg_net.forward(x0)  # B x K x H x W
    B = len(mask)
    flat = nx.reshape(nx.transpose(logits, (0, 2, 3, 1)), (-1, K))
    valid = lab != IGNORE_INDEX
    counts = np.maximum(valid.sum(axis=1), 1)
    weights = (valid / counts[:, None]).reshape(-1)
    loss = nx.cross_entropy(flat, lab.reshape(-1), weights=weights)
    nll = nx.cross_entropy(flat.detach(), lab.reshape(-1), reduction="none").reshape(B, -1)
    ce = (nll * valid).sum(axis=1) / counts
    nx.backward(loss)
    g = v.grad.astype(v_pred.dtype)
    a = _per_sample(alpha, v_pred)
    v_rect = v_pred - a * g if np.any(np.asarray(alpha) != 0) else v_pred.copy()
    if single:
        return v_rect[0], ce[0], g[0]
    return v_rect, ce, g


def _norms(x):
    return np.sqrt(np.sum(np.asarray(x, dtype=np.float64).reshape(len(x), -1) ** 2, axis=1))


def crfm_sample(net, seg_net, z1, mask, cond_hist, cfg: SamplerConfig, num_classes=None):
    """Euler sampling with control rectification on the first ``cfg.crfm_steps`` steps.

    Returns ``(z0_hat, TrajectoryLog)``. Works on a single sample or a batch;
    each sample's trajectory is independent of the rest of the batch.
    """
    N, k = cfg.steps, cfg.crfm_steps
    if k == N and k > 0:
        warnings.warn(
            f"CRFM on all {N} steps; rectifying beyond half the trajectory tends to collapse modes",
            ModeCollapseWarning,
            stacklevel=2,
        )
    if num_classes is None and hasattr(net, "cfg"):
        num_classes = net.cfg.num_classes
    z = np.array(z1, copy=True)
    single = z.ndim == 3
    if single:
        z, mask, cond_hist = z[None], np.asarray(mask)[None], np.asarray(cond_hist)[None]
    logbook = TrajectoryLog()
    alpha = cfg.alpha
    dt = -1.0 / N
    for j, i in enumerate(range(N, 0, -1)):
        t = i / N
        v = _velocity(net, z, mask, cond_hist, t)
        rec = StepRecord(step=j, t=t, v_norm=float(np.mean(_norms(v))))
        if j < k:
            before = z.copy()
            _, ce, g = crfm_rectify(v, z, t, mask, seg_net, 0.0, num_classes)
            if alpha is None:
                alpha = cfg.alpha_ratio * _norms(v) / np.maximum(_norms(g), 1e-12)
                log.debug("calibrated alpha per sample: %s", alpha)
            a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (len(z),))
            v_new = v - (a.reshape(-1, 1, 1, 1) * g).astype(v.dtype) if np.any(a != 0) else v
            rec.state_touched = not np.array_equal(before, z)
            if rec.state_touched:
                raise RuntimeError("rectification modified the sampler state")
            gn = _norms(g)
            rec.ce = float(np.mean(ce))
            rec.g_norm = float(np.mean(gn))
            rec.alpha = float(np.mean(a))
            rec.rel_correction = float(np.mean(a * gn / np.maximum(_norms(v), 1e-12)))
            logbook.ce_per_sample.append(ce)
            v = v_new
        logbook.records.append(rec)
        z = (z + v * dt).astype(z.dtype, copy=False)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite sampler state at step {i}", i)
    return (z[0] if single else z), logbook


def sample_noise(shape, seed, dtype=np.float32):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)

