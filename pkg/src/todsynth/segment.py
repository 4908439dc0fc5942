"""Compact encoder-decoder segmentation net, its training loop, metrics and the pixel filter."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .layers import Module, load_checkpoint, save_checkpoint
from .numerics import IGNORE_INDEX


@dataclass
class SegNetConfig:
    in_channels: int = 3
    num_classes: int = 6
    width: int = 16


class SegNet(Module):
    """conv -> two stride-2 stages -> middle -> two upsampling stages with skips -> 1x1 head."""

    kind = "segnet"

    def __init__(self, cfg: SegNetConfig, seed=0, dtype=nx.DEFAULT_DTYPE):
        super().__init__(np.random.default_rng(seed), dtype)
        self.cfg = cfg
        w, c, K = cfg.width, cfg.in_channels, cfg.num_classes
        layers = {
            "enc": (w, c, 3),
            "down1": (2 * w, w, 3),
            "down2": (4 * w, 2 * w, 3),
            "mid": (4 * w, 4 * w, 3),
            "up2": (2 * w, 6 * w, 3),
            "up1": (w, 3 * w, 3),
            "head": (K, w, 1),
        }
        for name, (co, ci, k) in layers.items():
            self.add(f"{name}.w", (co, ci, k, k), std=np.sqrt(2.0 / (ci * k * k)))
            self.add(f"{name}.b", (co,), value=0.0)

    def config_dict(self):
        return asdict(self.cfg)

    def _conv(self, x, name, stride=1):
        k = self[f"{name}.w"].shape[-1]
        return nx.conv2d(x, self[f"{name}.w"], self[f"{name}.b"], stride=stride, padding=k // 2)

    def features(self, image):
        """Penultimate per-pixel features, B x width x H x W."""
        x = image if isinstance(image, nx.Tensor) else nx.Tensor(np.asarray(image, dtype=self._dtype))
        if x.ndim == 3:
            x = nx.reshape(x, (1,) + x.shape)
        if x.shape[1] != self.cfg.in_channels or x.shape[2] % 4 or x.shape[3] % 4:
            raise nx.ShapeError(f"segnet: input {x.shape} incompatible with config")
        e = nx.relu(self._conv(x, "enc"))
        d1 = nx.relu(self._conv(e, "down1", 2))
        d2 = nx.relu(self._conv(d1, "down2", 2))
        m = nx.relu(self._conv(d2, "mid"))
        u2 = nx.relu(self._conv(nx.concat([nx.upsample2x(m), d1], 1), "up2"))
        return nx.relu(self._conv(nx.concat([nx.upsample2x(u2), e], 1), "up1"))

    def forward(self, image):
        """Per-pixel logits B x K x H x W (K x H x W for a single image)."""
        single = np.ndim(image.data if isinstance(image, nx.Tensor) else image) == 3
        out = self._conv(self.features(image), "head")
        return nx.reshape(out, out.shape[1:]) if single else out

    __call__ = forward

    def predict(self, images, batch_size=64):
        images = np.asarray(images)
        out = []
        with nx.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i : i + batch_size]).data.argmax(axis=1).astype(np.uint8))
        return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], np.uint8)

    def pooled_features(self, images, batch_size=64):
        images = np.asarray(images)
        out = []
        with nx.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.features(images[i : i + batch_size]).data.mean(axis=(2, 3)))
        return np.concatenate(out).astype(np.float64)

    def save(self, path, extra=None):
        save_checkpoint(path, self.kind, self.config_dict(), self.state_dict(), extra)

    @classmethod
    def load(cls, path):
        kind, config, params, extra = load_checkpoint(path)
        if kind != cls.kind:
            raise ValueError(f"{path}: checkpoint holds a {kind}, not a {cls.kind}")
        net = cls(SegNetConfig(**config))
        net.load_state_dict(params)
        net.extra = extra
        return net


def seg_forward(net, image):
    return net.forward(image)


def seg_loss(net, images, masks):
    logits = net.forward(images)
    K = logits.shape[1]
    flat = nx.reshape(nx.transpose(logits, (0, 2, 3, 1)), (-1, K))
    return nx.cross_entropy(flat, np.asarray(masks).reshape(-1))


# -- augmentation ----------------------------------------------------------------
def augment_batch(images, masks, rng, crop_area=0.75):
    """Random h/v flips and a random ``crop_area`` crop resized back (nearest)."""
    images, masks = images.copy(), masks.copy()
    B, _, H, W = images.shape
    ch, cw = int(round(H * crop_area**0.5)), int(round(W * crop_area**0.5))
    for b in range(B):
        img, m = images[b], masks[b]
        if rng.random() < 0.5:
            img, m = img[:, :, ::-1], m[:, ::-1]
        if rng.random() < 0.5:
            img, m = img[:, ::-1, :], m[::-1, :]
        if rng.random() < 0.5:
            y, x = rng.integers(0, H - ch + 1), rng.integers(0, W - cw + 1)
            ry = y + (np.arange(H) * ch) // H
            rx = x + (np.arange(W) * cw) // W
            img, m = img[:, ry][:, :, rx], m[ry][:, rx]
        images[b], masks[b] = img, m
    return images, masks


def train_seg(dataset, epochs=30, augment=True, seed=0, batch_size=16, lr=2e-3, weight_decay=0.01,
              width=16, num_classes=None, steps=None, net=None, log_every=0, on_log=None):
    """Train a SegNet with AdamW and ignore-aware cross-entropy.

    ``steps`` fixes the number of optimizer updates regardless of dataset
    size; otherwise ``epochs`` passes over the data are made.
    """
    if not dataset:
        raise ValueError("train_seg: empty dataset")
    images = np.stack([s.image for s in dataset])
    masks = np.stack([s.mask for s in dataset])
    K = num_classes or len(dataset[0].cond_hist)
    rng = np.random.default_rng(seed)
    if net is None:
        net = SegNet(SegNetConfig(in_channels=images.shape[1], num_classes=K, width=width), seed=seed)
    opt = nx.AdamW(net.parameters(), lr=lr, weight_decay=weight_decay)
    n = len(dataset)
    per_epoch = max(1, -(-n // batch_size))
    total = steps if steps is not None else epochs * per_epoch
    order = rng.permutation(n)
    pos = 0
    recent = []
    for step in range(total):
        if pos >= n:
            order, pos = rng.permutation(n), 0
        idx = order[pos : pos + batch_size]
        pos += batch_size
        x, y = images[idx], masks[idx]
        if augment:
            x, y = augment_batch(x, y, rng)
        if np.all(y == IGNORE_INDEX):
            continue
        loss = seg_loss(net, x, y)
        if not np.isfinite(loss.item()):
            raise nx.NumericalError(f"non-finite segmentation loss at step {step}", step)
        opt.zero_grad()
        nx.backward(loss)
        opt.step()
        recent.append(loss.item())
        if log_every and (step + 1) % log_every == 0 and on_log is not None:
            on_log(step + 1, float(np.mean(recent[-log_every:])))
    return net


# -- metrics -------------------------------------------------------------------
@dataclass
class SegMetrics:
    oa: float
    miou: float
    macc: float
    iou: np.ndarray
    acc: np.ndarray
    confusion: np.ndarray = field(repr=False)

    def to_dict(self):
        return {
            "OA": self.oa,
            "mIoU": self.miou,
            "mAcc": self.macc,
            "per_class_IoU": [None if np.isnan(v) else float(v) for v in self.iou],
        }

    def to_json(self, **extra):
        return json.dumps({**self.to_dict(), **extra}, sort_keys=True)


def confusion_matrix(pred_maps, gt_maps, num_classes, ignore_index=IGNORE_INDEX):
    """K x K counts, rows = ground truth, columns = prediction; ignored gt pixels are skipped."""
    pred = np.asarray(pred_maps).reshape(-1).astype(np.int64)
    gt = np.asarray(gt_maps).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth sizes differ: {pred.shape} vs {gt.shape}")
    keep = gt != ignore_index
    pred, gt = pred[keep], gt[keep]
    if np.any(gt >= num_classes) or np.any(pred >= num_classes) or np.any(pred < 0):
        raise ValueError("label outside class range")
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def metrics_from_confusion(cm):
    total = cm.sum()
    if total == 0:
        raise ValueError("compute_metrics: no scored pixels")
    tp = np.diag(cm).astype(np.float64)
    gt_n = cm.sum(axis=1)
    pred_n = cm.sum(axis=0)
    union = gt_n + pred_n - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        acc = np.where(gt_n > 0, tp / gt_n, np.nan)
    return SegMetrics(
        oa=float(tp.sum() / total),
        miou=float(np.nanmean(iou)),
        macc=float(np.nanmean(acc)),
        iou=iou,
        acc=acc,
        confusion=cm,
    )


def compute_metrics(pred_maps, gt_maps, num_classes):
    """OA, mIoU and mAcc; classes absent from both prediction and ground truth are left out.

    Per-class accuracy is only defined for classes with ground-truth support,
    so a class that appears only in predictions counts towards mIoU (with
    IoU 0) but not towards mAcc.
    """
    return metrics_from_confusion(confusion_matrix(pred_maps, gt_maps, num_classes))


def evaluate(net, samples):
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return compute_metrics(net.predict(images), masks, net.cfg.num_classes)


# -- pixel filter ----------------------------------------------------------------
def pixel_ce(net, images, masks, batch_size=64):
    """Per-pixel cross-entropy (float64, B x H x W); ignored pixels get NaN."""
    images, masks = np.asarray(images), np.asarray(masks)
    single = images.ndim == 3
    if single:
        images, masks = images[None], masks[None]
    out = []
    with nx.no_grad():
        for i in range(0, len(images), batch_size):
            z = net.forward(images[i : i + batch_size]).data.astype(np.float64)
            m = masks[i : i + batch_size].astype(np.int64)
            lab = np.where(m == IGNORE_INDEX, 0, m)
            true = np.take_along_axis(z, lab[:, None], axis=1)
            others = np.exp(z - true)
            np.put_along_axis(others, lab[:, None], 0.0, axis=1)
            ce = np.log1p(others.sum(axis=1))
            out.append(np.where(m == IGNORE_INDEX, np.nan, ce))
    ce = np.concatenate(out)
    return ce[0] if single else ce


def calibrate_pixel_filter(net, val_samples):
    """Class-conditional mean per-pixel CE of ``net`` on real validation data."""
    K = net.cfg.num_classes
    images = np.stack([s.image for s in val_samples])
    masks = np.stack([s.mask for s in val_samples])
    ce = pixel_ce(net, images, masks)
    overall = float(np.nanmean(ce))
    means = np.full(K, overall)
    for c in range(K):
        sel = masks == c
        if sel.any():
            means[c] = float(ce[sel].mean())
    return means


def pixel_filter(image, mask, seg_net, phi=1.25, calibration=None):
    """Set to ignore-index every pixel whose CE exceeds ``phi`` times its class's calibrated mean.

    Returns ``(filtered_mask, ignored_fraction)``.
    """
    if calibration is None:
        raise ValueError("pixel_filter: missing calibration statistics (run calibrate_pixel_filter)")
    if phi <= 0:
        raise ValueError("pixel_filter: phi must be positive")
    mask = np.asarray(mask)
    ce = pixel_ce(seg_net, image, mask)
    cal = np.asarray(calibration, dtype=np.float64)
    valid = mask != IGNORE_INDEX
    thresh = np.where(valid, phi * cal[np.where(valid, mask, 0)], np.inf)
    drop = valid & (ce > thresh)
    out = np.where(drop, IGNORE_INDEX, mask).astype(np.uint8)
    return out, float(drop.mean())
