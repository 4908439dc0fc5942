"""Procedural land-cover scenes and the TODS dataset container.

A scene is a class map painted back-to-front from rectangles and elliptical
blobs, rendered as per-class base colour plus per-class texture noise.
Rare classes are gated by a Bernoulli draw and painted last so the draw
alone decides whether they appear.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import IGNORE_INDEX

MAGIC = b"TODS"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHHH")

_BASE_COLORS = [
    (0.25, 0.55, -0.25),  # cropland
    (-0.35, 0.25, -0.45),  # forest
    (-0.55, -0.25, 0.45),  # water
    (0.45, 0.40, 0.40),  # building
    (0.05, 0.05, 0.10),  # road
    (0.55, 0.15, -0.30),  # barren (rare by default)
]
_TEXTURE = [0.15, 0.30, 0.06, 0.25, 0.10, 0.20]

_PALETTE = [
    (255, 255, 0),
    (0, 128, 0),
    (0, 0, 255),
    (255, 0, 0),
    (160, 160, 160),
    (150, 75, 0),
]


class FormatError(ValueError):
    pass


@dataclass
class SceneConfig:
    size: int = 32
    channels: int = 3
    num_classes: int = 6
    base_colors: list | None = None
    texture: list | None = None
    regions: tuple = (2, 5)
    rare: dict = field(default_factory=lambda: {5: 0.1})
    seed: int = 0

    def __post_init__(self):
        K = self.num_classes
        if K < 2:
            raise ValueError("SceneConfig: need at least 2 classes")
        if K > 255:
            raise ValueError("SceneConfig: class ids must fit in u8 below the ignore index")
        if self.base_colors is None:
            extra = np.random.default_rng(1234).uniform(-0.7, 0.7, size=(max(K - 6, 0), self.channels))
            cols = [tuple(c[: self.channels]) for c in _BASE_COLORS[:K]]
            if self.channels > 3:
                cols = [c + (0.0,) * (self.channels - 3) for c in cols]
            self.base_colors = cols + [tuple(r) for r in extra]
        if self.texture is None:
            self.texture = (_TEXTURE + [0.15] * K)[:K]
        self.rare = {int(c): float(p) for c, p in dict(self.rare).items()}
        for c, p in self.rare.items():
            if not 0 <= c < K or not 0.0 < p < 1.0:
                raise ValueError(f"SceneConfig: bad rare class entry {c}: {p}")
        if len(self.base_colors) != K or len(self.texture) != K:
            raise ValueError("SceneConfig: colours/texture must have one entry per class")
        lo, hi = self.regions
        if lo < 1 or hi < lo:
            raise ValueError(f"SceneConfig: bad region range {self.regions}")

    @property
    def common_classes(self):
        return [c for c in range(self.num_classes) if c not in self.rare]

    def to_dict(self):
        return {
            "size": self.size,
            "channels": self.channels,
            "num_classes": self.num_classes,
            "base_colors": [list(map(float, c)) for c in self.base_colors],
            "texture": list(map(float, self.texture)),
            "regions": list(self.regions),
            "rare": {str(k): v for k, v in self.rare.items()},
            "seed": self.seed,
        }


@dataclass
class SceneSample:
    image: np.ndarray  # C x H x W float32 in [-1, 1]
    mask: np.ndarray  # H x W uint8
    cond_hist: np.ndarray  # K float64

    def __eq__(self, other):
        return (
            isinstance(other, SceneSample)
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.cond_hist, other.cond_hist)
        )


def class_histogram(mask, num_classes):
    """Per-class pixel fraction over the non-ignored pixels of ``mask``."""
    m = np.asarray(mask).reshape(-1)
    m = m[m != IGNORE_INDEX]
    if m.size == 0:
        raise ValueError("class_histogram: every pixel is ignored")
    if m.max() >= num_classes:
        raise ValueError(f"class_histogram: label {int(m.max())} >= {num_classes}")
    return np.bincount(m.astype(np.int64), minlength=num_classes).astype(np.float64) / m.size


def _paint_region(mask, rng, cls):
    S = mask.shape[0]
    if rng.random() < 0.5:
        h, w = rng.integers(S // 8, S // 2 + 1, size=2)
        y, x = rng.integers(0, S - h + 1), rng.integers(0, S - w + 1)
        mask[y : y + h, x : x + w] = cls
    else:
        cy, cx = rng.uniform(0, S, size=2)
        ry, rx = rng.uniform(S / 10, S / 4, size=2)
        yy, xx = np.mgrid[0:S, 0:S]
        mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = cls


def render(mask, cfg, rng):
    """Image for a class map: base colour + per-class texture noise, clamped to [-1, 1]."""
    S, C = mask.shape[0], cfg.channels
    colors = np.asarray(cfg.base_colors, dtype=np.float64)
    amp = np.asarray(cfg.texture, dtype=np.float64)
    lum = rng.normal(size=(S, S))
    chroma = rng.normal(size=(C, S, S)) * 0.3
    safe = np.where(mask == IGNORE_INDEX, 0, mask)
    img = colors[safe].transpose(2, 0, 1) + amp[safe][None] * (lum[None] + chroma)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def generate_scene(cfg, seed):
    """Deterministic scene for ``(cfg, seed)``."""
    rng = np.random.default_rng([cfg.seed, seed])
    S = cfg.size
    common = cfg.common_classes
    mask = np.full((S, S), rng.choice(common), dtype=np.uint8)
    n = rng.integers(cfg.regions[0], cfg.regions[1] + 1)
    for _ in range(n):
        _paint_region(mask, rng, rng.choice(common))
    for cls, p in sorted(cfg.rare.items()):
        if rng.random() < p:
            _paint_region(mask, rng, cls)
    image = render(mask, cfg, rng)
    return SceneSample(image=image, mask=mask, cond_hist=class_histogram(mask, cfg.num_classes))


def generate_dataset(cfg, count, base_seed=0):
    return [generate_scene(cfg, base_seed + i) for i in range(count)]


def split_train_val(samples, val_fraction=0.2, seed=0):
    """Seeded split; the validation part holds floor(len * val_fraction) samples."""
    n_val = int(len(samples) * val_fraction)
    order = np.random.default_rng(seed).permutation(len(samples))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


# -- container -----------------------------------------------------------------
def write_container(samples, path, num_classes=None):
    samples = list(samples)
    if samples:
        C, H, W = samples[0].image.shape
        K = num_classes if num_classes is not None else len(samples[0].cond_hist)
    else:
        C = H = W = 0
        K = num_classes or 0
    chunks = [_HEADER.pack(MAGIC, VERSION, len(samples), H, W, C, K)]
    for s in samples:
        if s.image.shape != (C, H, W) or s.mask.shape != (H, W):
            raise ValueError("write_container: samples must share one shape")
        chunks.append(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path):
    """Samples and header dict from a TODS file; raises :class:`FormatError` on damage."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: header truncated at byte {len(buf)}, need {_HEADER.size}")
    magic, version, count, H, W, C, K = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    rec = C * H * W * 4 + H * W
    expected = _HEADER.size + count * rec
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count} records, found {len(buf)}")
    out, off = [], _HEADER.size
    for _ in range(count):
        img = np.frombuffer(buf, dtype="<f4", count=C * H * W, offset=off).reshape(C, H, W)
        off += C * H * W * 4
        mask = np.frombuffer(buf, dtype=np.uint8, count=H * W, offset=off).reshape(H, W)
        off += H * W
        out.append(
            SceneSample(
                image=img.astype(np.float32),
                mask=mask.copy(),
                cond_hist=class_histogram(mask, K),
            )
        )
    return out, {"count": count, "H": H, "W": W, "C": C, "K": K, "version": version}


# -- pixmaps -------------------------------------------------------------------
def palette(num_classes):
    extra = np.random.default_rng(99).integers(0, 256, size=(max(num_classes - len(_PALETTE), 0), 3))
    return np.array(_PALETTE[:num_classes] + [tuple(r) for r in extra], dtype=np.uint8)


def _write_ppm(path, rgb):
    H, W, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (W, H) + rgb.astype(np.uint8).tobytes())


def image_to_bytes(image):
    img = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.rint((img + 1.0) * 127.5).astype(np.uint8)


def export_pixmap(sample, path_prefix, num_classes=None):
    """Write ``<prefix>_image.ppm`` and ``<prefix>_mask.ppm``; returns both paths."""
    K = num_classes or len(sample.cond_hist)
    img = image_to_bytes(sample.image)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    rgb = img[:3].transpose(1, 2, 0)
    pal = np.vstack([palette(K), np.full((256 - K, 3), 255, dtype=np.uint8)])
    mask_rgb = pal[sample.mask]
    ip, mp = Path(f"{path_prefix}_image.ppm"), Path(f"{path_prefix}_mask.ppm")
    _write_ppm(ip, rgb)
    _write_ppm(mp, mask_rgb)
    return ip, mp
