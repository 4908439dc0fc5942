"""Three-stream velocity-field transformer.

Streams: ``t`` (condition tokens built from the class histogram), ``z`` (image
patch tokens) and ``m`` (mask patch tokens). The mask is encoded per patch as
the fraction of pixels of each class. How the mask reaches the image stream
depends on the scheme:

``tri``
    one joint attention over ``[t, z, m]`` with per-stream Q/K/V projections.
``siamese``
    two joint attentions, ``[t, z]`` and ``[m, z]``, with independent
    parameters; their image-stream updates are summed.
``adapter``
    the backbone attends jointly over ``[t, z]``; image tokens additionally
    cross-attend to a static mask embedding through a residual adapter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .layers import Module, dense, load_checkpoint, rms_norm, save_checkpoint

SCHEMES = ("tri", "siamese", "adapter")
_SCHEME_ALIASES = {
    "triattention": "tri",
    "tri-attention": "tri",
    "siamesemm": "siamese",
    "maskadapter": "adapter",
    "mask-adapter": "adapter",
}


def canonical_scheme(name):
    key = str(name).strip().lower()
    key = _SCHEME_ALIASES.get(key, key)
    if key not in SCHEMES:
        raise ValueError(f"unknown conditioning scheme {name!r}; expected one of {SCHEMES}")
    return key


@dataclass
class FlowNetConfig:
    image_size: int = 32
    channels: int = 3
    num_classes: int = 6
    d_model: int = 64
    heads: int = 4
    depth: int = 4
    patch: int = 4
    scheme: str = "tri"
    cond_tokens: int = 1
    ff_mult: int = 2

    def __post_init__(self):
        self.scheme = canonical_scheme(self.scheme)
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.image_size % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.cond_tokens < 1:
            raise ValueError("cond_tokens must be >= 1")

    @property
    def grid(self):
        return self.image_size // self.patch

    @property
    def num_tokens(self):
        return self.grid * self.grid


def timestep_features(t, dim):
    """Sinusoidal features of ``t`` in [0, 1]; returns B x dim."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * t * freqs[None]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        feats = np.concatenate([feats, t], axis=1)
    return feats


def mask_patch_fractions(mask, num_classes, patch):
    """B x H x W class map -> B x L x K per-patch class fractions (ignored pixels count for nothing)."""
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    B, H, W = mask.shape
    onehot = (mask[..., None] == np.arange(num_classes)).astype(np.float64)
    g = H // patch
    frac = onehot.reshape(B, g, patch, g, patch, num_classes).mean(axis=(2, 4))
    return frac.reshape(B, g * g, num_classes)


def patchify(x, patch):
    B, C, H, W = x.shape
    g = H // patch
    x = nx.reshape(x, (B, C, g, patch, g, patch))
    x = nx.transpose(x, (0, 2, 4, 1, 3, 5))
    return nx.reshape(x, (B, g * g, C * patch * patch))


def unpatchify(x, channels, patch):
    B, L, _ = x.shape
    g = int(round(L**0.5))
    x = nx.reshape(x, (B, g, g, channels, patch, patch))
    x = nx.transpose(x, (0, 3, 1, 4, 2, 5))
    return nx.reshape(x, (B, channels, g * patch, g * patch))


def _heads(x, h):
    B, L, d = x.shape
    return nx.transpose(nx.reshape(x, (B, L, h, d // h)), (0, 2, 1, 3))


def _merge(x):
    B, h, L, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, L, h * dh))


def attention(q, k, v, heads):
    """Multi-head scaled dot-product attention on B x L x d inputs."""
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    w = nx.softmax(nx.matmul(qh, nx.transpose(kh, (0, 1, 3, 2))) * scale, axis=-1)
    return _merge(nx.matmul(w, vh))


def joint_attention(qs, ks, vs, heads):
    """Attention over the token-axis concatenation of several streams, split back per stream."""
    lens = [q.shape[1] for q in qs]
    out = attention(nx.concat(qs, 1), nx.concat(ks, 1), nx.concat(vs, 1), heads)
    return nx.split(out, lens, axis=1)


class FlowNet(Module):
    kind = "flownet"

    def __init__(self, cfg: FlowNetConfig, seed=0, dtype=nx.DEFAULT_DTYPE):
        super().__init__(np.random.default_rng(seed), dtype)
        self.cfg = cfg
        d, K, P = cfg.d_model, cfg.num_classes, cfg.channels * cfg.patch**2
        self.add("embed_z.w", (P, d))
        self.add("embed_z.b", (d,), value=0.0)
        self.add("embed_m.w", (K, d))
        self.add("embed_m.b", (d,), value=0.0)
        self.add("embed_t.w", (K, cfg.cond_tokens * d))
        self.add("embed_t.b", (cfg.cond_tokens * d,), value=0.0)
        self.add("pos", (cfg.num_tokens, d), std=0.1)
        self.add("pos_t", (cfg.cond_tokens, d), std=0.1)
        self.add("time1.w", (d, d))
        self.add("time1.b", (d,), value=0.0)
        self.add("time2.w", (d, d))
        self.add("time2.b", (d,), value=0.0)
        out_std = 0.5 / np.sqrt(d * cfg.depth)
        for i in range(cfg.depth):
            for s in self.attn_streams(cfg.scheme):
                self._add_attn(f"b{i}.{s}", d, out_std)
            for s in self.ff_streams(cfg.scheme):
                self.add(f"b{i}.ffnorm.{s}", (d,), value=1.0)
                self._add_ff(f"b{i}.ff.{s}", d, cfg.ff_mult * d, out_std)
            if cfg.scheme == "siamese":
                self._add_ff(f"b{i}.ffB.z", d, cfg.ff_mult * d, out_std)
            for s in self.norm_streams(cfg.scheme):
                self.add(f"b{i}.norm.{s}", (d,), value=1.0)
        self.add("head_norm", (d,), value=1.0)
        self.add("head.w", (d, P), std=0.1 / np.sqrt(d))
        self.add("head.b", (P,), value=0.0)

    @staticmethod
    def attn_streams(scheme):
        return {
            "tri": ("t", "z", "m"),
            "siamese": ("A.t", "A.z", "B.m", "B.z"),
            "adapter": ("t", "z", "ad.z", "ad.m"),
        }[scheme]

    @staticmethod
    def ff_streams(scheme):
        return ("t", "z") if scheme == "adapter" else ("t", "z", "m")

    @staticmethod
    def norm_streams(scheme):
        return ("t", "z", "ad") if scheme == "adapter" else ("t", "z", "m")

    def _add_attn(self, name, d, out_std):
        self.add(f"{name}.qkv.w", (d, 3 * d))
        self.add(f"{name}.qkv.b", (3 * d,), value=0.0)
        self.add(f"{name}.out.w", (d, d), std=out_std)
        self.add(f"{name}.out.b", (d,), value=0.0)

    def _add_ff(self, name, d, hidden, out_std):
        self.add(f"{name}1.w", (d, hidden))
        self.add(f"{name}1.b", (hidden,), value=0.0)
        self.add(f"{name}2.w", (hidden, d), std=out_std)
        self.add(f"{name}2.b", (d,), value=0.0)

    def config_dict(self):
        return asdict(self.cfg)

    # -- pieces --------------------------------------------------------------
    def _as_batch(self, z_t, mask, cond_hist, t):
        z = z_t if isinstance(z_t, nx.Tensor) else nx.Tensor(np.asarray(z_t, dtype=self._dtype))
        single = z.ndim == 3
        if single:
            z = nx.reshape(z, (1,) + z.shape)
        B = z.shape[0]
        mask = np.asarray(mask)
        if mask.ndim == 2:
            mask = mask[None]
        cond = np.asarray(cond_hist, dtype=np.float64).reshape(B, -1)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (B,))
        c = self.cfg
        if z.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise nx.ShapeError(f"image input {z.shape[1:]} does not match config")
        if mask.shape != (B, c.image_size, c.image_size) or cond.shape[1] != c.num_classes:
            raise nx.ShapeError(f"mask {mask.shape} / cond {cond.shape} do not match config")
        return z, mask, cond, t, single

    def embed_inputs(self, z_t, mask, cond_hist, t):
        """Token streams ``(h_t, h_z, h_m)`` for a batch (or a single unbatched sample)."""
        z, mask, cond, t, _ = self._as_batch(z_t, mask, cond_hist, t)
        c, d, B = self.cfg, self.cfg.d_model, z.shape[0]
        dt = self._dtype
        temb = nx.Tensor(timestep_features(t, d).astype(dt))
        temb = dense(self, nx.silu(dense(self, temb, "time1")), "time2")
        temb = nx.reshape(temb, (B, 1, d))
        h_z = dense(self, patchify(z, c.patch), "embed_z") + self["pos"] + temb
        frac = nx.Tensor(mask_patch_fractions(mask, c.num_classes, c.patch).astype(dt))
        h_m = dense(self, frac, "embed_m") + self["pos"] + temb
        h_t = dense(self, nx.Tensor(cond.astype(dt)), "embed_t")
        h_t = nx.reshape(h_t, (B, c.cond_tokens, d)) + self["pos_t"]
        return h_t, h_z, h_m

    def _qkv(self, name, x):
        return nx.split(dense(self, x, f"{name}.qkv"), [self.cfg.d_model] * 3, axis=2)

    def _joint(self, names, xs):
        qkv = [self._qkv(n, x) for n, x in zip(names, xs)]
        outs = joint_attention([a[0] for a in qkv], [a[1] for a in qkv], [a[2] for a in qkv], self.cfg.heads)
        return [dense(self, o, f"{n}.out") for n, o in zip(names, outs)]

    def _ff(self, name, x):
        return dense(self, nx.silu(dense(self, x, f"{name}1")), f"{name}2")

    def tri_attention(self, h_t, h_z, h_m, block=0):
        """Residual joint attention over ``[t, z, m]``, each stream with its own projections."""
        p = f"b{block}"
        n = [rms_norm(h, self[f"{p}.norm.{s}"]) for h, s in zip((h_t, h_z, h_m), "tzm")]
        o_t, o_z, o_m = self._joint([f"{p}.t", f"{p}.z", f"{p}.m"], n)
        return h_t + o_t, h_z + o_z, h_m + o_m

    def siamese_mm_attention(self, h_t, h_z, h_m, block=0):
        """Text-image block A and mask-image block B; image updates from both are summed."""
        p = f"b{block}"
        n_t, n_z, n_m = (rms_norm(h, self[f"{p}.norm.{s}"]) for h, s in zip((h_t, h_z, h_m), "tzm"))
        a_t, a_z = self._joint([f"{p}.A.t", f"{p}.A.z"], [n_t, n_z])
        b_m, b_z = self._joint([f"{p}.B.m", f"{p}.B.z"], [n_m, n_z])
        return h_t + a_t, h_z + a_z + b_z, h_m + b_m

    def backbone_attention(self, h_t, h_z, block=0):
        """Two-stream text-image unified attention (the adapter scheme's backbone)."""
        p = f"b{block}"
        n_t, n_z = rms_norm(h_t, self[f"{p}.norm.t"]), rms_norm(h_z, self[f"{p}.norm.z"])
        o_t, o_z = self._joint([f"{p}.t", f"{p}.z"], [n_t, n_z])
        return h_t + o_t, h_z + o_z

    def mask_adapter_attention(self, h_z, h_m, block=0):
        """``h_z + CrossAttn(Q=h_z, K=V=h_m)``; ``h_m`` is read, never updated."""
        p = f"b{block}.ad"
        q = nx.split(dense(self, rms_norm(h_z, self[f"b{block}.norm.ad"]), f"{p}.z.qkv"), [self.cfg.d_model] * 3, 2)[0]
        _, k, v = nx.split(dense(self, h_m, f"{p}.m.qkv"), [self.cfg.d_model] * 3, 2)
        o = attention(q, k, v, self.cfg.heads)
        return h_z + dense(self, o, f"{p}.z.out")

    def block(self, i, h_t, h_z, h_m, mask_stream=True):
        scheme = self.cfg.scheme
        if scheme == "tri":
            h_t, h_z, h_m = self.tri_attention(h_t, h_z, h_m, i)
        elif scheme == "siamese":
            h_t, h_z, h_m = self.siamese_mm_attention(h_t, h_z, h_m, i)
        else:
            h_t, h_z = self.backbone_attention(h_t, h_z, i)
            if mask_stream:
                h_z = self.mask_adapter_attention(h_z, h_m, i)
        streams = {"t": h_t, "z": h_z, "m": h_m}
        for s in self.ff_streams(scheme):
            x = streams[s]
            nrm = rms_norm(x, self[f"b{i}.ffnorm.{s}"])
            upd = self._ff(f"b{i}.ff.{s}", nrm)
            if scheme == "siamese" and s == "z":
                upd = upd + self._ff(f"b{i}.ffB.z", nrm)
            streams[s] = x + upd
        return streams["t"], streams["z"], streams["m"]

    def forward(self, z_t, mask, cond_hist, t, mask_stream=True):
        """Predicted velocity, same shape as ``z_t``.

        ``mask_stream=False`` (adapter scheme only) skips the adapter, giving
        the plain two-stream text-image model.
        """
        _, _, _, _, single = self._as_batch(z_t, mask, cond_hist, t)
        h_t, h_z, h_m = self.embed_inputs(z_t, mask, cond_hist, t)
        for i in range(self.cfg.depth):
            h_t, h_z, h_m = self.block(i, h_t, h_z, h_m, mask_stream)
        out = dense(self, rms_norm(h_z, self["head_norm"]), "head")
        v = unpatchify(out, self.cfg.channels, self.cfg.patch)
        if single:
            v = nx.reshape(v, v.shape[1:])
        return v

    __call__ = forward

    def velocity(self, z_t, mask, cond_hist, t):
        """Forward without recording; returns a plain array."""
        with nx.no_grad():
            return self.forward(z_t, mask, cond_hist, t).data

    def save(self, path, extra=None):
        save_checkpoint(path, self.kind, self.config_dict(), self.state_dict(), extra)

    @classmethod
    def load(cls, path):
        kind, config, params, extra = load_checkpoint(path)
        if kind != cls.kind:
            raise ValueError(f"{path}: checkpoint holds a {kind}, not a {cls.kind}")
        net = cls(FlowNetConfig(**config))
        net.load_state_dict(params)
        net.extra = extra
        return net
