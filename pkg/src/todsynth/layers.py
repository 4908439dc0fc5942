"""Parameter containers, shared layer helpers and the TODW weight checkpoint."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import numerics as nx

MAGIC = b"TODW"
VERSION = 1


class Module:
    """Flat ``name -> Tensor`` parameter store; subclasses build forward passes on top."""

    kind = "module"

    def __init__(self, rng=None, dtype=nx.DEFAULT_DTYPE):
        self.params = {}
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self._dtype = dtype

    def add(self, name, shape, std=None, value=None):
        if value is not None:
            arr = np.full(shape, value, dtype=np.float64)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            s = 1.0 / np.sqrt(fan_in) if std is None else std
            arr = self._rng.normal(0.0, s, size=shape)
        self.params[name] = nx.Tensor(arr.astype(self._dtype), requires_grad=True)
        return self.params[name]

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def num_params(self, prefix=""):
        return int(sum(p.size for n, p in self.params.items() if n.startswith(prefix)))

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._dtype = dtype
        return self

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state dict mismatch on {sorted(missing)[:5]}")
        for n, arr in state.items():
            if arr.shape != self.params[n].shape:
                raise ValueError(f"{n}: shape {arr.shape} != {self.params[n].shape}")
            self.params[n].data = np.asarray(arr, dtype=self._dtype).copy()

    def config_dict(self):
        raise NotImplementedError


def rms_norm(x, scale, eps=1e-6):
    ms = nx.mean(x * x, axis=-1, keepdims=True)
    return x / nx.sqrt(ms + eps) * scale


def dense(mod, x, name):
    return nx.matmul(x, mod[name + ".w"]) + mod[name + ".b"]


# -- TODW checkpoints ------------------------------------------------------------
def save_checkpoint(path, kind, config, params, extra=None):
    """Write named float32 parameter blobs after a JSON config echo."""
    meta = json.dumps({"kind": kind, "config": config, "extra": extra or {}}, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    """Return ``(kind, config, params, extra)`` from a TODW file."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r} at byte offset 0")
    version, mlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(buf[off : off + mlen])
    off += mlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape))
            params[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
    except (struct.error, ValueError) as e:
        raise ValueError(f"{path}: truncated checkpoint near byte offset {off}") from e
    return meta["kind"], meta["config"], params, meta.get("extra", {})
