"""Run configuration: one JSON document covering every pipeline stage.

Unknown keys and wrongly typed values are rejected before any work starts,
and the error names the offending field path (e.g. ``flow.train.steps``).
"""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .flow import ConfigError, SamplerConfig
from .model import SCHEMES, FlowNetConfig
from .scenes import SceneConfig


@dataclass
class SceneSection:
    size: int = 16
    channels: int = 3
    num_classes: int = 6
    regions: list = field(default_factory=lambda: [2, 4])
    rare: dict = field(default_factory=lambda: {"5": 0.1})

    def build(self, seed):
        return SceneConfig(size=self.size, channels=self.channels, num_classes=self.num_classes,
                           regions=tuple(self.regions), rare={int(k): v for k, v in self.rare.items()}, seed=seed)


@dataclass
class DataSection:
    count: int = 200
    val_fraction: float = 0.2


@dataclass
class FlowTrainSection:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.01
    log_every: int = 100


@dataclass
class FlowSection:
    scheme: str = "tri"
    d_model: int = 32
    heads: int = 2
    depth: int = 2
    patch: int = 2
    cond_tokens: int = 1
    ff_mult: int = 2
    train: FlowTrainSection = field(default_factory=FlowTrainSection)

    def build(self, scene: SceneSection, scheme=None):
        return FlowNetConfig(image_size=scene.size, channels=scene.channels, num_classes=scene.num_classes,
                             d_model=self.d_model, heads=self.heads, depth=self.depth, patch=self.patch,
                             scheme=scheme or self.scheme, cond_tokens=self.cond_tokens, ff_mult=self.ff_mult)


@dataclass
class SegSection:
    width: int = 8
    steps: int = 300
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.01
    augment: bool = True


@dataclass
class SamplerSection:
    steps: int = 16
    crfm_steps: int = 4
    alpha: typing.Optional[float] = None
    alpha_ratio: float = 3.0

    def build(self, seed, **override):
        kw = {**asdict(self), **{k: v for k, v in override.items() if v is not None}}
        return SamplerConfig(seed=seed, **kw)


@dataclass
class FilterSection:
    class_filter: bool = True
    pixel_filter: bool = True
    phi: float = 1.25
    rare_set: list = field(default_factory=lambda: [5])
    min_classes: int = 3
    seeds_per_mask: int = 3


@dataclass
class DownstreamSection:
    steps: int = 300
    batch_size: int = 16
    lr: float = 2e-3
    width: int = 8
    augment: bool = True
    repeats: int = 1  # downstream trainings averaged per evaluation


@dataclass
class SweepSection:
    schemes: list = field(default_factory=lambda: ["tri"])
    steps: list = field(default_factory=lambda: [16])
    crfm_steps: list = field(default_factory=lambda: [0, 2, 4, 8])


@dataclass
class PathSection:
    workdir: str = "run"
    train: str = "train.tods"
    val: str = "val.tods"
    flow: str = "flow_{scheme}.todw"
    seg: str = "seg.todw"
    synth: str = "synth.tods"
    report: str = "synth_report.json"
    metrics: str = "metrics.json"
    sweep: str = "sweep.csv"
    pixmaps: str = "pixmaps"

    def resolve(self, name, **fmt):
        p = Path(getattr(self, name).format(**fmt))
        return p if p.is_absolute() else Path(self.workdir) / p


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneSection = field(default_factory=SceneSection)
    data: DataSection = field(default_factory=DataSection)
    flow: FlowSection = field(default_factory=FlowSection)
    seg: SegSection = field(default_factory=SegSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    filter: FilterSection = field(default_factory=FilterSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    paths: PathSection = field(default_factory=PathSection)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        """Cross-field checks; raises ConfigError naming the field."""
        checks = [
            ("data.count", self.data.count >= 1, "must be >= 1"),
            ("data.val_fraction", 0.0 < self.data.val_fraction < 1.0, "must lie in (0, 1)"),
            ("flow.scheme", self.flow.scheme in SCHEMES, f"must be one of {'|'.join(SCHEMES)}"),
            ("flow.train.steps", self.flow.train.steps >= 0, "must be >= 0"),
            ("flow.train.batch_size", self.flow.train.batch_size >= 1, "must be >= 1"),
            ("seg.steps", self.seg.steps >= 0, "must be >= 0"),
            ("filter.phi", self.filter.phi > 0, "must be positive"),
            ("filter.seeds_per_mask", self.filter.seeds_per_mask >= 1, "must be >= 1"),
            ("downstream.repeats", self.downstream.repeats >= 1, "must be >= 1"),
            ("sweep.schemes", all(s in SCHEMES for s in self.sweep.schemes), f"entries must be in {SCHEMES}"),
        ]
        for path, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{path}: {msg}")
        builders = [
            ("scene", lambda: self.scene.build(0)),
            ("flow", lambda: self.flow.build(self.scene)),
            ("sampler", lambda: self.sampler.build(0)),
        ]
        for path, build in builders:
            try:
                build()
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{path}: {e}") from None
        return self


_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list,), dict: (dict,)}


def _check_type(value, hint, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        options = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return value
        hint = options[0]
    allowed = _SCALARS.get(hint)
    if allowed is None:
        return value
    if isinstance(value, bool) and hint is not bool:
        raise ConfigError(f"{path}: expected {hint.__name__}, got bool")
    if not isinstance(value, allowed):
        raise ConfigError(f"{path}: expected {hint.__name__}, got {type(value).__name__}")
    return float(value) if hint is float else value


def from_dict(cls, data, path=""):
    """Build dataclass ``cls`` from a plain dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key")
    kwargs = {}
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        hint = hints[name]
        if is_dataclass(hint):
            kwargs[name] = from_dict(hint, value, where)
        else:
            kwargs[name] = _check_type(value, hint, where)
    return cls(**kwargs)


def load_config(path=None, overrides=None):
    """Read a RunConfig from JSON (defaults when ``path`` is None) and validate it."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    cfg = from_dict(RunConfig, data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        target = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            target = getattr(target, p)
        setattr(target, leaf, value)
    return cfg.validate()
