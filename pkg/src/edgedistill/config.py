"""Experiment configuration: a flat key-value file with section prefixes.

The format is deliberately diff-friendly for experiment matrices::

    run.strategy = adaptive
    scene.preset = stationary
    algo.threshold = 0.8
    channel.uplink_mbps = 80

Unknown keys are rejected so typos fail loudly.  ``parse`` and ``render``
round-trip.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .distill import AlgoParams
from .netsim import ChannelConfig, SimLatencies
from .videogen import PRESETS, SceneConfig

RUN_MODES = ("sim", "socket")
STRATEGIES = ("adaptive", "naive", "fixed")
DISTILL_MODES = ("partial", "full")
TEACHER_KINDS = ("oracle", "net")

DEFAULT_SWEEP_MBPS = (90.0, 80.0, 60.0, 40.0, 20.0, 12.0, 8.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "desk"
    mode: str = "sim"
    strategy: str = "adaptive"
    distill: str = "partial"
    frames: int = 512
    fixed_stride: int = 8
    student_seed: int = 1

    def __post_init__(self):
        if self.mode not in RUN_MODES:
            raise ConfigError(f"run.mode must be one of {RUN_MODES}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"run.strategy must be one of {STRATEGIES}")
        if self.distill not in DISTILL_MODES:
            raise ConfigError(f"run.distill must be one of {DISTILL_MODES}")
        if self.frames < 1:
            raise ConfigError("run.frames must be >= 1")


@dataclass(frozen=True)
class TeacherConfig:
    kind: str = "oracle"
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TEACHER_KINDS:
            raise ConfigError(f"teacher.kind must be one of {TEACHER_KINDS}")


@dataclass(frozen=True)
class PretrainConfig:
    scenes: int = 64
    epochs: int = 15
    lr: float = 0.003
    seed: int = 7


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    scene: SceneConfig = field(default_factory=lambda: PRESETS["stationary"])
    scene_preset: Optional[str] = "stationary"
    algo: AlgoParams = field(default_factory=AlgoParams)
    channel_uplink_mbps: float = 80.0
    channel_downlink_mbps: float = 80.0
    channel_propagation_ms: float = 0.0
    channel_concurrency: str = "parallel"
    latency: SimLatencies = field(default_factory=SimLatencies)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sweep_mbps: tuple[float, ...] = DEFAULT_SWEEP_MBPS

    def channel(self) -> ChannelConfig:
        return ChannelConfig(
            uplink_bps=self.channel_uplink_mbps * 1e6,
            downlink_bps=self.channel_downlink_mbps * 1e6,
            propagation_s=self.channel_propagation_ms / 1e3,
            concurrency=self.channel_concurrency,
        )


_SCENE_FIELDS = {f.name for f in fields(SceneConfig)}
_ALGO_FIELDS = {f.name for f in fields(AlgoParams)}
_RUN_FIELDS = {f.name for f in fields(RunConfig)}
_LAT_FIELDS = {f.name for f in fields(SimLatencies)}
_TEACHER_FIELDS = {f.name for f in fields(TeacherConfig)}
_PRETRAIN_FIELDS = {f.name for f in fields(PretrainConfig)}


def _convert(raw: str, target_type):
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    return target_type(raw)


def apply_setting(cfg: ExperimentConfig, key: str, raw: str) -> ExperimentConfig:
    """Return a new config with ``section.field = raw`` applied."""
    if "." not in key:
        raise ConfigError(f"key {key!r} is missing its section prefix")
    section, name = key.split(".", 1)
    raw = raw.strip()
    try:
        if section == "run":
            if name == "seed":
                name = "student_seed"
            if name not in _RUN_FIELDS:
                raise ConfigError(f"unknown run key {name!r}")
            typ = type(getattr(cfg.run, name))
            return replace(cfg, run=replace(cfg.run, **{name: _convert(raw, typ)}))
        if section == "scene":
            if name == "preset":
                if raw not in PRESETS:
                    raise ConfigError(f"unknown preset {raw!r}; choices: {sorted(PRESETS)}")
                return replace(cfg, scene=PRESETS[raw], scene_preset=raw)
            if name not in _SCENE_FIELDS:
                raise ConfigError(f"unknown scene key {name!r}")
            typ = type(getattr(cfg.scene, name))
            return replace(cfg, scene=replace(cfg.scene, **{name: _convert(raw, typ)}), scene_preset=None)
        if section == "algo":
            if name not in _ALGO_FIELDS:
                raise ConfigError(f"unknown algo key {name!r}")
            typ = type(getattr(cfg.algo, name))
            return replace(cfg, algo=replace(cfg.algo, **{name: _convert(raw, typ)}))
        if section == "channel":
            if name in ("uplink_mbps", "downlink_mbps", "propagation_ms"):
                return replace(cfg, **{f"channel_{name}": float(raw)})
            if name == "concurrency":
                return replace(cfg, channel_concurrency=raw)
            raise ConfigError(f"unknown channel key {name!r}")
        if section == "latency":
            if name not in _LAT_FIELDS:
                raise ConfigError(f"unknown latency key {name!r}")
            return replace(cfg, latency=replace(cfg.latency, **{name: float(raw)}))
        if section == "teacher":
            if name not in _TEACHER_FIELDS:
                raise ConfigError(f"unknown teacher key {name!r}")
            typ = type(getattr(cfg.teacher, name))
            return replace(cfg, teacher=replace(cfg.teacher, **{name: _convert(raw, typ)}))
        if section == "pretrain":
            if name not in _PRETRAIN_FIELDS:
                raise ConfigError(f"unknown pretrain key {name!r}")
            typ = type(getattr(cfg.pretrain, name))
            return replace(cfg, pretrain=replace(cfg.pretrain, **{name: _convert(raw, typ)}))
        if section == "sweep":
            if name != "mbps":
                raise ConfigError(f"unknown sweep key {name!r}")
            return replace(cfg, sweep_mbps=tuple(float(v) for v in raw.split(",") if v.strip()))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    raise ConfigError(f"unknown config section {section!r}")


def parse(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = base if base is not None else ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, raw = stripped.split("=", 1)
        raw = raw.split(" #", 1)[0]
        cfg = apply_setting(cfg, key.strip(), raw)
    return cfg


def render(cfg: ExperimentConfig) -> str:
    """Write the config back out in the flat key-value format."""
    lines = []
    run = cfg.run
    lines += [
        f"run.scenario = {run.scenario}",
        f"run.mode = {run.mode}",
        f"run.strategy = {run.strategy}",
        f"run.distill = {run.distill}",
        f"run.frames = {run.frames}",
        f"run.fixed_stride = {run.fixed_stride}",
        f"run.student_seed = {run.student_seed}",
        "",
    ]
    if cfg.scene_preset and PRESETS.get(cfg.scene_preset) == cfg.scene:
        lines.append(f"scene.preset = {cfg.scene_preset}")
    else:
        for f in fields(SceneConfig):
            lines.append(f"scene.{f.name} = {getattr(cfg.scene, f.name)}")
    lines.append("")
    for f in fields(AlgoParams):
        lines.append(f"algo.{f.name} = {getattr(cfg.algo, f.name)}")
    lines += [
        "",
        f"channel.uplink_mbps = {cfg.channel_uplink_mbps}",
        f"channel.downlink_mbps = {cfg.channel_downlink_mbps}",
        f"channel.propagation_ms = {cfg.channel_propagation_ms}",
        f"channel.concurrency = {cfg.channel_concurrency}",
        "",
    ]
    for f in fields(SimLatencies):
        lines.append(f"latency.{f.name} = {getattr(cfg.latency, f.name)}")
    lines += [
        "",
        f"teacher.kind = {cfg.teacher.kind}",
        f"teacher.noise = {cfg.teacher.noise}",
        f"teacher.seed = {cfg.teacher.seed}",
        "",
        f"pretrain.scenes = {cfg.pretrain.scenes}",
        f"pretrain.epochs = {cfg.pretrain.epochs}",
        f"pretrain.lr = {cfg.pretrain.lr}",
        f"pretrain.seed = {cfg.pretrain.seed}",
        "",
        "sweep.mbps = " + ",".join(str(v) for v in cfg.sweep_mbps),
        "",
    ]
    return "\n".join(lines)
