"""Synthetic, temporally coherent labeled video streams.

Scenes are a textured background plus a handful of colored convex shapes
(disks and squares), one class per object, translating smoothly with
toroidal wrap-around.  Rendering and labeling share the same rasterization,
so the ground-truth segmentation is pixel-exact by construction.  Every
scene-change boundary resamples object set, colors and background texture.
All output is a pure function of the config seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .models import Frame

STREAM_MAGIC = b"SVID"
STREAM_VERSION = 1

CAMERA_MODES = ("fixed", "moving", "egocentric")

# stable-ish base colors per non-background class, jittered per scene epoch
_CLASS_COLORS = np.array(
    [(205, 60, 55), (55, 185, 70), (60, 90, 205), (210, 180, 40), (170, 60, 190)],
    dtype=np.int64,
)


class StreamFormatError(ValueError):
    """Stream file bytes do not parse."""


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    classes: int = 4
    objects: int = 3
    velocity: float = 1.0
    period: int = 600
    camera: str = "fixed"
    noise: float = 0.02
    seed: int = 0
    fps: int = 28

    def __post_init__(self):
        if self.camera not in CAMERA_MODES:
            raise ValueError(f"camera must be one of {CAMERA_MODES}")
        if self.velocity < 0:
            raise ValueError("velocity must be >= 0")
        if self.period < 1:
            raise ValueError("scene-change period must be >= 1")
        if self.classes < 2 or self.classes > len(_CLASS_COLORS) + 1:
            raise ValueError(f"classes must be in [2, {len(_CLASS_COLORS) + 1}]")


@dataclass(frozen=True)
class ObjectSpec:
    shape: str  # "disk" | "square"
    cls: int
    size: float  # disk radius or square half-side, px
    y0: float
    x0: float
    vy: float
    vx: float
    color: tuple[int, int, int]

    @property
    def perimeter(self) -> float:
        return 2.0 * math.pi * self.size if self.shape == "disk" else 8.0 * self.size


@dataclass
class LabeledStream:
    frames: np.ndarray  # (n, H, W, C) uint8
    labels: np.ndarray  # (n, H, W) uint8
    fps: int
    epochs: list[list[ObjectSpec]]

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __iter__(self) -> Iterator[tuple[Frame, np.ndarray]]:
        for i in range(len(self)):
            yield Frame(i, self.frames[i]), self.labels[i]

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def _sample_epoch(cfg: SceneConfig, epoch: int) -> tuple[list[ObjectSpec], np.ndarray]:
    rng = np.random.default_rng((cfg.seed, 1, epoch))
    h, w = cfg.height, cfg.width
    # coarse grayscale texture so object colors stay separable
    cells = rng.integers(45, 215, size=(max(1, h // 8), max(1, w // 8), 1))
    tint = rng.integers(-14, 15, size=(1, 1, 3))
    texture = np.clip(cells + tint, 0, 255).astype(np.uint8)
    texture = np.kron(texture, np.ones((8, 8, 1), dtype=np.uint8))[:h, :w]
    if texture.shape[2] == 1:
        texture = np.repeat(texture, 3, axis=2)

    objs: list[ObjectSpec] = []
    lo, hi = max(5, min(h, w) // 8), min(h, w) // 5
    for i in range(cfg.objects):
        size = float(rng.integers(lo, hi + 1))
        angle = rng.uniform(0.0, 2.0 * math.pi)
        jitter = rng.integers(-25, 26, size=3)
        cls = 1 + i % (cfg.classes - 1)
        color = tuple(int(v) for v in np.clip(_CLASS_COLORS[cls - 1] + jitter, 0, 255))
        objs.append(
            ObjectSpec(
                shape="disk" if rng.random() < 0.5 else "square",
                cls=cls,
                size=size,
                y0=float(rng.uniform(0, h)),
                x0=float(rng.uniform(0, w)),
                vy=cfg.velocity * math.sin(angle),
                vx=cfg.velocity * math.cos(angle),
                color=color,
            )
        )
    footprint = sum((2 * o.size + 1) ** 2 for o in objs)
    if footprint > 0.6 * h * w:
        raise ValueError(
            f"{cfg.objects} objects need {footprint:.0f}px^2, over 60% of the {h}x{w} canvas"
        )
    return objs, texture


def _camera_track(cfg: SceneConfig, epoch: int, frames_in_epoch: int) -> np.ndarray:
    rng = np.random.default_rng((cfg.seed, 2, epoch))
    if cfg.camera == "fixed":
        return np.zeros((frames_in_epoch, 2), dtype=np.int64)
    if cfg.camera == "moving":
        angle = rng.uniform(0.0, 2.0 * math.pi)
        t = np.arange(frames_in_epoch, dtype=np.float64)
        track = np.stack([cfg.velocity * math.sin(angle) * t, cfg.velocity * math.cos(angle) * t], axis=1)
        return np.floor(track + 0.5).astype(np.int64)
    steps = rng.integers(-2, 3, size=(frames_in_epoch, 2))
    steps[0] = 0
    return np.cumsum(steps, axis=0)


def _toroidal_delta(coords: np.ndarray, center: float, extent: int) -> np.ndarray:
    return (coords - center + extent / 2.0) % extent - extent / 2.0


def _render(cfg: SceneConfig, objs: Sequence[ObjectSpec], texture: np.ndarray,
            t: int, cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    img = np.roll(texture, shift=(-int(cam[0]), -int(cam[1])), axis=(0, 1)).copy()
    seg = np.zeros((h, w), dtype=np.uint8)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    for obj in objs:
        cy = (obj.y0 + obj.vy * t - cam[0]) % h
        cx = (obj.x0 + obj.vx * t - cam[1]) % w
        dy = _toroidal_delta(ys, cy, h)
        dx = _toroidal_delta(xs, cx, w)
        if obj.shape == "disk":
            mask = dy * dy + dx * dx <= obj.size * obj.size
        else:
            mask = (np.abs(dy) <= obj.size) & (np.abs(dx) <= obj.size)
        img[mask] = obj.color
        seg[mask] = obj.cls
    return img, seg


def generate(cfg: SceneConfig, n: int) -> LabeledStream:
    """Render ``n`` frames with pixel-exact ground-truth labels."""
    if n < 1:
        raise ValueError("need at least one frame")
    frames = np.empty((n, cfg.height, cfg.width, 3), dtype=np.uint8)
    labels = np.empty((n, cfg.height, cfg.width), dtype=np.uint8)
    epochs: list[list[ObjectSpec]] = []
    noise_mag = int(round(cfg.noise * 255))
    for start in range(0, n, cfg.period):
        epoch = start // cfg.period
        count = min(cfg.period, n - start)
        objs, texture = _sample_epoch(cfg, epoch)
        epochs.append(objs)
        cams = _camera_track(cfg, epoch, count)
        for t in range(count):
            img, seg = _render(cfg, objs, texture, t, cams[t])
            if noise_mag > 0:
                rng = np.random.default_rng((cfg.seed, 3, start + t))
                grain = rng.integers(-noise_mag, noise_mag + 1, size=img.shape)
                img = np.clip(img.astype(np.int16) + grain, 0, 255).astype(np.uint8)
            frames[start + t] = img
            labels[start + t] = seg
    return LabeledStream(frames=frames, labels=labels, fps=cfg.fps, epochs=epochs)


def resample_fps(stream: LabeledStream, source_fps: int, target_fps: int) -> LabeledStream:
    """Decimate to a lower frame rate; target must divide the source rate."""
    if target_fps < 1 or source_fps % target_fps != 0:
        raise ValueError(f"{target_fps} fps does not divide {source_fps} fps")
    step = source_fps // target_fps
    return LabeledStream(
        frames=stream.frames[::step].copy(),
        labels=stream.labels[::step].copy(),
        fps=target_fps,
        epochs=stream.epochs,
    )


def label_change_fraction(stream: LabeledStream) -> float:
    """Mean fraction of pixels whose label differs between consecutive frames."""
    if len(stream) < 2:
        return 0.0
    diffs = stream.labels[1:] != stream.labels[:-1]
    return float(diffs.mean())


# ---------------------------------------------------------------------------
# stream files


def save_stream(stream: LabeledStream, classes: int) -> bytes:
    n, h, w, c = stream.frames.shape
    out = bytearray()
    out += STREAM_MAGIC
    out += _STREAM_HEADER.pack(STREAM_VERSION, h, w, c, classes, stream.fps, n)
    for i in range(n):
        out += stream.frames[i].tobytes()
        out += stream.labels[i].tobytes()
    return bytes(out)


_STREAM_HEADER = struct.Struct("<HHHBBHQ")
_STREAM_HEADER_LEN = len(STREAM_MAGIC) + _STREAM_HEADER.size


def load_stream(data: bytes) -> tuple[LabeledStream, int]:
    if len(data) < _STREAM_HEADER_LEN:
        raise StreamFormatError("shorter than the fixed header")
    if data[:4] != STREAM_MAGIC:
        raise StreamFormatError(f"bad magic {data[:4]!r}")
    version, h, w, c, classes, fps, n = _STREAM_HEADER.unpack_from(data, 4)
    if version != STREAM_VERSION:
        raise StreamFormatError(f"unsupported stream version {version}")
    frame_bytes = h * w * c
    seg_bytes = h * w
    need = _STREAM_HEADER_LEN + n * (frame_bytes + seg_bytes)
    if len(data) != need:
        raise StreamFormatError(f"expected {need} bytes, got {len(data)}")
    frames = np.empty((n, h, w, c), dtype=np.uint8)
    labels = np.empty((n, h, w), dtype=np.uint8)
    off = _STREAM_HEADER_LEN
    for i in range(n):
        frames[i] = np.frombuffer(data, np.uint8, frame_bytes, off).reshape(h, w, c)
        off += frame_bytes
        labels[i] = np.frombuffer(data, np.uint8, seg_bytes, off).reshape(h, w)
        off += seg_bytes
    return LabeledStream(frames=frames, labels=labels, fps=fps, epochs=[]), classes


# ---------------------------------------------------------------------------
# difficulty presets, roughly ordered by how hard they are to track


PRESETS: dict[str, SceneConfig] = {
    "stationary": SceneConfig(camera="fixed", velocity=0.0, period=1_000_000_000, noise=0.0),
    "fixed-people": SceneConfig(camera="fixed", velocity=0.6, period=800),
    "fixed-animals": SceneConfig(camera="fixed", velocity=1.0, period=500),
    "fixed-street": SceneConfig(camera="fixed", velocity=1.6, period=120),
    "moving-people": SceneConfig(camera="moving", velocity=0.8, period=800),
    "moving-animals": SceneConfig(camera="moving", velocity=1.0, period=500),
    "moving-street": SceneConfig(camera="moving", velocity=1.8, period=120),
    "ego-people": SceneConfig(camera="egocentric", velocity=0.8, period=600),
}


def preset(name: str, **overrides) -> SceneConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choices: {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


def make_corpus(
    count: int = 64,
    seed: int = 7,
    height: int = 64,
    width: int = 64,
    classes: int = 4,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pre-training corpus: one frame from each of ``count`` varied scenes.

    Object counts, camera modes and velocities are mixed (including empty
    scenes) so the student sees the whole label distribution.
    """
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(count):
        cfg = SceneConfig(
            height=height,
            width=width,
            classes=classes,
            objects=int(rng.integers(0, classes)),
            camera=CAMERA_MODES[int(rng.integers(0, len(CAMERA_MODES)))],
            velocity=float(rng.uniform(0.0, 2.0)),
            period=50,
            seed=int(rng.integers(0, 2**32)),
        )
        s = generate(cfg, 2)
        corpus.append((s.frames[1], s.labels[1]))
    return corpus
