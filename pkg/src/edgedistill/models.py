"""Student/teacher model definitions, weight-diff exchange and checkpoints.

The student is a small fully-convolutional encoder/decoder: two stride-2
"down" blocks, a stack of same-resolution "mid" blocks, then "fuse"/"head"
blocks that concatenate the matching down-block features back in and
upsample, so the output resolution equals the input resolution.  A freeze
boundary splits the block list into a frozen prefix and a trainable suffix;
only the suffix is ever trained or shipped over the network during a
distillation session.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tape as T
from .metrics import argmax_segmap, mean_iou, weight_mask, weighted_ce_loss
from .tape import AdamState, ShapeError, Tape, Tensor

CHECKPOINT_MAGIC = b"STUT"
CHECKPOINT_VERSION = 1

KIND_DOWN = "down"
KIND_MID = "mid"
KIND_FUSE = "fuse"
KIND_HEAD = "head"
_KIND_CODES = {KIND_DOWN: 1, KIND_MID: 2, KIND_FUSE: 3, KIND_HEAD: 4}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class ArchError(ValueError):
    """Invalid architecture descriptor."""


class CheckpointError(ValueError):
    """Base class for checkpoint decode failures."""


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DescriptorError(CheckpointError):
    """Block descriptor fields are out of range or inconsistent."""


class DeltaMismatchError(ValueError):
    """A weight delta does not match the receiving model's trainable suffix."""


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_ch: int
    out_ch: int
    kernel: int


@dataclass(frozen=True)
class ArchSpec:
    """Block list plus the index of the first trainable block."""

    blocks: tuple[BlockSpec, ...]
    freeze_boundary: int

    def __post_init__(self):
        if len(self.blocks) < 2:
            raise ArchError("need at least 2 blocks for a nontrivial freeze boundary")
        if not 0 <= self.freeze_boundary <= len(self.blocks):
            raise ArchError(
                f"freeze boundary {self.freeze_boundary} outside [0, {len(self.blocks)}]"
            )
        downs = [b.kind for b in self.blocks if b.kind == KIND_DOWN]
        ups = [b for b in self.blocks if b.kind in (KIND_FUSE, KIND_HEAD)]
        if len(downs) != len(ups):
            raise ArchError("down blocks and upsampling (fuse/head) blocks must pair up")
        if self.blocks[-1].kind != KIND_HEAD:
            raise ArchError("last block must be the classifier head")
        skips = self.skip_sources()
        prev = self.blocks[0].in_ch
        for i, b in enumerate(self.blocks):
            expected = prev + (self.blocks[skips[i]].out_ch if i in skips else 0)
            if b.in_ch != expected:
                raise ArchError(f"block {i} expects {b.in_ch} input channels, wiring gives {expected}")
            if b.kernel % 2 == 0 or b.kernel < 1:
                raise ArchError(f"block {i} kernel must be odd and >= 1")
            prev = b.out_ch

    @property
    def classes(self) -> int:
        return self.blocks[-1].out_ch

    @property
    def in_channels(self) -> int:
        return self.blocks[0].in_ch

    def skip_sources(self) -> dict[int, int]:
        """Map from fuse/head block index to the down block whose output it
        concatenates (pairs nest: first up block takes the deepest down)."""
        down_idx = [i for i, b in enumerate(self.blocks) if b.kind == KIND_DOWN]
        up_idx = [i for i, b in enumerate(self.blocks) if b.kind in (KIND_FUSE, KIND_HEAD)]
        return {u: d for u, d in zip(up_idx, reversed(down_idx))}

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for i, b in enumerate(self.blocks):
            shapes.append((f"b{i}.w", (b.out_ch, b.in_ch, b.kernel, b.kernel)))
            shapes.append((f"b{i}.b", (b.out_ch,)))
        return shapes

    def block_of_key(self, key: str) -> int:
        return int(key[1 : key.index(".")])

    def trainable_keys(self) -> list[str]:
        return [k for k, _ in self.param_shapes() if self.block_of_key(k) >= self.freeze_boundary]

    def param_count(self, keys: Optional[Iterable[str]] = None) -> int:
        shapes = dict(self.param_shapes())
        if keys is None:
            keys = shapes.keys()
        return sum(int(np.prod(shapes[k])) for k in keys)

    def trainable_fraction(self) -> float:
        return self.param_count(self.trainable_keys()) / self.param_count()


def desk_student_arch(classes: int = 4, freeze_boundary: int = 4) -> ArchSpec:
    """Default desk-scale student: 21 380 parameters, 4 724 of them trainable
    behind the default boundary (fraction ~0.221)."""
    return ArchSpec(
        blocks=(
            BlockSpec(KIND_DOWN, 3, 8, 5),
            BlockSpec(KIND_DOWN, 8, 16, 5),
            BlockSpec(KIND_MID, 16, 16, 5),
            BlockSpec(KIND_MID, 16, 16, 5),
            BlockSpec(KIND_FUSE, 32, 16, 3),
            BlockSpec(KIND_HEAD, 24, classes, 1),
        ),
        freeze_boundary=freeze_boundary,
    )


def desk_teacher_arch(classes: int = 4) -> ArchSpec:
    """Server-side network: same op set, ~62x the student's parameter count."""
    return ArchSpec(
        blocks=(
            BlockSpec(KIND_DOWN, 3, 64, 5),
            BlockSpec(KIND_DOWN, 64, 128, 5),
            BlockSpec(KIND_MID, 128, 128, 5),
            BlockSpec(KIND_MID, 128, 128, 5),
            BlockSpec(KIND_FUSE, 256, 128, 3),
            BlockSpec(KIND_HEAD, 192, classes, 1),
        ),
        freeze_boundary=4,
    )


_STOCK_ARCHS = {"desk-student": desk_student_arch, "desk-teacher": desk_teacher_arch}


@dataclass
class StudentModel:
    spec: ArchSpec
    params: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=lambda: AdamState(lr=0.01))
    seed: int = 0

    def trainable_params(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in self.spec.trainable_keys()}

    def copy(self) -> "StudentModel":
        return StudentModel(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            adam=AdamState(lr=self.adam.lr),
            seed=self.seed,
        )


def build_student(arch: "ArchSpec | str" = "desk-student", classes: int = 4, seed: int = 0) -> StudentModel:
    """Deterministically initialize a model (He fan-in kernels, zero biases)."""
    spec = _STOCK_ARCHS[arch](classes) if isinstance(arch, str) else arch
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for key, shape in spec.param_shapes():
        if key.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[key] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
        else:
            params[key] = np.zeros(shape, dtype=np.float32)
    return StudentModel(spec=spec, params=params, seed=seed)


# ---------------------------------------------------------------------------
# forward


@dataclass(frozen=True)
class Frame:
    """One video frame: stream position plus raw 8-bit HWC pixels."""

    index: int
    pixels: np.ndarray


def _forward_graph(model: StudentModel, pixels: np.ndarray, tape: Tape) -> Tensor:
    if pixels.ndim != 3 or pixels.shape[2] != model.spec.in_channels:
        raise ShapeError(
            f"expected HxWx{model.spec.in_channels} pixels, got {pixels.shape}"
        )
    spec = model.spec
    x_data = (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]
    x = tape.constant(np.ascontiguousarray(x_data))
    skips = spec.skip_sources()
    outputs: list[Tensor] = []
    for i, blk in enumerate(spec.blocks):
        w = tape.leaf(model.params[f"b{i}.w"], key=f"b{i}.w", layer=i)
        b = tape.leaf(model.params[f"b{i}.b"], key=f"b{i}.b", layer=i)
        pad = blk.kernel // 2
        if blk.kind == KIND_DOWN:
            x = T.relu(T.conv2d(x, w, b, stride=2, pad=pad))
        elif blk.kind == KIND_MID:
            x = T.relu(T.conv2d(x, w, b, stride=1, pad=pad))
        elif blk.kind == KIND_FUSE:
            x = T.concat_channels([x, outputs[skips[i]]])
            x = T.upsample2x(T.relu(T.conv2d(x, w, b, stride=1, pad=pad)))
        else:  # head
            x = T.concat_channels([x, outputs[skips[i]]])
            x = T.upsample2x(T.conv2d(x, w, b, stride=1, pad=pad))
        outputs.append(x)
    return T.softmax_channels(x)


def forward(model: StudentModel, frame: "Frame | np.ndarray") -> np.ndarray:
    """Plain inference pass: (K, H, W) probability map for one frame."""
    pixels = frame.pixels if isinstance(frame, Frame) else frame
    tape = Tape(freeze_boundary=len(model.spec.blocks) + 1)  # nothing trainable
    return _forward_graph(model, pixels, tape).data[0]


def forward_recorded(
    model: StudentModel, pixels: np.ndarray, freeze_boundary: Optional[int] = None
) -> tuple[Tape, Tensor]:
    """Forward pass recorded for a later partial backward."""
    boundary = model.spec.freeze_boundary if freeze_boundary is None else freeze_boundary
    tape = Tape(freeze_boundary=boundary)
    probs = _forward_graph(model, pixels, tape)
    return tape, probs


# ---------------------------------------------------------------------------
# teachers


class OracleTeacher:
    """Teacher that reads the stream generator's ground truth.

    With ``noise`` > 0, each pixel is independently reassigned to a different
    class with that probability (seeded, reproducible per frame index).
    """

    def __init__(self, labels: Sequence[np.ndarray], classes: int, noise: float = 0.0, seed: int = 0):
        self.labels = labels
        self.classes = classes
        self.noise = noise
        self.seed = seed

    def infer(self, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        seg = np.array(self.labels[frame.index], dtype=np.uint8, copy=True)
        if self.noise > 0.0:
            rng = np.random.default_rng((self.seed, frame.index))
            flip = rng.random(seg.shape) < self.noise
            bump = rng.integers(1, self.classes, size=seg.shape, dtype=np.uint8)
            seg[flip] = (seg[flip] + bump[flip]) % self.classes
        h, w = seg.shape
        probs = np.zeros((self.classes, h, w), dtype=np.float32)
        np.put_along_axis(probs, seg[None].astype(np.int64), 1.0, axis=0)
        return seg, probs


class NetTeacher:
    """Teacher backed by a larger network of the same op set."""

    def __init__(self, model: StudentModel):
        self.model = model

    def infer(self, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        probs = forward(self.model, frame)
        return argmax_segmap(probs), probs


Teacher = OracleTeacher | NetTeacher


def teacher_infer(teacher: Teacher, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
    """(SegMap, ProbMap) for one frame; SegMap is the ProbMap argmax."""
    return teacher.infer(frame)


# ---------------------------------------------------------------------------
# weight deltas


@dataclass(frozen=True)
class DeltaEntry:
    tensor_id: int
    values: np.ndarray


@dataclass(frozen=True)
class WeightDelta:
    """Current values of exactly the trainable parameter tensors."""

    entries: tuple[DeltaEntry, ...]

    @property
    def value_bytes(self) -> int:
        return sum(4 * e.values.size for e in self.entries)


def _tensor_ids(spec: ArchSpec) -> dict[str, int]:
    return {key: i for i, (key, _) in enumerate(spec.param_shapes())}


def extract_diff(model: StudentModel) -> WeightDelta:
    ids = _tensor_ids(model.spec)
    return WeightDelta(
        entries=tuple(
            DeltaEntry(ids[k], model.params[k].copy()) for k in model.spec.trainable_keys()
        )
    )


def apply_update(model: StudentModel, delta: WeightDelta) -> StudentModel:
    """Overwrite the trainable suffix from ``delta``; frozen prefix untouched."""
    ids = _tensor_ids(model.spec)
    keys = model.spec.trainable_keys()
    if len(delta.entries) != len(keys):
        raise DeltaMismatchError(
            f"delta has {len(delta.entries)} tensors, model expects {len(keys)}"
        )
    for key, entry in zip(keys, delta.entries):
        if entry.tensor_id != ids[key]:
            raise DeltaMismatchError(f"tensor id {entry.tensor_id} != expected {ids[key]}")
        if entry.values.shape != model.params[key].shape:
            raise DeltaMismatchError(
                f"tensor {key} shape {entry.values.shape} != {model.params[key].shape}"
            )
        model.params[key][...] = entry.values
    return model


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: StudentModel) -> bytes:
    spec = model.spec
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<HH", CHECKPOINT_VERSION, len(spec.blocks))
    for b in spec.blocks:
        for v in (b.in_ch, b.out_ch, b.kernel):
            if not 0 < v <= 0xFFFF:
                raise DescriptorError(f"block field {v} out of u16 range")
        out += struct.pack("<BHHH", _KIND_CODES[b.kind], b.in_ch, b.out_ch, b.kernel)
    out += struct.pack("<H", spec.freeze_boundary)
    for key, _ in spec.param_shapes():
        out += model.params[key].astype("<f4", copy=False).tobytes()
    return bytes(out)


def load_checkpoint(data: bytes) -> StudentModel:
    if len(data) < 8:
        raise TruncatedCheckpointError("shorter than the fixed header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    version, nblocks = struct.unpack_from("<HH", data, 4)
    if version != CHECKPOINT_VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    off = 8
    blocks = []
    for _ in range(nblocks):
        if off + 7 > len(data):
            raise TruncatedCheckpointError("block descriptor table cut short")
        kind_code, in_ch, out_ch, kernel = struct.unpack_from("<BHHH", data, off)
        off += 7
        if kind_code not in _KIND_NAMES:
            raise DescriptorError(f"unknown block kind code {kind_code}")
        if min(in_ch, out_ch, kernel) < 1:
            raise DescriptorError("block extents must be >= 1")
        blocks.append(BlockSpec(_KIND_NAMES[kind_code], in_ch, out_ch, kernel))
    if off + 2 > len(data):
        raise TruncatedCheckpointError("missing freeze boundary")
    (boundary,) = struct.unpack_from("<H", data, off)
    off += 2
    try:
        spec = ArchSpec(blocks=tuple(blocks), freeze_boundary=boundary)
    except ArchError as exc:
        raise DescriptorError(str(exc)) from exc
    params: dict[str, np.ndarray] = {}
    for key, shape in spec.param_shapes():
        nbytes = 4 * int(np.prod(shape))
        if off + nbytes > len(data):
            raise TruncatedCheckpointError(f"parameter run {key} cut short")
        params[key] = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise TruncatedCheckpointError(f"{len(data) - off} trailing bytes")
    return StudentModel(spec=spec, params=params)


def with_freeze_boundary(checkpoint: bytes, boundary: int) -> bytes:
    """Re-issue a checkpoint with a different frozen-prefix boundary.

    Boundary 0 turns partial distillation into full distillation without
    touching any weights.
    """
    model = load_checkpoint(checkpoint)
    spec = ArchSpec(blocks=model.spec.blocks, freeze_boundary=boundary)
    return save_checkpoint(StudentModel(spec=spec, params=model.params))


# ---------------------------------------------------------------------------
# pre-training


def pretrain_student(
    model: StudentModel,
    corpus: Sequence[tuple[np.ndarray, np.ndarray]],
    epochs: int = 5,
    lr: float = 0.01,
    loss_weight: float = 5.0,
    loss_radius: int = 2,
) -> bytes:
    """Supervised warm-up on a generated scene corpus; all blocks trainable.

    Freezing only applies at distillation time, so pre-training optimizes the
    whole network with its own Adam state.  Returns the checkpoint bytes of
    the trained model (the model is updated in place).
    """
    if not corpus:
        raise ValueError("pre-training corpus is empty")
    state = AdamState(lr=lr)
    for _ in range(epochs):
        for pixels, label in corpus:
            t, probs = forward_recorded(model, pixels, freeze_boundary=0)
            mask = weight_mask(label, w=loss_weight, r=loss_radius)
            loss = weighted_ce_loss(probs, label, mask)
            grads = T.backward_partial(t)
            T.adam_step(model.params, grads, state)
    return save_checkpoint(model)


def training_miou(model: StudentModel, corpus: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    scores = [mean_iou(argmax_segmap(forward(model, px)), lab) for px, lab in corpus]
    return float(np.mean(scores))
