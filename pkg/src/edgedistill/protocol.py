"""Wire messages and the server/client inference state machines.

Framing is little-endian: a 1-byte tag, a u32 payload length, then the
payload.  The client sends key frames without blocking, keeps predicting
with its current weights, and waits for the pending update only once it is
``min_stride`` frames past the key frame; updates that arrive earlier are
applied at the per-frame poll.  At most one round trip is ever outstanding.

Transports are abstracted behind :class:`ClientLink` / :class:`ServerLink`
so the same loops run against the virtual-clock simulator and real sockets.
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .distill import AlgoParams, train_student
from .metrics import argmax_segmap, mean_iou
from .models import (
    DeltaEntry,
    Frame,
    StudentModel,
    WeightDelta,
    apply_update,
    extract_diff,
    load_checkpoint,
    save_checkpoint,
    teacher_infer,
)
from .models import forward as model_forward
from .scheduler import Stride, initial_stride, next_stride

HEADER = struct.Struct("<BI")

TAG_INIT_STUDENT = 1
TAG_KEY_FRAME = 2
TAG_STUDENT_UPDATE = 3
TAG_NAIVE_FRAME = 4
TAG_NAIVE_PREDICTION = 5


class WireError(ValueError):
    """Base class for message decode failures."""


class UnknownTagError(WireError):
    pass


class TruncatedMessageError(WireError):
    pass


class LengthMismatchError(WireError):
    pass


class ProtocolError(RuntimeError):
    """The peer violated the message flow contract."""


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class InitStudent:
    checkpoint: bytes


@dataclass(frozen=True, eq=False)
class KeyFrame:
    index: int
    pixels: np.ndarray  # (H, W, C) uint8

    def __eq__(self, other):
        return (
            isinstance(other, KeyFrame)
            and self.index == other.index
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True, eq=False)
class StudentUpdate:
    metric: float
    delta: WeightDelta

    def __post_init__(self):
        object.__setattr__(self, "metric", float(np.float32(self.metric)))

    def __eq__(self, other):
        return (
            isinstance(other, StudentUpdate)
            and self.metric == other.metric
            and len(self.delta.entries) == len(other.delta.entries)
            and all(
                a.tensor_id == b.tensor_id and np.array_equal(a.values, b.values)
                for a, b in zip(self.delta.entries, other.delta.entries)
            )
        )


@dataclass(frozen=True, eq=False)
class NaiveFrame:
    index: int
    pixels: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, NaiveFrame)
            and self.index == other.index
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True, eq=False)
class NaivePrediction:
    index: int
    seg: np.ndarray  # flat uint8 class ids; receiver knows the frame dims

    def __eq__(self, other):
        return (
            isinstance(other, NaivePrediction)
            and self.index == other.index
            and np.array_equal(self.seg, other.seg)
        )


Message = InitStudent | KeyFrame | StudentUpdate | NaiveFrame | NaivePrediction


def _encode_frame_payload(index: int, pixels: np.ndarray) -> bytes:
    h, w, c = pixels.shape
    return struct.pack("<QHHB", index, h, w, c) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def _decode_frame_payload(payload: bytes) -> tuple[int, np.ndarray]:
    if len(payload) < 13:
        raise LengthMismatchError("frame payload shorter than its fixed fields")
    index, h, w, c = struct.unpack_from("<QHHB", payload, 0)
    if len(payload) != 13 + h * w * c:
        raise LengthMismatchError(f"frame payload length {len(payload)} != 13 + {h}*{w}*{c}")
    pixels = np.frombuffer(payload, np.uint8, h * w * c, 13).reshape(h, w, c).copy()
    return index, pixels


def encode(msg: Message) -> bytes:
    """Serialize one message, header included."""
    if isinstance(msg, InitStudent):
        tag, payload = TAG_INIT_STUDENT, msg.checkpoint
    elif isinstance(msg, KeyFrame):
        tag, payload = TAG_KEY_FRAME, _encode_frame_payload(msg.index, msg.pixels)
    elif isinstance(msg, NaiveFrame):
        tag, payload = TAG_NAIVE_FRAME, _encode_frame_payload(msg.index, msg.pixels)
    elif isinstance(msg, StudentUpdate):
        parts = [struct.pack("<fH", msg.metric, len(msg.delta.entries))]
        for entry in msg.delta.entries:
            arr = np.ascontiguousarray(entry.values, dtype="<f4")
            parts.append(struct.pack("<HB", entry.tensor_id, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}H", *arr.shape))
            parts.append(arr.tobytes())
        tag, payload = TAG_STUDENT_UPDATE, b"".join(parts)
    elif isinstance(msg, NaivePrediction):
        seg = np.ascontiguousarray(msg.seg, dtype=np.uint8)
        tag, payload = TAG_NAIVE_PREDICTION, struct.pack("<Q", msg.index) + seg.tobytes()
    else:
        raise TypeError(f"not a wire message: {type(msg).__name__}")
    return HEADER.pack(tag, len(payload)) + payload


def _decode_update_payload(payload: bytes) -> StudentUpdate:
    if len(payload) < 6:
        raise LengthMismatchError("update payload shorter than its fixed fields")
    metric, count = struct.unpack_from("<fH", payload, 0)
    off = 6
    entries = []
    for _ in range(count):
        if off + 3 > len(payload):
            raise LengthMismatchError("update entry header cut short")
        tensor_id, rank = struct.unpack_from("<HB", payload, off)
        off += 3
        if rank < 1 or rank > 4:
            raise LengthMismatchError(f"tensor rank {rank} outside [1, 4]")
        if off + 2 * rank > len(payload):
            raise LengthMismatchError("update entry extents cut short")
        extents = struct.unpack_from(f"<{rank}H", payload, off)
        off += 2 * rank
        if min(extents) < 1:
            raise LengthMismatchError("tensor extents must be >= 1")
        numel = int(np.prod(extents))
        if off + 4 * numel > len(payload):
            raise LengthMismatchError("update entry values cut short")
        values = np.frombuffer(payload, "<f4", numel, off).reshape(extents).copy()
        off += 4 * numel
        entries.append(DeltaEntry(tensor_id, values))
    if off != len(payload):
        raise LengthMismatchError(f"{len(payload) - off} trailing bytes in update payload")
    return StudentUpdate(metric=metric, delta=WeightDelta(entries=tuple(entries)))


def decode(data: bytes) -> Message:
    """Parse exactly one complete framed message."""
    if len(data) < HEADER.size:
        raise TruncatedMessageError("header cut short")
    tag, length = HEADER.unpack_from(data, 0)
    if len(data) < HEADER.size + length:
        raise TruncatedMessageError(f"payload needs {length} bytes, got {len(data) - HEADER.size}")
    if len(data) > HEADER.size + length:
        raise LengthMismatchError(f"{len(data) - HEADER.size - length} bytes beyond the framed length")
    payload = data[HEADER.size : HEADER.size + length]
    if tag == TAG_INIT_STUDENT:
        return InitStudent(checkpoint=payload)
    if tag == TAG_KEY_FRAME:
        return KeyFrame(*_decode_frame_payload(payload))
    if tag == TAG_NAIVE_FRAME:
        return NaiveFrame(*_decode_frame_payload(payload))
    if tag == TAG_STUDENT_UPDATE:
        return _decode_update_payload(payload)
    if tag == TAG_NAIVE_PREDICTION:
        if len(payload) < 8:
            raise LengthMismatchError("prediction payload shorter than its index")
        (index,) = struct.unpack_from("<Q", payload, 0)
        return NaivePrediction(index=index, seg=np.frombuffer(payload, np.uint8, offset=8).copy())
    raise UnknownTagError(f"unknown message tag {tag}")


def read_message(read_exact) -> Optional[Message]:
    """Read one framed message via ``read_exact(n) -> bytes``; None on EOF."""
    head = read_exact(HEADER.size)
    if head is None:
        return None
    if len(head) < HEADER.size:
        raise TruncatedMessageError("connection closed mid-header")
    tag, length = HEADER.unpack(head)
    payload = read_exact(length) if length else b""
    if payload is None or len(payload) < length:
        raise TruncatedMessageError("connection closed mid-payload")
    return decode(head + payload)


# ---------------------------------------------------------------------------
# transport contracts


class PendingUpdate(ABC):
    """Handle for one in-flight key-frame round trip."""

    @abstractmethod
    def completed(self) -> bool: ...

    @abstractmethod
    def wait(self) -> StudentUpdate: ...

    @abstractmethod
    def result(self) -> StudentUpdate: ...


class ClientLink(ABC):
    """What the client loop needs from a transport."""

    @abstractmethod
    def recv_init(self) -> InitStudent: ...

    @abstractmethod
    def send_key(self, msg: KeyFrame) -> PendingUpdate:
        """Non-blocking send plus the started non-blocking receive."""

    @abstractmethod
    def naive_round_trip(self, msg: NaiveFrame) -> NaivePrediction: ...

    @abstractmethod
    def after_prediction(self) -> None:
        """Account for one on-device inference (virtual or real time)."""

    @abstractmethod
    def now(self) -> float: ...

    def close(self) -> None:
        pass


class ServerLink(ABC):
    @abstractmethod
    def recv(self) -> Optional[Message]:
        """Next request, or None once the peer has closed."""

    @abstractmethod
    def send(self, msg: Message) -> None: ...


# ---------------------------------------------------------------------------
# server side


@dataclass
class CycleLog:
    frame_index: int
    steps: int
    initial_metric: float
    best_metric: float


@dataclass
class ServerLog:
    key_frames: int = 0
    distill_steps: int = 0
    naive_frames: int = 0
    cycles: list[CycleLog] = field(default_factory=list)


@dataclass
class ServerState:
    """Everything the server needs to answer one request."""

    student: StudentModel
    teacher: object
    params: AlgoParams
    log: ServerLog = field(default_factory=ServerLog)


def initial_message(state: ServerState) -> InitStudent:
    return InitStudent(checkpoint=save_checkpoint(state.student))


def handle_message(state: ServerState, msg: Message) -> Message:
    """Serve one request: distill on key frames, plain inference on naive ones."""
    if isinstance(msg, KeyFrame):
        label, _ = teacher_infer(state.teacher, Frame(msg.index, msg.pixels))
        result = train_student(state.student, msg.pixels, label, state.params)
        state.log.key_frames += 1
        state.log.distill_steps += result.steps_taken
        state.log.cycles.append(
            CycleLog(msg.index, result.steps_taken, result.initial_metric, result.best_metric)
        )
        return StudentUpdate(metric=result.best_metric, delta=extract_diff(state.student))
    if isinstance(msg, NaiveFrame):
        label, _ = teacher_infer(state.teacher, Frame(msg.index, msg.pixels))
        state.log.naive_frames += 1
        return NaivePrediction(index=msg.index, seg=label.reshape(-1))
    raise ProtocolError(f"server cannot handle {type(msg).__name__}")


def server_loop(link: ServerLink, state: ServerState) -> ServerLog:
    """Send the student once, then answer requests until the peer closes."""
    link.send(initial_message(state))
    while (msg := link.recv()) is not None:
        link.send(handle_message(state, msg))
    return state.log


# ---------------------------------------------------------------------------
# client side


@dataclass
class ClientCycle:
    frame_index: int
    send_time: float
    stride_at_send: int
    wait_time: float = 0.0
    applied_at_step: Optional[int] = None
    metric: Optional[float] = None
    stride_after: Optional[int] = None
    tc_span: Optional[float] = None


@dataclass
class ClientRunLog:
    predictions: list[np.ndarray] = field(default_factory=list)
    miou: list[float] = field(default_factory=list)
    cycles: list[ClientCycle] = field(default_factory=list)
    start_time: float = 0.0
    end_time: float = 0.0
    drain_wait: float = 0.0

    @property
    def key_frames(self) -> int:
        return len(self.cycles)


def client_loop(
    video: Iterable[tuple[Frame, Optional[np.ndarray]]],
    params: AlgoParams,
    link: ClientLink,
    fixed_stride: Optional[int] = None,
) -> ClientRunLog:
    """Process a stream: predict every frame locally, upload sparse key frames.

    ``video`` yields (frame, reference-label) pairs; the reference is only
    used to score predictions and may be None.  With ``fixed_stride`` set the
    adaptive schedule is disabled and that gap is used for every key frame.
    """
    init = link.recv_init()
    if not isinstance(init, InitStudent):
        raise ProtocolError(f"expected the initial student, got {type(init).__name__}")
    student = load_checkpoint(init.checkpoint)

    log = ClientRunLog()
    stride = Stride(float(fixed_stride)) if fixed_stride else initial_stride(params)
    step = stride.effective(params)  # first frame is a key frame
    updated = True
    pending: Optional[PendingUpdate] = None
    cycle: Optional[ClientCycle] = None
    log.start_time = link.now()

    def apply(update: StudentUpdate, at_step: int) -> None:
        nonlocal stride, updated
        apply_update(student, update.delta)
        if fixed_stride is None:
            stride = next_stride(stride, update.metric, params)
        cycle.applied_at_step = at_step
        cycle.metric = update.metric
        cycle.stride_after = stride.effective(params)
        updated = True

    for frame, ref_label in video:
        if step == stride.effective(params):
            assert updated, "previous round trip still outstanding at a key frame"
            pending = link.send_key(KeyFrame(frame.index, frame.pixels))
            cycle = ClientCycle(
                frame_index=frame.index,
                send_time=link.now(),
                stride_at_send=stride.effective(params),
            )
            log.cycles.append(cycle)
            step = 0
            updated = False

        probs = model_forward(student, frame)
        pred = argmax_segmap(probs)
        log.predictions.append(pred)
        if ref_label is not None:
            log.miou.append(mean_iou(pred, ref_label))
        link.after_prediction()
        step += 1

        if not updated:
            if step == params.min_stride:
                t0 = link.now()
                pending.wait()
                cycle.wait_time = link.now() - t0
            if pending.completed():
                apply(pending.result(), step)
        if cycle is not None and step == params.min_stride:
            cycle.tc_span = link.now() - cycle.send_time

    log.end_time = link.now()
    if not updated:
        # end-of-video drain: record the trailing update so stats are complete
        t0 = link.now()
        update = pending.wait()
        log.drain_wait = link.now() - t0
        apply(update, step)
    link.close()
    return log


def naive_client_loop(
    video: Iterable[tuple[Frame, Optional[np.ndarray]]],
    link: ClientLink,
) -> ClientRunLog:
    """Baseline: upload every frame and block on the server's prediction."""
    init = link.recv_init()
    if not isinstance(init, InitStudent):
        raise ProtocolError(f"expected the initial student, got {type(init).__name__}")
    log = ClientRunLog()
    log.start_time = link.now()
    for frame, ref_label in video:
        resp = link.naive_round_trip(NaiveFrame(frame.index, frame.pixels))
        if resp.index != frame.index:
            raise ProtocolError(f"prediction for frame {resp.index} answering frame {frame.index}")
        pred = resp.seg.reshape(frame.pixels.shape[:2])
        log.predictions.append(pred)
        if ref_label is not None:
            log.miou.append(mean_iou(pred, ref_label))
    log.end_time = link.now()
    link.close()
    return log
