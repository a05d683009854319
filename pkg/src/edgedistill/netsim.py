"""Deterministic virtual-clock transport and a localhost socket transport.

The virtual-clock link runs client and server in one thread against a
simulated timeline: each on-device inference advances the clock by ``t_si``,
a key-frame round trip becomes available ``uplink + t_ti + steps*t_sd +
downlink`` after the send, and the concurrency degree decides whether that
interval overlaps client compute ("parallel") or is charged to the client
clock at its first poll ("serial").  The socket link speaks the same wire
format over TCP with a reader thread providing the non-blocking receive.

Per-cycle ``t_c`` is reported net of distillation-attributable waiting, so
it lands exactly on the overlap/serialized forms the analytic model bounds.
Steady-state traffic and throughput are measured over the window spanned by
complete key-frame cycles (first send to last send); the initial student
delivery is accounted separately and charged no simulated time.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .analytics import CycleStat, RunStats
from .distill import AlgoParams
from .models import OracleTeacher, load_checkpoint
from .protocol import (
    HEADER,
    ClientLink,
    ClientRunLog,
    InitStudent,
    KeyFrame,
    Message,
    NaiveFrame,
    NaivePrediction,
    PendingUpdate,
    ProtocolError,
    ServerLink,
    ServerLog,
    ServerState,
    StudentUpdate,
    client_loop,
    decode,
    encode,
    handle_message,
    initial_message,
    naive_client_loop,
    read_message,
    server_loop,
)
from .videogen import LabeledStream

CONCURRENCY_MODES = ("parallel", "serial")


@dataclass(frozen=True)
class ChannelConfig:
    """Link shaping for the simulated network."""

    uplink_bps: float
    downlink_bps: float
    propagation_s: float = 0.0
    concurrency: str = "parallel"

    def __post_init__(self):
        if self.uplink_bps <= 0 or self.downlink_bps <= 0:
            raise ValueError("bandwidths must be > 0")
        if self.propagation_s < 0:
            raise ValueError("propagation delay must be >= 0")
        if self.concurrency not in CONCURRENCY_MODES:
            raise ValueError(f"concurrency must be one of {CONCURRENCY_MODES}")


def channel_mbps(mbps: float, propagation_s: float = 0.0, concurrency: str = "parallel") -> ChannelConfig:
    """Symmetric channel from a decimal-megabit rate."""
    return ChannelConfig(mbps * 1e6, mbps * 1e6, propagation_s, concurrency)


def transfer_time(size_bytes: int, direction: str, cfg: ChannelConfig) -> float:
    """Propagation plus serialization delay for one message."""
    if size_bytes < 0:
        raise ValueError("size must be >= 0")
    bw = cfg.uplink_bps if direction == "up" else cfg.downlink_bps
    return cfg.propagation_s + 8.0 * size_bytes / bw


@dataclass(frozen=True)
class SimLatencies:
    """Configured per-component compute costs on the virtual clock."""

    t_si: float = 0.004
    t_sd: float = 0.002
    t_ti: float = 0.020

    def __post_init__(self):
        if min(self.t_si, self.t_sd, self.t_ti) <= 0:
            raise ValueError("latencies must be > 0")


DESK_LATENCIES = SimLatencies()
PAPER_LATENCIES = SimLatencies(t_si=0.143, t_sd=0.013, t_ti=0.044)


class VirtualClock:
    """Monotone simulated time plus an ordered event trace."""

    def __init__(self):
        self.time = 0.0
        self.events: list[tuple[float, str, dict]] = []

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("cannot advance the clock backwards")
        self.time += dt

    def advance_to(self, t: float) -> None:
        if t > self.time:
            self.time = t

    def log(self, label: str, **info) -> None:
        self.events.append((self.time, label, info))


class SimPendingUpdate(PendingUpdate):
    """In-flight round trip on the virtual clock.

    Parallel mode: the update is available once the clock passes its arrival
    timestamp.  Serial mode: the whole round trip is charged to the client
    clock at the first completion poll, after which the update is available.
    """

    def __init__(self, clock: VirtualClock, update: StudentUpdate,
                 arrival: Optional[float] = None, charge: Optional[float] = None):
        self._clock = clock
        self._update = update
        self._arrival = arrival
        self._charge = charge
        self._done = False

    def completed(self) -> bool:
        if self._done:
            return True
        if self._charge is not None:  # serial: transfer occupies the client
            self._clock.advance(self._charge)
            self._clock.log("serial-roundtrip", seconds=self._charge)
            self._done = True
            return True
        if self._clock.time >= self._arrival:
            self._done = True
            return True
        return False

    def wait(self) -> StudentUpdate:
        if not self.completed():
            self._clock.log("block", until=self._arrival)
            self._clock.advance_to(self._arrival)
            self._done = True
        return self._update

    def result(self) -> StudentUpdate:
        if not self._done:
            raise ProtocolError("update not yet received")
        return self._update


class SimClientLink(ClientLink):
    """Client-side link that serves the request inline and timestamps it."""

    def __init__(self, server: ServerState, channel: ChannelConfig, lat: SimLatencies):
        self.server = server
        self.channel = channel
        self.lat = lat
        self.clock = VirtualClock()
        self.transcript_up: list[bytes] = []
        self.transcript_down: list[bytes] = []
        self.bytes_up = 0
        self.bytes_down = 0
        self.init_bytes = 0
        self.keyframe_msg_bytes = 0
        self.update_msg_bytes = 0
        self._outstanding = False

    def recv_init(self) -> InitStudent:
        data = encode(initial_message(self.server))
        self.transcript_down.append(data)
        self.init_bytes = len(data)
        self.clock.log("init-student", bytes=len(data))
        return decode(data)

    def _serve(self, data: bytes) -> tuple[bytes, int]:
        request = decode(data)
        before = self.server.log.distill_steps
        response = handle_message(self.server, request)
        steps = self.server.log.distill_steps - before
        rdata = encode(response)
        self.transcript_down.append(rdata)
        self.bytes_down += len(rdata)
        return rdata, steps

    def send_key(self, msg: KeyFrame) -> PendingUpdate:
        if self._outstanding:
            raise ProtocolError("a key-frame round trip is already outstanding")
        self._outstanding = True
        data = encode(msg)
        self.transcript_up.append(data)
        self.bytes_up += len(data)
        self.keyframe_msg_bytes = len(data)
        up = transfer_time(len(data), "up", self.channel)
        rdata, steps = self._serve(data)
        self.update_msg_bytes = len(rdata)
        down = transfer_time(len(rdata), "down", self.channel)
        total = up + self.lat.t_ti + steps * self.lat.t_sd + down
        self.clock.log("key-frame", index=msg.index, roundtrip=total, steps=steps)
        update = decode(rdata)
        pending: SimPendingUpdate
        if self.channel.concurrency == "parallel":
            pending = SimPendingUpdate(self.clock, update, arrival=self.clock.time + total)
        else:
            pending = SimPendingUpdate(self.clock, update, charge=total)

        outer = self

        class _Tracked(PendingUpdate):
            def completed(self) -> bool:
                done = pending.completed()
                if done:
                    outer._outstanding = False
                return done

            def wait(self) -> StudentUpdate:
                upd = pending.wait()
                outer._outstanding = False
                return upd

            def result(self) -> StudentUpdate:
                return pending.result()

        return _Tracked()

    def naive_round_trip(self, msg: NaiveFrame) -> NaivePrediction:
        data = encode(msg)
        self.transcript_up.append(data)
        self.bytes_up += len(data)
        self.keyframe_msg_bytes = len(data)
        up = transfer_time(len(data), "up", self.channel)
        rdata, _ = self._serve(data)
        self.update_msg_bytes = len(rdata)
        down = transfer_time(len(rdata), "down", self.channel)
        self.clock.advance(up + self.lat.t_ti + down)
        response = decode(rdata)
        if not isinstance(response, NaivePrediction):
            raise ProtocolError(f"expected a prediction, got {type(response).__name__}")
        return response

    def after_prediction(self) -> None:
        self.clock.advance(self.lat.t_si)

    def now(self) -> float:
        return self.clock.time

    @property
    def round_trip_transfer(self) -> float:
        """t_net for this run: uplink + downlink transfer of one key frame."""
        return transfer_time(self.keyframe_msg_bytes, "up", self.channel) + transfer_time(
            self.update_msg_bytes, "down", self.channel
        )


# ---------------------------------------------------------------------------
# socket transport


class SocketServerLink(ServerLink):
    def __init__(self, conn: socket.socket):
        self._conn = conn

    def _read_exact(self, n: int) -> Optional[bytes]:
        if n == 0:
            return b""
        chunks = []
        got = 0
        while got < n:
            chunk = self._conn.recv(n - got)
            if not chunk:
                return None if got == 0 else b"".join(chunks)
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self) -> Optional[Message]:
        return read_message(self._read_exact)

    def send(self, msg: Message) -> None:
        self._conn.sendall(encode(msg))


class SocketPendingUpdate(PendingUpdate):
    def __init__(self, link: "SocketClientLink"):
        self._link = link
        self._update: Optional[StudentUpdate] = None

    def completed(self) -> bool:
        if self._update is not None:
            return True
        msg = self._link.poll()
        if msg is None:
            return False
        self._update = self._expect(msg)
        return True

    def wait(self) -> StudentUpdate:
        if self._update is None:
            self._update = self._expect(self._link.take())
        return self._update

    def result(self) -> StudentUpdate:
        if self._update is None:
            raise ProtocolError("update not yet received")
        return self._update

    @staticmethod
    def _expect(msg: Message) -> StudentUpdate:
        if not isinstance(msg, StudentUpdate):
            raise ProtocolError(f"expected a student update, got {type(msg).__name__}")
        return msg


class SocketClientLink(ClientLink):
    """TCP link; a reader thread provides the non-blocking receive."""

    TIMEOUT_S = 60.0

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._queue: "queue.Queue[Optional[bytes]]" = queue.Queue()
        self.transcript_up: list[bytes] = []
        self.transcript_down: list[bytes] = []
        self.bytes_up = 0
        self.bytes_down = 0
        self.init_bytes = 0
        self.keyframe_msg_bytes = 0
        self.update_msg_bytes = 0
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        def read_exact(n: int) -> Optional[bytes]:
            if n == 0:
                return b""
            chunks = []
            got = 0
            while got < n:
                chunk = self._sock.recv(n - got)
                if not chunk:
                    return None if got == 0 else b"".join(chunks)
                chunks.append(chunk)
                got += len(chunk)
            return b"".join(chunks)

        try:
            while True:
                head = read_exact(HEADER.size)
                if head is None:
                    break
                _, length = HEADER.unpack(head)
                payload = read_exact(length) if length else b""
                if payload is None or len(payload) < length:
                    break
                self._queue.put(head + payload)
        finally:
            self._queue.put(None)

    def _next_raw(self, timeout: float) -> bytes:
        try:
            raw = self._queue.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError("timed out waiting for the server") from None
        if raw is None:
            raise ProtocolError("server closed the connection")
        self.transcript_down.append(raw)
        return raw

    def poll(self) -> Optional[Message]:
        try:
            raw = self._queue.get_nowait()
        except queue.Empty:
            return None
        if raw is None:
            raise ProtocolError("server closed the connection")
        self.transcript_down.append(raw)
        msg = decode(raw)
        if isinstance(msg, StudentUpdate):
            self.bytes_down += len(raw)
            self.update_msg_bytes = len(raw)
        return msg

    def take(self) -> Message:
        raw = self._next_raw(self.TIMEOUT_S)
        msg = decode(raw)
        if isinstance(msg, StudentUpdate):
            self.bytes_down += len(raw)
            self.update_msg_bytes = len(raw)
        return msg

    def recv_init(self) -> InitStudent:
        raw = self._next_raw(self.TIMEOUT_S)
        msg = decode(raw)
        if not isinstance(msg, InitStudent):
            raise ProtocolError(f"expected the initial student, got {type(msg).__name__}")
        self.init_bytes = len(raw)
        return msg

    def send_key(self, msg: KeyFrame) -> PendingUpdate:
        data = encode(msg)
        self.transcript_up.append(data)
        self.bytes_up += len(data)
        self.keyframe_msg_bytes = len(data)
        self._sock.sendall(data)
        return SocketPendingUpdate(self)

    def naive_round_trip(self, msg: NaiveFrame) -> NaivePrediction:
        data = encode(msg)
        self.transcript_up.append(data)
        self.bytes_up += len(data)
        self.keyframe_msg_bytes = len(data)
        self._sock.sendall(data)
        raw = self._next_raw(self.TIMEOUT_S)
        self.bytes_down += len(raw)
        self.update_msg_bytes = len(raw)
        resp = decode(raw)
        if not isinstance(resp, NaivePrediction):
            raise ProtocolError(f"expected a prediction, got {type(resp).__name__}")
        return resp

    def after_prediction(self) -> None:
        pass

    def now(self) -> float:
        return time.monotonic()

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self._reader.join(timeout=self.TIMEOUT_S)
        self._sock.close()


# ---------------------------------------------------------------------------
# run orchestration


@dataclass
class SimResult:
    stats: RunStats
    client: ClientRunLog
    server_log: ServerLog
    transcript_up: list[bytes] = field(default_factory=list)
    transcript_down: list[bytes] = field(default_factory=list)


def oracle_for(stream: LabeledStream, noise: float = 0.0, seed: int = 0) -> OracleTeacher:
    return OracleTeacher(stream.labels, classes=stream.classes, noise=noise, seed=seed)


def _assemble_stats(
    scenario: str,
    strategy: str,
    mode: str,
    stream: LabeledStream,
    client: ClientRunLog,
    server_log: ServerLog,
    link,
    params: AlgoParams,
    lat: Optional[SimLatencies],
) -> RunStats:
    n = len(stream)
    time_s = client.end_time - client.start_time
    cycles: list[CycleStat] = []
    if strategy != "naive":
        if len(client.cycles) != len(server_log.cycles):
            raise ProtocolError("client and server disagree on the number of key frames")
        for cc, sc in zip(client.cycles, server_log.cycles):
            if cc.frame_index != sc.frame_index:
                raise ProtocolError("client and server cycle logs diverged")
            t_c = None
            if cc.tc_span is not None and lat is not None:
                floor_span = params.min_stride * lat.t_si
                distill_in_path = min(sc.steps * lat.t_sd, max(0.0, cc.tc_span - floor_span))
                t_c = cc.tc_span - distill_in_path
            cycles.append(
                CycleStat(
                    frame_index=cc.frame_index,
                    steps=sc.steps,
                    metric=cc.metric if cc.metric is not None else sc.best_metric,
                    stride_after=cc.stride_after if cc.stride_after is not None else 0,
                    wait_time=cc.wait_time,
                    t_c=t_c,
                )
            )
    k = len(client.cycles) if strategy != "naive" else n
    stats = RunStats(
        scenario=scenario,
        strategy=strategy,
        mode=mode,
        n=n,
        k=k,
        d=server_log.distill_steps,
        bytes_up=link.bytes_up,
        bytes_down=link.bytes_down,
        init_bytes=link.init_bytes,
        time_s=time_s,
        miou=list(client.miou),
        cycles=cycles,
        keyframe_msg_bytes=link.keyframe_msg_bytes,
        update_msg_bytes=link.update_msg_bytes,
        params=params if strategy != "naive" else None,
    )
    if strategy != "naive" and len(client.cycles) >= 2:
        first, last = client.cycles[0], client.cycles[-1]
        stats.steady_cycles = len(client.cycles) - 1
        stats.steady_frames = last.frame_index - first.frame_index
        stats.steady_time_s = last.send_time - first.send_time
    return stats


def run_sim(
    stream: LabeledStream,
    checkpoint: bytes,
    params: AlgoParams,
    channel: ChannelConfig,
    lat: SimLatencies = DESK_LATENCIES,
    *,
    strategy: str = "adaptive",
    fixed_stride: Optional[int] = None,
    teacher=None,
    scenario: str = "sim",
) -> SimResult:
    """One full deterministic run on the virtual clock."""
    server = ServerState(
        student=load_checkpoint(checkpoint),
        teacher=teacher if teacher is not None else oracle_for(stream),
        params=params,
    )
    link = SimClientLink(server, channel, lat)
    if strategy == "naive":
        log = naive_client_loop(iter(stream), link)
    elif strategy == "fixed":
        log = client_loop(iter(stream), params, link, fixed_stride=fixed_stride or params.min_stride)
    elif strategy == "adaptive":
        log = client_loop(iter(stream), params, link)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    stats = _assemble_stats(scenario, strategy, "sim", stream, log, server.log, link, params, lat)
    return SimResult(
        stats=stats,
        client=log,
        server_log=server.log,
        transcript_up=link.transcript_up,
        transcript_down=link.transcript_down,
    )


def run_socket(
    stream: LabeledStream,
    checkpoint: bytes,
    params: AlgoParams,
    *,
    strategy: str = "adaptive",
    fixed_stride: Optional[int] = None,
    teacher=None,
    scenario: str = "socket",
    host: str = "127.0.0.1",
    port: int = 0,
) -> SimResult:
    """Same scenario over a real localhost connection, server in a thread."""
    server = ServerState(
        student=load_checkpoint(checkpoint),
        teacher=teacher if teacher is not None else oracle_for(stream),
        params=params,
    )
    listener = socket.create_server((host, port))
    server_error: list[BaseException] = []

    def serve() -> None:
        conn, _ = listener.accept()
        try:
            server_loop(SocketServerLink(conn), server)
        except BaseException as exc:  # surfaced after join
            server_error.append(exc)
        finally:
            conn.close()

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    sock = socket.create_connection(listener.getsockname())
    link = SocketClientLink(sock)
    try:
        if strategy == "naive":
            log = naive_client_loop(iter(stream), link)
        elif strategy == "fixed":
            log = client_loop(iter(stream), params, link, fixed_stride=fixed_stride or params.min_stride)
        elif strategy == "adaptive":
            log = client_loop(iter(stream), params, link)
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
    finally:
        link.close()  # idempotent; unblocks the server on client-side failure
        thread.join(timeout=SocketClientLink.TIMEOUT_S)
        listener.close()
    if server_error:
        raise server_error[0]
    stats = _assemble_stats(scenario, strategy, "socket", stream, log, server.log, link, params, None)
    return SimResult(
        stats=stats,
        client=log,
        server_log=server.log,
        transcript_up=link.transcript_up,
        transcript_down=link.transcript_down,
    )
