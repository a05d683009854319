"""Wire codec and the server/client state machines."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgedistill.distill import AlgoParams
from edgedistill.models import (
    DeltaEntry,
    WeightDelta,
    build_student,
    extract_diff,
    load_checkpoint,
    save_checkpoint,
)
from edgedistill.netsim import DESK_LATENCIES, SimClientLink, channel_mbps, oracle_for
from edgedistill.protocol import (
    HEADER,
    InitStudent,
    KeyFrame,
    LengthMismatchError,
    NaiveFrame,
    NaivePrediction,
    ProtocolError,
    ServerLink,
    ServerState,
    StudentUpdate,
    TruncatedMessageError,
    UnknownTagError,
    client_loop,
    decode,
    encode,
    handle_message,
    naive_client_loop,
    server_loop,
)
from edgedistill.videogen import generate, preset

from conftest import assert_bit_equal


def make_update(seed=0, metric=0.5):
    rng = np.random.default_rng(seed)
    entries = (
        DeltaEntry(8, rng.normal(size=(16, 32, 3, 3)).astype(np.float32)),
        DeltaEntry(9, rng.normal(size=(16,)).astype(np.float32)),
    )
    return StudentUpdate(metric=metric, delta=WeightDelta(entries=entries))


class TestCodec:
    def test_init_student_round_trip(self):
        msg = InitStudent(checkpoint=save_checkpoint(build_student(seed=0)))
        assert decode(encode(msg)) == msg

    def test_key_frame_round_trip_and_length(self):
        pixels = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
        msg = KeyFrame(index=7, pixels=pixels)
        data = encode(msg)
        # u64 index + u16 H + u16 W + u8 C + 48 pixel bytes, behind a 5-byte header
        assert len(data) == 5 + 8 + 2 + 2 + 1 + 48
        assert decode(data) == msg

    def test_naive_frame_round_trip(self):
        pixels = np.zeros((2, 3, 3), np.uint8)
        msg = NaiveFrame(index=1, pixels=pixels)
        assert decode(encode(msg)) == msg

    def test_student_update_round_trip(self):
        msg = make_update()
        assert decode(encode(msg)) == msg

    def test_naive_prediction_round_trip(self):
        msg = NaivePrediction(index=3, seg=np.arange(16, dtype=np.uint8))
        assert decode(encode(msg)) == msg

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_random_frames_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        h, w, c = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 4))
        msg = KeyFrame(
            index=int(rng.integers(0, 2**63)),
            pixels=rng.integers(0, 256, size=(h, w, c)).astype(np.uint8),
        )
        assert decode(encode(msg)) == msg

    def test_unknown_tag(self):
        with pytest.raises(UnknownTagError):
            decode(HEADER.pack(42, 0))

    def test_truncated_header(self):
        with pytest.raises(TruncatedMessageError):
            decode(b"\x02\x00")

    def test_truncated_payload(self):
        data = encode(make_update())
        with pytest.raises(TruncatedMessageError):
            decode(data[:-4])

    def test_trailing_bytes_rejected(self):
        data = encode(NaivePrediction(index=0, seg=np.zeros(4, np.uint8)))
        with pytest.raises(LengthMismatchError):
            decode(data + b"\x00")

    def test_inner_length_mismatch(self):
        msg = KeyFrame(index=0, pixels=np.zeros((2, 2, 3), np.uint8))
        data = bytearray(encode(msg))
        data[13] = 9  # claim H=9 without the bytes to match
        with pytest.raises(LengthMismatchError):
            decode(bytes(data))

    def test_update_payload_accounting(self):
        model = build_student(seed=1)
        delta = extract_diff(model)
        msg = StudentUpdate(metric=0.75, delta=delta)
        payload_len = len(encode(msg)) - HEADER.size
        overhead = 4 + 2 + sum(2 + 1 + 2 * e.values.ndim for e in delta.entries)
        assert payload_len == overhead + delta.value_bytes
        assert delta.value_bytes == 4 * 4724


class TestServer:
    class ScriptedLink(ServerLink):
        def __init__(self, requests):
            self.requests = list(requests)
            self.sent = []

        def recv(self):
            return self.requests.pop(0) if self.requests else None

        def send(self, msg):
            self.sent.append(msg)

    def _state(self, checkpoint, stream, params=None):
        return ServerState(
            student=load_checkpoint(checkpoint),
            teacher=oracle_for(stream),
            params=params or AlgoParams(),
        )

    def test_init_sent_once_on_immediate_close(self, strong_checkpoint, stationary_stream):
        link = self.ScriptedLink([])
        state = self._state(strong_checkpoint, stationary_stream)
        server_loop(link, state)
        assert len(link.sent) == 1
        assert isinstance(link.sent[0], InitStudent)

    def test_three_key_frames_three_updates_in_order(self, strong_checkpoint, stationary_stream):
        reqs = [KeyFrame(i, stationary_stream.frames[i]) for i in (0, 1, 2)]
        link = self.ScriptedLink(reqs)
        state = self._state(strong_checkpoint, stationary_stream)
        server_loop(link, state)
        updates = link.sent[1:]
        assert len(updates) == 3
        assert all(isinstance(u, StudentUpdate) for u in updates)
        assert [c.frame_index for c in state.log.cycles] == [0, 1, 2]

    def test_threshold_met_update_is_current_weights(self, strong_checkpoint, stationary_stream, params):
        state = self._state(strong_checkpoint, stationary_stream, params)
        before = {k: v.copy() for k, v in state.student.trainable_params().items()}
        update = handle_message(state, KeyFrame(0, stationary_stream.frames[0]))
        assert update.metric >= params.threshold
        assert state.log.distill_steps == 0
        for entry, (key, values) in zip(update.delta.entries, before.items()):
            assert_bit_equal(entry.values, values, key)

    def test_naive_frame_served(self, strong_checkpoint, stationary_stream):
        state = self._state(strong_checkpoint, stationary_stream)
        resp = handle_message(state, NaiveFrame(2, stationary_stream.frames[2]))
        assert isinstance(resp, NaivePrediction)
        np.testing.assert_array_equal(
            resp.seg.reshape(64, 64), stationary_stream.labels[2]
        )

    def test_unexpected_message_rejected(self, strong_checkpoint, stationary_stream):
        state = self._state(strong_checkpoint, stationary_stream)
        with pytest.raises(ProtocolError):
            handle_message(state, make_update())


def sim_link(checkpoint, stream, params, mbps=1000.0, lat=DESK_LATENCIES, concurrency="parallel"):
    state = ServerState(student=load_checkpoint(checkpoint), teacher=oracle_for(stream), params=params)
    return SimClientLink(state, channel_mbps(mbps, concurrency=concurrency), lat), state


class TestClientLoop:
    def test_single_frame_video(self, strong_checkpoint, params):
        stream = generate(preset("stationary", seed=50), 1)
        link, state = sim_link(strong_checkpoint, stream, params)
        log = client_loop(iter(stream), params, link)
        assert len(log.predictions) == 1
        assert log.key_frames == 1
        assert len(link.transcript_up) == 1
        # the key frame itself is predicted with the pre-update weights
        initial = load_checkpoint(strong_checkpoint)
        from edgedistill.models import forward
        from edgedistill.metrics import argmax_segmap

        np.testing.assert_array_equal(
            log.predictions[0], argmax_segmap(forward(initial, stream.frames[0]))
        )

    def test_one_prediction_per_frame_in_order(self, strong_checkpoint, params):
        stream = generate(preset("fixed-animals", seed=51), 40)
        link, _ = sim_link(strong_checkpoint, stream, params)
        log = client_loop(iter(stream), params, link)
        assert len(log.predictions) == 40
        assert all(p.shape == (64, 64) for p in log.predictions)

    def test_first_frame_is_key_and_gaps_in_range(self, strong_checkpoint, params):
        stream = generate(preset("fixed-street", seed=52), 120)
        link, _ = sim_link(strong_checkpoint, stream, params)
        log = client_loop(iter(stream), params, link)
        keys = [c.frame_index for c in log.cycles]
        assert keys[0] == 0
        gaps = np.diff(keys)
        assert gaps.min() >= params.min_stride
        assert gaps.max() <= params.max_stride

    def test_key_ratio_within_stride_window(self, strong_checkpoint, params):
        stream = generate(preset("moving-street", seed=53), 200)
        link, _ = sim_link(strong_checkpoint, stream, params)
        log = client_loop(iter(stream), params, link)
        ratio = log.key_frames / len(stream)
        assert 1 / params.max_stride <= ratio <= 1 / params.min_stride + 1 / len(stream)

    def test_fixed_stride_mode(self, strong_checkpoint, params):
        stream = generate(preset("stationary", seed=54), 64)
        link, _ = sim_link(strong_checkpoint, stream, params)
        log = client_loop(iter(stream), params, link, fixed_stride=16)
        assert [c.frame_index for c in log.cycles] == [0, 16, 32, 48]

    def test_client_and_server_agree_after_update(self, weak_checkpoint, params):
        stream = generate(preset("stationary", seed=55), 24)
        link, state = sim_link(weak_checkpoint, stream, params)
        log = client_loop(iter(stream), params, link)
        client = load_checkpoint(weak_checkpoint)
        # replay the client's applies: after the run the last applied update
        # must make the client's trainable weights bit-equal to the server's
        from edgedistill.models import apply_update

        assert log.cycles[-1].metric is not None
        final_update = decode(link.transcript_down[-1])
        apply_update(client, final_update.delta)
        for key, values in state.student.trainable_params().items():
            assert_bit_equal(client.params[key], values, key)


class TestEndOfVideoDrain:
    def test_outstanding_update_drained(self, strong_checkpoint, params):
        # video ends right after a key frame: the trailing update is still
        # waited for and recorded so the run statistics are complete
        stream = generate(preset("stationary", seed=58), 2)
        state = ServerState(
            student=load_checkpoint(strong_checkpoint),
            teacher=oracle_for(stream),
            params=params,
        )
        link = SimClientLink(state, channel_mbps(1.0, propagation_s=0.5), DESK_LATENCIES)
        log = client_loop(iter(stream), params, link)
        assert len(log.predictions) == 2
        assert log.cycles[-1].metric is not None
        assert log.drain_wait > 0
        # measured run time stops at the last prediction, not the drain
        assert log.end_time == pytest.approx(2 * DESK_LATENCIES.t_si)


class TestNaiveLoop:
    def test_counts_and_perfect_accuracy(self, strong_checkpoint, params):
        stream = generate(preset("fixed-people", seed=56), 20)
        link, _ = sim_link(strong_checkpoint, stream, params)
        log = naive_client_loop(iter(stream), link)
        assert len(link.transcript_up) == 20
        assert len(link.transcript_down) == 1 + 20  # init + one reply per frame
        assert log.miou == [1.0] * 20

    def test_per_frame_bytes(self, strong_checkpoint, params):
        stream = generate(preset("fixed-people", seed=57), 4)
        link, _ = sim_link(strong_checkpoint, stream, params)
        naive_client_loop(iter(stream), link)
        frame_msg = 5 + 13 + 64 * 64 * 3
        pred_msg = 5 + 8 + 64 * 64
        assert link.bytes_up == 4 * frame_msg
        assert link.bytes_down == 4 * pred_msg
