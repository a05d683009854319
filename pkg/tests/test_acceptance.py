"""Acceptance suite: one test per acceptance criterion, at stated tolerances.

Each test prints a single PASS line once its assertions hold, so running
``pytest -s tests/test_acceptance.py`` gives a per-criterion checklist.
"""

import numpy as np
import pytest

from edgedistill.analytics import (
    LatencyProfile,
    t_c_bounds,
    throughput_bounds,
    traffic_bounds,
)
from edgedistill.distill import AlgoParams, train_student
from edgedistill.metrics import mean_iou
from edgedistill.models import load_checkpoint, with_freeze_boundary
from edgedistill.netsim import (
    DESK_LATENCIES,
    SimLatencies,
    channel_mbps,
    run_sim,
    run_socket,
    transfer_time,
)
from edgedistill.protocol import HEADER
from edgedistill.scheduler import Stride, initial_stride, next_stride, stride_ratio
from edgedistill.videogen import PRESETS, generate, preset

from gradcheck import analytic_gradients, max_relative_error, numeric_gradients
from test_metrics import brute_force_mean_iou
from test_tape import _sample_net

PAPER_PARAMS = AlgoParams(threshold=0.8, max_updates=8, min_stride=8, max_stride=64)
PAPER_PROFILE = LatencyProfile(t_si=0.143, t_sd=0.013, t_ti=0.044, t_net=0.303, s_net=3.032e6)


def ok(criterion: int, detail: str):
    print(f"\nACCEPTANCE {criterion}: PASS — {detail}")


def run_profile(stats, lat, channel) -> LatencyProfile:
    """Analytic profile for a finished run, from its actual message sizes."""
    t_net = transfer_time(stats.keyframe_msg_bytes, "up", channel) + transfer_time(
        stats.update_msg_bytes, "down", channel
    )
    return LatencyProfile(
        t_si=lat.t_si, t_sd=lat.t_sd, t_ti=lat.t_ti, t_net=t_net, s_net=stats.s_net
    )


def test_criterion_1_analytic_reproduction():
    th_lo, th_hi = throughput_bounds(PAPER_PROFILE, PAPER_PARAMS)
    assert th_hi == pytest.approx(6.99, rel=0.005)
    assert th_lo > 5.0
    tr_lo, tr_hi = traffic_bounds(PAPER_PROFILE, PAPER_PARAMS)
    assert tr_lo / 1e6 == pytest.approx(2.53, rel=0.01)
    assert tr_hi / 1e6 == pytest.approx(21.2, rel=0.01)
    ok(1, f"throughput ({th_lo:.3f}, {th_hi:.3f}) FPS, traffic ({tr_lo / 1e6:.3f}, {tr_hi / 1e6:.2f}) Mbps")


def test_criterion_2_bound_obedience(strong_checkpoint, weak_checkpoint):
    rng = np.random.default_rng(20260809)
    preset_names = sorted(PRESETS)
    checked = 0
    for i in range(50):
        min_stride = int(rng.integers(2, 9))
        max_stride = min(64, min_stride * int(2 ** rng.integers(1, 4)))
        params = AlgoParams(
            threshold=float(rng.uniform(0.3, 0.92)),
            max_updates=int(rng.integers(1, 9)),
            min_stride=min_stride,
            max_stride=max_stride,
        )
        n = max(5 * max_stride, 20 * min_stride)
        n += (-n) % min_stride  # keep n a multiple of min_stride
        scene = preset(preset_names[int(rng.integers(0, len(preset_names)))],
                       seed=int(rng.integers(0, 2**31)))
        stream = generate(scene, n)
        lat = SimLatencies(
            t_si=float(rng.uniform(0.002, 0.02)),
            t_sd=float(rng.uniform(0.0005, 0.01)),
            t_ti=float(rng.uniform(0.002, 0.05)),
        )
        channel = channel_mbps(
            float(10 ** rng.uniform(np.log10(5), np.log10(200))),
            propagation_s=float(rng.uniform(0.0, 0.03)),
            concurrency="parallel" if i % 2 == 0 else "serial",
        )
        checkpoint = strong_checkpoint if i % 3 else weak_checkpoint
        res = run_sim(stream, checkpoint, params, channel, lat)
        stats = res.stats
        profile = run_profile(stats, lat, channel)

        tc_lo, tc_hi = t_c_bounds(profile, params)
        samples = [c.t_c for c in stats.cycles if c.t_c is not None]
        assert samples, "scenario produced no complete cycle windows"
        for t_c in samples:
            assert tc_lo - 1e-9 <= t_c <= tc_hi + 1e-9

        assert stats.steady_cycles >= 1
        tr_lo, tr_hi = traffic_bounds(profile, params)
        measured_tr = stats.steady_traffic_bps
        assert tr_lo * (1 - 1e-9) <= measured_tr <= tr_hi * (1 + 1e-9)

        th_lo, th_hi = throughput_bounds(profile, params)
        measured_th = stats.steady_throughput_fps
        assert th_lo * (1 - 1e-9) <= measured_th <= th_hi * (1 + 1e-9)
        checked += 1
    ok(2, f"{checked} randomized scenarios obey every t_c/traffic/throughput bound")


def test_criterion_3_desk_scale_reduction(strong_checkpoint):
    params = PAPER_PARAMS
    stream = generate(preset("stationary", seed=42), 5000)
    res = run_sim(stream, strong_checkpoint, params, channel_mbps(80), DESK_LATENCIES)
    stats = res.stats

    naive = run_sim(
        generate(preset("stationary", seed=42), 64),
        strong_checkpoint,
        params,
        channel_mbps(80),
        DESK_LATENCIES,
        strategy="naive",
    ).stats
    s_naive = naive.keyframe_msg_bytes + naive.update_msg_bytes
    naive_per_frame = (naive.bytes_up + naive.bytes_down) / naive.n
    assert naive_per_frame == s_naive

    per_frame_bytes = (stats.bytes_up + stats.bytes_down) / stats.n
    budget = (1 / params.min_stride) * naive_per_frame * (stats.s_net / s_naive)
    assert per_frame_bytes <= budget

    ratio = stats.k / stats.n
    assert ratio <= 1.2 / params.max_stride
    assert ratio >= 1.0 / params.max_stride
    ok(3, f"per-frame bytes {per_frame_bytes:.1f} <= budget {budget:.1f}; "
          f"key ratio {100 * ratio:.3f}% within 1.2x of {100 / params.max_stride:.3f}%")


def test_criterion_4_partial_byte_accounting(strong_checkpoint):
    params = PAPER_PARAMS
    stream = generate(preset("stationary", seed=42), 48)
    partial = run_sim(stream, strong_checkpoint, params, channel_mbps(80), DESK_LATENCIES).stats
    full_ckpt = with_freeze_boundary(strong_checkpoint, 0)
    full = run_sim(stream, full_ckpt, params, channel_mbps(80), DESK_LATENCIES).stats

    spec = load_checkpoint(strong_checkpoint).spec
    trainable = spec.param_count(spec.trainable_keys())
    total = spec.param_count()

    def payload_and_overhead(stats, keys):
        shapes = dict(spec.param_shapes())
        overhead = 4 + 2 + sum(2 + 1 + 2 * len(shapes[k]) for k in keys)
        payload = stats.update_msg_bytes - HEADER.size
        return payload, overhead

    partial_payload, partial_overhead = payload_and_overhead(partial, spec.trainable_keys())
    assert partial_payload == 4 * trainable + partial_overhead

    full_keys = [k for k, _ in spec.param_shapes()]
    full_payload, full_overhead = payload_and_overhead(full, full_keys)
    assert full_payload == 4 * total + full_overhead

    # the parameter-value bytes scale by exactly the total/trainable ratio
    assert (full_payload - full_overhead) * trainable == (partial_payload - partial_overhead) * total
    ok(4, f"update payloads: partial {partial_payload} B, full {full_payload} B, "
          f"value bytes ratio exactly {total}/{trainable}")


def test_criterion_5_scheduler_properties():
    params = PAPER_PARAMS
    t = params.threshold
    assert stride_ratio(0.0, t) == 0.0
    assert stride_ratio(t, t) == 1.0
    assert stride_ratio(1.0, t) == 2.0

    grid = [i / 1000.0 for i in range(1001)]
    ratios = [stride_ratio(m, t) for m in grid]
    for a, b in zip(ratios, ratios[1:]):
        assert b >= a  # non-decreasing
        assert b - a < 0.0051  # continuous: max slope 5 on a 0.001 grid
    for m in grid:
        for start in (8.0, 13.7, 64.0):
            s = next_stride(Stride(start), m, params)
            assert params.min_stride <= s.effective(params) <= params.max_stride

    s = initial_stride(params)
    for _ in range(3):
        s = next_stride(s, 1.0, params)
    assert s.effective(params) == params.max_stride
    ok(5, "anchors exact, monotone/continuous on the 0.001 grid, 8->64 in 3 calls")


def test_criterion_6_numerics(weak_checkpoint, stationary_stream):
    rng = np.random.default_rng(606)
    for _ in range(20):
        params, loss_fn = _sample_net(rng)
        ana = analytic_gradients(loss_fn, params)
        num = numeric_gradients(loss_fn, params, h=1e-3)
        for key in params:
            assert max_relative_error(ana[key], num[key], floor=1e-3) < 1e-4

    model = load_checkpoint(weak_checkpoint)
    frozen_before = {
        k: v.copy()
        for k, v in model.params.items()
        if model.spec.block_of_key(k) < model.spec.freeze_boundary
    }
    noise = np.random.default_rng(1).integers(0, 4, size=(64, 64)).astype(np.uint8)
    steps = 0
    while steps < 100:
        steps += train_student(
            model, stationary_stream.frames[0], noise, PAPER_PARAMS
        ).steps_taken
    for key, values in frozen_before.items():
        assert values.dtype == model.params[key].dtype
        assert np.array_equal(values, model.params[key]), key

    rng = np.random.default_rng(99)
    for _ in range(50):
        k = int(rng.integers(2, 5))
        shape = (int(rng.integers(3, 10)), int(rng.integers(3, 10)))
        pred = rng.integers(0, k, size=shape).astype(np.uint8)
        label = rng.integers(0, k, size=shape).astype(np.uint8)
        assert mean_iou(pred, label) == brute_force_mean_iou(pred, label)
    ok(6, f"20 gradcheck nets < 1e-4, frozen prefix bitwise stable over {steps} steps, "
          "50 mIoU oracle matches")


def test_criterion_7_protocol_fidelity(strong_checkpoint, weak_checkpoint, params):
    # Alg-1 early exit: a student already above threshold takes zero steps
    stream = generate(preset("stationary", seed=42), 64)
    model = load_checkpoint(strong_checkpoint)
    result = train_student(model, stream.frames[0], stream.labels[0], params)
    assert result.initial_metric >= params.threshold and result.steps_taken == 0

    # first frame is a key frame; updates applied within the blocking window,
    # which enforces at most one outstanding round trip
    res = run_sim(stream, strong_checkpoint, params, channel_mbps(80), DESK_LATENCIES)
    assert res.stats.cycles[0].frame_index == 0
    for cycle in res.client.cycles:
        assert cycle.applied_at_step is not None
        assert 1 <= cycle.applied_at_step <= params.min_stride
    gaps = np.diff([c.frame_index for c in res.stats.cycles])
    assert gaps.min() >= params.min_stride

    # blocking happens exactly when the round trip exceeds the stride window
    skip_params = AlgoParams(threshold=0.05)  # student always skips: d = 0
    base = channel_mbps(80)
    kf, upd = res.stats.keyframe_msg_bytes, res.stats.update_msg_bytes
    round_trip = transfer_time(kf, "up", base) + DESK_LATENCIES.t_ti + transfer_time(upd, "down", base)
    for margin, expect_block in ((1.02, True), (0.98, False)):
        lat = SimLatencies(
            t_si=round_trip / (skip_params.min_stride * margin),
            t_sd=DESK_LATENCIES.t_sd,
            t_ti=DESK_LATENCIES.t_ti,
        )
        r = run_sim(stream, strong_checkpoint, skip_params, base, lat)
        blocked = any(c.wait_time > 0 for c in r.stats.cycles if c.t_c is not None)
        assert blocked == expect_block

    # byte-identical transcripts between the virtual clock and real sockets
    stream2 = generate(preset("fixed-street", seed=7), 48)
    sim = run_sim(stream2, weak_checkpoint, params, channel_mbps(80), DESK_LATENCIES)
    sock = run_socket(stream2, weak_checkpoint, params)
    assert sim.transcript_up == sock.transcript_up
    assert sim.transcript_down == sock.transcript_down
    ok(7, "early exit, first-frame key, bounded apply step, blocking boundary, "
          f"transcripts identical ({len(sim.transcript_up)} up / {len(sim.transcript_down)} down)")


def test_criterion_8_bandwidth_sweep_shape(strong_checkpoint):
    params = PAPER_PARAMS
    points = (90.0, 80.0, 60.0, 40.0, 20.0, 12.0, 8.0)
    stream = generate(preset("stationary", seed=42), 512)

    adaptive_fps = {}
    naive_fps = {}
    hiding = {}
    for mbps in points:
        channel = channel_mbps(mbps)
        res = run_sim(stream, strong_checkpoint, params, channel, DESK_LATENCIES)
        adaptive_fps[mbps] = res.stats.n / res.stats.time_s
        profile = run_profile(res.stats, DESK_LATENCIES, channel)
        hiding[mbps] = profile.t_net + profile.t_ti <= params.min_stride * profile.t_si
        naive = run_sim(stream, strong_checkpoint, params, channel, DESK_LATENCIES, strategy="naive")
        naive_fps[mbps] = naive.stats.n / naive.stats.time_s

    hidden = [m for m in points if hiding[m]]
    exposed = [m for m in points if not hiding[m]]
    assert hidden and exposed, f"sweep must straddle the hiding boundary: {hiding}"

    flat = [adaptive_fps[m] for m in hidden]
    assert (max(flat) - min(flat)) / max(flat) < 0.05

    ordered = [adaptive_fps[m] for m in sorted(exposed, reverse=True)]
    boundary_fps = min(flat)
    for prev, nxt in zip([boundary_fps] + ordered, ordered):
        assert nxt <= prev + 1e-9  # decreases once hiding is violated

    naive_ordered = [naive_fps[m] for m in points]
    for prev, nxt in zip(naive_ordered, naive_ordered[1:]):
        assert nxt < prev  # naive loses throughput at every reduction
    ok(8, f"hiding holds at {hidden} Mbps (flat within 5%), degrades below; "
          "naive strictly decreasing")
