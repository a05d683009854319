"""Experiment harness: generate streams, pretrain, run, compute bounds, sweep.

Every command reads an optional config file (see :mod:`edgedistill.config`)
and accepts ``--set section.key=value`` overrides.  Outputs land in the
directory given by ``--out-dir``; on failure every file the command created
is removed and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .analytics import LatencyProfile, RunStats, aggregate, bounds_report, report_csv, report_json
from .config import ExperimentConfig
from .models import build_student, load_checkpoint, pretrain_student, with_freeze_boundary
from .models import NetTeacher
from .netsim import SimResult, oracle_for, run_sim, run_socket, transfer_time
from .videogen import generate, load_stream, make_corpus, save_stream

PAPER_PROFILE = LatencyProfile(t_si=0.143, t_sd=0.013, t_ti=0.044, t_net=0.303, s_net=3.032e6)


class _OutputTracker:
    """Remembers written files so a failed command leaves nothing behind."""

    def __init__(self):
        self.paths: list[Path] = []

    def write_bytes(self, path: Path, data: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.paths.append(path)

    def write_text(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.paths.append(path)

    def cleanup(self) -> None:
        for path in self.paths:
            try:
                path.unlink()
            except OSError:
                pass


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        cfg = cfgmod.parse(Path(args.config).read_text(), cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        cfg = cfgmod.apply_setting(cfg, key.strip(), raw)
    return cfg


def _teacher_for(cfg: ExperimentConfig, stream):
    if cfg.teacher.kind == "net":
        return NetTeacher(build_student("desk-teacher", cfg.scene.classes, seed=cfg.teacher.seed))
    return oracle_for(stream, noise=cfg.teacher.noise, seed=cfg.teacher.seed)


def _run_once(cfg: ExperimentConfig, checkpoint: bytes, stream) -> SimResult:
    if cfg.run.distill == "full":
        checkpoint = with_freeze_boundary(checkpoint, 0)
    teacher = _teacher_for(cfg, stream)
    if cfg.run.mode == "socket":
        return run_socket(
            stream,
            checkpoint,
            cfg.algo,
            strategy=cfg.run.strategy,
            fixed_stride=cfg.run.fixed_stride,
            teacher=teacher,
            scenario=cfg.run.scenario,
        )
    return run_sim(
        stream,
        checkpoint,
        cfg.algo,
        cfg.channel(),
        cfg.latency,
        strategy=cfg.run.strategy,
        fixed_stride=cfg.run.fixed_stride,
        teacher=teacher,
        scenario=cfg.run.scenario,
    )


def _measured_bounds(cfg: ExperimentConfig, stats: RunStats) -> dict:
    """Analytic bounds computed from this run's actual message sizes."""
    channel = cfg.channel()
    t_net = transfer_time(stats.keyframe_msg_bytes, "up", channel) + transfer_time(
        stats.update_msg_bytes, "down", channel
    )
    profile = LatencyProfile(
        t_si=cfg.latency.t_si,
        t_sd=cfg.latency.t_sd,
        t_ti=cfg.latency.t_ti,
        t_net=t_net,
        s_net=stats.s_net,
    )
    return bounds_report(profile, cfg.algo)


def _cycles_csv(stats: RunStats) -> str:
    lines = ["frame_index,steps,metric,stride_after,wait_time,t_c"]
    for c in stats.cycles:
        t_c = "" if c.t_c is None else f"{c.t_c:.9f}"
        lines.append(
            f"{c.frame_index},{c.steps},{c.metric:.6f},{c.stride_after},{c.wait_time:.9f},{t_c}"
        )
    return "\n".join(lines) + "\n"


def _miou_csv(stats: RunStats) -> str:
    lines = ["frame,miou"]
    lines += [f"{i},{v:.6f}" for i, v in enumerate(stats.miou)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _OutputTracker()
    stream = generate(cfg.scene, args.frames or cfg.run.frames)
    out.write_bytes(Path(args.out), save_stream(stream, cfg.scene.classes))
    print(f"wrote {args.out}: {len(stream)} frames "
          f"{cfg.scene.height}x{cfg.scene.width}, {cfg.scene.classes} classes")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _OutputTracker()
    pc = cfg.pretrain
    corpus = make_corpus(pc.scenes, seed=pc.seed, height=cfg.scene.height,
                         width=cfg.scene.width, classes=cfg.scene.classes)
    student = build_student("desk-student", cfg.scene.classes, seed=cfg.run.student_seed)
    checkpoint = pretrain_student(student, corpus, epochs=pc.epochs, lr=pc.lr,
                                  loss_weight=cfg.algo.loss_weight, loss_radius=cfg.algo.loss_radius)
    out.write_bytes(Path(args.out), checkpoint)
    print(f"wrote {args.out}: {len(checkpoint)} bytes "
          f"({pc.scenes} scenes x {pc.epochs} epochs, lr {pc.lr})")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _OutputTracker()
    out_dir = Path(args.out_dir)
    checkpoint = Path(args.checkpoint).read_bytes()
    load_checkpoint(checkpoint)  # validate before spending time on the run
    if args.stream:
        stream, _ = load_stream(Path(args.stream).read_bytes())
    else:
        stream = generate(cfg.scene, cfg.run.frames)
    try:
        result = _run_once(cfg, checkpoint, stream)
        report = aggregate(result.stats)
        bounds = _measured_bounds(cfg, result.stats) if cfg.run.mode == "sim" else None
        out.write_text(out_dir / "report.json", report_json(report, bounds) + "\n")
        out.write_text(out_dir / "report.csv", report_csv([report]))
        out.write_text(out_dir / "miou_trace.csv", _miou_csv(result.stats))
        out.write_text(out_dir / "cycles.csv", _cycles_csv(result.stats))
    except BaseException:
        out.cleanup()
        raise
    print(f"{cfg.run.scenario}: {report['fps']:.2f} FPS, "
          f"key ratio {report['key_ratio_pct']:.2f}%, "
          f"traffic {report['traffic_mbps']:.3f} Mbps, "
          f"mIoU {report['miou_mean']:.4f}")
    return 0


def cmd_bounds(args) -> int:
    cfg = _load_config(args)
    if args.paper_profile:
        profile = PAPER_PROFILE
    else:
        profile = LatencyProfile(
            t_si=args.t_si if args.t_si is not None else cfg.latency.t_si,
            t_sd=args.t_sd if args.t_sd is not None else cfg.latency.t_sd,
            t_ti=args.t_ti if args.t_ti is not None else cfg.latency.t_ti,
            t_net=args.t_net,
            s_net=args.s_net_bytes,
        )
    report = bounds_report(profile, cfg.algo)
    for key, value in report.items():
        print(f"{key} = {value:.6g}")
    if args.out:
        _OutputTracker().write_text(Path(args.out), report_json(report) + "\n")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _OutputTracker()
    out_dir = Path(args.out_dir)
    checkpoint = Path(args.checkpoint).read_bytes()
    load_checkpoint(checkpoint)
    if args.stream:
        stream, _ = load_stream(Path(args.stream).read_bytes())
    else:
        stream = generate(cfg.scene, cfg.run.frames)
    rows = []
    try:
        for mbps in cfg.sweep_mbps:
            point = replace(cfg, channel_uplink_mbps=mbps, channel_downlink_mbps=mbps)
            point = replace(point, run=replace(point.run, scenario=f"{cfg.run.scenario}@{mbps:g}mbps"))
            result = _run_once(point, checkpoint, stream)
            report = aggregate(result.stats)
            report["bandwidth_mbps"] = mbps
            rows.append(report)
            out.write_text(
                out_dir / f"run_{mbps:g}mbps.json",
                report_json(report, _measured_bounds(point, result.stats)) + "\n",
            )
        header = "bandwidth_mbps,scenario,strategy,fps,key_ratio_pct,traffic_mbps,miou_mean\n"
        body = "".join(
            f"{r['bandwidth_mbps']:g},{r['scenario']},{r['strategy']},"
            f"{r['fps']:.6f},{r['key_ratio_pct']:.4f},{r['traffic_mbps']:.6f},{r['miou_mean']:.6f}\n"
            for r in rows
        )
        out.write_text(out_dir / "sweep.csv", header + body)
    except BaseException:
        out.cleanup()
        raise
    for r in rows:
        print(f"{r['bandwidth_mbps']:>6g} Mbps: {r['fps']:8.3f} FPS  "
              f"traffic {r['traffic_mbps']:.3f} Mbps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgedistill",
        description="Distributed video segmentation with online partial distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config entry (repeatable)")

    p = sub.add_parser("generate", help="render a labeled synthetic stream")
    common(p)
    p.add_argument("--out", required=True, help="output stream file (.svid)")
    p.add_argument("--frames", type=int, help="frame count (default run.frames)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="pretrain a student and save the checkpoint")
    common(p)
    p.add_argument("--out", required=True, help="output checkpoint file (.stut)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run one scenario and write its report")
    common(p)
    p.add_argument("--checkpoint", required=True, help="pretrained student checkpoint")
    p.add_argument("--stream", help="stream file; omitted = generate from config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bounds", help="print analytic traffic/throughput bounds")
    common(p)
    p.add_argument("--paper-profile", action="store_true",
                   help="use the published reference latency profile")
    p.add_argument("--t-si", type=float)
    p.add_argument("--t-sd", type=float)
    p.add_argument("--t-ti", type=float)
    p.add_argument("--t-net", type=float, default=0.303)
    p.add_argument("--s-net-bytes", type=float, default=3.032e6)
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("sweep", help="run the bandwidth sweep and combine reports")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stream", help="stream file; omitted = generate from config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (cfgmod.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
