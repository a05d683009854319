"""Edge-cloud video segmentation with online partial distillation.

A tiny on-device student network predicts every frame; sparse key frames go
to a server where a teacher labels them and the student's trainable suffix
is retrained and shipped back asynchronously.  The package also provides a
deterministic virtual-clock network simulator and closed-form traffic and
throughput bounds for configuring the system ahead of deployment.
"""

from .analytics import (
    LatencyProfile,
    RunStats,
    aggregate,
    bounds_report,
    t_c_bounds,
    throughput_bounds,
    total_time,
    traffic_bounds,
    traffic_general,
)
from .distill import AlgoParams, DistillResult, train_student
from .metrics import class_iou, mean_iou, weight_mask, weighted_ce_loss
from .models import (
    ArchSpec,
    BlockSpec,
    Frame,
    NetTeacher,
    OracleTeacher,
    StudentModel,
    WeightDelta,
    apply_update,
    build_student,
    desk_student_arch,
    desk_teacher_arch,
    extract_diff,
    forward,
    load_checkpoint,
    pretrain_student,
    save_checkpoint,
    teacher_infer,
)
from .netsim import (
    DESK_LATENCIES,
    PAPER_LATENCIES,
    ChannelConfig,
    SimLatencies,
    VirtualClock,
    channel_mbps,
    run_sim,
    run_socket,
    transfer_time,
)
from .scheduler import Stride, initial_stride, next_stride, stride_ratio
from .videogen import (
    PRESETS,
    LabeledStream,
    SceneConfig,
    generate,
    load_stream,
    preset,
    resample_fps,
    save_stream,
)

__version__ = "0.1.0"
