"""Desk-scale laboratory for temporally consistent video depth estimation.

The package covers the full loop: synthetic ground truth with exact poses
and optical flow (synth), affine alignment in inverse-depth space (align),
the temporal-consistency loss family with hand-derived gradients (losses),
a small trainable spatio-temporal refiner head (head), long-video stitching
with key-frame referencing (stitcher), the evaluation protocol (metrics),
and a reproducible CLI (cli).
"""

from .align import (
    AlignmentScope,
    DegenerateFitError,
    apply_affine,
    lstsq_scale_shift,
    normalize_ssi,
    normalize_stats,
    shift_only_fit,
)
from .core import (
    AffineMap,
    CameraIntrinsics,
    InvDepthFrame,
    MetricDepthFrame,
    Pose,
    VideoDepthClip,
    clip_depth_to_inverse,
    clip_inverse_to_depth,
    depth_to_inverse,
    inverse_to_depth,
    read_vdr1,
    read_vdr2,
    rng_for,
    write_vdr1,
    write_vdr2,
)
from .head import (
    RefinerConfig,
    RefinerParams,
    TrainConfig,
    TrainSample,
    TrainState,
    TrainingDivergedError,
    check_refiner_gradients,
    init_params,
    init_train_state,
    load_checkpoint,
    make_flicker_sampler,
    refiner_backward,
    refiner_forward,
    save_checkpoint,
    train_refiner,
)
from .losses import (
    EmptyCorrespondenceError,
    FiniteDiffReport,
    LossResult,
    LossWeights,
    TGMThreshold,
    finite_diff_check,
    opw_loss,
    se_loss,
    ssi_loss,
    tgm_loss,
    total_loss,
    video_align_loss,
)
from .metrics import (
    EmptyMaskError,
    EvalReport,
    absrel,
    delta1,
    evaluate_video,
    tae,
    temporal_profile,
    write_pgm,
)
from .stitcher import (
    ClipSpec,
    DriftReport,
    PredictorError,
    StitchConfig,
    Strategy,
    align_window,
    drift_experiment,
    infer_long,
    plan_windows,
    stitch_overlap,
)
from .synth import (
    Box,
    FlickerParams,
    Forward,
    Handheld,
    Orbit,
    SceneCollisionError,
    SceneConfig,
    Sphere,
    SyntheticSequence,
    WindowedFlickerPredictor,
    default_intrinsics,
    flicker_predictor,
    generate_scene,
    gt_optical_flow,
    render_depth,
    trajectory_poses,
    windowed_flicker_predictor,
)

__version__ = "0.1.0"
