"""Synthetic scenes with analytic ground truth.

Scenes are a ground plane plus spheres and axis-aligned boxes, rendered by
exact ray casting, so depth, camera pose, and optical flow are all known in
closed form. The world frame matches the camera frame convention: x right,
y down, z forward; "above the ground plane" therefore means smaller y.

The flicker oracles fabricate the failure mode the temporal losses exist to
fix: predictions that are per-frame (or per-window) affine corruptions of the
truth. Every random draw is keyed by (seed, stream, index) so any frame or
window can be regenerated in isolation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CameraIntrinsics,
    InvDepthFrame,
    MetricDepthFrame,
    Pose,
    VideoDepthClip,
    rng_for,
)
from .gridops import bilinear_sample

STREAM_FRAME = 1
STREAM_WINDOW = 2
STREAM_TRAJECTORY = 3

MIN_CLEARANCE = 0.1


class SceneCollisionError(ValueError):
    """Camera path passes within the clearance margin of scene geometry."""


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and half extents."""

    center: tuple
    half_extents: tuple


@dataclass(frozen=True)
class Forward:
    """Constant-velocity dolly along +z, pitched slightly toward the ground."""

    speed: float = 0.15
    height: float = 1.5
    pitch: float = 0.3


@dataclass(frozen=True)
class Orbit:
    """Circular path around the world origin, always looking at the scene."""

    radius: float = 6.0
    angular_step: float = 0.02
    height: float = 1.5


@dataclass(frozen=True)
class Handheld:
    """Smoothed random-walk jitter in position and orientation."""

    sigma_pos: float = 0.02
    sigma_rot: float = 0.008
    smoothing: int = 5
    height: float = 1.5


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    """Pinhole with ~53 degree horizontal FOV and centered principal point."""
    return CameraIntrinsics(
        fx=float(width), fy=float(width), cx=(width - 1) / 2.0, cy=(height - 1) / 2.0
    )


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    frame_count: int = 32
    plane: float = 0.0
    objects: tuple = (
        Sphere(center=(0.6, -0.5, 6.0), radius=0.5),
        Sphere(center=(-1.4, -0.35, 9.0), radius=0.35),
        Box(center=(1.8, -0.4, 11.0), half_extents=(0.5, 0.4, 0.5)),
    )
    trajectory: object = Forward()
    intrinsics: CameraIntrinsics = None
    seed: int = 0

    def __post_init__(self):
        if self.intrinsics is None:
            object.__setattr__(self, "intrinsics", default_intrinsics(self.width, self.height))


@dataclass(frozen=True)
class SyntheticSequence:
    """A rendered sequence: GT metric depth, poses, intrinsics, GT flow."""

    gt: VideoDepthClip
    poses: tuple
    intrinsics: CameraIntrinsics
    flows: tuple = None  # ((flow (H, W, 2), valid (H, W)) per consecutive pair)
    config: SceneConfig = None


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def _pixel_dirs(intrinsics: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    xs = (u[None, :] - intrinsics.cx) / intrinsics.fx
    ys = (v[:, None] - intrinsics.cy) / intrinsics.fy
    dirs = np.empty((height, width, 3))
    dirs[..., 0] = xs
    dirs[..., 1] = ys
    dirs[..., 2] = 1.0
    return dirs


def _ray_plane(origin, dirs, plane_y):
    dy = dirs[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane_y - origin[1]) / dy
    return np.where((dy > 1e-12) & (t > 1e-9), t, np.inf)


def _ray_sphere(origin, dirs, sphere: Sphere):
    oc = origin - np.asarray(sphere.center, dtype=np.float64)
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(dirs * oc, axis=-1)
    c = float(oc @ oc) - sphere.radius**2
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - sq) / (2.0 * a)
    return np.where(hit & (t_near > 1e-9), t_near, np.inf)


def _ray_box(origin, dirs, box: Box):
    center = np.asarray(box.center, dtype=np.float64)
    half = np.asarray(box.half_extents, dtype=np.float64)
    bmin = center - half
    bmax = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (bmin - origin) / dirs
        t2 = (bmax - origin) / dirs
    # fmin/fmax ignore the NaNs produced by rays parallel to a slab.
    t_near = np.fmax.reduce(np.fmin(t1, t2), axis=-1)
    t_far = np.fmin.reduce(np.fmax(t1, t2), axis=-1)
    hit = (t_near <= t_far) & (t_far > 0.0) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


def render_depth(
    pose: Pose,
    intrinsics: CameraIntrinsics,
    width: int,
    height: int,
    plane: float = 0.0,
    objects=(),
) -> MetricDepthFrame:
    """Exact depth of the nearest surface along each pixel ray.

    Rays are parameterized with unit z in the camera frame, so the ray
    parameter t at the hit IS the camera-space depth. Pixels whose ray
    escapes to the sky are marked invalid.
    """
    dirs_cam = _pixel_dirs(intrinsics, width, height)
    dirs_world = dirs_cam @ pose.rotation.T
    origin = pose.translation

    t_best = _ray_plane(origin, dirs_world, plane)
    for obj in objects:
        if isinstance(obj, Sphere):
            t_obj = _ray_sphere(origin, dirs_world, obj)
        elif isinstance(obj, Box):
            t_obj = _ray_box(origin, dirs_world, obj)
        else:
            raise TypeError(f"unknown object type {type(obj).__name__}")
        t_best = np.minimum(t_best, t_obj)

    mask = np.isfinite(t_best)
    values = np.where(mask, t_best, 1.0)
    return MetricDepthFrame(values=values, mask=mask)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


def _look_at(position: np.ndarray, target: np.ndarray) -> Pose:
    z = target - position
    z = z / np.linalg.norm(z)
    down = np.array([0.0, 1.0, 0.0])
    x = np.cross(down, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("look direction is vertical; orbit cannot frame it")
    x = x / nx
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=1)
    return Pose(rotation=r, translation=position)


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def _smooth_walk(rng, n, sigma, width):
    steps = sigma * rng.standard_normal((n, 3))
    walk = np.cumsum(steps, axis=0)
    if width > 1:
        kernel = np.ones(width) / width
        walk = np.stack([np.convolve(walk[:, i], kernel, mode="same") for i in range(3)], axis=1)
    return walk


def trajectory_poses(config: SceneConfig) -> tuple:
    """Camera-to-world pose per frame for the configured trajectory."""
    n = config.frame_count
    traj = config.trajectory
    cam_y = config.plane - getattr(traj, "height", 1.5)

    if isinstance(traj, Forward):
        # Pitch the camera down so the ground dominates over the horizon.
        a = traj.pitch
        rot = np.array(
            [[1.0, 0.0, 0.0], [0.0, np.cos(a), np.sin(a)], [0.0, -np.sin(a), np.cos(a)]]
        )
        return tuple(
            Pose(rotation=rot, translation=np.array([0.0, cam_y, k * traj.speed]))
            for k in range(n)
        )

    if isinstance(traj, Orbit):
        target = np.array([0.0, config.plane - 0.5, 0.0])
        poses = []
        for k in range(n):
            th = k * traj.angular_step
            pos = np.array([traj.radius * np.sin(th), cam_y, -traj.radius * np.cos(th)])
            poses.append(_look_at(pos, target))
        return tuple(poses)

    if isinstance(traj, Handheld):
        rng = rng_for(config.seed, STREAM_TRAJECTORY)
        pos_walk = _smooth_walk(rng, n, traj.sigma_pos, traj.smoothing)
        ang_walk = _smooth_walk(rng, n, traj.sigma_rot, traj.smoothing)
        base = np.array([0.0, cam_y, 0.0])
        poses = []
        for k in range(n):
            yaw, pitch, roll = ang_walk[k]
            rot = _rot_y(yaw) @ _rot_x(pitch + 0.25) @ _rot_z(roll)
            poses.append(Pose(rotation=rot, translation=base + pos_walk[k]))
        return tuple(poses)

    raise TypeError(f"unknown trajectory type {type(traj).__name__}")


def _validate_clearance(config: SceneConfig, poses) -> None:
    for k, pose in enumerate(poses):
        p = pose.translation
        if config.plane - p[1] < MIN_CLEARANCE:
            raise SceneCollisionError(f"frame {k}: camera within {MIN_CLEARANCE} m of ground plane")
        for obj in config.objects:
            if isinstance(obj, Sphere):
                d = np.linalg.norm(p - np.asarray(obj.center)) - obj.radius
            else:
                delta = np.abs(p - np.asarray(obj.center)) - np.asarray(obj.half_extents)
                d = np.linalg.norm(np.maximum(delta, 0.0))
                if np.all(delta < 0):
                    d = 0.0
            if d < MIN_CLEARANCE:
                raise SceneCollisionError(
                    f"frame {k}: camera within {MIN_CLEARANCE} m of {type(obj).__name__}"
                )


def generate_scene(config: SceneConfig, with_flow: bool = True) -> SyntheticSequence:
    """Render the full sequence; optionally attach GT optical flow per pair."""
    poses = trajectory_poses(config)
    _validate_clearance(config, poses)
    frames = [
        render_depth(
            pose, config.intrinsics, config.width, config.height, config.plane, config.objects
        )
        for pose in poses
    ]
    seq = SyntheticSequence(
        gt=VideoDepthClip.from_frames(frames),
        poses=poses,
        intrinsics=config.intrinsics,
        flows=None,
        config=config,
    )
    if with_flow and len(frames) > 1:
        flows = tuple(gt_optical_flow(seq, k) for k in range(len(frames) - 1))
        seq = dataclasses.replace(seq, flows=flows)
    return seq


# ---------------------------------------------------------------------------
# Ground-truth optical flow
# ---------------------------------------------------------------------------


def gt_optical_flow(seq: SyntheticSequence, k: int, occlusion_rel: float = 0.01):
    """Flow from frame k to k+1 derived from poses and GT depth.

    flow(u, v) is the reprojection of the 3-D point seen at (u, v) into frame
    k+1, minus (u, v). A pixel is flagged invalid when it has no depth, leaves
    the image, lands on invalid target pixels, or is occluded: reprojected
    depth more than `occlusion_rel` relative beyond the target's own depth.
    """
    if not 0 <= k < len(seq.gt) - 1:
        raise IndexError("pair index out of range")
    intr = seq.intrinsics
    src = seq.gt.frames[k]
    dst = seq.gt.frames[k + 1]
    h, w = src.values.shape

    dirs = _pixel_dirs(intr, w, h)
    pts_cam = dirs * src.values[..., None]
    pose_s, pose_d = seq.poses[k], seq.poses[k + 1]
    pts_world = pts_cam @ pose_s.rotation.T + pose_s.translation
    pts_dst = (pts_world - pose_d.translation) @ pose_d.rotation

    z = pts_dst[..., 2]
    in_front = z > 1e-9
    zsafe = np.where(in_front, z, 1.0)
    u2 = intr.fx * pts_dst[..., 0] / zsafe + intr.cx
    v2 = intr.fy * pts_dst[..., 1] / zsafe + intr.cy

    sampled, ok, _, _ = bilinear_sample(dst.values, dst.mask, u2, v2)
    not_occluded = z <= sampled * (1.0 + occlusion_rel)
    valid = src.mask & in_front & ok & not_occluded

    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    flow = np.stack([u2 - uu, v2 - vv], axis=-1)
    flow = np.where(valid[..., None], flow, 0.0)
    return flow, valid


# ---------------------------------------------------------------------------
# Flicker oracles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlickerParams:
    """Noise levels for the fake predictors.

    sigma_scale / sigma_shift corrupt each frame with its own affine map
    (scales are log-normal: scale = exp(sigma_scale * z), keeping them
    positive); sigma_pixel adds i.i.d. Gaussian noise per pixel;
    sigma_window_scale / sigma_window_shift are the per-window equivalents
    used by the windowed oracle.
    """

    sigma_scale: float = 0.0
    sigma_shift: float = 0.0
    sigma_pixel: float = 0.0
    sigma_window_scale: float = 0.0
    sigma_window_shift: float = 0.0
    seed: int = 0


def _corrupt(values, mask, scale, shift, noise):
    vals = scale * values + shift
    if noise is not None:
        vals = vals + noise
    return np.where(mask, vals, 0.0)


def flicker_predictor(gt: VideoDepthClip, params: FlickerParams) -> VideoDepthClip:
    """Per-frame affine flicker plus pixel noise on GT inverse depth.

    Frame i draws from the stream (seed, STREAM_FRAME, timeline[i]), in the
    fixed order scale z, shift z, pixel field, so any frame can be
    regenerated without touching its neighbors.
    """
    frames = []
    for i, f in enumerate(gt.frames):
        rng = rng_for(params.seed, STREAM_FRAME, gt.timeline[i])
        scale = float(np.exp(params.sigma_scale * rng.standard_normal()))
        shift = float(params.sigma_shift * rng.standard_normal())
        noise = params.sigma_pixel * rng.standard_normal(f.values.shape)
        frames.append(
            InvDepthFrame(values=_corrupt(f.values, f.mask, scale, shift, noise), mask=f.mask)
        )
    return VideoDepthClip(frames=tuple(frames), timeline=gt.timeline)


class WindowedFlickerPredictor:
    """Clip predictor applying one shared affine corruption per window, plus
    per-frame affine jitter and pixel noise on top.

    All draws come from the single stream (params.seed, STREAM_WINDOW,
    ordinal) in a fixed order: window scale z, window shift z, then per frame
    scale z / shift z / pixel field. Strategies that hand the same ordinal
    and frame count to this oracle therefore receive identical noise, which
    is what makes paired stitching experiments tight.
    """

    def __init__(self, params: FlickerParams):
        self.params = params

    def __call__(self, frames, spec) -> VideoDepthClip:
        p = self.params
        rng = rng_for(p.seed, STREAM_WINDOW, spec.ordinal)
        wscale = float(np.exp(p.sigma_window_scale * rng.standard_normal()))
        wshift = float(p.sigma_window_shift * rng.standard_normal())
        out = []
        for f in frames:
            scale = wscale * float(np.exp(p.sigma_scale * rng.standard_normal()))
            shift = wshift + float(p.sigma_shift * rng.standard_normal())
            noise = p.sigma_pixel * rng.standard_normal(f.values.shape)
            out.append(
                InvDepthFrame(values=_corrupt(f.values, f.mask, scale, shift, noise), mask=f.mask)
            )
        return VideoDepthClip(frames=tuple(out), timeline=spec.all_indices())


def windowed_flicker_predictor(gt: VideoDepthClip, params: FlickerParams, clip_spec) -> VideoDepthClip:
    """Windowed oracle applied to the clip_spec's slice of a full GT video."""
    pos = {t: i for i, t in enumerate(gt.timeline)}
    frames = [gt.frames[pos[i]] for i in clip_spec.all_indices()]
    return WindowedFlickerPredictor(params)(frames, clip_spec)
