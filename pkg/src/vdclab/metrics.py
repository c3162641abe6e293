"""Video depth evaluation: alignment, AbsRel, delta1, and the temporal
alignment error (TAE) measured by reprojecting each depth frame into its
neighbor's view with the camera poses.

The protocol for a full video: fit one scale/shift over the whole clip in
inverse-depth space, convert to metric depth, then pool AbsRel/delta1 over
every valid pixel and average TAE over all adjacent pairs in both time
directions. Pooling a shared alignment first is what makes the numbers
meaningful for affine-invariant predictions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .align import AlignmentScope, apply_affine, lstsq_scale_shift, shift_only_fit
from .core import (
    AffineMap,
    CameraIntrinsics,
    MetricDepthFrame,
    Pose,
    VideoDepthClip,
    clip_inverse_to_depth,
    depth_to_inverse,
)
from .synth import _pixel_dirs

DELTA1_RATIO = 1.25
_MIN_Z = 1e-9


class EmptyMaskError(ValueError):
    """No valid pixel survives masking; the metric is undefined."""


def _as_frame_list(x):
    if isinstance(x, VideoDepthClip):
        return list(x.frames)
    if isinstance(x, MetricDepthFrame):
        return [x]
    return list(x)


def _pooled_ratio_arrays(pred, gt):
    pf = _as_frame_list(pred)
    gf = _as_frame_list(gt)
    if len(pf) != len(gf):
        raise ValueError("pred and gt frame counts differ")
    p_all, g_all = [], []
    for p, g in zip(pf, gf):
        if p.values.shape != g.values.shape:
            raise ValueError("pred and gt shapes differ")
        joint = p.mask & g.mask
        p_all.append(p.values[joint])
        g_all.append(g.values[joint])
    p_cat = np.concatenate(p_all) if p_all else np.empty(0)
    g_cat = np.concatenate(g_all) if g_all else np.empty(0)
    if p_cat.size == 0:
        raise EmptyMaskError("no jointly valid pixels")
    return p_cat, g_cat


def absrel(pred, gt) -> float:
    """Mean over valid pixels of |pred - gt| / gt, pooled over all frames."""
    p, g = _pooled_ratio_arrays(pred, gt)
    return float(np.mean(np.abs(p - g) / g))


def delta1(pred, gt) -> float:
    """Fraction of valid pixels with max(pred/gt, gt/pred) < 1.25."""
    p, g = _pooled_ratio_arrays(pred, gt)
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < DELTA1_RATIO))


def _splat_depth(src: MetricDepthFrame, pose_src: Pose, pose_tgt: Pose,
                 intrinsics: CameraIntrinsics):
    """Reproject src depth into the target view.

    Back-projects every valid source pixel, transforms through the relative
    pose, projects with the shared intrinsics, and splats the transformed z
    onto the nearest target pixel keeping the per-pixel minimum (z-buffer,
    which is also the occlusion handling). Returns (depth, hit_mask).
    """
    h, w = src.values.shape
    dirs = _pixel_dirs(intrinsics, w, h)
    pts_cam = src.values[..., None] * dirs
    world = pts_cam @ pose_src.rotation.T + pose_src.translation
    cam_t = (world - pose_tgt.translation) @ pose_tgt.rotation

    z = cam_t[..., 2]
    ok = src.mask & (z > _MIN_Z)
    zs = np.where(ok, z, 1.0)
    u = intrinsics.fx * cam_t[..., 0] / zs + intrinsics.cx
    v = intrinsics.fy * cam_t[..., 1] / zs + intrinsics.cy
    ui = np.floor(u + 0.5).astype(np.int64)
    vi = np.floor(v + 0.5).astype(np.int64)
    ok &= (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)

    buf = np.full(h * w, np.inf)
    np.minimum.at(buf, vi[ok] * w + ui[ok], z[ok])
    buf = buf.reshape(h, w)
    hit = np.isfinite(buf)
    return np.where(hit, buf, 1.0), hit


def tae(pred_depth, poses, intrinsics: CameraIntrinsics) -> float:
    """Temporal alignment error over adjacent frame pairs, both directions.

    Each direction reprojects one frame into the other's view and takes the
    AbsRel against the depth actually stored there, over pixels that both
    received a splat and are valid. Terms with no such pixel are skipped and
    the averaging denominator shrinks accordingly.
    """
    frames = _as_frame_list(pred_depth)
    poses = list(poses)
    if len(frames) < 2:
        raise ValueError("tae needs at least two frames")
    if len(poses) != len(frames):
        raise ValueError("one pose per frame required")

    total = 0.0
    n_terms = 0
    n_skipped = 0
    for k in range(len(frames) - 1):
        for src, tgt, p_src, p_tgt in (
            (frames[k], frames[k + 1], poses[k], poses[k + 1]),
            (frames[k + 1], frames[k], poses[k + 1], poses[k]),
        ):
            proj, hit = _splat_depth(src, p_src, p_tgt, intrinsics)
            sel = hit & tgt.mask
            if not sel.any():
                n_skipped += 1
                continue
            total += float(np.mean(np.abs(proj[sel] - tgt.values[sel]) / tgt.values[sel]))
            n_terms += 1
    if n_terms == 0:
        raise EmptyMaskError("no frame pair produced overlapping coverage")
    if n_skipped:
        warnings.warn(
            f"tae: {n_skipped} of {n_terms + n_skipped} directional terms had no "
            "coverage and were skipped",
            RuntimeWarning,
        )
    return total / n_terms


@dataclass
class EvalReport:
    absrel: float
    delta1: float
    tae: float  # None when poses were not provided
    frames_evaluated: int
    alignment: AffineMap

    def __post_init__(self):
        if not 0.0 <= self.delta1 <= 1.0:
            raise ValueError("delta1 must lie in [0, 1]")
        if self.absrel < 0 or (self.tae is not None and self.tae < 0):
            raise ValueError("error metrics must be non-negative")

    def to_json(self) -> dict:
        return {
            "absrel": self.absrel,
            "delta1": self.delta1,
            "tae": self.tae,
            "frames_evaluated": self.frames_evaluated,
            "alignment": {"scale": self.alignment.scale, "shift": self.alignment.shift},
        }


def evaluate_video(pred: VideoDepthClip, gt_depth, poses=None,
                   intrinsics: CameraIntrinsics = None) -> EvalReport:
    """Align a predicted inverse-depth clip to ground truth and score it.

    One scale/shift is fitted across the whole clip in inverse-depth space
    (a non-positive fitted scale falls back to a shift-only fit), the aligned
    clip is converted to metric depth, and AbsRel/delta1/TAE are computed.
    TAE is None when poses or intrinsics are omitted.
    """
    gt_frames = _as_frame_list(gt_depth)
    if len(gt_frames) != len(pred):
        raise ValueError("pred and gt frame counts differ")
    gt_inv = VideoDepthClip.from_frames(
        [depth_to_inverse(g) for g in gt_frames], timeline=pred.timeline
    )
    fit = lstsq_scale_shift(pred, gt_inv, AlignmentScope.SHARED_ACROSS_CLIP)
    if fit.scale <= 0:
        fit = shift_only_fit(pred, gt_inv)
    aligned = apply_affine(pred, fit)
    aligned_depth = clip_inverse_to_depth(aligned)

    report_tae = None
    if poses is not None and intrinsics is not None:
        report_tae = tae(aligned_depth, poses, intrinsics)
    return EvalReport(
        absrel=absrel(aligned_depth, gt_frames),
        delta1=delta1(aligned_depth, gt_frames),
        tae=report_tae,
        frames_evaluated=len(pred),
        alignment=fit,
    )


def temporal_profile(video: VideoDepthClip, column: int) -> np.ndarray:
    """Slice one pixel column out of every frame -> (height, N) image.

    Invalid pixels come out as NaN so downstream rendering can treat them
    as a sentinel.
    """
    if not 0 <= column < video.width:
        raise IndexError(f"column {column} outside [0, {video.width})")
    cols = []
    for f in video.frames:
        col = f.values[:, column].copy()
        col[~f.mask[:, column]] = np.nan
        cols.append(col)
    return np.stack(cols, axis=1)


def write_pgm(path, image: np.ndarray, mask: np.ndarray = None) -> None:
    """8-bit binary PGM (P5) export with min-max normalization.

    Valid pixels map linearly onto 1..255; invalid (masked-out or NaN)
    pixels render as 0. A constant image renders mid-gray.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    valid = np.isfinite(img)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    out = np.zeros(img.shape, dtype=np.uint8)
    if valid.any():
        lo = float(img[valid].min())
        hi = float(img[valid].max())
        if hi > lo:
            scaled = (img - lo) / (hi - lo)
        else:
            scaled = np.full(img.shape, 0.5)
        out[valid] = np.clip(np.round(1 + 254 * scaled[valid]), 1, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + out.tobytes())
