"""Affine alignment in inverse-depth space.

Predictions are affine-invariant: they match ground truth only up to an
unknown positive scale and shift. Everything here estimates or removes that
ambiguity: a closed-form least-squares scale/shift fit, application of an
AffineMap to frames or clips, and median/MAD normalization.
"""

from __future__ import annotations

import enum

import numpy as np

from .core import AffineMap, InvDepthFrame, MetricDepthFrame, VideoDepthClip


class DegenerateFitError(ValueError):
    """Raised when a fit or normalization has no usable spread or support."""


class AlignmentScope(enum.Enum):
    PER_FRAME = "per_frame"
    SHARED_ACROSS_CLIP = "shared_across_clip"


def _as_frames(x):
    if isinstance(x, VideoDepthClip):
        return list(x.frames)
    if isinstance(x, (InvDepthFrame, MetricDepthFrame)):
        return [x]
    return list(x)


def _fit_one(pred_vals, target_vals) -> AffineMap:
    """Solve min_{s,t} sum (s*p + t - g)^2 via the 2x2 normal equations.

    The fitted scale may come out <= 0 (e.g. constant target); that is
    reported through the returned map, not as an error, so the caller can
    decide how to react.
    """
    p = pred_vals
    g = target_vals
    n = float(p.size)
    if p.size < 2:
        raise DegenerateFitError("need at least 2 jointly valid pixels")
    sp = float(np.sum(p))
    spp = float(np.sum(p * p))
    spg = float(np.sum(p * g))
    sg = float(np.sum(g))
    det = n * spp - sp * sp
    # det == n^2 * var(p); vanishing spread makes scale unidentifiable.
    if det <= 1e-12 * max(n * spp, 1e-300):
        raise DegenerateFitError("prediction has no spread at valid pixels")
    s = (n * spg - sp * sg) / det
    t = (sg - s * sp) / n
    return AffineMap(scale=s, shift=t)


def lstsq_scale_shift(pred, target, scope: AlignmentScope = AlignmentScope.SHARED_ACROSS_CLIP):
    """Least-squares affine fit from pred onto target over jointly valid pixels.

    Returns one AffineMap for SHARED_ACROSS_CLIP, or a list with one map per
    frame for PER_FRAME. Raises DegenerateFitError when the constraint set is
    too small or the prediction has no spread.
    """
    pf = _as_frames(pred)
    tf = _as_frames(target)
    if len(pf) != len(tf):
        raise ValueError("pred and target must have the same frame count")
    joint = [p.mask & t.mask for p, t in zip(pf, tf)]
    if scope is AlignmentScope.PER_FRAME:
        return [
            _fit_one(p.values[m], t.values[m]) for p, t, m in zip(pf, tf, joint)
        ]
    pv = np.concatenate([p.values[m] for p, m in zip(pf, joint)])
    tv = np.concatenate([t.values[m] for t, m in zip(tf, joint)])
    return _fit_one(pv, tv)


def shift_only_fit(pred, target) -> AffineMap:
    """Fallback fit with scale pinned to 1: t = mean(target - pred)."""
    pf = _as_frames(pred)
    tf = _as_frames(target)
    diffs = []
    for p, t in zip(pf, tf):
        m = p.mask & t.mask
        diffs.append(t.values[m] - p.values[m])
    pooled = np.concatenate(diffs)
    if pooled.size == 0:
        raise DegenerateFitError("no jointly valid pixels for shift fit")
    return AffineMap(scale=1.0, shift=float(np.mean(pooled)))


def apply_affine(x, affine: AffineMap):
    """Apply the map to every valid value; masks and invalid values unchanged."""
    if isinstance(x, VideoDepthClip):
        return VideoDepthClip(
            frames=tuple(apply_affine(f, affine) for f in x.frames),
            timeline=x.timeline,
        )
    vals = np.where(x.mask, affine.scale * x.values + affine.shift, x.values)
    return type(x)(values=vals, mask=x.mask)


def normalize_stats(x) -> tuple[float, float]:
    """(median, mean absolute deviation) over all valid values of x.

    x may be a frame, a clip, or a list of frames; a clip pools the stats
    across every frame (one shared normalization).
    """
    frames = _as_frames(x)
    pooled = np.concatenate([f.values[f.mask] for f in frames])
    if pooled.size < 2:
        raise DegenerateFitError("need at least 2 valid pixels to normalize")
    med = float(np.median(pooled))
    mad = float(np.mean(np.abs(pooled - med)))
    if mad <= 0.0:
        raise DegenerateFitError("zero spread: median absolute deviation is 0")
    return med, mad


def normalize_ssi(x):
    """Median-subtract and MAD-divide the valid values of x.

    Shape-preserving: frame -> frame, clip -> clip (stats shared across the
    clip), list -> list. Invalid pixels are set to 0. Output valid values have
    median 0 and mean absolute deviation 1.
    """
    med, mad = normalize_stats(x)

    def one(f):
        vals = np.where(f.mask, (f.values - med) / mad, 0.0)
        return InvDepthFrame(values=vals, mask=f.mask)

    if isinstance(x, VideoDepthClip):
        return VideoDepthClip(frames=tuple(one(f) for f in x.frames), timeline=x.timeline)
    if isinstance(x, (InvDepthFrame, MetricDepthFrame)):
        return one(x)
    return [one(f) for f in x]
