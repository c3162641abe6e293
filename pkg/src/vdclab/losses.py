"""Temporal-consistency loss family with analytic gradients.

All losses consume inverse-depth clips and return value plus gradient with
respect to the prediction values. Notation: d is the normalized prediction,
g the normalized ground truth. SSI normalizes per frame (it is an image-level
loss); SE and TGM normalize with one shared median/MAD across the clip so
temporal differences stay meaningful.

Gradient convention for normalized losses: the median/MAD statistics are
treated as constants during backprop (straight-through), so the gradient
with respect to the raw prediction is the core gradient scaled by 1/MAD.
Pass normalize=False to feed already-normalized values and get the exact
core gradient; video_align_loss differentiates through its fitted scale and
shift, so its gradient is exact as returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import (
    AlignmentScope,
    DegenerateFitError,
    lstsq_scale_shift,
    normalize_stats,
)
from .core import VideoDepthClip, rng_for
from .gridops import bilinear_sample

TGM_DEFAULT_TAU = 0.05
SSI_GRADIENT_SCALES = 4


class EmptyCorrespondenceError(ValueError):
    """No valid correspondence survives masking in a flow-warped loss."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0  # weight of the temporal gradient matching term
    beta: float = 1.0  # weight of the per-frame spatial term

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TGMThreshold:
    tau: float = TGM_DEFAULT_TAU

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def _tau_of(thresh) -> float:
    if isinstance(thresh, TGMThreshold):
        return thresh.tau
    return TGMThreshold(float(thresh)).tau


@dataclass
class LossResult:
    """Loss value with per-frame gradient rasters (d value / d prediction).

    grad is zero at invalid pixels and at thresholded-out elements;
    active_count is the number of elements that contributed after masking.
    """

    value: float
    grad: list
    active_count: int
    warning: str = None
    components: dict = None


def _check_pair(pred: VideoDepthClip, gt: VideoDepthClip):
    if len(pred) != len(gt) or pred.values().shape != gt.values().shape:
        raise ValueError("pred and gt must have matching frame counts and shapes")


def _normalized_frames(clip: VideoDepthClip):
    """Per-frame normalization; returns (values (N,H,W), per-frame MADs)."""
    out = np.zeros((len(clip), clip.height, clip.width))
    mads = []
    for i, f in enumerate(clip.frames):
        med, mad = normalize_stats(f)
        out[i] = np.where(f.mask, (f.values - med) / mad, 0.0)
        mads.append(mad)
    return out, mads


def _normalized_shared(clip: VideoDepthClip):
    """One shared normalization across the clip; returns (values, MAD)."""
    med, mad = normalize_stats(clip)
    vals = np.where(clip.masks(), (clip.values() - med) / mad, 0.0)
    return vals, mad


# ---------------------------------------------------------------------------
# SSI: per-frame scale/shift-invariant term + multi-scale gradient matching
# ---------------------------------------------------------------------------


def _ssi_frame_core(d, g, joint, grad_out):
    """Value of one frame's SSI term; accumulates d(value)/d(d) into grad_out."""
    count = int(joint.sum())
    value = 0.0
    if count > 0:
        resid = np.where(joint, d - g, 0.0)
        value += float(np.sum(np.abs(resid))) / count
        grad_out += np.where(joint, np.sign(resid), 0.0) / count

        # Spatial gradient matching on the residual at 4 dyadic scales;
        # scale s looks at every 2^s-th pixel with forward differences.
        for s in range(SSI_GRADIENT_SCALES):
            k = 1 << s
            rs = resid[::k, ::k]
            ms = joint[::k, ::k]
            m_s = int(ms.sum())
            if m_s == 0:
                continue
            gview = grad_out[::k, ::k]

            gx = rs[:, 1:] - rs[:, :-1]
            vx = ms[:, 1:] & ms[:, :-1]
            value += float(np.sum(np.abs(gx[vx]))) / m_s
            sx = np.where(vx, np.sign(gx), 0.0) / m_s
            gview[:, 1:] += sx
            gview[:, :-1] -= sx

            gy = rs[1:, :] - rs[:-1, :]
            vy = ms[1:, :] & ms[:-1, :]
            value += float(np.sum(np.abs(gy[vy]))) / m_s
            sy = np.where(vy, np.sign(gy), 0.0) / m_s
            gview[1:, :] += sy
            gview[:-1, :] -= sy
    return value, count


def ssi_loss(pred: VideoDepthClip, gt: VideoDepthClip, normalize: bool = True) -> LossResult:
    """Image-level spatial loss, averaged over frames.

    Per frame: mean |d - g| over jointly valid pixels plus the multi-scale
    spatial gradient matching term on the residual d - g. Each frame is
    normalized on its own, so the loss is blind to per-frame affine maps of
    either input; temporal consistency is the other losses' job.
    """
    _check_pair(pred, gt)
    if normalize:
        d, mads = _normalized_frames(pred)
        g, _ = _normalized_frames(gt)
    else:
        d, mads = pred.values(), [1.0] * len(pred)
        g = gt.values()

    n = len(pred)
    joint = pred.masks() & gt.masks()
    value = 0.0
    active = 0
    grads = []
    for i in range(n):
        grad_d = np.zeros_like(d[i])
        v, cnt = _ssi_frame_core(d[i], g[i], joint[i], grad_d)
        value += v / n
        active += cnt
        grads.append(grad_d / (n * mads[i]))
    return LossResult(value=value, grad=grads, active_count=active)


# ---------------------------------------------------------------------------
# OPW: flow-warped photometric-style l1 on raw predictions
# ---------------------------------------------------------------------------


def opw_loss(pred: VideoDepthClip, flow, flow_mask) -> LossResult:
    """Mean l1 between frame i and frame i+1 warped back along GT flow.

    Works on raw prediction values (no normalization). The gradient reaches
    frame i directly and frame i+1 through the four bilinear sample weights.
    Raises EmptyCorrespondenceError when no valid correspondence exists.
    """
    n = len(pred)
    if n < 2:
        raise ValueError("opw_loss needs at least 2 frames")
    if len(flow) != n - 1 or len(flow_mask) != n - 1:
        raise ValueError("flow must cover the N-1 consecutive pairs")

    h, w = pred.height, pred.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    grads = [np.zeros((h, w)) for _ in range(n)]
    value = 0.0
    active = 0
    outer = 1.0 / (n - 1)

    for i in range(n - 1):
        src = pred.frames[i]
        tgt = pred.frames[i + 1]
        fl = np.asarray(flow[i], dtype=np.float64)
        sampled, ok, weights, indices = bilinear_sample(
            tgt.values, tgt.mask, uu + fl[..., 0], vv + fl[..., 1]
        )
        valid = src.mask & np.asarray(flow_mask[i], dtype=bool) & ok
        cnt = int(valid.sum())
        if cnt == 0:
            continue
        resid = np.where(valid, src.values - sampled, 0.0)
        value += outer * float(np.sum(np.abs(resid))) / cnt
        active += cnt

        coef = outer / cnt
        sgn = np.sign(resid)
        grads[i] += sgn * coef
        # Scatter -sign through the bilinear weights onto frame i+1.
        vflat = valid.ravel()
        contrib = (-sgn.ravel()[None, :] * weights.reshape(4, -1) * coef)[:, vflat]
        np.add.at(grads[i + 1].reshape(-1), indices.reshape(4, -1)[:, vflat], contrib)

    if active == 0:
        raise EmptyCorrespondenceError("no valid correspondence in any frame pair")
    return LossResult(value=value, grad=grads, active_count=active)


# ---------------------------------------------------------------------------
# SE: stable error between warped and static frames, normalized domain
# ---------------------------------------------------------------------------


def se_loss(
    pred: VideoDepthClip, gt: VideoDepthClip, flow, flow_mask, normalize: bool = True
) -> LossResult:
    """Mean | |warp(d_{i+1}) - d_i| - |warp(g_{i+1}) - g_i| | over pairs.

    The prediction's flow-warped discrepancy is compared against the same
    discrepancy of the ground truth, so depth changes that are real motion
    cost nothing. Shared clip normalization.
    """
    _check_pair(pred, gt)
    n = len(pred)
    if n < 2:
        raise ValueError("se_loss needs at least 2 frames")
    if normalize:
        d, mad = _normalized_shared(pred)
        g, _ = _normalized_shared(gt)
    else:
        d, mad = pred.values(), 1.0
        g = gt.values()

    h, w = pred.height, pred.width
    pmask, gmask = pred.masks(), gt.masks()
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    grads_d = [np.zeros((h, w)) for _ in range(n)]
    value = 0.0
    active = 0
    outer = 1.0 / (n - 1)

    for i in range(n - 1):
        fl = np.asarray(flow[i], dtype=np.float64)
        xs, ys = uu + fl[..., 0], vv + fl[..., 1]
        d_hat, ok_d, weights, indices = bilinear_sample(d[i + 1], pmask[i + 1], xs, ys)
        g_hat, ok_g, _, _ = bilinear_sample(g[i + 1], gmask[i + 1], xs, ys)
        valid = pmask[i] & gmask[i] & np.asarray(flow_mask[i], dtype=bool) & ok_d & ok_g
        cnt = int(valid.sum())
        if cnt == 0:
            continue
        dd = d_hat - d[i]
        resid = np.where(valid, np.abs(dd) - np.abs(g_hat - g[i]), 0.0)
        value += outer * float(np.sum(np.abs(resid))) / cnt
        active += cnt

        coef = outer / cnt
        chain = np.sign(resid) * np.where(valid, np.sign(dd), 0.0)  # d|resid|/d(d_hat)
        grads_d[i] -= chain * coef
        vflat = valid.ravel()
        contrib = (chain.ravel()[None, :] * weights.reshape(4, -1) * coef)[:, vflat]
        np.add.at(grads_d[i + 1].reshape(-1), indices.reshape(4, -1)[:, vflat], contrib)

    if active == 0:
        raise EmptyCorrespondenceError("no valid correspondence in any frame pair")
    return LossResult(value=value, grad=[gd / mad for gd in grads_d], active_count=active)


# ---------------------------------------------------------------------------
# TGM: temporal gradient matching at static pixels
# ---------------------------------------------------------------------------


def tgm_loss(
    pred: VideoDepthClip, gt: VideoDepthClip, thresh=TGM_DEFAULT_TAU, normalize: bool = True
) -> LossResult:
    """Match same-coordinate temporal differences where the scene is static.

    A pixel of pair (i, i+1) participates only when both frames see it and
    the ground truth moved less than tau there (strict <, on the normalized
    values). An everywhere-gated clip is not an error: the value is 0 with
    active_count 0 and a warning flag.
    """
    _check_pair(pred, gt)
    tau = _tau_of(thresh)
    n = len(pred)
    if n < 2:
        raise ValueError("tgm_loss needs at least 2 frames")
    if normalize:
        d, mad = _normalized_shared(pred)
        g, _ = _normalized_shared(gt)
    else:
        d, mad = pred.values(), 1.0
        g = gt.values()

    pmask, gmask = pred.masks(), gt.masks()
    grads_d = [np.zeros((pred.height, pred.width)) for _ in range(n)]
    value = 0.0
    active = 0
    outer = 1.0 / (n - 1)

    for i in range(n - 1):
        both = pmask[i] & pmask[i + 1] & gmask[i] & gmask[i + 1]
        dg = g[i + 1] - g[i]
        gate = both & (np.abs(dg) < tau)
        cnt = int(gate.sum())
        if cnt == 0:
            continue
        dd = d[i + 1] - d[i]
        resid = np.where(gate, np.abs(dd) - np.abs(dg), 0.0)
        value += outer * float(np.sum(np.abs(resid))) / cnt
        active += cnt

        chain = np.sign(resid) * np.where(gate, np.sign(dd), 0.0) * (outer / cnt)
        grads_d[i + 1] += chain
        grads_d[i] -= chain

    warning = None
    if active == 0:
        warning = "no-active-elements"
    return LossResult(
        value=value, grad=[gd / mad for gd in grads_d], active_count=active, warning=warning
    )


def total_loss(
    pred: VideoDepthClip,
    gt: VideoDepthClip,
    weights: LossWeights = LossWeights(),
    thresh=TGM_DEFAULT_TAU,
    normalize: bool = True,
) -> LossResult:
    """alpha * tgm_loss + beta * ssi_loss, the training objective."""
    t = tgm_loss(pred, gt, thresh=thresh, normalize=normalize)
    s = ssi_loss(pred, gt, normalize=normalize)
    grad = [weights.alpha * gt_ + weights.beta * gs for gt_, gs in zip(t.grad, s.grad)]
    return LossResult(
        value=weights.alpha * t.value + weights.beta * s.value,
        grad=grad,
        active_count=t.active_count + s.active_count,
        warning=t.warning,
        components={"tgm": t.value, "ssi": s.value},
    )


# ---------------------------------------------------------------------------
# VideoAlign: shared affine alignment, then mean l1
# ---------------------------------------------------------------------------


def video_align_loss(pred: VideoDepthClip, gt: VideoDepthClip) -> LossResult:
    """Mean l1 residual after one shared least-squares scale/shift fit.

    The ablation baseline: a whole-video alignment absorbs a global affine
    map but nothing per-frame. Unlike the normalized losses, the gradient
    here is exact: it includes the dependence of the fitted (s, t) on the
    prediction through the closed-form normal equations.
    """
    _check_pair(pred, gt)
    fit = lstsq_scale_shift(pred, gt, scope=AlignmentScope.SHARED_ACROSS_CLIP)
    s = fit.scale

    joint = pred.masks() & gt.masks()
    p = pred.values()
    g = gt.values()
    m = float(joint.sum())

    resid = np.where(joint, s * p + fit.shift - g, 0.0)
    value = float(np.sum(np.abs(resid))) / m
    sgn = np.sign(resid)

    # d(loss)/dp_k = [s*sgn_k + ds/dp_k * sum(sgn*p) + dt/dp_k * sum(sgn)] / M
    # with ds/dp_k = (n*g_k - G)/det - s*(2n*p_k - 2P)/det and
    # dt/dp_k = -(P * ds/dp_k + s)/n from t = (G - s*P)/n.
    n_cnt = m
    pj = np.where(joint, p, 0.0)
    gj = np.where(joint, g, 0.0)
    big_p = float(pj.sum())
    big_g = float(gj.sum())
    det = n_cnt * float(np.sum(pj * pj)) - big_p * big_p
    sum_sgn = float(sgn.sum())
    sum_sgn_p = float(np.sum(sgn * pj))

    ds = np.where(joint, (n_cnt * gj - big_g - s * (2.0 * n_cnt * pj - 2.0 * big_p)) / det, 0.0)
    dt = -(big_p * ds + np.where(joint, s, 0.0)) / n_cnt
    grad_flat = (s * sgn + ds * sum_sgn_p + dt * sum_sgn) / m
    grad_flat = np.where(joint, grad_flat, 0.0)

    warning = "non-positive-scale" if s <= 0 else None
    return LossResult(
        value=value, grad=list(grad_flat), active_count=int(m), warning=warning
    )


# ---------------------------------------------------------------------------
# Finite-difference verification harness
# ---------------------------------------------------------------------------


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    n_skipped: int
    h: float
    tol: float

    def __post_init__(self):
        # Canonicalize numpy scalars so reports serialize and compare cleanly.
        self.max_rel_err = float(self.max_rel_err)
        self.passed = bool(self.passed)
        self.n_checked = int(self.n_checked)
        self.n_skipped = int(self.n_skipped)
        self.h = float(self.h)
        self.tol = float(self.tol)

    def to_json(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "pass": self.passed,
            "n_checked": self.n_checked,
            "n_skipped": self.n_skipped,
            "h": self.h,
            "tol": self.tol,
        }


def finite_diff_check(
    loss,
    pred: VideoDepthClip,
    gt: VideoDepthClip,
    h: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int = 250,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> FiniteDiffReport:
    """Compare a loss's analytic gradient against central differences.

    `loss` is any callable (pred, gt) -> LossResult. Coordinates are sampled
    uniformly from the prediction's valid pixels. Each coordinate is probed
    at +-h and +-2h; if the two central-difference estimates disagree, a kink
    of |.| lies within 2h of the base point and the coordinate is skipped
    rather than counted.

    abs_floor is the magnitude below which derivatives are compared against
    the floor instead of each other: central differences of a piecewise
    linear loss carry ~eps*|value|/h of roundoff, so a coordinate whose true
    gradient is exactly 0 would otherwise report that noise as relative
    error.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = loss(pred, gt)
    masks = pred.masks()
    coords = np.argwhere(masks)
    rng = rng_for(seed, 0)
    if len(coords) > n_coords:
        coords = coords[rng.choice(len(coords), size=n_coords, replace=False)]

    vals0 = pred.values()
    max_rel = 0.0
    checked = 0
    skipped = 0
    for fidx, r, c in coords:
        def eval_at(delta):
            v = vals0.copy()
            v[fidx, r, c] += delta
            return loss(pred.with_values(v), gt).value

        f_m2, f_m1 = eval_at(-2 * h), eval_at(-h)
        f_p1, f_p2 = eval_at(h), eval_at(2 * h)
        c1 = (f_p1 - f_m1) / (2 * h)
        c2 = (f_p2 - f_m2) / (4 * h)
        if abs(c1 - c2) > 0.01 * max(abs(c1), abs(c2), abs_floor):
            skipped += 1
            continue
        analytic = base.grad[fidx][r, c]
        rel = abs(analytic - c1) / max(abs(analytic), abs(c1), abs_floor)
        max_rel = max(max_rel, rel)
        checked += 1

    return FiniteDiffReport(
        max_rel_err=max_rel,
        passed=max_rel <= tol,
        n_checked=checked,
        n_skipped=skipped,
        h=h,
        tol=tol,
    )
