"""Window planning, alignment, overlap blending, and the drift experiment."""

import warnings

import numpy as np
import pytest

from conftest import inv_clip, inv_frame
from vdclab.align import apply_affine
from vdclab.core import AffineMap, InvDepthFrame, VideoDepthClip
from vdclab.stitcher import (
    ClipSpec,
    PredictorError,
    StitchConfig,
    Strategy,
    drift_experiment,
    increasing_p,
    infer_long,
    paired_less_p,
    plan_windows,
    stitch_overlap,
    window_fit,
)
from vdclab.synth import FlickerParams


def test_config_validation_and_strides():
    with pytest.raises(ValueError):
        StitchConfig(n=0)
    with pytest.raises(ValueError):
        StitchConfig(n=8, t_o=6, t_k=2)  # no room for future frames
    with pytest.raises(ValueError):
        StitchConfig(t_o=0, strategy=Strategy.OI)
    StitchConfig(t_o=0, t_k=0, strategy=Strategy.BASELINE)  # fine

    assert StitchConfig(strategy=Strategy.OI_KR).commit_stride == 22
    assert StitchConfig(strategy=Strategy.OA).commit_stride == 24
    assert StitchConfig(strategy=Strategy.OI).commit_stride == 24
    assert StitchConfig(strategy=Strategy.BASELINE).commit_stride == 32


def test_clip_spec_validation():
    with pytest.raises(ValueError):
        ClipSpec(key_indices=(0, 0), overlap_indices=(), future_indices=(1,), ordinal=1)
    with pytest.raises(ValueError):
        ClipSpec(key_indices=(5,), overlap_indices=(3, 4), future_indices=(6,), ordinal=1)
    spec = ClipSpec(key_indices=(0, 12), overlap_indices=(24, 25), future_indices=(26,),
                    ordinal=1)
    assert spec.all_indices() == (0, 12, 24, 25, 26)
    assert len(spec) == 5


def test_plan_56_frames_oracle():
    """Hand-derived plan for the default geometry on a 56-frame video."""
    plan = plan_windows(56, StitchConfig(strategy=Strategy.OI_KR))
    assert len(plan) == 3

    assert plan[0].key_indices == () and plan[0].overlap_indices == ()
    assert plan[0].future_indices == tuple(range(32))

    assert plan[1].key_indices == (0, 12)
    assert plan[1].overlap_indices == tuple(range(24, 32))
    assert plan[1].future_indices == tuple(range(32, 54))

    assert plan[2].key_indices == (22, 34)
    assert plan[2].overlap_indices == tuple(range(46, 54))
    assert plan[2].future_indices == (54, 55)


@pytest.mark.parametrize("total", [1, 20, 32, 56, 1000])
@pytest.mark.parametrize("strategy", list(Strategy))
def test_plan_invariants(total, strategy):
    cfg = StitchConfig(strategy=strategy)
    plan = plan_windows(total, cfg)

    seen = []
    for k, spec in enumerate(plan):
        assert spec.ordinal == k
        assert len(spec) <= cfg.n
        idx = spec.all_indices()
        assert list(idx) == sorted(set(idx))  # ascending, no repeats
        if k > 0:
            # Reused frames were all committed by earlier windows.
            reused = set(spec.key_indices) | set(spec.overlap_indices)
            assert reused <= set(seen)
            assert len(spec.overlap_indices) == cfg.effective_overlap
            assert spec.overlap_indices == tuple(range(seen[-1] - cfg.effective_overlap + 1,
                                                       seen[-1] + 1))
        seen.extend(spec.future_indices)
    assert seen == list(range(total))  # future sets partition the video


def test_plan_rejects_empty():
    with pytest.raises(ValueError):
        plan_windows(0, StitchConfig())


def test_window_fit_recovers_affine():
    base = np.linspace(0.5, 2.0, 12).reshape(3, 4)
    committed = {0: inv_frame(2.0 * base + 1.0), 1: inv_frame(2.0 * base[::-1] + 1.0)}
    spec = ClipSpec(key_indices=(0,), overlap_indices=(1,), future_indices=(2,), ordinal=1)
    cur = inv_clip(base, base[::-1], base + 5.0)
    fit = window_fit(cur, committed, spec)
    assert fit.scale == pytest.approx(2.0, rel=1e-12)
    assert fit.shift == pytest.approx(1.0, rel=1e-12)


def test_window_fit_shift_only_fallback():
    flat = np.full((3, 4), 1.0)
    committed = {0: inv_frame(flat + 0.25)}
    spec = ClipSpec(key_indices=(), overlap_indices=(0,), future_indices=(1,), ordinal=1)
    cur = inv_clip(flat, flat)
    fit = window_fit(cur, committed, spec)  # constant pred: lstsq degenerate
    assert fit.scale == 1.0
    assert fit.shift == pytest.approx(0.25)


def test_window_fit_identity_fallback_warns():
    dead = inv_frame(np.ones((2, 2)), mask=np.zeros((2, 2), dtype=bool))
    committed = {0: dead}
    spec = ClipSpec(key_indices=(), overlap_indices=(0,), future_indices=(1,), ordinal=3)
    cur = VideoDepthClip.from_frames([dead, dead])
    with pytest.warns(RuntimeWarning, match="window 3"):
        fit = window_fit(cur, committed, spec)
    assert (fit.scale, fit.shift) == (1.0, 0.0)


def test_window_fit_requires_committed_frames():
    spec = ClipSpec(key_indices=(), overlap_indices=(0,), future_indices=(1,), ordinal=1)
    cur = inv_clip(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError, match="not committed"):
        window_fit(cur, {}, spec)


def test_stitch_overlap_blend_oracle():
    t_o = 8
    prev = [inv_frame(np.full((2, 2), 1.0)) for _ in range(t_o)]
    cur = [inv_frame(np.full((2, 2), 8.0)) for _ in range(t_o)]
    out = stitch_overlap(prev, cur)
    # position i=3 (third frame, 1-based): w = (8-3)/7, 1*w + 8*(1-w) = 3.0
    assert out[2].values[0, 0] == pytest.approx(3.0, abs=1e-15)
    assert np.array_equal(out[0].values, prev[0].values)  # w == 1 exactly
    assert np.array_equal(out[-1].values, cur[-1].values)  # w == 0 exactly


def test_stitch_overlap_single_frame_keeps_previous():
    prev = [inv_frame(np.full((2, 2), 4.0))]
    cur = [inv_frame(np.full((2, 2), 9.0))]
    out = stitch_overlap(prev, cur)
    assert np.array_equal(out[0].values, prev[0].values)


def test_stitch_overlap_masks_and_errors():
    m1 = np.array([[True, False], [True, True]])
    m2 = np.array([[True, True], [False, True]])
    out = stitch_overlap(
        [inv_frame(np.ones((2, 2)), mask=m1), inv_frame(np.ones((2, 2)))],
        [inv_frame(np.ones((2, 2)), mask=m2), inv_frame(np.ones((2, 2)))],
    )
    assert np.array_equal(out[0].mask, m1 & m2)
    with pytest.raises(ValueError, match="equal length"):
        stitch_overlap([inv_frame(np.ones((2, 2)))], [])
    with pytest.raises(ValueError, match="resolution"):
        stitch_overlap([inv_frame(np.ones((2, 2)))], [inv_frame(np.ones((3, 3)))])


# ---------------------------------------------------------------------------
# End-to-end stitching
# ---------------------------------------------------------------------------


def _gt_clip(total, seed=0):
    rng = np.random.default_rng(seed)
    vals = 0.3 + rng.random((total, 6, 6))
    return inv_clip(*[vals[i] for i in range(total)])


def _identity_predictor(payload, spec):
    return VideoDepthClip.from_frames(list(payload))


CFG_SMALL = dict(n=8, t_o=3, t_k=1, delta_k=4)


@pytest.mark.parametrize("strategy", [Strategy.BASELINE, Strategy.OA])
def test_identity_predictor_is_bitwise_lossless(strategy):
    gt = _gt_clip(21)
    cfg = StitchConfig(strategy=strategy, **CFG_SMALL)
    out = infer_long(_identity_predictor, gt.frames, cfg)
    assert np.array_equal(out.values(), gt.values())


@pytest.mark.parametrize("strategy", [Strategy.OI, Strategy.OI_KR])
def test_identity_predictor_is_lossless_after_blend(strategy):
    gt = _gt_clip(21)
    cfg = StitchConfig(strategy=strategy, **CFG_SMALL)
    out = infer_long(_identity_predictor, gt.frames, cfg)
    assert np.allclose(out.values(), gt.values(), rtol=0, atol=1e-12)
    assert out.timeline == tuple(range(21))


@pytest.mark.parametrize("strategy", [Strategy.OA, Strategy.OI_KR])
def test_alignment_undoes_per_window_affine(strategy):
    """A predictor with a fresh affine gauge per window stitches back to GT."""
    gt = _gt_clip(40)

    def skewed(payload, spec):
        clip = VideoDepthClip.from_frames(list(payload))
        return apply_affine(clip, AffineMap(1.0 + 0.5 * spec.ordinal, 0.3 * spec.ordinal))

    cfg = StitchConfig(strategy=strategy, **CFG_SMALL)
    out = infer_long(skewed, gt.frames, cfg)
    assert np.allclose(out.values(), gt.values(), rtol=0, atol=1e-9)

    base = infer_long(skewed, gt.frames,
                      StitchConfig(strategy=Strategy.BASELINE, **CFG_SMALL))
    assert not np.allclose(base.values(), gt.values(), rtol=0, atol=1e-2)


def test_infer_long_window_callback_reports_fits():
    gt = _gt_clip(21)
    calls = []
    cfg = StitchConfig(strategy=Strategy.OI_KR, **CFG_SMALL)
    infer_long(_identity_predictor, gt.frames, cfg,
               on_window=lambda spec, fit: calls.append((spec.ordinal, fit)))
    assert [o for o, _ in calls] == list(plan_ordinals(21, cfg))
    assert calls[0][1] is None  # first window commits as-is
    assert all(fit is not None for _, fit in calls[1:])

    calls_oi = []
    infer_long(_identity_predictor, gt.frames,
               StitchConfig(strategy=Strategy.OI, **CFG_SMALL),
               on_window=lambda spec, fit: calls_oi.append(fit))
    assert all(fit is None for fit in calls_oi)  # OI never aligns


def plan_ordinals(total, cfg):
    return [spec.ordinal for spec in plan_windows(total, cfg)]


def test_infer_long_wraps_predictor_failures():
    gt = _gt_clip(21)
    cfg = StitchConfig(strategy=Strategy.OI_KR, **CFG_SMALL)

    def explodes(payload, spec):
        if spec.ordinal == 2:
            raise RuntimeError("boom")
        return _identity_predictor(payload, spec)

    with pytest.raises(PredictorError, match="window 2") as err:
        infer_long(explodes, gt.frames, cfg)
    assert err.value.ordinal == 2
    assert isinstance(err.value.__cause__, RuntimeError)

    def short(payload, spec):
        return VideoDepthClip.from_frames(list(payload[:-1]))

    with pytest.raises(PredictorError, match="window 0") as err:
        infer_long(short, gt.frames, cfg)
    assert err.value.ordinal == 0

    with pytest.raises(ValueError, match="at least one frame"):
        infer_long(_identity_predictor, [], cfg)


# ---------------------------------------------------------------------------
# Drift experiment and its statistics
# ---------------------------------------------------------------------------


def test_drift_zero_noise_is_exactly_zero():
    report = drift_experiment(
        StitchConfig(n=8, t_o=2, t_k=1, delta_k=3),
        FlickerParams(seed=0),  # all sigmas zero
        windows=3,
        trials=2,
        size=8,
    )
    for strat in Strategy:
        curve = report.drift[strat.value]
        assert curve.shape == (2, 3)
        assert np.all(curve == 0.0), strat


def test_drift_report_shapes_and_json():
    report = drift_experiment(
        StitchConfig(n=8, t_o=2, t_k=1, delta_k=3),
        FlickerParams(sigma_window_scale=0.05, seed=7),
        windows=4,
        trials=3,
        size=8,
        strategies=(Strategy.BASELINE, Strategy.OI_KR),
    )
    assert set(report.drift) == {"baseline", "oi-kr"}
    assert report.final("baseline").shape == (3,)
    assert report.mean_curve("oi-kr").shape == (4,)
    assert np.all(np.isfinite(report.drift["baseline"]))
    assert report.drift["baseline"].max() > 0.0

    blob = report.to_json()
    assert blob["windows"] == 4 and blob["trials"] == 3
    assert set(blob["strategies"]) == {"baseline", "oi-kr"}
    assert len(blob["strategies"]["oi-kr"]["mean_curve"]) == 4
    assert len(blob["strategies"]["baseline"]["final_per_trial"]) == 3

    with pytest.raises(ValueError, match="two windows"):
        drift_experiment(StitchConfig(), FlickerParams(), windows=1, trials=1)


def test_paired_less_p_hand_cases():
    a = np.array([1.0, 2.0, 3.0])
    assert paired_less_p(a, a + 1.0) == 0.0  # constant gap, right direction
    assert paired_less_p(a + 1.0, a) == 1.0
    assert paired_less_p(np.array([0.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)
    strong = paired_less_p(a, a + np.array([1.0, 1.1, 0.9]))
    assert strong < 0.02
    with pytest.raises(ValueError):
        paired_less_p(np.array([1.0]), np.array([2.0]))


def test_increasing_p_ignores_window_zero():
    rng = np.random.default_rng(0)
    k = 9  # quartile size (k-1)//4 = 2: early cols 1-2, late cols 7-8
    flat = np.ones((6, k)) + 0.01 * rng.standard_normal((6, k))
    flat[:, 0] = 100.0  # huge anchor column must not count as "early"
    rising = flat.copy()
    rising[:, 7:] += 1.0
    assert increasing_p(rising) < 0.01
    assert increasing_p(flat) > 0.2
    falling = flat.copy()
    falling[:, 1:3] += 1.0
    assert increasing_p(falling) > 0.95
