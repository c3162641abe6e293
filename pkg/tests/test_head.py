"""Temporal refiner: identity init, exact gradients, training, checkpoints."""

import dataclasses

import numpy as np
import pytest

from vdclab.core import VideoDepthClip, clip_depth_to_inverse
from vdclab.head import (
    RefinerConfig,
    TrainConfig,
    TrainingDivergedError,
    TrainSample,
    check_refiner_gradients,
    init_params,
    init_train_state,
    load_checkpoint,
    make_flicker_sampler,
    named_tensors,
    refiner_backward,
    refiner_forward,
    save_checkpoint,
    train_refiner,
    _forward_cached,
    _pool_matrix,
    _upsample_matrix,
)
from vdclab.losses import LossResult, LossWeights
from vdclab.synth import FlickerParams, SceneConfig, flicker_predictor, generate_scene

SMALL = RefinerConfig(patch=2, channels=8, layers=2, heads=2, n_max=8)


@pytest.fixture(scope="module")
def tiny_data():
    seq = generate_scene(SceneConfig(width=8, height=8, frame_count=6, seed=1),
                         with_flow=False)
    gt = clip_depth_to_inverse(seq.gt)
    noisy = flicker_predictor(
        gt, FlickerParams(sigma_scale=0.15, sigma_shift=0.1, sigma_pixel=0.02, seed=1)
    )
    return noisy, gt


def test_config_validation():
    with pytest.raises(ValueError):
        RefinerConfig(channels=10, heads=4)  # not divisible
    with pytest.raises(ValueError):
        RefinerConfig(patch=0)


def test_identity_at_init(tiny_data):
    """Zero-init output head + residual connection: refiner(x) == x bitwise."""
    noisy, _ = tiny_data
    params = init_params(SMALL, seed=0)
    out = refiner_forward(params, noisy)
    assert np.array_equal(out.values(), noisy.values())
    assert out.timeline == noisy.timeline


def test_init_deterministic_and_seeded():
    a = init_params(SMALL, seed=0)
    b = init_params(SMALL, seed=0)
    c = init_params(SMALL, seed=1)
    for (na, ta), (nb, tb), (nc, tc) in zip(
        named_tensors(a), named_tensors(b), named_tensors(c)
    ):
        assert na == nb == nc
        assert ta.dtype == np.float32
        assert np.array_equal(ta, tb)
    assert not np.array_equal(
        dict(named_tensors(a))["lift"], dict(named_tensors(c))["lift"]
    )


def test_named_tensor_order_stable():
    params = init_params(SMALL, seed=0)
    names = [n for n, _ in named_tensors(params)]
    assert names[0] == "lift" and names[1] == "pos" and names[-1] == "out"
    assert "layers.0.dw" in names and "layers.1.w2" in names
    assert names == sorted(set(names), key=names.index)  # no duplicates


def test_forward_rejects_bad_shapes(tiny_data):
    noisy, _ = tiny_data
    params = init_params(SMALL, seed=0)
    long = VideoDepthClip.from_frames(list(noisy.frames) * 2)  # 12 > n_max
    with pytest.raises(ValueError, match="n_max"):
        refiner_forward(params, long)
    odd = RefinerConfig(patch=3, channels=8, layers=1, heads=2, n_max=8)
    with pytest.raises(ValueError, match="patch"):
        refiner_forward(init_params(odd, seed=0), noisy)  # 8 % 3 != 0


def test_pool_and_upsample_are_partitions():
    pool = _pool_matrix(8, 2)
    up = _upsample_matrix(8, 2)
    assert pool.shape == (4, 8) and up.shape == (8, 4)
    assert np.allclose(pool.sum(axis=1), 1.0)  # each coarse cell averages
    assert np.allclose(up.sum(axis=1), 1.0)  # bilinear weights sum to 1


def test_backward_matches_finite_differences_quick():
    report = check_refiner_gradients(n_coords=60, seed=0)
    assert report.passed, f"max rel err {report.max_rel_err:.3g}"
    assert report.n_checked >= 50


def test_backward_input_gradient(tiny_data):
    """d(sum of output)/d(input) via the cache must match finite differences."""
    noisy, _ = tiny_data
    rng = np.random.default_rng(0)
    params = init_params(SMALL, seed=3)
    # Randomize the zero output head so the network actually does something.
    out_name = "out"
    tensors = dict(named_tensors(params))
    tensors[out_name][...] = rng.standard_normal(tensors[out_name].shape).astype(
        np.float32
    ) * 0.05

    probe = rng.standard_normal((len(noisy), noisy.height, noisy.width))
    _, cache = _forward_cached(params, noisy)
    _, dx = refiner_backward(cache, probe)

    vals = noisy.values()
    h = 1e-6
    for fidx, r, c in [(0, 1, 2), (2, 5, 5), (5, 7, 0)]:
        vp = vals.copy()
        vp[fidx, r, c] += h
        vm = vals.copy()
        vm[fidx, r, c] -= h
        fp = float(np.sum(refiner_forward(params, noisy.with_values(vp)).values() * probe))
        fm = float(np.sum(refiner_forward(params, noisy.with_values(vm)).values() * probe))
        num = (fp - fm) / (2 * h)
        assert num == pytest.approx(dx[fidx, r, c], rel=1e-4)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _sampler(tiny_data, clip_len=4, seed=0):
    noisy, gt = tiny_data

    def sample(step):
        return TrainSample(noisy=_slice(noisy, step, clip_len), gt=_slice(gt, step, clip_len))

    return sample


def _slice(clip, step, n):
    t0 = step % (len(clip) - n + 1)
    return VideoDepthClip(frames=clip.frames[t0 : t0 + n], timeline=tuple(range(n)))


def test_train_history_and_schedule(tiny_data):
    cfg = TrainConfig(steps=4, lr=1e-3, seed=0)
    state, history = train_refiner(_sampler(tiny_data), cfg, config=SMALL)
    assert state.step == 4
    assert [h["step"] for h in history] == [0, 1, 2, 3]
    assert history[0]["lr"] == pytest.approx(1e-3)  # cosine starts at lr
    assert history[2]["lr"] == pytest.approx(1e-3 * 0.5 * (1 + np.cos(np.pi * 2 / 4)))
    for h in history:
        assert set(h) == {"step", "lr", "total", "tgm", "ssi", "grad_norm"}
    const = TrainConfig(steps=3, lr=1e-3, schedule="constant")
    assert const.lr_at(0) == const.lr_at(2) == 1e-3


def test_train_deterministic(tiny_data):
    cfg = TrainConfig(steps=3, lr=1e-3, seed=5)
    s1, h1 = train_refiner(_sampler(tiny_data), cfg, config=SMALL)
    s2, h2 = train_refiner(_sampler(tiny_data), cfg, config=SMALL)
    for (n1, t1), (n2, t2) in zip(named_tensors(s1.params), named_tensors(s2.params)):
        assert np.array_equal(t1, t2), n1
    assert h1 == h2


def test_train_divergence_carries_pre_update_state(tiny_data):
    def exploding(pred, sample):
        grad = [np.full((pred.height, pred.width), np.nan) for _ in range(len(pred))]
        return LossResult(value=float("nan"), grad=grad, active_count=1)

    cfg = TrainConfig(steps=5, lr=1e-3, seed=0)
    with pytest.raises(TrainingDivergedError) as err:
        train_refiner(_sampler(tiny_data), cfg, loss_fn=exploding, config=SMALL)
    assert err.value.step == 0
    fresh = init_train_state(SMALL, cfg.seed)
    for (n, t), (_, t0) in zip(
        named_tensors(err.value.state.params), named_tensors(fresh.params)
    ):
        assert np.array_equal(t, t0), n


def test_training_reduces_flicker_loss(tiny_data):
    """A short run must strictly reduce the temporal component on its data."""
    cfg = TrainConfig(steps=60, lr=3e-3, seed=0, weights=LossWeights(alpha=10, beta=1))
    state, history = train_refiner(_sampler(tiny_data), cfg, config=SMALL)
    first = np.mean([h["tgm"] for h in history[:5]])
    last = np.mean([h["tgm"] for h in history[-5:]])
    assert last < first


def test_make_flicker_sampler_reproducible(tiny_data):
    _, gt = tiny_data
    flick = FlickerParams(sigma_scale=0.1, seed=2)
    sampler = make_flicker_sampler(gt, flick, clip_len=3, seed=4)
    a, b = sampler(7), sampler(7)
    assert np.array_equal(a.noisy.values(), b.noisy.values())
    assert a.gt.timeline == b.gt.timeline
    with pytest.raises(ValueError):
        make_flicker_sampler(gt, flick, clip_len=1)


def test_make_flicker_sampler_attaches_flows(small_seq, small_gt_inv):
    flows = [f for f, _ in small_seq.flows]
    masks = [m for _, m in small_seq.flows]
    sampler = make_flicker_sampler(
        small_gt_inv, FlickerParams(seed=0), clip_len=3, seed=0,
        flows=flows, flow_masks=masks,
    )
    s = sampler(0)
    assert len(s.flow) == 2 and len(s.flow_mask) == 2
    t0 = s.gt.timeline[0]
    assert np.array_equal(s.flow[0], flows[t0])


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path, tiny_data):
    cfg = TrainConfig(steps=3, lr=1e-3, seed=1)
    state, _ = train_refiner(_sampler(tiny_data), cfg, config=SMALL)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, state, cfg)
    loaded, tc = load_checkpoint(path)
    assert loaded.step == 3
    assert tc["lr"] == 1e-3 and tc["weights"]["alpha"] == 10.0
    for (n, a), (_, b) in zip(named_tensors(state.params), named_tensors(loaded.params)):
        assert np.array_equal(a, b), n
        assert np.array_equal(state.opt_m[n], loaded.opt_m[n])
        assert np.array_equal(state.opt_v[n], loaded.opt_v[n])


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(p)


def test_resume_matches_uninterrupted_bitwise(tmp_path, tiny_data):
    """Checkpoint mid-run, resume, and land on the exact same bytes.

    The snapshot is taken from an on_step callback so both runs use the same
    cosine horizon; only the save/load round trip separates them.
    """
    cfg = TrainConfig(steps=6, lr=1e-3, seed=2)
    straight, hist_all = train_refiner(_sampler(tiny_data), cfg, config=SMALL)

    path = tmp_path / "half.bin"
    live = init_train_state(SMALL, cfg.seed)

    def snap(record):
        if record["step"] == 2:  # state.step has just advanced to 3
            save_checkpoint(path, live, cfg)

    train_refiner(_sampler(tiny_data), cfg, state=live, on_step=snap)
    loaded, tc = load_checkpoint(path)
    assert loaded.step == 3 and tc["steps"] == 6
    resumed, hist_b = train_refiner(_sampler(tiny_data), cfg, state=loaded)

    assert resumed.step == straight.step == 6
    for (n, a), (_, b) in zip(
        named_tensors(straight.params), named_tensors(resumed.params)
    ):
        assert np.array_equal(a, b), f"param {n} diverged after resume"
        assert np.array_equal(straight.opt_m[n], resumed.opt_m[n])
        assert np.array_equal(straight.opt_v[n], resumed.opt_v[n])
    assert hist_b == hist_all[3:]
