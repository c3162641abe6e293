"""Toy spatio-temporal refiner head with hand-rolled autodiff.

The head refines a flickery inverse-depth clip: mean-pool each frame by a
patch factor, lift to C channels, add learned absolute positional embeddings
along time, run L blocks of {residual 3x3 depthwise + pointwise spatial
mixer; pre-norm temporal self-attention where every spatial site attends
over its own N temporal tokens; pre-norm FFN}, project back to one channel,
bilinearly upsample, and (by default) add the input back. With the output
projection zero-initialized the head is the identity at step 0.

Forward and backward are written by hand in numpy. Parameters are stored in
float32; all computation runs in float64 so gradient checks and training are
bit-reproducible. The temporal attention reshapes features to
(spatial sites) x N x C, i.e. time is the sequence axis at every site.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .core import RNG_ALGORITHM, InvDepthFrame, VideoDepthClip, rng_for
from .losses import LossResult, LossWeights, total_loss

STREAM_INIT = 4
STREAM_DATA = 5

_LN_EPS = 1e-5
_FFN_MULT = 4


@dataclass(frozen=True)
class RefinerConfig:
    patch: int = 4
    channels: int = 32
    layers: int = 4
    heads: int = 4
    n_max: int = 32
    residual_output: bool = True

    def __post_init__(self):
        if min(self.patch, self.channels, self.layers, self.heads, self.n_max) < 1:
            raise ValueError("config values must be positive")
        if self.channels % self.heads != 0:
            raise ValueError("channels must divide evenly into heads")


@dataclass
class TemporalLayerParams:
    dw: np.ndarray  # (C, 3, 3) depthwise stencil
    pw: np.ndarray  # (C, C) pointwise mixer
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray  # (C, 4C)
    b1: np.ndarray
    w2: np.ndarray  # (4C, C)
    b2: np.ndarray


@dataclass
class RefinerParams:
    config: RefinerConfig
    lift: np.ndarray  # (1, C)
    pos: np.ndarray  # (N_max, C) learned absolute positional table
    layers: list
    out: np.ndarray  # (C, 1), zero at init so the head starts as identity


_LAYER_FIELDS = [f.name for f in dataclasses.fields(TemporalLayerParams)]


def named_tensors(params: RefinerParams):
    """(name, array) pairs in a fixed order; the order defines init draws,
    optimizer iteration, and checkpoint layout."""
    yield "lift", params.lift
    yield "pos", params.pos
    for i, layer in enumerate(params.layers):
        for fname in _LAYER_FIELDS:
            yield f"layers.{i}.{fname}", getattr(layer, fname)
    yield "out", params.out


def _set_tensor(params: RefinerParams, name: str, value: np.ndarray) -> None:
    if name.startswith("layers."):
        _, idx, fname = name.split(".")
        setattr(params.layers[int(idx)], fname, value)
    else:
        setattr(params, name, value)


def init_params(config: RefinerConfig, seed: int = 0) -> RefinerParams:
    """Uniform(+-sqrt(1/fan_in)) projections, Normal(0, 0.02) positional
    table, ones/zeros layer norms, zero output projection."""
    rng = rng_for(seed, STREAM_INIT)
    c = config.channels

    def uniform(shape, fan_in):
        bound = float(np.sqrt(1.0 / fan_in))
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    lift = uniform((1, c), 1)
    pos = (0.02 * rng.standard_normal((config.n_max, c))).astype(np.float32)
    layers = []
    for _ in range(config.layers):
        layers.append(
            TemporalLayerParams(
                dw=uniform((c, 3, 3), 9),
                pw=uniform((c, c), c),
                ln1_g=np.ones(c, dtype=np.float32),
                ln1_b=np.zeros(c, dtype=np.float32),
                wq=uniform((c, c), c),
                wk=uniform((c, c), c),
                wv=uniform((c, c), c),
                wo=uniform((c, c), c),
                ln2_g=np.ones(c, dtype=np.float32),
                ln2_b=np.zeros(c, dtype=np.float32),
                w1=uniform((c, _FFN_MULT * c), c),
                b1=np.zeros(_FFN_MULT * c, dtype=np.float32),
                w2=uniform((_FFN_MULT * c, c), _FFN_MULT * c),
                b2=np.zeros(c, dtype=np.float32),
            )
        )
    out = np.zeros((c, 1), dtype=np.float32)
    return RefinerParams(config=config, lift=lift, pos=pos, layers=layers, out=out)


def _params64(params: RefinerParams) -> RefinerParams:
    copy = RefinerParams(
        config=params.config,
        lift=None,
        pos=None,
        layers=[
            TemporalLayerParams(**{f: None for f in _LAYER_FIELDS}) for _ in params.layers
        ],
        out=None,
    )
    for name, arr in named_tensors(params):
        _set_tensor(copy, name, np.asarray(arr, dtype=np.float64))
    return copy


# ---------------------------------------------------------------------------
# Primitive layers (forward + backward pairs)
# ---------------------------------------------------------------------------


def _pool_matrix(size: int, p: int) -> np.ndarray:
    m = np.zeros((size // p, size))
    for i in range(size // p):
        m[i, i * p : (i + 1) * p] = 1.0 / p
    return m


def _upsample_matrix(size: int, p: int) -> np.ndarray:
    """Bilinear x p upsampling as a dense (size, size/p) operator,
    sampling at patch centers with edge replication."""
    f = size // p
    m = np.zeros((size, f))
    for y in range(size):
        sy = (y + 0.5) / p - 0.5
        y0 = int(np.floor(sy))
        wy = sy - y0
        y0c = min(max(y0, 0), f - 1)
        y1c = min(max(y0 + 1, 0), f - 1)
        m[y, y0c] += 1.0 - wy
        m[y, y1c] += wy
    return m


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _layernorm_fwd(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layernorm_bwd(dy, cache):
    xhat, inv, gain = cache
    c = xhat.shape[-1]
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    # dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _shift(z, a, b):
    """out[i, j] = z[i + a, j + b], zero outside; z is (N, H, W, C)."""
    n, h, w, c = z.shape
    out = np.zeros_like(z)
    ys_dst = slice(max(0, -a), h - max(0, a))
    ys_src = slice(max(0, a), h - max(0, -a))
    xs_dst = slice(max(0, -b), w - max(0, b))
    xs_src = slice(max(0, b), w - max(0, -b))
    out[:, ys_dst, xs_dst, :] = z[:, ys_src, xs_src, :]
    return out


def _mixer_fwd(z, dw, pw):
    u = np.zeros_like(z)
    for a in (-1, 0, 1):
        for b in (-1, 0, 1):
            u += dw[:, a + 1, b + 1] * _shift(z, a, b)
    mix = u @ pw
    return z + mix, (z, u)


def _mixer_bwd(dy, cache, dw, pw):
    z, u = cache
    du = dy @ pw.T
    dpw = u.reshape(-1, u.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    dz = dy.copy()  # residual branch
    ddw = np.zeros_like(dw)
    for a in (-1, 0, 1):
        for b in (-1, 0, 1):
            ddw[:, a + 1, b + 1] = np.sum(du * _shift(z, a, b), axis=(0, 1, 2))
            dz += dw[:, a + 1, b + 1] * _shift(du, -a, -b)
    return dz, ddw, dpw


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _attention_fwd(x, layer, heads):
    """x is (S, N, C): every spatial site attends over its own N time steps."""
    s, n, c = x.shape
    dh = c // heads
    scale = 1.0 / np.sqrt(dh)

    def split(m):
        return m.reshape(s, n, heads, dh).transpose(0, 2, 1, 3)  # (S, h, N, Dh)

    q = split(x @ layer.wq)
    k = split(x @ layer.wk)
    v = split(x @ layer.wv)
    att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(s, n, c)
    y = ctx @ layer.wo
    return y, (x, q, k, v, att, ctx, scale)


def _attention_bwd(dy, cache, layer, heads):
    x, q, k, v, att, ctx, scale = cache
    s, n, c = x.shape
    dh = c // heads

    dwo = ctx.reshape(-1, c).T @ dy.reshape(-1, c)
    dctx = (dy @ layer.wo.T).reshape(s, n, heads, dh).transpose(0, 2, 1, 3)

    datt = dctx @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ dctx
    dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
    dq = dscores @ k * scale
    dk = dscores.transpose(0, 1, 3, 2) @ q * scale

    def merge(m):
        return m.transpose(0, 2, 1, 3).reshape(s, n, c)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    xf = x.reshape(-1, c)
    dwq = xf.T @ dq.reshape(-1, c)
    dwk = xf.T @ dk.reshape(-1, c)
    dwv = xf.T @ dv.reshape(-1, c)
    dx = dq @ layer.wq.T + dk @ layer.wk.T + dv @ layer.wv.T
    return dx, dwq, dwk, dwv, dwo


def _ffn_fwd(x, layer):
    pre = x @ layer.w1 + layer.b1
    act = _gelu(pre)
    return act @ layer.w2 + layer.b2, (x, pre, act)


def _ffn_bwd(dy, cache, layer):
    x, pre, act = cache
    dact = dy @ layer.w2.T
    dw2 = act.reshape(-1, act.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db2 = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dpre = dact * _gelu_grad(pre)
    dw1 = x.reshape(-1, x.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
    db1 = np.sum(dpre, axis=tuple(range(dpre.ndim - 1)))
    dx = dpre @ layer.w1.T
    return dx, dw1, db1, dw2, db2


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------


def _forward_cached(params: RefinerParams, clip: VideoDepthClip):
    cfg = params.config
    n = len(clip)
    h, w = clip.height, clip.width
    if n > cfg.n_max:
        raise ValueError(f"clip length {n} exceeds n_max {cfg.n_max}")
    if h % cfg.patch or w % cfg.patch:
        raise ValueError("frame size must be divisible by the patch factor")
    p64 = _params64(params)

    x_in = clip.values()
    py = _pool_matrix(h, cfg.patch)
    px = _pool_matrix(w, cfg.patch)
    uy = _upsample_matrix(h, cfg.patch)
    ux = _upsample_matrix(w, cfg.patch)

    pooled = np.einsum("ph,nhw,qw->npq", py, x_in, px)
    z = pooled[..., None] * p64.lift[0]  # (N, Hf, Wf, C)
    z = z + p64.pos[:n][:, None, None, :]

    hf, wf = pooled.shape[1], pooled.shape[2]
    s_sites = hf * wf
    layer_caches = []
    for layer in p64.layers:
        z, mix_cache = _mixer_fwd(z, layer.dw, layer.pw)

        a_in, ln1_cache = _layernorm_fwd(z, layer.ln1_g, layer.ln1_b)
        a_t = a_in.reshape(n, s_sites, -1).transpose(1, 0, 2)  # (S, N, C)
        att, att_cache = _attention_fwd(a_t, layer, cfg.heads)
        z = z + att.transpose(1, 0, 2).reshape(n, hf, wf, -1)

        f_in, ln2_cache = _layernorm_fwd(z, layer.ln2_g, layer.ln2_b)
        ff, ffn_cache = _ffn_fwd(f_in, layer)
        z = z + ff

        layer_caches.append((mix_cache, ln1_cache, att_cache, ln2_cache, ffn_cache))

    feat = (z @ p64.out)[..., 0]  # (N, Hf, Wf)
    up = np.einsum("yh,nhw,xw->nyx", uy, feat, ux)
    out_vals = up + x_in if cfg.residual_output else up

    cache = {
        "p64": p64,
        "n": n,
        "shape": (h, w, hf, wf),
        "ops": (py, px, uy, ux),
        "pooled": pooled,
        "z_final": z,
        "layers": layer_caches,
    }
    return clip.with_values(out_vals), cache


def refiner_forward(params: RefinerParams, clip: VideoDepthClip) -> VideoDepthClip:
    """Refine a clip; masks and timeline pass through unchanged."""
    out, _ = _forward_cached(params, clip)
    return out


def refiner_backward(cache, grad_out: np.ndarray):
    """Backprop d(loss)/d(output values) -> (param grads by name, d/d input).

    grad_out is (N, H, W) against the refiner output values.
    """
    p64 = cache["p64"]
    cfg = p64.config
    n = cache["n"]
    h, w, hf, wf = cache["shape"]
    py, px, uy, ux = cache["ops"]
    s_sites = hf * wf

    grad_out = np.asarray(grad_out, dtype=np.float64)
    dfeat = np.einsum("yh,nyx,xw->nhw", uy, grad_out, ux)
    z = cache["z_final"]
    dout_w = z.reshape(-1, cfg.channels).T @ dfeat.reshape(-1, 1)
    dz = dfeat[..., None] * p64.out[:, 0]

    grads = {"out": dout_w}
    for i in range(len(p64.layers) - 1, -1, -1):
        layer = p64.layers[i]
        mix_cache, ln1_cache, att_cache, ln2_cache, ffn_cache = cache["layers"][i]

        dff = dz
        dfin, dw1, db1, dw2, db2 = _ffn_bwd(dff, ffn_cache, layer)
        dz_ln2, dg2, db_ln2 = _layernorm_bwd(dfin, ln2_cache)
        dz = dz + dz_ln2

        datt = dz.reshape(n, s_sites, -1).transpose(1, 0, 2)
        da_t, dwq, dwk, dwv, dwo = _attention_bwd(datt, att_cache, layer, cfg.heads)
        da_in = da_t.transpose(1, 0, 2).reshape(n, hf, wf, -1)
        dz_ln1, dg1, db_ln1 = _layernorm_bwd(da_in, ln1_cache)
        dz = dz + dz_ln1

        dz, ddw, dpw = _mixer_bwd(dz, mix_cache, layer.dw, layer.pw)

        prefix = f"layers.{i}."
        grads[prefix + "dw"] = ddw
        grads[prefix + "pw"] = dpw
        grads[prefix + "ln1_g"] = dg1
        grads[prefix + "ln1_b"] = db_ln1
        grads[prefix + "wq"] = dwq
        grads[prefix + "wk"] = dwk
        grads[prefix + "wv"] = dwv
        grads[prefix + "wo"] = dwo
        grads[prefix + "ln2_g"] = dg2
        grads[prefix + "ln2_b"] = db_ln2
        grads[prefix + "w1"] = dw1
        grads[prefix + "b1"] = db1
        grads[prefix + "w2"] = dw2
        grads[prefix + "b2"] = db2

    grads["pos"] = np.zeros_like(p64.pos)
    grads["pos"][:n] = dz.sum(axis=(1, 2))
    grads["lift"] = np.sum(dz * cache["pooled"][..., None], axis=(0, 1, 2))[None, :]
    dpooled = dz @ p64.lift[0]
    dx_in = np.einsum("ph,npq,qw->nhw", py, dpooled, px)
    if cfg.residual_output:
        dx_in = dx_in + grad_out
    return grads, dx_in


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 1
    lr: float = 1e-4
    schedule: str = "cosine"  # cosine decay to 0, or "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    weights: LossWeights = LossWeights()
    tau: float = 0.05
    seed: int = 0

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + float(np.cos(np.pi * step / self.steps)))


@dataclass
class TrainSample:
    noisy: VideoDepthClip
    gt: VideoDepthClip
    flow: list = None
    flow_mask: list = None


@dataclass
class TrainState:
    params: RefinerParams
    opt_m: dict
    opt_v: dict
    step: int = 0


def init_train_state(config: RefinerConfig, seed: int = 0) -> TrainState:
    params = init_params(config, seed)
    zeros = {name: np.zeros_like(arr) for name, arr in named_tensors(params)}
    return TrainState(
        params=params,
        opt_m=zeros,
        opt_v={k: v.copy() for k, v in zeros.items()},
        step=0,
    )


def _adamw_step(state: TrainState, grads: dict, cfg: TrainConfig, lr: float) -> None:
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p32 in list(named_tensors(state.params)):
        g = grads[name]
        m = state.opt_m[name].astype(np.float64)
        v = state.opt_v[name].astype(np.float64)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        p = p32.astype(np.float64)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps) + cfg.weight_decay * p
        p = p - lr * update
        state.opt_m[name] = m.astype(np.float32)
        state.opt_v[name] = v.astype(np.float32)
        _set_tensor(state.params, name, p.astype(np.float32))


def _global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def default_loss(cfg: TrainConfig):
    def fn(pred: VideoDepthClip, sample: TrainSample) -> LossResult:
        return total_loss(pred, sample.gt, weights=cfg.weights, thresh=cfg.tau)

    return fn


def train_refiner(data, cfg: TrainConfig, state: TrainState = None, loss_fn=None,
                  config: RefinerConfig = None, on_step=None):
    """Train the refiner; returns (TrainState, history).

    `data` is a callable step -> TrainSample (or list of TrainSample for a
    batch); keying samples by step keeps the stream stateless so resumed runs
    see exactly the frames an uninterrupted run would. Pass a `state` from a
    checkpoint to resume; training continues from state.step to cfg.steps.
    History holds one record per step: step, lr, total/tgm/ssi, grad norm.

    Raises TrainingDivergedError (with the pre-update state attached) on a
    non-finite loss or gradient.
    """
    if state is None:
        state = init_train_state(config or RefinerConfig(), cfg.seed)
    if loss_fn is None:
        loss_fn = default_loss(cfg)

    history = []
    for step in range(state.step, cfg.steps):
        samples = data(step)
        if isinstance(samples, TrainSample):
            samples = [samples]
        inv = 1.0 / len(samples)

        grads = None
        value = 0.0
        comps = {"tgm": 0.0, "ssi": 0.0}
        for sample in samples:
            out_clip, cache = _forward_cached(state.params, sample.noisy)
            res = loss_fn(out_clip, sample)
            pgrads, _ = refiner_backward(cache, np.stack(res.grad))
            if grads is None:
                grads = {k: v * inv for k, v in pgrads.items()}
            else:
                for k in grads:
                    grads[k] += pgrads[k] * inv
            value += res.value * inv
            for key in comps:
                comps[key] += inv * (res.components or {}).get(key, 0.0)

        norm = _global_norm(grads)
        if not np.isfinite(value) or not np.isfinite(norm):
            raise TrainingDivergedError(
                f"non-finite loss or gradient at step {step}", state=state, step=step
            )
        if cfg.clip_norm > 0 and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            for k in grads:
                grads[k] = grads[k] * scale

        lr = cfg.lr_at(step)
        _adamw_step(state, grads, cfg, lr)
        state.step = step + 1
        record = {
            "step": step,
            "lr": lr,
            "total": value,
            "tgm": comps["tgm"],
            "ssi": comps["ssi"],
            "grad_norm": norm,
        }
        history.append(record)
        if on_step is not None:
            on_step(record)
    return state, history


def make_flicker_sampler(gt: VideoDepthClip, flicker, clip_len: int, seed: int = 0,
                         flows=None, flow_masks=None):
    """Training stream: step -> TrainSample of (flickered clip, clean clip).

    Each step draws a clip_len-frame window start from the stream
    (seed, STREAM_DATA, step), so sample k is reproducible in isolation and
    a resumed run sees exactly the samples an uninterrupted run would. The
    flicker corruption is keyed by global frame index (see
    synth.flicker_predictor), i.e. the noisy dataset is fixed, not redrawn
    per visit. `flows`/`flow_masks`, when given, are indexed by global frame
    and attached for the pairs inside the clip.
    """
    from .synth import flicker_predictor

    total = len(gt)
    if clip_len < 2 or clip_len > total:
        raise ValueError("clip_len must be in [2, len(gt)]")

    def sample(step: int) -> TrainSample:
        rng = rng_for(seed, STREAM_DATA, step)
        t0 = int(rng.integers(0, total - clip_len + 1))
        clean = VideoDepthClip(
            frames=gt.frames[t0 : t0 + clip_len],
            timeline=gt.timeline[t0 : t0 + clip_len],
        )
        noisy = flicker_predictor(clean, flicker)
        fl = fm = None
        if flows is not None:
            fl = [flows[t] for t in clean.timeline[:-1]]
            fm = [flow_masks[t] for t in clean.timeline[:-1]]
        return TrainSample(noisy=noisy, gt=clean, flow=fl, flow_mask=fm)

    return sample


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON header line + raw little-endian f32 blobs
# ---------------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, train_config: TrainConfig = None) -> None:
    tensors = []
    blobs = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for name, arr in named_tensors(state.params):
        add("param." + name, arr)
        add("opt_m." + name, state.opt_m[name])
        add("opt_v." + name, state.opt_v[name])

    header = {
        "format": "refiner-checkpoint-v1",
        "config": dataclasses.asdict(state.params.config),
        "train_config": _train_config_dict(train_config),
        "step": state.step,
        "rng": RNG_ALGORITHM,
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def _train_config_dict(cfg: TrainConfig):
    if cfg is None:
        return None
    d = dataclasses.asdict(cfg)
    d["weights"] = {"alpha": cfg.weights.alpha, "beta": cfg.weights.beta}
    return d


def load_checkpoint(path):
    """-> (TrainState, train_config dict or None)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line)
    if header.get("format") != "refiner-checkpoint-v1":
        raise ValueError("not a refiner checkpoint")
    config = RefinerConfig(**header["config"])
    state = init_train_state(config, seed=0)
    arrays = {}
    for meta in header["tensors"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=meta["offset"])
        arrays[meta["name"]] = arr.reshape(shape).copy()
    for name, _ in named_tensors(state.params):
        _set_tensor(state.params, name, arrays["param." + name])
        state.opt_m[name] = arrays["opt_m." + name]
        state.opt_v[name] = arrays["opt_v." + name]
    state.step = int(header["step"])
    return state, header.get("train_config")


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def check_refiner_gradients(
    config: RefinerConfig = None,
    n_frames: int = 4,
    size: int = 16,
    n_coords: int = 250,
    h: float = 1e-5,
    tol: float = 1e-3,
    seed: int = 0,
):
    """Central finite differences over random parameter coordinates.

    The probe loss is a fixed random projection of the output, so every
    parameter influences it. The network is smooth (GELU, softmax, layer
    norm), so no kink handling is needed. Returns a FiniteDiffReport-shaped
    object from the losses module.
    """
    from .losses import FiniteDiffReport

    if config is None:
        config = RefinerConfig(patch=2, channels=8, layers=2, heads=2, n_max=8)
    rng = rng_for(seed, STREAM_INIT, 1)
    params = init_params(config, seed)
    # Zero-init 'out' would zero most parameter gradients; randomize it for
    # the check so gradient flow reaches every layer.
    params.out = rng.uniform(-0.5, 0.5, size=params.out.shape).astype(np.float32)

    vals = rng.uniform(0.2, 2.0, size=(n_frames, size, size))
    clip = VideoDepthClip.from_frames(
        [InvDepthFrame(values=vals[i]) for i in range(n_frames)]
    )
    proj = rng.standard_normal((n_frames, size, size))

    def loss_of(p: RefinerParams) -> float:
        out = refiner_forward(p, clip)
        return float(np.sum(proj * out.values()))

    _, cache = _forward_cached(params, clip)
    grads, _ = refiner_backward(cache, proj)

    names = [name for name, _ in named_tensors(params)]
    sizes = {name: arr.size for name, arr in named_tensors(params)}
    flat_total = sum(sizes.values())
    idx = rng.choice(flat_total, size=min(n_coords, flat_total), replace=False)

    bounds = []
    start = 0
    for name in names:
        bounds.append((start, start + sizes[name], name))
        start += sizes[name]

    def locate(k):
        for lo, hi, name in bounds:
            if lo <= k < hi:
                return name, k - lo
        raise IndexError(k)

    by_name = dict(named_tensors(params))
    max_rel = 0.0
    checked = 0
    for k in sorted(int(i) for i in idx):
        name, off = locate(k)
        pert = by_name[name].astype(np.float64)

        def eval_with(delta):
            arr = pert.copy()
            arr.reshape(-1)[off] += delta
            trial = _params_with(params, name, arr)
            return loss_of(trial)

        num = (eval_with(h) - eval_with(-h)) / (2 * h)
        analytic = float(np.asarray(grads[name]).reshape(-1)[off])
        rel = abs(analytic - num) / max(abs(analytic), abs(num), 1e-8)
        max_rel = max(max_rel, rel)
        checked += 1

    return FiniteDiffReport(
        max_rel_err=max_rel, passed=max_rel <= tol, n_checked=checked,
        n_skipped=0, h=h, tol=tol,
    )


def _params_with(params: RefinerParams, name: str, arr: np.ndarray) -> RefinerParams:
    copy = RefinerParams(
        config=params.config,
        lift=params.lift,
        pos=params.pos,
        layers=[dataclasses.replace(layer) for layer in params.layers],
        out=params.out,
    )
    _set_tensor(copy, name, arr)
    return copy
