"""Core types for video depth rasters and the VDR on-disk formats.

Inverse depth is the canonical working domain; metric depth appears only
where geometry needs it (reprojection, export). Frames freeze their arrays
after construction so downstream operations can share buffers safely.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

VDR1_MAGIC = b"VDR1"
VDR2_MAGIC = b"VDR2"
DOMAIN_METRIC = 0
DOMAIN_INVERSE = 1

DEFAULT_EPS = 1e-6

# Every random draw in the repository goes through rng_for, so artifacts are
# reproducible from (seed, stream indices) alone. PCG64 is the one generator
# used everywhere; manifests record it by this name.
RNG_ALGORITHM = "pcg64"


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Independent, portable RNG stream keyed by a seed and counter indices.

    Streams for different (seed, *stream) tuples are statistically
    independent, which lets per-frame / per-window / per-step draws be made
    stateless: the same key always yields the same values.
    """
    entropy = (int(seed),) + tuple(int(s) for s in stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid pose: x_world = rotation @ x_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        # Orthonormality within 1e-9; det +1 so reflections never sneak in.
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant differs from 1")
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    def camera_position(self) -> np.ndarray:
        return self.translation

    def matrix34(self) -> np.ndarray:
        """Row-major 3x4 [R | t] block, the serialization layout."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @staticmethod
    def from_matrix34(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return Pose(rotation=m[:, :3], translation=m[:, 3])


@dataclass(frozen=True)
class AffineMap:
    """value -> scale * value + shift, in inverse-depth space."""

    scale: float
    shift: float

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.scale * values + self.shift

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """Map equivalent to applying `inner` first, then self."""
        return AffineMap(self.scale * inner.scale, self.scale * inner.shift + self.shift)


class _DepthRaster:
    """Shared structure of a single-frame raster: values plus validity mask."""

    values: np.ndarray
    mask: np.ndarray

    def _init_arrays(self, values, mask):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("values must be a 2-D array")
        if mask is None:
            m = np.ones(v.shape, dtype=bool)
        else:
            m = np.asarray(mask, dtype=bool)
        if m.shape != v.shape:
            raise ValueError("mask shape must match values")
        if m.any() and not np.all(np.isfinite(v[m])):
            raise ValueError("values must be finite at valid pixels")
        object.__setattr__(self, "values", _freeze(v))
        object.__setattr__(self, "mask", _freeze(m))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def with_values(self, values, mask=None):
        return type(self)(values=values, mask=self.mask if mask is None else mask)


@dataclass(frozen=True)
class InvDepthFrame(_DepthRaster):
    """One frame of inverse depth (affine-invariant working domain)."""

    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self._init_arrays(self.values, self.mask)


@dataclass(frozen=True)
class MetricDepthFrame(_DepthRaster):
    """One frame of metric depth in meters; strictly positive where valid."""

    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self._init_arrays(self.values, self.mask)
        if self.mask.any() and not np.all(self.values[self.mask] > 0):
            raise ValueError("metric depth must be strictly positive at valid pixels")


@dataclass(frozen=True)
class VideoDepthClip:
    """Ordered frames plus a strictly increasing integer timeline."""

    frames: tuple
    timeline: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        timeline = tuple(int(t) for t in self.timeline)
        if len(frames) == 0:
            raise ValueError("clip needs at least one frame")
        if len(timeline) != len(frames):
            raise ValueError("timeline length must match frame count")
        if any(b <= a for a, b in zip(timeline, timeline[1:])):
            raise ValueError("timeline must be strictly increasing")
        first = frames[0]
        for f in frames:
            if type(f) is not type(first):
                raise ValueError("clip frames must share one domain type")
            if f.values.shape != first.values.shape:
                raise ValueError("clip frames must share one resolution")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timeline", timeline)

    @staticmethod
    def from_frames(frames, timeline=None) -> "VideoDepthClip":
        frames = tuple(frames)
        if timeline is None:
            timeline = range(len(frames))
        return VideoDepthClip(frames=frames, timeline=tuple(timeline))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def values(self) -> np.ndarray:
        """Stacked (N, H, W) float64 view of all frame values."""
        return np.stack([f.values for f in self.frames])

    def masks(self) -> np.ndarray:
        return np.stack([f.mask for f in self.frames])

    def with_values(self, values: np.ndarray, masks=None) -> "VideoDepthClip":
        """Same timeline and frame type, new per-frame values (and masks)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(self), self.height, self.width):
            raise ValueError("values must be (N, H, W)")
        frames = []
        for i, f in enumerate(self.frames):
            m = f.mask if masks is None else masks[i]
            frames.append(type(f)(values=values[i], mask=np.asarray(m, dtype=bool)))
        return VideoDepthClip(frames=tuple(frames), timeline=self.timeline)


def depth_to_inverse(frame: MetricDepthFrame, eps: float = DEFAULT_EPS) -> InvDepthFrame:
    """Metric depth -> inverse depth, 1 / max(depth, eps); mask passes through."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    inv = np.where(frame.mask, 1.0 / np.maximum(frame.values, eps), 0.0)
    return InvDepthFrame(values=inv, mask=frame.mask)


def inverse_to_depth(frame: InvDepthFrame, eps: float = DEFAULT_EPS) -> MetricDepthFrame:
    """Inverse depth -> metric depth.

    Valid pixels with value <= 0 (possible after alignment) are invalidated
    rather than clamped; the eps clamp applies only to near-zero positives.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    positive = frame.mask & (frame.values > 0)
    depth = np.where(positive, 1.0 / np.maximum(frame.values, eps), 0.0)
    # Fill invalid slots with 1.0 so the positivity invariant is about the mask.
    depth = np.where(positive, depth, 1.0)
    return MetricDepthFrame(values=depth, mask=positive)


def clip_depth_to_inverse(clip: VideoDepthClip, eps: float = DEFAULT_EPS) -> VideoDepthClip:
    return VideoDepthClip(
        frames=tuple(depth_to_inverse(f, eps) for f in clip.frames),
        timeline=clip.timeline,
    )


def clip_inverse_to_depth(clip: VideoDepthClip, eps: float = DEFAULT_EPS) -> VideoDepthClip:
    return VideoDepthClip(
        frames=tuple(inverse_to_depth(f, eps) for f in clip.frames),
        timeline=clip.timeline,
    )


# ---------------------------------------------------------------------------
# VDR1 / VDR2 binary rasters
#
# Header (16 bytes): magic, u32 LE width, u32 LE height, u8 domain flag
# (0 metric, 1 inverse), 3 zero pad bytes. Then values as f32 LE row-major
# (one channel for VDR1, two interleaved for VDR2), then the mask as u8
# row-major (0 invalid, 1 valid).
# ---------------------------------------------------------------------------


def _pack_header(magic: bytes, width: int, height: int, domain: int) -> bytes:
    return magic + struct.pack("<IIB3x", width, height, domain)


def _parse_header(buf: bytes, magic: bytes):
    if len(buf) < 16 or buf[:4] != magic:
        raise ValueError(f"not a {magic.decode()} file")
    width, height, domain = struct.unpack_from("<IIB", buf, 4)
    if domain not in (DOMAIN_METRIC, DOMAIN_INVERSE):
        raise ValueError(f"unknown domain flag {domain}")
    return width, height, domain


def write_vdr1(path, frame) -> None:
    """Write an InvDepthFrame or MetricDepthFrame as a VDR1 raster."""
    domain = DOMAIN_INVERSE if isinstance(frame, InvDepthFrame) else DOMAIN_METRIC
    payload = frame.values.astype("<f4").tobytes()
    maskbytes = frame.mask.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(_pack_header(VDR1_MAGIC, frame.width, frame.height, domain))
        fh.write(payload)
        fh.write(maskbytes)


def read_vdr1(path):
    """Read a VDR1 raster; the domain flag selects the returned frame type."""
    with open(path, "rb") as fh:
        buf = fh.read()
    width, height, domain = _parse_header(buf, VDR1_MAGIC)
    n = width * height
    expect = 16 + 4 * n + n
    if len(buf) != expect:
        raise ValueError(f"VDR1 size mismatch: got {len(buf)}, want {expect}")
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=16)
    values = values.reshape(height, width).astype(np.float64)
    mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=16 + 4 * n)
    mask = mask.reshape(height, width).astype(bool)
    cls = InvDepthFrame if domain == DOMAIN_INVERSE else MetricDepthFrame
    values = np.where(mask, values, 1.0 if cls is MetricDepthFrame else 0.0)
    return cls(values=values, mask=mask)


def write_vdr2(path, flow: np.ndarray, mask: np.ndarray) -> None:
    """Write an (H, W, 2) flow field with validity mask as a VDR2 raster."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must be (H, W, 2)")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != flow.shape[:2]:
        raise ValueError("mask shape must match flow")
    height, width = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_pack_header(VDR2_MAGIC, width, height, DOMAIN_METRIC))
        fh.write(flow.astype("<f4").tobytes())
        fh.write(mask.astype(np.uint8).tobytes())


def read_vdr2(path):
    """Read a VDR2 flow raster -> ((H, W, 2) float64, (H, W) bool)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    width, height, _ = _parse_header(buf, VDR2_MAGIC)
    n = width * height
    expect = 16 + 8 * n + n
    if len(buf) != expect:
        raise ValueError(f"VDR2 size mismatch: got {len(buf)}, want {expect}")
    flow = np.frombuffer(buf, dtype="<f4", count=2 * n, offset=16)
    flow = flow.reshape(height, width, 2).astype(np.float64)
    mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=16 + 8 * n)
    mask = mask.reshape(height, width).astype(bool)
    return flow, mask
