"""Single-channel clip container, the TVC1 file format, and synthetic clips.

Frames live in one ``[N, H, W]`` float32 array with values in ``[0, 1]``.
Synthetic content is rendered analytically at shifted coordinates, so a
translated frame is exact (no resampling blur) for any sub-pixel velocity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidLengthError, InvalidShapeError, InvalidSpecError

MAGIC = b"TVC1"
SEARCH_RANGE = 7
PATTERNS = ("translating-rectangle", "drifting-sinusoid", "two-layer-parallax")


class VideoClip:
    """Ordered luma frames; values are clamped to [0, 1] on ingest."""

    __slots__ = ("data",)

    def __init__(self, frames):
        arr = np.asarray(frames, dtype=np.float32)
        if arr.ndim == 4 and arr.shape[1] == 1:
            arr = arr[:, 0]
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise InvalidShapeError(f"clip needs [N,H,W] frames, got {arr.shape}")
        self.data = np.clip(arr, 0.0, 1.0)

    @property
    def frame_count(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def frames(self) -> list[np.ndarray]:
        """Frames as ``[1, H, W]`` arrays."""
        return [f[None] for f in self.data]

    def __len__(self) -> int:
        return self.frame_count

    def __getitem__(self, index):
        if isinstance(index, slice):
            return VideoClip(self.data[index])
        return self.data[index]

    def quantized(self) -> "VideoClip":
        return VideoClip(to_uint8(self.data) / np.float32(255.0))

    def __repr__(self) -> str:
        return f"VideoClip(n={self.frame_count}, {self.width}x{self.height})"


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_clip(clip: VideoClip, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HHHB", clip.width, clip.height, clip.frame_count, 8))
        fh.write(to_uint8(clip.data).tobytes())


def load_clip(path) -> VideoClip:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad clip magic {raw[:4]!r}")
    if len(raw) < 11:
        raise FormatError(f"{path}: truncated clip header")
    w, h, n, depth = struct.unpack("<HHHB", raw[4:11])
    if depth != 8:
        raise FormatError(f"{path}: unsupported bit depth {depth}")
    if n == 0 or w == 0 or h == 0:
        raise FormatError(f"{path}: empty clip header ({w}x{h}, {n} frames)")
    payload = raw[11:]
    if len(payload) != w * h * n:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {w * h * n}")
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w)
    return VideoClip(frames.astype(np.float32) / np.float32(255.0))


# --------------------------------------------------------------------------
# even/odd grouping


def split_even_odd(clip: VideoClip) -> tuple[VideoClip, VideoClip]:
    if clip.frame_count < 2:
        raise InvalidLengthError("split needs at least 2 frames")
    return VideoClip(clip.data[0::2]), VideoClip(clip.data[1::2])


def merge_even_odd(even: VideoClip, odd: VideoClip) -> VideoClip:
    ne, no = even.frame_count, odd.frame_count
    if ne - no not in (0, 1):
        raise InvalidLengthError(f"cannot interleave {ne} even with {no} odd frames")
    out = np.empty((ne + no,) + even.data.shape[1:], dtype=np.float32)
    out[0::2] = even.data
    out[1::2] = odd.data
    return VideoClip(out)


def pad_to_group(clip: VideoClip, group: int = 7) -> tuple[VideoClip, int]:
    """Duplicate the last frame up to a multiple of ``group``; returns (clip, valid count)."""
    n = clip.frame_count
    extra = (-n) % group
    if not extra:
        return clip, n
    tail = np.repeat(clip.data[-1:], extra, axis=0)
    return VideoClip(np.concatenate([clip.data, tail])), n


# --------------------------------------------------------------------------
# synthetic sequences


@dataclass(frozen=True)
class SyntheticSpec:
    pattern: str = "translating-rectangle"
    velocity: tuple[float, float] = (1.0, 0.0)
    frames: int = 7
    height: int = 32
    width: int = 32
    noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.pattern not in PATTERNS:
            raise InvalidSpecError(f"unknown pattern {self.pattern!r}")
        if self.frames < 1:
            raise InvalidSpecError("frame count must be positive")
        if self.height < 8 or self.width < 8:
            raise InvalidSpecError(f"{self.width}x{self.height} is smaller than the 8x8 pattern")
        if float(np.hypot(*self.velocity)) > SEARCH_RANGE:
            raise InvalidSpecError(f"|velocity| exceeds the search range {SEARCH_RANGE}")
        if self.noise < 0:
            raise InvalidSpecError("noise amplitude must be non-negative")


def _texture(rng: np.random.Generator, waves: int = 3):
    """Random smooth texture as a function of (x, y) pixel coordinates."""
    freqs = rng.uniform(2 * np.pi / 20, 2 * np.pi / 5, waves)
    angles = rng.uniform(0, np.pi, waves)
    phases = rng.uniform(0, 2 * np.pi, waves)
    amps = rng.uniform(0.3, 1.0, waves)
    amps = amps / amps.sum() * rng.uniform(0.15, 0.35)
    base = rng.uniform(0.3, 0.7)
    kx = freqs * np.cos(angles)
    ky = freqs * np.sin(angles)

    def f(x, y):
        out = np.full(np.broadcast(x, y).shape, base)
        for a, u, v, p in zip(amps, kx, ky, phases):
            out = out + a * np.sin(u * x + v * y + p)
        return out

    return f


def _coverage(lo, hi, start, length):
    # overlap of each pixel cell [lo, hi) with [start, start + length)
    return np.clip(np.minimum(hi, start + length) - np.maximum(lo, start), 0.0, 1.0)


def _rect(rng: np.random.Generator, height: int, width: int):
    rh = rng.uniform(height / 4, height / 2)
    rw = rng.uniform(width / 4, width / 2)
    y0 = rng.uniform(0, height - rh)
    x0 = rng.uniform(0, width - rw)

    def alpha(x, y):
        return _coverage(y - 0.5, y + 0.5, y0, rh) * _coverage(x - 0.5, x + 0.5, x0, rw)

    return alpha


def generate_synthetic(spec: SyntheticSpec) -> tuple[VideoClip, list[np.ndarray]]:
    """Render a clip and the ground-truth forward flow for each adjacent pair.

    Content at pixel ``p`` of frame ``t`` is ``scene(p - t*v)``. The flow
    of pair ``(t, t+1)`` is ``v`` on the moving layer; for the parallax
    pattern the background layer moves at ``v/2``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    vx, vy = (float(v) for v in spec.velocity)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    frames = np.empty((spec.frames, H, W))
    flows = []

    back = _texture(rng)
    if spec.pattern == "drifting-sinusoid":
        for t in range(spec.frames):
            frames[t] = back(xs - t * vx, ys - t * vy)
        flow = np.stack([np.full((H, W), vx), np.full((H, W), vy)])
        flows = [flow.copy() for _ in range(spec.frames - 1)]
    else:
        fore = _texture(rng)
        alpha = _rect(rng, H, W)
        back_speed = 0.5 if spec.pattern == "two-layer-parallax" else 1.0
        for t in range(spec.frames):
            bx, by = xs - t * vx * back_speed, ys - t * vy * back_speed
            fx, fy = xs - t * vx, ys - t * vy
            a = alpha(fx, fy)
            frames[t] = a * fore(fx, fy) + (1 - a) * back(bx, by)
            if t + 1 < spec.frames:
                inside = alpha(fx, fy) > 0.5
                flow = np.stack([np.where(inside, vx, vx * back_speed),
                                 np.where(inside, vy, vy * back_speed)])
                flows.append(flow)

    if spec.noise > 0:
        frames = frames + spec.noise * rng.standard_normal(frames.shape)
    return VideoClip(frames), flows


def make_corpus(count: int, seed: int, frames: int = 7, size: int = 32,
                max_speed: float = 2.0, noise: float = 0.01) -> list[VideoClip]:
    """Random mix of all patterns; velocities keep two-frame motion inside the search window."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(count):
        pattern = PATTERNS[i % len(PATTERNS)]
        speed = rng.uniform(0.0, max_speed)
        angle = rng.uniform(0, 2 * np.pi)
        spec = SyntheticSpec(pattern=pattern, velocity=(speed * np.cos(angle), speed * np.sin(angle)),
                             frames=frames, height=size, width=size, noise=noise,
                             seed=int(rng.integers(2**31)))
        clips.append(generate_synthetic(spec)[0])
    return clips
