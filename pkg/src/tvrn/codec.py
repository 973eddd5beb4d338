"""Deterministic low-delay toy codec (IPPP, 8x8 DCT, full-search motion).

All arithmetic happens on the 0..255 integer grid: the input is rounded to
8 bits and every reconstructed frame is rounded and clamped, like a real
decoder's picture buffer. Motion vectors follow the convention
``prediction(p) = ref(p - mv)``, i.e. ``mv`` is the displacement of content
from the reference frame to the current one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dctn, idctn

from .errors import FormatError, InvalidGeometryError, InvalidQPError
from .video import VideoClip

BLOCK = 8
SEARCH = 7
MV_BITS = 8
MAGIC = b"TVM1"


def qstep(qp: int) -> float:
    if not isinstance(qp, (int, np.integer)) or not 0 <= qp <= 51:
        raise InvalidQPError(f"qp must be an integer in [0, 51], got {qp!r}")
    return float(2.0 ** ((qp - 4) / 6.0))


def _candidates(search: int) -> list[tuple[int, int]]:
    # priority order: smallest |dx|+|dy| first, then raster (dy, dx)
    cands = [(dy, dx) for dy in range(-search, search + 1) for dx in range(-search, search + 1)]
    cands.sort(key=lambda c: (abs(c[0]) + abs(c[1]), c[0], c[1]))
    return cands


_CANDS = {SEARCH: _candidates(SEARCH)}


@lru_cache(maxsize=None)
def _table(search: int) -> np.ndarray:
    return np.array(_CANDS.get(search) or _candidates(search), dtype=np.int64)


@lru_cache(maxsize=None)
def _block_sum(count: int, block: int) -> np.ndarray:
    return np.kron(np.eye(count, dtype=np.float32), np.ones((1, block), dtype=np.float32))


def _check_geometry(h: int, w: int, block: int) -> None:
    if h % block or w % block:
        raise InvalidGeometryError(f"frame {w}x{h} is not a multiple of the {block}px block")


def motion_search(ref: np.ndarray, cur: np.ndarray, block: int = BLOCK,
                  search: int = SEARCH) -> np.ndarray:
    """Per-block integer motion ``[Hb, Wb, 2]`` as ``(dx, dy)`` minimizing SAD.

    The reference is sampled at ``p - mv`` with border clamping, so vectors
    pointing outside the frame are legal. Ties go to the smallest
    ``|dx| + |dy|``, then raster order of ``(dy, dx)``.
    """
    # float32 is exact for 8-bit SADs (at most 64 * 255 per block)
    ref = np.asarray(ref, dtype=np.float32)
    cur = np.asarray(cur, dtype=np.float32)
    if ref.shape != cur.shape or ref.ndim != 2:
        raise InvalidGeometryError(f"motion_search: frames {ref.shape} vs {cur.shape}")
    H, W = cur.shape
    _check_geometry(H, W, block)
    padded = np.pad(ref, search, mode="edge")
    hb, wb = H // block, W // block
    side = 2 * search + 1
    # windows[a, b] = padded[a:a+H, b:b+W] is the prediction for dy = search-a, dx = search-b
    windows = sliding_window_view(padded, (H, W))
    diff = np.abs(windows - cur).reshape(side * side, H, W)
    sads = (_block_sum(hb, block) @ diff @ _block_sum(wb, block).T).reshape(side, side, hb, wb)
    table = _table(search)
    ordered = sads[search - table[:, 0], search - table[:, 1]]
    best = np.argmin(ordered, axis=0)  # first minimum = highest priority
    mv = np.empty((hb, wb, 2), dtype=np.int64)
    mv[..., 0] = table[best, 1]
    mv[..., 1] = table[best, 0]
    return mv


def compensate(ref: np.ndarray, mv: np.ndarray, block: int = BLOCK) -> np.ndarray:
    """Block motion-compensated prediction ``ref(p - mv)`` with border clamp."""
    H, W = ref.shape
    ys, xs = np.mgrid[0:H, 0:W]
    dx = np.repeat(np.repeat(mv[..., 0], block, 0), block, 1)
    dy = np.repeat(np.repeat(mv[..., 1], block, 0), block, 1)
    return ref[np.clip(ys - dy, 0, H - 1), np.clip(xs - dx, 0, W - 1)]


def mv_to_flow(mv: np.ndarray, block: int = BLOCK) -> np.ndarray:
    """Expand a block MV field to a per-pixel ``[2, H, W]`` field."""
    full = np.repeat(np.repeat(np.asarray(mv, dtype=np.float64), block, 0), block, 1)
    return np.ascontiguousarray(full.transpose(2, 0, 1))


def _blocks(frame: np.ndarray, block: int) -> np.ndarray:
    H, W = frame.shape
    return frame.reshape(H // block, block, W // block, block).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    hb, wb, b, _ = blocks.shape
    return blocks.transpose(0, 2, 1, 3).reshape(hb * b, wb * b)


def block_dct(frame: np.ndarray, block: int = BLOCK) -> np.ndarray:
    return dctn(_blocks(np.asarray(frame, dtype=np.float64), block), axes=(2, 3), norm="ortho")


def block_idct(coefs: np.ndarray) -> np.ndarray:
    return _unblocks(idctn(coefs, axes=(2, 3), norm="ortho"))


def coefficient_bits(q: np.ndarray) -> int:
    mag = np.abs(q).astype(np.float64)
    return int(np.sum(np.ceil(np.log2(1.0 + mag)) + 1.0))


def code_residual(residual: np.ndarray, step: float) -> tuple[np.ndarray, int]:
    """Quantize a residual in the DCT domain; returns (dequantized residual, bits)."""
    q = np.round(block_dct(residual) / step)
    return block_idct(q * step), coefficient_bits(q)


@dataclass
class CodecMetadata:
    qp: int
    mvs: np.ndarray  # [N, Hb, Wb, 2] int, (dx, dy); entry 0 is the intra record (zeros)
    frame_bits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def bits(self) -> int:
        return int(np.sum(self.frame_bits))

    @property
    def frame_count(self) -> int:
        return self.mvs.shape[0]

    def mv_forward(self, t: int) -> np.ndarray:
        """``mv_{t-1 -> t}`` for a P-frame ``t >= 1``."""
        return self.mvs[t]

    def mv_backward(self, t: int) -> np.ndarray:
        # the codec codes one direction; the reverse field is its negation
        return -self.mvs[t]


@dataclass
class CodedClip:
    reconstruction: VideoClip
    metadata: CodecMetadata


def encode(clip: VideoClip, qp: int) -> CodedClip:
    step = qstep(qp)
    N, H, W = clip.data.shape
    _check_geometry(H, W, BLOCK)
    src = np.round(clip.data.astype(np.float64) * 255.0)
    recon = np.empty_like(src)
    hb, wb = H // BLOCK, W // BLOCK
    mvs = np.zeros((N, hb, wb, 2), dtype=np.int64)
    bits = np.zeros(N, dtype=np.int64)

    res, bits[0] = code_residual(src[0], step)
    recon[0] = np.clip(np.round(res), 0, 255)
    for t in range(1, N):
        mv = motion_search(recon[t - 1], src[t])
        pred = compensate(recon[t - 1], mv)
        res, b = code_residual(src[t] - pred, step)
        recon[t] = np.clip(np.round(pred + res), 0, 255)
        mvs[t] = mv
        bits[t] = b + MV_BITS * hb * wb
    out = VideoClip((recon / 255.0).astype(np.float32))
    return CodedClip(out, CodecMetadata(qp=int(qp), mvs=mvs, frame_bits=bits))


def bpp(meta: CodecMetadata, hfr_frames: int, height: int, width: int) -> float:
    """Bits per HFR pixel; the denominator counts every frame of the original clip."""
    return meta.bits / float(hfr_frames * height * width)


# --------------------------------------------------------------------------
# metadata file


def save_metadata(meta: CodecMetadata, path) -> None:
    n, hb, wb, _ = meta.mvs.shape
    if np.abs(meta.mvs).max(initial=0) > 127:
        raise FormatError("motion vectors do not fit in i8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BQHHH", meta.qp, meta.bits, n, hb, wb))
        fh.write(np.asarray(meta.frame_bits, dtype="<u4").tobytes())
        fh.write(meta.mvs.astype(np.int8).tobytes())


def load_metadata(path) -> CodecMetadata:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad metadata magic {raw[:4]!r}")
    head = struct.calcsize("<BQHHH")
    if len(raw) < 4 + head:
        raise FormatError(f"{path}: truncated metadata header")
    qp, total, n, hb, wb = struct.unpack("<BQHHH", raw[4:4 + head])
    if n == 0:
        raise FormatError(f"{path}: metadata has no frames")
    off = 4 + head
    need = 4 * n + 2 * n * hb * wb
    if len(raw) - off != need:
        raise FormatError(f"{path}: payload has {len(raw) - off} bytes, expected {need}")
    frame_bits = np.frombuffer(raw[off:off + 4 * n], dtype="<u4").astype(np.int64)
    mvs = np.frombuffer(raw[off + 4 * n:], dtype=np.int8).reshape(n, hb, wb, 2).astype(np.int64)
    meta = CodecMetadata(qp=qp, mvs=mvs, frame_bits=frame_bits)
    if meta.bits != total:
        raise FormatError(f"{path}: bit total {total} disagrees with per-frame counts")
    return meta
