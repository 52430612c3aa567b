"""Frame-tensor I/O and the preprocessing that feeds both model branches."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

RVID_MAGIC = b"RVID"
RVID_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIf")

DIFF_EPS = 1e-8


class RvidError(ValueError):
    """Malformed RVID file; ``offset`` is the byte where reading failed."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: {message} at byte offset {offset}")


@dataclass
class VideoClip:
    frames: np.ndarray  # T x H x W x 3, float32 in [0, 1]
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be T x H x W x 3, got {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise ValueError("a clip needs at least 2 frames")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ClipBatchItem:
    appearance: np.ndarray  # N x h x w x 3
    motion: np.ndarray  # N x h x w x 3
    clip_id: str
    start: int

    @property
    def n(self) -> int:
        return self.appearance.shape[0]


def write_rvid(clip: VideoClip, path) -> None:
    t, h, w, c = clip.frames.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RVID_MAGIC, RVID_VERSION, t, h, w, c, clip.fps))
        fh.write(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())


def read_rvid(path) -> VideoClip:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != RVID_MAGIC:
        raise RvidError(path, 0, "bad magic")
    if len(raw) < _HEADER.size:
        raise RvidError(path, len(raw), "truncated header")
    _, version, t, h, w, c, fps = _HEADER.unpack_from(raw)
    if version != RVID_VERSION:
        raise RvidError(path, 4, f"unsupported version {version}")
    if c != 3:
        raise RvidError(path, 20, f"expected 3 channels, got {c}")
    if not fps > 0:
        raise RvidError(path, 24, f"non-positive fps {fps}")
    need = t * h * w * c * 4
    have = len(raw) - _HEADER.size
    if have < need:
        raise RvidError(path, len(raw), f"truncated payload: need {need} bytes, have {have}")
    if have > need:
        raise RvidError(path, _HEADER.size + need, "trailing bytes after payload")
    frames = np.frombuffer(raw, dtype="<f4", count=t * h * w * c, offset=_HEADER.size)
    return VideoClip(frames.reshape(t, h, w, c).astype(np.float32), float(fps))


def resize_bilinear(clip: VideoClip, out_h: int = 36, out_w: int = 36) -> VideoClip:
    """Per-frame bilinear resampling with corner-aligned sample grids."""
    t, h, w, _ = clip.frames.shape
    if h < 2 or w < 2:
        raise ValueError("resize needs H, W >= 2")
    if (h, w) == (out_h, out_w):
        return VideoClip(clip.frames.copy(), clip.fps)
    ys = np.linspace(0.0, h - 1, out_h)
    xs = np.linspace(0.0, w - 1, out_w)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    wy = (ys - y0)[None, :, None, None]
    wx = (xs - x0)[None, None, :, None]
    f = clip.frames.astype(np.float64)
    top = f[:, y0][:, :, x0] * (1 - wx) + f[:, y0][:, :, x0 + 1] * wx
    bot = f[:, y0 + 1][:, :, x0] * (1 - wx) + f[:, y0 + 1][:, :, x0 + 1] * wx
    out = np.clip(top * (1 - wy) + bot * wy, 0.0, 1.0)
    return VideoClip(out.astype(np.float32), clip.fps)


def frame_diff_normalized(frames) -> np.ndarray:
    """(C(t+1) - C(t)) / (C(t+1) + C(t) + eps), T-1 frames, clamped to [-1, 1].

    Accepts a :class:`VideoClip` or a raw T x H x W x C array.
    """
    if isinstance(frames, VideoClip):
        frames = frames.frames
    f = np.asarray(frames, dtype=np.float64)
    if f.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    nxt, cur = f[1:], f[:-1]
    return np.clip((nxt - cur) / (nxt + cur + DIFF_EPS), -1.0, 1.0)


def _standardize_block(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    sd = x.std()
    if sd < 1e-12:
        return np.zeros_like(x)
    return x / sd


def window_count(n_frames: int, n: int, stride: int) -> int:
    if n_frames < n + 1:
        return 0
    return (n_frames - 1 - n) // stride + 1


def window_clip(
    clip: VideoClip, n: int, stride: int | None = None, clip_id: str = ""
) -> Iterator[ClipBatchItem]:
    """Yield standardized (appearance, motion) windows of ``n`` frames.

    Motion frames for a window starting at ``t0`` use source frames
    ``t0 .. t0+n``; the trailing partial window is dropped.
    """
    stride = n if stride is None else stride
    t = clip.n_frames
    if t < n + 1:
        raise ValueError(f"clip {clip_id!r} has {t} frames, needs at least {n + 1}")
    frames = clip.frames.astype(np.float64)
    for k in range(window_count(t, n, stride)):
        t0 = k * stride
        app = _standardize_block(frames[t0:t0 + n])
        mot = _standardize_block(frame_diff_normalized(frames[t0:t0 + n + 1]))
        yield ClipBatchItem(app, mot, clip_id, t0)
