"""Two-branch convolutional backbone with spatial attention, then a
[CLS]-token transformer encoder emitting one value per frame."""
from __future__ import annotations

import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import DiffTensor, Tape
from .ingest import ClipBatchItem, VideoClip, resize_bilinear, window_clip
from .sigproc import BandLimits, Waveform, bandpass, cumsum, standardize


@dataclass(frozen=True)
class BackboneConfig:
    input_hw: int = 36
    channels: tuple[int, int] = (32, 64)
    d: int = 128

    def __post_init__(self):
        if self.d <= 0 or self.input_hw < 4 or len(self.channels) != 2:
            raise ValueError(f"invalid backbone config {self}")


@dataclass(frozen=True)
class TransformerConfig:
    d_T: int = 32
    heads: int = 8
    layers: int = 2
    mlp_hidden: int = 64
    n_frames: int = 100
    use_cls: bool = True
    use_pe: bool = True

    def __post_init__(self):
        if self.d_T % self.heads or self.d_T % 2:
            raise ValueError(f"d_T={self.d_T} must be even and divisible by heads={self.heads}")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["channels"] = list(self.backbone.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        bb = dict(d.get("backbone", {}))
        if "channels" in bb:
            bb["channels"] = tuple(bb["channels"])
        return cls(BackboneConfig(**bb), TransformerConfig(**d.get("transformer", {})))

    @property
    def n_frames(self) -> int:
        return self.transformer.n_frames


def hr_config() -> ModelConfig:
    return ModelConfig(BackboneConfig(d=128), TransformerConfig(n_frames=100))


def rr_config() -> ModelConfig:
    return ModelConfig(BackboneConfig(d=32), TransformerConfig(n_frames=1000))


def tiny_config(n_frames: int = 8, input_hw: int = 12) -> ModelConfig:
    return ModelConfig(
        BackboneConfig(input_hw=input_hw, channels=(4, 8), d=16),
        TransformerConfig(n_frames=n_frames, mlp_hidden=32),
    )


PRESETS = {"hr": hr_config, "rr": rr_config, "tiny": tiny_config}


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c1, c2 = cfg.backbone.channels
    d, dt, hid = cfg.backbone.d, cfg.transformer.d_T, cfg.transformer.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, k, cin, cout):
        shapes[f"{name}.w"] = (k, k, cin, cout)
        shapes[f"{name}.b"] = (cout,)

    def dense(name, n_in, n_out):
        shapes[f"{name}.w"] = (n_in, n_out)
        shapes[f"{name}.b"] = (n_out,)

    for branch in ("app", "mot"):
        conv(f"{branch}1a", 3, 3, c1)
        conv(f"{branch}1b", 3, c1, c1)
        conv(f"{branch}2a", 3, c1, c2)
        conv(f"{branch}2b", 3, c2, c2)
    conv("att1", 1, c1, 1)
    conv("att2", 1, c2, 1)
    dense("fc", c2, d)
    dense("reduce", d, dt)
    if cfg.transformer.use_cls:
        shapes["cls"] = (1, dt)
    for i in range(cfg.transformer.layers):
        p = f"enc{i}"
        shapes[f"{p}.ln1.g"] = (dt,)
        shapes[f"{p}.ln1.b"] = (dt,)
        for proj in ("q", "k", "v", "o"):
            dense(f"{p}.{proj}", dt, dt)
        shapes[f"{p}.ln2.g"] = (dt,)
        shapes[f"{p}.ln2.b"] = (dt,)
        dense(f"{p}.mlp1", dt, hid)
        dense(f"{p}.mlp2", hid, dt)
    shapes["ln_f.g"] = (dt,)
    shapes["ln_f.b"] = (dt,)
    dense("head", dt, 1)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def bind(self, tape: Tape) -> dict[str, DiffTensor]:
        return {k: tape.leaf(v) for k, v in self.tensors.items()}


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Uniform fan-in weights (variance 1/fan_in), zero biases, unit gains."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            out[name] = np.ones(shape)
        elif name.endswith(".b"):
            out[name] = np.zeros(shape)
        elif name == "cls":
            out[name] = rng.uniform(-0.1, 0.1, size=shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            lim = np.sqrt(3.0 / fan_in)
            out[name] = rng.uniform(-lim, lim, size=shape)
    return ModelParams(cfg, out)


# ---------------------------------------------------------------------------
# forward pass

CHECK_MASK_IDENTITY = True
mask_identity_checks = 0


class MaskIdentityError(AssertionError):
    pass


def attention_mask_np(z: np.ndarray) -> np.ndarray:
    """q = h*w*z / (2*||z||_1) over the trailing spatial axes (h, w)."""
    h, w = z.shape[-2:]
    return h * w * z / (2.0 * np.abs(z).sum(axis=(-2, -1), keepdims=True))


def attention_mask(tape: Tape, z: DiffTensor) -> DiffTensor:
    """Differentiable mask for z of shape [N, h, w, 1] (sigmoid outputs)."""
    global mask_identity_checks
    n, h, w, _ = z.shape
    norm = tape.sum(z, axis=(1, 2, 3), keepdims=True)
    q = tape.scale(tape.div(z, tape.broadcast_to(norm, shape=z.shape)), factor=h * w / 2.0)
    if CHECK_MASK_IDENTITY:
        total = q.values.sum(axis=(1, 2, 3))
        if np.max(np.abs(total - h * w / 2.0)) > 1e-10:
            raise MaskIdentityError(f"attention mask sums {total} differ from {h * w / 2}")
        mask_identity_checks += 1
    return q


def _conv(tape, leaves, name, x):
    return tape.conv2d(x, leaves[f"{name}.w"], leaves[f"{name}.b"], stride=1, padding="same")


def backbone_forward(
    tape: Tape,
    leaves: dict[str, DiffTensor],
    appearance: np.ndarray,
    motion: np.ndarray,
    cfg: ModelConfig,
    masks: list | None = None,
    mask_override: dict[int, np.ndarray] | None = None,
) -> DiffTensor:
    """Per-frame features [N, d]; frames never mix inside the backbone.

    ``masks`` (if a list) receives each site's mask values ``[N, h, w]``.
    ``mask_override`` maps site index (1 or 2) to a fixed ``[h, w]`` mask
    used in place of the learned one.
    """
    hw = cfg.backbone.input_hw
    if appearance.shape != motion.shape or appearance.shape[1:] != (hw, hw, 3):
        raise ValueError(
            f"backbone expects N x {hw} x {hw} x 3 inputs, got {appearance.shape} and {motion.shape}"
        )
    a = tape.constant(appearance)
    m = tape.constant(motion)
    for site in (1, 2):
        a = tape.tanh(_conv(tape, leaves, f"app{site}a", a))
        a = tape.tanh(_conv(tape, leaves, f"app{site}b", a))
        m = tape.tanh(_conv(tape, leaves, f"mot{site}a", m))
        m = tape.tanh(_conv(tape, leaves, f"mot{site}b", m))
        if mask_override and site in mask_override:
            fixed = np.broadcast_to(mask_override[site][None, :, :, None], m.shape[:3] + (1,))
            q = tape.constant(fixed)
        else:
            z = tape.sigmoid(_conv(tape, leaves, f"att{site}", a))
            q = attention_mask(tape, z)
        if masks is not None:
            masks.append(q.values[..., 0].copy())
        m = tape.mul(m, tape.broadcast_to(q, shape=m.shape))
        a = tape.avgpool2(a)
        m = tape.avgpool2(m)
    pooled = tape.mean(m, axis=(1, 2))
    return tape.tanh(tape.linear(pooled, leaves["fc.w"], leaves["fc.b"]))


def positional_encoding(n: int, d_T: int) -> np.ndarray:
    if d_T % 2:
        raise ValueError("d_T must be even")
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d_T // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_T)
    pe = np.empty((n, d_T))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def transformer_forward(
    tape: Tape,
    leaves: dict[str, DiffTensor],
    features: DiffTensor,
    cfg: ModelConfig,
    attn_weights: list | None = None,
) -> DiffTensor:
    tc = cfg.transformer
    n = features.shape[0]
    if n != tc.n_frames:
        raise ValueError(f"transformer expects {tc.n_frames} frames, got {n}")
    dt, heads = tc.d_T, tc.heads
    dh = dt // heads
    # embeddings are scaled by sqrt(d_T) so content is not drowned by the PE
    x = tape.scale(tape.linear(features, leaves["reduce.w"], leaves["reduce.b"]), factor=np.sqrt(dt))
    if tc.use_cls:
        x = tape.concat(leaves["cls"], x, axis=0)
    length = x.shape[0]
    if tc.use_pe:
        x = tape.add(x, tape.constant(positional_encoding(length, dt)))

    def split_heads(t):
        return tape.transpose(tape.reshape(t, shape=(length, heads, dh)), axes=(1, 0, 2))

    for i in range(tc.layers):
        p = f"enc{i}"
        h = tape.layernorm(x, leaves[f"{p}.ln1.g"], leaves[f"{p}.ln1.b"])
        q = split_heads(tape.linear(h, leaves[f"{p}.q.w"], leaves[f"{p}.q.b"]))
        k = split_heads(tape.linear(h, leaves[f"{p}.k.w"], leaves[f"{p}.k.b"]))
        v = split_heads(tape.linear(h, leaves[f"{p}.v.w"], leaves[f"{p}.v.b"]))
        scores = tape.scale(tape.matmul(q, tape.transpose(k, axes=(0, 2, 1))), factor=1.0 / np.sqrt(dh))
        att = tape.softmax(scores)
        if attn_weights is not None:
            attn_weights.append(att.values.copy())
        o = tape.reshape(tape.transpose(tape.matmul(att, v), axes=(1, 0, 2)), shape=(length, dt))
        x = tape.add(x, tape.linear(o, leaves[f"{p}.o.w"], leaves[f"{p}.o.b"]))
        h = tape.layernorm(x, leaves[f"{p}.ln2.g"], leaves[f"{p}.ln2.b"])
        h = tape.gelu(tape.linear(h, leaves[f"{p}.mlp1.w"], leaves[f"{p}.mlp1.b"]))
        x = tape.add(x, tape.linear(h, leaves[f"{p}.mlp2.w"], leaves[f"{p}.mlp2.b"]))
    x = tape.layernorm(x, leaves["ln_f.g"], leaves["ln_f.b"])
    if tc.use_cls:
        x = tape.slice(x, index=(slice(1, None),))
    y = tape.linear(x, leaves["head.w"], leaves["head.b"])
    return tape.reshape(y, shape=(n,))


def forward(
    tape: Tape, leaves: dict[str, DiffTensor], item: ClipBatchItem, cfg: ModelConfig,
    masks: list | None = None,
) -> DiffTensor:
    feats = backbone_forward(tape, leaves, item.appearance, item.motion, cfg, masks=masks)
    return transformer_forward(tape, leaves, feats, cfg)


def predict_window(params: ModelParams, item: ClipBatchItem) -> np.ndarray:
    tape = Tape()
    out = forward(tape, params.bind(tape), item, params.config).values.copy()
    tape.release()
    return out


def prepare_clip(clip: VideoClip, cfg: ModelConfig) -> VideoClip:
    hw = cfg.backbone.input_hw
    if clip.frames.shape[1:3] == (hw, hw):
        return clip
    return resize_bilinear(clip, hw, hw)


def infer_diffs(clip: VideoClip, params: ModelParams, threads: int = 1) -> np.ndarray:
    cfg = params.config
    n = cfg.n_frames
    if clip.n_frames < n + 1:
        raise ValueError(f"clip has {clip.n_frames} frames, model needs at least {n + 1}")
    items = list(window_clip(prepare_clip(clip, cfg), n, n))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda it: predict_window(params, it), items))
    else:
        parts = [predict_window(params, it) for it in items]
    return np.concatenate(parts)


def infer_waveform(
    clip: VideoClip, params: ModelParams, band: BandLimits, threads: int = 1
) -> Waveform:
    """Windowed prediction, cumulative sum, standardization, bandpass.

    The training loss ignores each window's offset and scale, so every window
    of predicted differences is standardized before integration. Otherwise a
    small constant offset integrates into a ramp that swamps the band.
    """
    n = params.config.n_frames
    diffs = infer_diffs(clip, params, threads).reshape(-1, n)
    diffs = diffs - diffs.mean(axis=1, keepdims=True)
    sd = diffs.std(axis=1, keepdims=True)
    diffs = (diffs / np.where(sd > 1e-12, sd, 1.0)).ravel()
    wave, _ = standardize(cumsum(Waveform(diffs, clip.fps)))
    return bandpass(wave, band)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"VTCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    meta = {"model": params.config.to_dict()}
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob]
    for name, arr in params.tensors.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    version, n_json = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    meta = json.loads(body[off:off + n_json])
    off += n_json
    tensors = {}
    while off < len(body):
        (n_name,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + n_name].decode()
        off += n_name
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    cfg = ModelConfig.from_dict(meta["model"])
    return ModelParams(cfg, tensors), meta


def load_checkpoint(path, expect: ModelConfig | None = None) -> ModelParams:
    """Load and validate tensors against ``expect`` (or the embedded config)."""
    params, _ = read_checkpoint(path)
    cfg = expect or params.config
    want = param_shapes(cfg)
    bad = []
    for name, shape in want.items():
        got = params.tensors.get(name)
        if got is None:
            bad.append(f"{name} missing")
        elif got.shape != shape:
            bad.append(f"{name} has shape {got.shape}, config needs {shape}")
    bad += [f"{name} unexpected" for name in params.tensors if name not in want]
    if bad:
        raise CheckpointError(f"{path}: checkpoint does not match config: " + "; ".join(bad))
    for name, arr in params.tensors.items():
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: tensor {name} has non-finite values")
    return ModelParams(cfg, params.tensors)
