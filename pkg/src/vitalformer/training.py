"""Frequency-domain maximum cross-correlation loss and the training loop."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import model as M
from .diffcore import DiffTensor, Tape
from .ingest import window_clip
from .sigproc import HR_BAND, BandLimits, Waveform, band_mask
from .synth import ClipRecord, Manifest

MIN_LOSS_LEN = 8
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    band: BandLimits = HR_BAND
    c_source: str = "predicted"  # or "reference"
    fft_len: int | None = None  # None: circular correlation at the window length
    kind: str = "maxcc"  # "mse" exists only as a negative control

    def __post_init__(self):
        if self.c_source not in ("predicted", "reference"):
            raise ValueError(f"c_source must be 'predicted' or 'reference', got {self.c_source!r}")
        if self.kind not in ("maxcc", "mse"):
            raise ValueError(f"unknown loss kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band"] = self.band.as_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LossConfig:
        d = dict(d)
        if "band" in d:
            d["band"] = BandLimits(*d["band"])
        return cls(**d)


class DegenerateReference(ValueError):
    pass


@dataclass
class LossResult:
    loss: DiffTensor
    c: float
    peak: float
    lag: int
    cc: np.ndarray  # normalized correlation per lag
    degenerate: bool = False


def _onesided_weights(n_fft: int) -> np.ndarray:
    k = n_fft // 2 + 1
    w = np.full(k, 2.0)
    w[0] = 1.0
    if n_fft % 2 == 0:
        w[-1] = 1.0
    return w


def inband_ratio(x: np.ndarray, fs: float, band: BandLimits, n_fft: int | None = None) -> float:
    n_fft = n_fft or x.size
    p = np.abs(np.fft.rfft(x - x.mean(), n=n_fft)) ** 2 * _onesided_weights(n_fft)
    total = p.sum()
    return float(p[band_mask(n_fft, fs, band)].sum() / total) if total > 0 else 0.0


def max_cc_loss(
    tape: Tape, y: DiffTensor, y_ref: np.ndarray, fs: float, cfg: LossConfig = LossConfig()
) -> LossResult:
    """-c * max over lags of the band-limited, variance-normalized circular
    cross-correlation between prediction ``y`` and reference ``y_ref``."""
    n = y.shape[0]
    y_ref = np.asarray(y_ref, dtype=np.float64)
    if y.shape != (n,) or y_ref.shape != (n,):
        raise ValueError(f"loss expects equal 1-D lengths, got {y.shape} and {y_ref.shape}")
    if n < MIN_LOSS_LEN:
        raise ValueError(f"loss needs at least {MIN_LOSS_LEN} samples, got {n}")
    n_fft = cfg.fft_len or n
    if n_fft < n:
        raise ValueError(f"fft_len {n_fft} shorter than signal length {n}")
    cfg.band.validate(fs)

    r = y_ref - y_ref.mean()
    sd_ref = float(np.sqrt(np.mean(r * r)))
    if sd_ref < SIGMA_FLOOR:
        raise DegenerateReference("reference signal has (near) zero variance")

    if cfg.kind == "mse":
        yc = tape.sub(y, tape.mean(y))
        sd = tape.sqrt(tape.add(tape.mean(tape.mul(yc, yc)), tape.constant(SIGMA_FLOOR**2)))
        diff = tape.sub(tape.div(yc, sd), tape.constant(r / sd_ref))
        loss = tape.mean(tape.mul(diff, diff))
        return LossResult(loss, 1.0, float("nan"), 0, np.array([]))

    yc = tape.sub(y, tape.mean(y))
    var_y = tape.mean(tape.mul(yc, yc))
    if var_y.values < SIGMA_FLOOR**2:
        zero = tape.constant(0.0)
        return LossResult(zero, 0.0, 0.0, 0, np.zeros(n_fft), degenerate=True)
    sd_y = tape.sqrt(var_y)

    mask = band_mask(n_fft, fs, cfg.band).astype(np.float64)
    pair_mask = tape.constant(np.repeat(mask[:, None], 2, axis=1))
    Y = tape.rfft(yc, n=n_fft)
    R = tape.constant(np.stack([np.fft.rfft(r, n=n_fft).real, np.fft.rfft(r, n=n_fft).imag], axis=-1))
    cross = tape.mul(tape.cmul_conj(Y, R), pair_mask)
    cc = tape.irfft(cross, n=n_fft)
    ccn = tape.div(cc, tape.scale(sd_y, factor=n * sd_ref))
    peak, lag = tape.max_with_argmax(ccn)

    if cfg.c_source == "predicted":
        power = tape.mul(tape.magsq(Y), tape.constant(_onesided_weights(n_fft)))
        inband = tape.sum(tape.mul(power, tape.constant(mask)))
        c = tape.div(inband, tape.sum(power))
    else:
        c = tape.constant(inband_ratio(r, fs, cfg.band, n_fft))
    loss = tape.scale(tape.mul(c, peak), factor=-1.0)
    return LossResult(loss, float(c.values), float(peak.values), lag, ccn.values.copy())


def loss_value(y: np.ndarray, y_ref: np.ndarray, fs: float, cfg: LossConfig = LossConfig()) -> float:
    tape = Tape()
    return float(max_cc_loss(tape, tape.leaf(y), y_ref, fs, cfg).loss.values)


def cross_corr_oracle(y: np.ndarray, y_ref: np.ndarray, band: BandLimits, fs: float) -> np.ndarray:
    """Brute-force circular cross-correlation per lag, O(N^2).

    Both signals are mean-centered, projected onto the band with an explicit
    DFT matrix, then correlated lag by lag in the time domain and normalized
    by N times the standard deviations of the centered (unfiltered) inputs.
    """
    y = np.asarray(y, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    n = y.size
    yc = y - y.mean()
    rc = y_ref - y_ref.mean()
    jk = np.outer(np.arange(n), np.arange(n))
    dft = np.exp(-2j * np.pi * jk / n)
    freq = np.where(np.arange(n) <= n // 2, np.arange(n), np.arange(n) - n) * fs / n
    keep = (np.abs(freq) >= band.lo) & (np.abs(freq) <= band.hi) & (freq != 0)
    proj = (dft.conj().T @ (keep[:, None] * dft)).real / n
    yb = proj @ yc
    rb = proj @ rc
    out = np.empty(n)
    for lag in range(n):
        out[lag] = sum(yb[(j + lag) % n] * rb[j] for j in range(n))
    return out / (n * yc.std() * rc.std())


def ground_truth_diff(pulse: Waveform, start: int, n: int) -> np.ndarray:
    """First differences of the pulse over frames ``start .. start+n``."""
    seg = pulse.samples[start:start + n + 1]
    if seg.size != n + 1:
        raise ValueError(
            f"pulse of {len(pulse)} samples cannot cover frames {start}..{start + n}"
        )
    return np.diff(seg)


# ---------------------------------------------------------------------------
# optimizer and loop


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 300
    batch: int = 1
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    window_stride: int | None = None
    wall_clock: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.steps < 1 or self.batch < 1:
            raise ValueError(f"invalid training config {self}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr, betas, eps):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class TrainingWindow:
    item: object
    target: np.ndarray
    fs: float


def build_windows(records: list[ClipRecord], cfg: M.ModelConfig, stride: int | None = None) -> list[TrainingWindow]:
    n = cfg.n_frames
    out = []
    for rec in records:
        clip = M.prepare_clip(rec.clip, cfg)
        for item in window_clip(clip, n, stride or n, clip_id=rec.clip_id):
            target = ground_truth_diff(rec.pulse, item.start, n)
            if target.std() < SIGMA_FLOOR:
                continue
            out.append(TrainingWindow(item, target, clip.fps))
    if not out:
        raise ValueError("no usable training windows (clips too short or flat pulses)")
    return out


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at step {step}; pre-step params at {checkpoint}")


@dataclass
class TrainResult:
    params: M.ModelParams
    log: list[tuple[int, float, float]]
    checkpoint: Path | None = None
    mask_checks: int = 0

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "wall_ms"])
    for step, loss, ms in rows:
        w.writerow([step, repr(loss), f"{ms:.3f}"])
    return buf.getvalue()


def train_step_loss(params: M.ModelParams, windows: list[TrainingWindow], loss_cfg: LossConfig):
    tape = Tape()
    leaves = params.bind(tape)
    total = None
    for w in windows:
        y = M.forward(tape, leaves, w.item, params.config)
        res = max_cc_loss(tape, y, w.target, w.fs, loss_cfg)
        total = res.loss if total is None else tape.add(total, res.loss)
    if len(windows) > 1:
        total = tape.scale(total, factor=1.0 / len(windows))
    return tape, leaves, total


def train(
    records: list[ClipRecord],
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    out_dir=None,
    init: M.ModelParams | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Deterministic Adam training on windows cut from ``records``."""
    windows = build_windows(records, model_cfg, train_cfg.window_stride)
    params = init.copy() if init is not None else M.init_params(model_cfg, train_cfg.seed)
    rng = np.random.default_rng([train_cfg.seed, 1])
    opt = Adam(params.tensors, train_cfg.lr, train_cfg.betas, train_cfg.eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    provenance = {"train": train_cfg.to_dict(), "loss": loss_cfg.to_dict()}
    checks_before = M.mask_identity_checks
    log = []
    for step in range(1, train_cfg.steps + 1):
        t0 = time.perf_counter()
        picks = rng.integers(0, len(windows), size=train_cfg.batch)
        tape, leaves, loss = train_step_loss(params, [windows[i] for i in picks], loss_cfg)
        value = float(loss.values)
        if not np.isfinite(value):
            ckpt = None
            if out is not None:
                ckpt = out / f"abort_step{step}.vtck"
                M.save_checkpoint(params, ckpt, provenance)
            raise TrainingAborted(step, ckpt)
        tape.backward(loss)
        grads = {k: leaves[k].grad for k in params.tensors}
        clip_global_norm(grads, train_cfg.grad_clip)
        opt.step(params.tensors, grads)
        tape.release()
        ms = (time.perf_counter() - t0) * 1e3 if train_cfg.wall_clock else 0.0
        log.append((step, value, ms))
        if on_step is not None:
            on_step(step, value)
        if out is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            M.save_checkpoint(params, out / f"ckpt_step{step:06d}.vtck", provenance)
    ckpt = None
    if out is not None:
        ckpt = out / "model.vtck"
        M.save_checkpoint(params, ckpt, provenance)
        (out / "train_log.csv").write_text(format_log(log))
    return TrainResult(params, log, ckpt, M.mask_identity_checks - checks_before)


def train_from_manifest(manifest_path, model_cfg, train_cfg=TrainConfig(), loss_cfg=LossConfig(), out_dir=None):
    man = Manifest(manifest_path)
    records = man.load_split("train")
    if not records:
        raise ValueError(f"{man.path}: manifest has no train clips")
    return train(records, model_cfg, train_cfg, loss_cfg, out_dir)
