"""Synthetic clips from the dichromatic skin-reflection model.

Per pixel k and frame t::

    C_k(t) = g_k * [ i0*c0*u_c * (1 + Psi) + i0*s0*u_s + i0*u_s*Phi + i0*u_p*p(t) ] + v_n(t)

with Psi = a_psi_m*m + a_psi_p*p and Phi = a_phi_m*m + a_phi_p*p. ``g_k`` is a
smooth +/-10% gain field. Background pixels use ``bg_color`` in place of
``u_c`` and carry no ``u_p`` term.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .ingest import VideoClip, read_rvid, write_rvid
from .sigproc import (
    HR_BAND,
    RR_BAND,
    BandLimits,
    RateSeries,
    Waveform,
    read_rates_csv,
    read_waveform_csv,
    write_rates_csv,
    write_waveform_csv,
)


def _unit(v) -> tuple[float, float, float]:
    v = np.asarray(v, dtype=np.float64)
    return tuple(float(x) for x in v / np.linalg.norm(v))


@dataclass(frozen=True)
class SceneParams:
    u_c: tuple[float, float, float] = _unit((0.72, 0.52, 0.42))
    u_s: tuple[float, float, float] = _unit((1.0, 1.0, 1.0))
    # blood-volume direction (0.33, 0.77, 0.53) relative to skin tone, about 8% of the green skin level
    u_p: tuple[float, float, float] = (0.015, 0.025, 0.014)
    bg_color: tuple[float, float, float] = _unit((0.35, 0.45, 0.82))
    i0: float = 1.0
    c0: float = 0.6
    s0: float = 0.0
    noise_sigma: float = 0.0
    psi_gain: tuple[float, float] = (0.5, 0.05)
    phi_gain: tuple[float, float] = (0.5, 0.005)
    skin_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self):
        for name in ("u_c", "u_s", "bg_color"):
            if abs(np.linalg.norm(getattr(self, name)) - 1.0) > 1e-9:
                raise ValueError(f"{name} must have unit norm")
        if self.i0 <= 0 or self.c0 <= 0:
            raise ValueError("i0 and c0 must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 < self.skin_fraction <= 1:
            raise ValueError("skin_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> SceneParams:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown scene parameters: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SynthClip:
    clip: VideoClip
    pulse: Waveform
    motion: Waveform
    rate_gt: RateSeries
    skin: np.ndarray  # H x W bool


def _profile_rates(rate_profile, t: np.ndarray) -> np.ndarray:
    if np.isscalar(rate_profile):
        return np.full(t.shape, float(rate_profile))
    knots = np.asarray(rate_profile, dtype=np.float64)
    if knots.ndim != 2 or knots.shape[1] != 2:
        raise ValueError("rate profile must be a constant or a list of (t_sec, bpm) knots")
    return np.interp(t, knots[:, 0], knots[:, 1])


def gen_pulse(
    duration_s: float,
    fs: float,
    rate_profile,
    seed: int = 0,
    band: BandLimits = HR_BAND,
) -> tuple[Waveform, RateSeries]:
    """Unit sinusoid whose instantaneous rate follows ``rate_profile``.

    The waveform is fully determined by the profile; ``seed`` is accepted so
    every generator shares one call shape, and does not change the output.
    """
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    rates = _profile_rates(rate_profile, t)
    lo, hi = 60.0 * band.lo, 60.0 * band.hi
    if rates.min() < lo - 1e-9 or rates.max() > hi + 1e-9:
        raise ValueError(f"rate profile leaves [{lo:.1f}, {hi:.1f}] per minute")
    omega = 2.0 * np.pi * rates / 60.0
    theta = np.concatenate([[0.0], np.cumsum(0.5 * (omega[1:] + omega[:-1]) / fs)])
    return Waveform(np.sin(theta), fs), RateSeries(rates, fs)


def lowpass_noise(n: int, fs: float, cutoff_hz: float, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal(n)
    spec = np.fft.rfft(x)
    spec[np.fft.rfftfreq(n, 1.0 / fs) > cutoff_hz] = 0.0
    spec[0] = 0.0
    return np.fft.irfft(spec, n=n)


def gen_motion(duration_s: float, fs: float, amplitude: float, cutoff_hz: float, seed: int) -> Waveform:
    if not 0 < cutoff_hz < fs / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {fs / 2})")
    n = int(round(duration_s * fs))
    if amplitude == 0:
        return Waveform(np.zeros(n), fs)
    x = lowpass_noise(n, fs, cutoff_hz, np.random.default_rng(seed))
    rms = np.sqrt(np.mean(x * x))
    return Waveform(x * (amplitude / rms) if rms > 0 else x, fs)


def skin_mask(h: int, w: int, fraction: float = 0.6) -> np.ndarray:
    """Central rectangle covering ``fraction`` of each spatial extent."""
    m = np.zeros((h, w), dtype=bool)
    y0 = int(round(h * (1 - fraction) / 2))
    x0 = int(round(w * (1 - fraction) / 2))
    m[y0:h - y0, x0:w - x0] = True
    return m


def gain_field(h: int, w: int, seed: int, depth: float = 0.1) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x9A1])
    coarse = rng.uniform(-1.0, 1.0, size=(4, 4))
    ys = np.linspace(0, 3, h)
    xs = np.linspace(0, 3, w)
    y0 = np.minimum(ys.astype(int), 2)
    x0 = np.minimum(xs.astype(int), 2)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = coarse[y0][:, x0] * (1 - wx) + coarse[y0][:, x0 + 1] * wx
    bot = coarse[y0 + 1][:, x0] * (1 - wx) + coarse[y0 + 1][:, x0 + 1] * wx
    f = top * (1 - wy) + bot * wy
    peak = np.abs(f).max()
    return 1.0 + depth * (f / peak if peak > 0 else f)


def scene_frames(
    params: SceneParams, pulse: Waveform, motion: Waveform, h: int, w: int
) -> tuple[np.ndarray, np.ndarray]:
    """Pre-clamp frames (float64, T x H x W x 3) and the skin mask."""
    if len(pulse) != len(motion) or pulse.fs != motion.fs:
        raise ValueError("pulse and motion must share length and sample rate")
    p = pulse.samples[:, None, None, None]
    m = motion.samples[:, None, None, None]
    skin = skin_mask(h, w, params.skin_fraction)
    base = np.where(skin[..., None], np.asarray(params.u_c), np.asarray(params.bg_color))
    up = np.where(skin[..., None], np.asarray(params.u_p), 0.0)
    us = np.asarray(params.u_s)
    psi = params.psi_gain[0] * m + params.psi_gain[1] * p
    phi = params.phi_gain[0] * m + params.phi_gain[1] * p
    i0 = params.i0
    frames = (
        i0 * params.c0 * base * (1.0 + psi)
        + i0 * params.s0 * us
        + i0 * us * phi
        + i0 * up * p
    )
    frames = frames * gain_field(h, w, params.seed)[None, :, :, None]
    if params.noise_sigma > 0:
        rng = np.random.default_rng([params.seed, 0x5E5])
        frames = frames + rng.normal(0.0, params.noise_sigma, size=frames.shape)
    return frames, skin


def render_clip(
    params: SceneParams, pulse: Waveform, motion: Waveform, h: int, w: int,
    rate_gt: RateSeries | None = None,
) -> SynthClip:
    frames, skin = scene_frames(params, pulse, motion, h, w)
    mean = frames.mean(axis=0)
    if mean.min() <= 0.0 or mean.max() >= 1.0:
        raise ValueError("scene saturates: a pixel's mean leaves (0, 1)")
    clip = VideoClip(np.clip(frames, 0.0, 1.0).astype(np.float32), pulse.fs)
    if rate_gt is None:
        rate_gt = RateSeries(np.full(len(pulse), np.nan), pulse.fs)
    return SynthClip(clip, pulse, motion, rate_gt, skin)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    duration_s: float = 30.0
    fps: float = 30.0
    height: int = 36
    width: int = 36
    band: str = "hr"
    rate_range_bpm: tuple[float, float] = (48.0, 120.0)
    profile: str = "constant"  # or "ramp"
    noise_sigma: tuple[float, float] = (0.0, 0.0)
    motion_amplitude: tuple[float, float] = (0.0, 0.0)
    motion_cutoff_hz: float = 0.3
    i0_range: tuple[float, float] = (0.9, 1.1)
    n_val: int = 0
    scene: dict = field(default_factory=dict)


def band_by_name(name: str) -> BandLimits:
    try:
        return {"hr": HR_BAND, "rr": RR_BAND}[name]
    except KeyError:
        raise ValueError(f"unknown band {name!r}; expected 'hr' or 'rr'") from None


def _draw_clip(spec: DatasetSpec, seed: int) -> tuple[SceneParams, object, float]:
    rng = np.random.default_rng(seed)
    lo, hi = spec.rate_range_bpm
    if spec.profile == "constant":
        profile = float(rng.uniform(lo, hi))
    elif spec.profile == "ramp":
        a, b = rng.uniform(lo, hi, size=2)
        profile = [[0.0, float(a)], [spec.duration_s, float(b)]]
    else:
        raise ValueError(f"unknown rate profile kind {spec.profile!r}")
    base = SceneParams.from_dict(spec.scene) if spec.scene else SceneParams()
    params = replace(
        base,
        i0=float(rng.uniform(*spec.i0_range)),
        noise_sigma=float(rng.uniform(*spec.noise_sigma)),
        seed=int(seed),
    )
    amp = float(rng.uniform(*spec.motion_amplitude))
    return params, profile, amp


def synthesize(spec: DatasetSpec, seed: int) -> tuple[SynthClip, SceneParams, object, float]:
    params, profile, amp = _draw_clip(spec, seed)
    band = band_by_name(spec.band)
    pulse, rates = gen_pulse(spec.duration_s, spec.fps, profile, seed, band)
    motion = gen_motion(spec.duration_s, spec.fps, amp, spec.motion_cutoff_hz, seed + 1)
    return render_clip(params, pulse, motion, spec.height, spec.width, rates), params, profile, amp


def make_dataset(
    n_clips: int, split_seed: int, spec: DatasetSpec, out_dir, threads: int = 1
) -> dict:
    """Render ``n_clips`` clips under ``out_dir`` and write ``manifest.json``."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    if not 0 <= spec.n_val < n_clips:
        raise ValueError(f"n_val={spec.n_val} must lie in [0, n_clips)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(split_seed)
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=n_clips)]
    order = rng.permutation(n_clips)
    val_ids = sorted(int(i) for i in order[: spec.n_val])

    def render(i):
        sc, params, profile, amp = synthesize(spec, seeds[i])
        stem = f"clip_{i:04d}"
        try:
            write_rvid(sc.clip, out / f"{stem}.rvid")
            write_waveform_csv(out / f"{stem}_pulse.csv", sc.pulse)
            write_rates_csv(out / f"{stem}_rate.csv", sc.rate_gt)
        except OSError as exc:
            raise OSError(f"failed writing {out / stem}*: {exc}") from exc
        return {
            "id": stem,
            "path": f"{stem}.rvid",
            "pulse_csv": f"{stem}_pulse.csv",
            "rate_csv": f"{stem}_rate.csv",
            "seed": seeds[i],
            "split": "val" if i in val_ids else "train",
            "params": params.to_dict(),
            "rate_profile": profile,
            "motion_amplitude": amp,
        }

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(render, range(n_clips)))
    else:
        entries = [render(i) for i in range(n_clips)]

    manifest = {
        "clips": entries,
        "fs": spec.fps,
        "band": band_by_name(spec.band).as_list(),
        "split": {
            "train": [e["id"] for e in entries if e["split"] == "train"],
            "val": [e["id"] for e in entries if e["split"] == "val"],
        },
        "split_seed": split_seed,
        "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class ClipRecord:
    clip_id: str
    clip: VideoClip
    pulse: Waveform
    rates: RateSeries
    skin: np.ndarray
    split: str


class Manifest:
    """Read-only view of a dataset manifest on disk."""

    def __init__(self, path):
        self.path = Path(path)
        if self.path.is_dir():
            self.path = self.path / "manifest.json"
        if not self.path.exists():
            raise FileNotFoundError(f"manifest not found: {self.path}")
        self.data = json.loads(self.path.read_text())
        self.root = self.path.parent
        self.fs = float(self.data["fs"])

    def entries(self, split: str | None = None) -> list[dict]:
        return [e for e in self.data["clips"] if split is None or e["split"] == split]

    def load(self, entry: dict) -> ClipRecord:
        clip = read_rvid(self.root / entry["path"])
        pulse = read_waveform_csv(self.root / entry["pulse_csv"], fs=clip.fps)
        rates = read_rates_csv(self.root / entry["rate_csv"], fs=clip.fps)
        frac = entry.get("params", {}).get("skin_fraction", 0.6)
        skin = skin_mask(clip.frames.shape[1], clip.frames.shape[2], frac)
        return ClipRecord(entry["id"], clip, pulse, rates, skin, entry["split"])

    def load_split(self, split: str | None = None) -> list[ClipRecord]:
        return [self.load(e) for e in self.entries(split)]


def constant_rate_clip(
    bpm: float,
    duration_s: float = 30.0,
    fs: float = 30.0,
    h: int = 36,
    w: int = 36,
    params: SceneParams | None = None,
    motion_amplitude: float = 0.0,
    motion_cutoff_hz: float = 0.3,
    band: BandLimits = HR_BAND,
) -> SynthClip:
    """Convenience wrapper used by tests and scripts."""
    params = params or SceneParams()
    pulse, rates = gen_pulse(duration_s, fs, bpm, band=band)
    motion = gen_motion(duration_s, fs, motion_amplitude, motion_cutoff_hz, params.seed + 1)
    return render_clip(params, pulse, motion, h, w, rates)
