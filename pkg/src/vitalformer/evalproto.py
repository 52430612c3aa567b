"""Continuous (per-frame) evaluation: rates, cMAE / cRMSE, reports, masks."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from . import model as M
from .diffcore import Tape
from .ingest import VideoClip, window_clip
from .sigproc import HR_BAND, RR_BAND, BandLimits, RateSeries, Waveform, sliding_rate
from .synth import ClipRecord, Manifest


@dataclass(frozen=True)
class EvalConfig:
    band: BandLimits = HR_BAND
    win_s: float = 10.0
    stride: int = 1
    split: str = "val"
    ica_seed: int = 0
    pos_win_s: float = 1.6
    use_skin_mask: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band"] = self.band.as_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvalConfig:
        d = dict(d)
        if "band" in d:
            d["band"] = BandLimits(*d["band"])
        return cls(**d)


def default_eval_config(band_name: str = "hr") -> EvalConfig:
    if band_name == "rr":
        return EvalConfig(band=RR_BAND, win_s=30.0)
    return EvalConfig(band=HR_BAND, win_s=10.0)


def continuous_rates(
    wave: Waveform, band: BandLimits, win_s: float, stride: int = 1,
    n_frames: int | None = None, threads: int = 1,
) -> RateSeries:
    """Per-frame rates; when ``n_frames`` exceeds the waveform length the
    trailing frames repeat the last rate (nearest valid window)."""
    rates = sliding_rate(wave, band, win_s, stride, threads).rates_bpm
    if n_frames is not None and n_frames > rates.size:
        rates = np.concatenate([rates, np.full(n_frames - rates.size, rates[-1])])
    elif n_frames is not None:
        rates = rates[:n_frames]
    return RateSeries(rates, wave.fs)


def cmae_crmse(pred: RateSeries, gt: RateSeries) -> tuple[float, float]:
    if len(pred) != len(gt):
        raise ValueError(f"rate series lengths differ: {len(pred)} vs {len(gt)}")
    if pred.fs != gt.fs:
        raise ValueError(f"rate series sample rates differ: {pred.fs} vs {gt.fs}")
    err = np.abs(pred.rates_bpm - gt.rates_bpm)
    return float(err.mean()), float(np.sqrt(np.mean(err * err)))


@dataclass
class ClipScore:
    clip_id: str
    cMAE: float
    cRMSE: float
    n_frames: int


@dataclass
class EvalReport:
    method: str
    band: list[float]
    window: dict
    clips: list[ClipScore] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    cMAE: float = float("nan")
    cRMSE: float = float("nan")
    n_frames: int = 0

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "band": self.band,
            "window": self.window,
            "clips": [asdict(c) for c in self.clips],
            "failures": self.failures,
            "aggregate": {"cMAE": self.cMAE, "cRMSE": self.cRMSE, "n_frames": self.n_frames},
            "partial": self.partial,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        lines = [f"method: {self.method}  band: {self.band[0]}-{self.band[1]} Hz",
                 f"{'clip':<16}{'cMAE':>10}{'cRMSE':>10}{'frames':>9}"]
        for c in self.clips:
            lines.append(f"{c.clip_id:<16}{c.cMAE:>10.3f}{c.cRMSE:>10.3f}{c.n_frames:>9d}")
        for f in self.failures:
            lines.append(f"{f['clip_id']:<16}  FAILED: {f['error']}")
        lines.append(f"{'ALL':<16}{self.cMAE:>10.3f}{self.cRMSE:>10.3f}{self.n_frames:>9d}")
        return "\n".join(lines)


def predict_wave(method: str, clip: VideoClip, cfg: EvalConfig,
                 params: M.ModelParams | None = None, skin: np.ndarray | None = None,
                 threads: int = 1) -> Waveform:
    if method == "model":
        if params is None:
            raise ValueError("method 'model' needs parameters")
        return M.infer_waveform(clip, params, cfg.band, threads)
    mask = skin if cfg.use_skin_mask else None
    return baselines.run_baseline(method, clip, cfg.band, cfg.ica_seed, mask, cfg.pos_win_s)


def evaluate_records(
    method: str, records: list[ClipRecord], cfg: EvalConfig,
    params: M.ModelParams | None = None, threads: int = 1,
    rates_out: dict | None = None,
) -> EvalReport:
    """Score ``method`` on every record; ``rates_out`` collects predicted rates."""

    def one(rec: ClipRecord):
        try:
            wave = predict_wave(method, rec.clip, cfg, params, rec.skin)
            pred = continuous_rates(wave, cfg.band, cfg.win_s, cfg.stride, n_frames=len(rec.rates))
            if rates_out is not None:
                rates_out[rec.clip_id] = pred
            err = np.abs(pred.rates_bpm - rec.rates.rates_bpm)
            return rec.clip_id, err, None
        except (ValueError, ArithmeticError) as exc:
            return rec.clip_id, None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]

    report = EvalReport(method, cfg.band.as_list(), {"win_s": cfg.win_s, "stride": cfg.stride})
    pooled = []
    for clip_id, err, failure in results:
        if failure is not None:
            report.failures.append({"clip_id": clip_id, "error": failure})
            continue
        report.clips.append(
            ClipScore(clip_id, float(err.mean()), float(np.sqrt(np.mean(err * err))), int(err.size))
        )
        pooled.append(err)
    if pooled:
        allerr = np.concatenate(pooled)
        report.cMAE = float(allerr.mean())
        report.cRMSE = float(np.sqrt(np.mean(allerr * allerr)))
        report.n_frames = int(allerr.size)
        if report.cMAE > report.cRMSE + 1e-12:
            raise AssertionError("aggregate cMAE exceeds cRMSE")
    return report


def evaluate_method(
    method: str, manifest, cfg: EvalConfig | None = None,
    params: M.ModelParams | None = None, threads: int = 1, rates_out: dict | None = None,
) -> EvalReport:
    man = manifest if isinstance(manifest, Manifest) else Manifest(manifest)
    cfg = cfg or default_eval_config()
    records = man.load_split(cfg.split if cfg.split != "all" else None)
    if not records:
        raise ValueError(f"{man.path}: no clips in split {cfg.split!r}")
    return evaluate_records(method, records, cfg, params, threads, rates_out)


# ---------------------------------------------------------------------------
# attention masks


def clip_masks(clip: VideoClip, params: M.ModelParams, site: int = 2) -> np.ndarray:
    """Attention mask at ``site`` for every frame covered by full windows."""
    cfg = params.config
    n = cfg.n_frames
    out = []
    for item in window_clip(M.prepare_clip(clip, cfg), n, n):
        tape = Tape()
        masks: list = []
        M.backbone_forward(tape, params.bind(tape), item.appearance, item.motion, cfg, masks=masks)
        tape.release()
        out.append(masks[site - 1])
    return np.concatenate(out)


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-weighted coverage of a boolean mask on an h x w grid."""
    mh, mw = mask.shape
    ys = np.linspace(0, mh, h + 1)
    xs = np.linspace(0, mw, w + 1)
    cov = np.zeros((h, w))
    m = mask.astype(np.float64)
    for i in range(h):
        for j in range(w):
            y0, y1 = ys[i], ys[i + 1]
            x0, x1 = xs[j], xs[j + 1]
            rows = np.clip(np.minimum(np.arange(mh) + 1, y1) - np.maximum(np.arange(mh), y0), 0, None)
            cols = np.clip(np.minimum(np.arange(mw) + 1, x1) - np.maximum(np.arange(mw), x0), 0, None)
            cov[i, j] = rows @ m @ cols / ((y1 - y0) * (x1 - x0))
    return cov


def mask_contrast(masks: np.ndarray, skin: np.ndarray) -> tuple[float, float]:
    """Mean mask value over cells mostly inside / outside the skin region."""
    h, w = masks.shape[1:]
    inside = downsample_mask(skin, h, w) >= 0.5
    return float(masks[:, inside].mean()), float(masks[:, ~inside].mean())


def _to_u8(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round(255.0 * (m - lo) / (hi - lo)).astype(np.uint8)


def export_masks(clip: VideoClip, params: M.ModelParams, out_prefix, k: int = 8, scale: int = 4) -> dict:
    """Write ``<prefix>.pgm`` (K masks side by side) and ``<prefix>.csv``."""
    masks = clip_masks(clip, params, site=2)
    k = min(k, masks.shape[0])
    frames = np.unique(np.linspace(0, masks.shape[0] - 1, k).round().astype(int))
    h, w = masks.shape[1:]
    tiles = [np.kron(_to_u8(masks[f]), np.ones((scale, scale), dtype=np.uint8)) for f in frames]
    gap = np.full((h * scale, 1), 255, dtype=np.uint8)
    row = tiles[0]
    for t in tiles[1:]:
        row = np.hstack([row, gap, t])
    prefix = Path(out_prefix)
    pgm = prefix.with_suffix(".pgm")
    try:
        with open(pgm, "wb") as fh:
            fh.write(f"P5\n{row.shape[1]} {row.shape[0]}\n255\n".encode())
            fh.write(row.tobytes())
        with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["frame", "row", "col", "q"])
            for f in frames:
                for i in range(h):
                    for j in range(w):
                        wr.writerow([int(f), i, j, repr(float(masks[f, i, j]))])
    except OSError as exc:
        raise OSError(f"failed writing masks to {prefix}: {exc}") from exc
    return {"pgm": pgm, "csv": prefix.with_suffix(".csv"), "frames": frames, "masks": masks}


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
