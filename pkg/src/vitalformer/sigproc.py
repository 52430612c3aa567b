"""Spectral utilities: brick-wall bandpass, FFT peak rate, sliding-window rates."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class BandLimits:
    lo: float
    hi: float

    def validate(self, fs: float) -> None:
        if not 0.0 < self.lo < self.hi < fs / 2.0:
            raise ValueError(f"band [{self.lo}, {self.hi}] Hz invalid at fs={fs} Hz")

    def as_list(self) -> list[float]:
        return [self.lo, self.hi]


HR_BAND = BandLimits(0.7, 2.5)
RR_BAND = BandLimits(0.13, 0.34)


@dataclass
class Waveform:
    samples: np.ndarray
    fs: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise ValueError(f"sample rate must be positive, got {self.fs}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs


@dataclass
class RateSeries:
    rates_bpm: np.ndarray
    fs: float

    def __post_init__(self):
        self.rates_bpm = np.asarray(self.rates_bpm, dtype=np.float64)

    def __len__(self) -> int:
        return self.rates_bpm.size


class NoInBandEnergy(ValueError):
    pass


def band_mask(n: int, fs: float, band: BandLimits) -> np.ndarray:
    """Boolean mask over ``rfft`` bins lying inside ``band`` (DC excluded)."""
    f = np.fft.rfftfreq(n, 1.0 / fs)
    return (f >= band.lo) & (f <= band.hi) & (f > 0)


def bandpass(w: Waveform, band: BandLimits) -> Waveform:
    band.validate(w.fs)
    n = len(w)
    spec = np.fft.rfft(w.samples)
    spec[~band_mask(n, w.fs, band)] = 0.0
    return Waveform(np.fft.irfft(spec, n=n), w.fs)


def _padded_len(n: int) -> int:
    return 4 * (1 << int(np.ceil(np.log2(max(n, 1)))))


def dominant_rate(w: Waveform, band: BandLimits) -> float:
    """Peak in-band frequency in per-minute units, parabolic-refined.

    A Hann taper is applied before the padded FFT; without it the
    negative-frequency image leaks into the peak and makes the parabolic
    refinement ripple with the signal phase.
    """
    band.validate(w.fs)
    if w.duration * band.lo < 3.0 - 1e-9:
        raise ValueError(
            f"waveform of {w.duration:.2f} s covers fewer than 3 cycles at {band.lo} Hz"
        )
    nfft = _padded_len(len(w))
    x = (w.samples - w.samples.mean()) * np.hanning(len(w))
    mag = np.abs(np.fft.rfft(x, n=nfft))
    inside = np.flatnonzero(band_mask(nfft, w.fs, band))
    if inside.size == 0 or not np.any(mag[inside] > 0):
        raise NoInBandEnergy("no in-band energy")
    k = int(inside[np.argmax(mag[inside])])
    offset = 0.0
    if 0 < k < mag.size - 1:
        a, b, c = mag[k - 1], mag[k], mag[k + 1]
        denom = a - 2 * b + c
        if denom != 0:
            offset = 0.5 * (a - c) / denom
    freq = (k + offset) * w.fs / nfft
    return 60.0 * float(np.clip(freq, band.lo, band.hi))


def sliding_rate(
    w: Waveform,
    band: BandLimits,
    win_s: float,
    stride_frames: int = 1,
    threads: int = 1,
) -> RateSeries:
    """One rate per sample from centered windows of ``win_s`` seconds.

    Frames whose centered window would run off either end borrow the rate of
    the nearest window that fits.
    """
    n = len(w)
    win = int(round(win_s * w.fs))
    if win > n:
        raise ValueError(f"waveform of {n} samples shorter than {win}-sample window")
    if stride_frames < 1:
        raise ValueError("stride_frames must be >= 1")
    starts = list(range(0, n - win + 1, stride_frames))
    if starts[-1] != n - win:
        starts.append(n - win)

    def rate_at(i):
        s = starts[i]
        try:
            return dominant_rate(Waveform(w.samples[s:s + win], w.fs), band)
        except ValueError as exc:
            raise type(exc)(f"window {i} (start {s}): {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rates = np.array(list(pool.map(rate_at, range(len(starts)))))
    else:
        rates = np.array([rate_at(i) for i in range(len(starts))])

    want = np.clip(np.arange(n) - win // 2, 0, n - win)
    starts_arr = np.asarray(starts)
    nearest = np.abs(want[:, None] - starts_arr[None, :]).argmin(axis=1)
    return RateSeries(rates[nearest], w.fs)


def cumsum(w: Waveform) -> Waveform:
    return Waveform(np.cumsum(w.samples), w.fs)


def standardize(w: Waveform) -> tuple[Waveform, bool]:
    """Zero-mean, unit-variance copy; all zeros plus ``True`` when degenerate."""
    if len(w) < 2:
        raise ValueError("standardize needs at least 2 samples")
    x = w.samples - w.samples.mean()
    var = float(np.mean(x * x))
    if var < 1e-12:
        return Waveform(np.zeros_like(x), w.fs), True
    return Waveform(x / np.sqrt(var), w.fs), False


def write_waveform_csv(path, w: Waveform) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t_sec", "value"])
        for i, v in enumerate(w.samples):
            out.writerow([repr(i / w.fs), repr(float(v))])


def read_waveform_csv(path, fs: float | None = None) -> Waveform:
    t, v = _read_two_columns(path, ("t_sec", "value"))
    if fs is None:
        if len(t) < 2:
            raise ValueError(f"{path}: cannot infer sample rate from one row")
        fs = round((len(t) - 1) / (t[-1] - t[0]), 6)
    return Waveform(v, fs)


def write_rates_csv(path, r: RateSeries) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["frame", "rate_bpm"])
        for i, v in enumerate(r.rates_bpm):
            out.writerow([i, repr(float(v))])


def read_rates_csv(path, fs: float) -> RateSeries:
    _, v = _read_two_columns(path, ("frame", "rate_bpm"))
    return RateSeries(v, fs)


def _read_two_columns(path, header):
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != header:
        raise ValueError(f"{path}: expected header {','.join(header)}")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=np.float64)
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    return data[:, 0], data[:, 1]
