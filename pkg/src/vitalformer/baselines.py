"""Classical estimators: green channel, POS, and ICA on spatially averaged RGB."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import VideoClip
from .sigproc import BandLimits, Waveform, bandpass, standardize

METHODS = ("green", "pos", "ica")


@dataclass
class RgbTrace:
    values: np.ndarray  # T x 3
    fs: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 3 or self.values.shape[0] < 2:
            raise ValueError(f"trace must be T x 3 with T >= 2, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trace contains non-finite values")


def spatial_average(clip: VideoClip, mask: np.ndarray | None = None) -> RgbTrace:
    f = clip.frames.astype(np.float64)
    if mask is None:
        return RgbTrace(f.mean(axis=(1, 2)), clip.fps)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != f.shape[1:3]:
        raise ValueError(f"mask shape {mask.shape} does not match frames {f.shape[1:3]}")
    total = mask.sum()
    if total <= 0:
        raise ValueError("mask weights sum to zero")
    return RgbTrace(np.einsum("thwc,hw->tc", f, mask) / total, clip.fps)


def _finish(x: np.ndarray, fs: float, band: BandLimits) -> Waveform:
    z, _ = standardize(Waveform(x, fs))
    return bandpass(z, band)


def green_method(trace: RgbTrace, band: BandLimits) -> Waveform:
    return _finish(trace.values[:, 1], trace.fs, band)


def pos_signal(trace: RgbTrace, win_s: float = 1.6) -> np.ndarray:
    """Overlap-added plane-orthogonal-to-skin pulse, before standardization."""
    c = trace.values
    t = c.shape[0]
    win = int(round(win_s * trace.fs))
    if win > t:
        raise ValueError(f"trace of {t} samples shorter than the {win}-sample POS window")
    out = np.zeros(t)
    for s in range(t - win + 1):
        block = c[s:s + win]
        cn = block / block.mean(axis=0)
        s1 = cn[:, 1] - cn[:, 2]
        s2 = cn[:, 1] + cn[:, 2] - 2.0 * cn[:, 0]
        sd2 = s2.std()
        h = s1 + (s1.std() / sd2) * s2 if sd2 >= 1e-12 else s1
        out[s:s + win] += h - h.mean()
    return out


def pos_method(trace: RgbTrace, band: BandLimits, win_s: float = 1.6) -> Waveform:
    return _finish(pos_signal(trace, win_s), trace.fs, band)


def _detrend(x: np.ndarray) -> np.ndarray:
    t = np.arange(x.shape[0], dtype=np.float64)
    A = np.stack([t, np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(A, x, rcond=None)
    return x - A @ coef


def fastica_deflation(
    x: np.ndarray, seed: int, max_iter: int = 200, tol: float = 1e-6
) -> tuple[np.ndarray, bool]:
    """Deflationary FastICA with the tanh contrast.

    ``x`` is T x C. Returns (sources T x C, converged). Sources come out with
    unit variance in the whitened space.
    """
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / xc.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    keep = evals > 1e-12 * evals.max()
    white = evecs[:, keep] / np.sqrt(evals[keep])
    z = xc @ white  # T x k
    k = z.shape[1]
    rng = np.random.default_rng(seed)
    w_all = np.zeros((k, k))
    converged = True
    for comp in range(k):
        w = rng.standard_normal(k)
        w /= np.linalg.norm(w)
        ok = False
        for _ in range(max_iter):
            u = z @ w
            g = np.tanh(u)
            w_new = (z * g[:, None]).mean(axis=0) - (1.0 - g * g).mean() * w
            w_new -= w_all[:comp].T @ (w_all[:comp] @ w_new)
            w_new /= np.linalg.norm(w_new)
            done = abs(abs(w_new @ w) - 1.0) < tol
            w = w_new
            if done:
                ok = True
                break
        converged &= ok
        w_all[comp] = w
    return z @ w_all.T, converged


def _peak_band_ratio(x: np.ndarray, fs: float, band: BandLimits) -> float:
    p = np.abs(np.fft.rfft(x - x.mean())) ** 2
    f = np.fft.rfftfreq(x.size, 1.0 / fs)
    inside = (f >= band.lo) & (f <= band.hi)
    total = p.sum()
    if total <= 0 or not inside.any():
        return 0.0
    return float(p[inside].max() / total)


def ica_method(
    trace: RgbTrace, band: BandLimits, seed: int = 0, info: dict | None = None
) -> Waveform:
    """ICA pulse estimate; falls back to the green method if FastICA stalls.

    When ``info`` is given it receives ``fallback`` and ``component`` keys.
    """
    x = _detrend(trace.values)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    x = x / sd
    sources, converged = fastica_deflation(x, seed)
    if not converged or sources.shape[1] == 0:
        if info is not None:
            info.update(fallback=True, component=None)
        return green_method(trace, band)
    ratios = [_peak_band_ratio(sources[:, j], trace.fs, band) for j in range(sources.shape[1])]
    j = int(np.argmax(ratios))
    s = sources[:, j]
    if np.dot(s - s.mean(), x[:, 1] - x[:, 1].mean()) < 0:
        s = -s
    if info is not None:
        info.update(fallback=False, component=j)
    return _finish(s, trace.fs, band)


def run_baseline(method: str, clip: VideoClip, band: BandLimits, seed: int = 0,
                 mask: np.ndarray | None = None, pos_win_s: float = 1.6,
                 info: dict | None = None) -> Waveform:
    trace = spatial_average(clip, mask)
    if method == "green":
        return green_method(trace, band)
    if method == "pos":
        return pos_method(trace, band, pos_win_s)
    if method == "ica":
        return ica_method(trace, band, seed, info)
    raise ValueError(f"unknown baseline {method!r}; expected one of {METHODS}")
