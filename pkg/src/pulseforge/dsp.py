"""Non-differentiable signal post-processing and analysis.

Heart-rate extraction runs the predicted waveform through a second-order
Butterworth band-pass (applied forward-backward for zero phase), estimates
the power spectral density with Welch averaging, and reads off the dominant
in-band frequency.  The band-pass is designed from the analog prototype via
the bilinear transform with frequency pre-warping:

    H(s) = B s / (s^2 + B s + w0^2),   s = (1 - z^-1) / (1 + z^-1)

with w_i = tan(pi f_i / fs), B = w_hi - w_lo, w0^2 = w_lo * w_hi, giving one
biquad with zeros pinned at DC and Nyquist and unit gain at the (warped)
center frequency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Waveform",
    "FilterSpec",
    "PsdEstimate",
    "WelchConfig",
    "design_bandpass",
    "butterworth_bandpass",
    "biquad_filter",
    "welch_psd",
    "estimate_hr",
    "pearson_corr",
    "dump_psd",
]


@dataclass
class Waveform:
    """A sampled signal: the rPPG prediction target and network output."""

    samples: np.ndarray
    fps: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")


@dataclass
class FilterSpec:
    """One designed band-pass biquad (denominator normalized, a0 = 1)."""

    f_lo: float
    f_hi: float
    fs: float
    b0: float
    b1: float
    b2: float
    a1: float
    a2: float
    order: int = 2

    def poles(self) -> np.ndarray:
        return np.roots([1.0, self.a1, self.a2])

    def magnitude_response(self, f: np.ndarray) -> np.ndarray:
        """|H(e^{j 2 pi f / fs})| evaluated directly from the coefficients."""
        z = np.exp(-2j * np.pi * np.asarray(f, dtype=np.float64) / self.fs)
        num = self.b0 + self.b1 * z + self.b2 * z * z
        den = 1.0 + self.a1 * z + self.a2 * z * z
        return np.abs(num / den)


def design_bandpass(f_lo: float, f_hi: float, fs: float) -> FilterSpec:
    """Second-order Butterworth band-pass via pre-warped bilinear transform."""
    if not 0 < f_lo < f_hi < fs / 2:
        raise ValueError(f"need 0 < f_lo < f_hi < fs/2, got ({f_lo}, {f_hi}, fs={fs})")
    w_lo = math.tan(math.pi * f_lo / fs)
    w_hi = math.tan(math.pi * f_hi / fs)
    bw = w_hi - w_lo
    w0sq = w_lo * w_hi
    a0 = 1.0 + bw + w0sq
    spec = FilterSpec(
        f_lo=f_lo,
        f_hi=f_hi,
        fs=fs,
        b0=bw / a0,
        b1=0.0,
        b2=-bw / a0,
        a1=2.0 * (w0sq - 1.0) / a0,
        a2=(1.0 - bw + w0sq) / a0,
    )
    if np.any(np.abs(spec.poles()) >= 1.0):
        raise ValueError(f"unstable design for ({f_lo}, {f_hi}, fs={fs})")
    return spec


def _lfilter_zi(spec: FilterSpec) -> np.ndarray:
    """Steady-state initial filter state for a unit step (direct form II t)."""
    # Solve (I - A) zi = B with the transposed-form companion matrix
    a1, a2 = spec.a1, spec.a2
    b0, b1, b2 = spec.b0, spec.b1, spec.b2
    A = np.array([[-a1, 1.0], [-a2, 0.0]])
    B = np.array([b1 - a1 * b0, b2 - a2 * b0])
    return np.linalg.solve(np.eye(2) - A, B)


def biquad_filter(x: np.ndarray, spec: FilterSpec, zi: np.ndarray | None = None) -> np.ndarray:
    """Single forward pass of the biquad (direct form II transposed)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.empty_like(x)
    z1, z2 = (0.0, 0.0) if zi is None else (float(zi[0]), float(zi[1]))
    b0, b1, b2, a1, a2 = spec.b0, spec.b1, spec.b2, spec.a1, spec.a2
    for n in range(x.size):
        xn = x[n]
        yn = b0 * xn + z1
        z1 = b1 * xn - a1 * yn + z2
        z2 = b2 * xn - a2 * yn
        y[n] = yn
    return y


def butterworth_bandpass(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Zero-phase band-pass: forward and reverse passes with odd-reflection
    padding and steady-state initial conditions; output length is preserved."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size <= 3 * spec.order:
        raise ValueError(f"signal length {x.size} too short for order-{spec.order} filtering")
    padlen = min(3 * (spec.order + 1), x.size - 1)
    head = 2.0 * x[0] - x[padlen:0:-1]
    tail = 2.0 * x[-1] - x[-2 : -padlen - 2 : -1]
    ext = np.concatenate([head, x, tail])
    zi = _lfilter_zi(spec)
    y = biquad_filter(ext, spec, zi * ext[0])
    y = biquad_filter(y[::-1], spec, zi * y[-1])[::-1]
    return y[padlen : padlen + x.size]


@dataclass
class WelchConfig:
    segment: int = 128
    overlap: float = 0.5
    window: str = "hann"  # hann | rect
    nfft: int = 2048
    detrend: bool = True


@dataclass
class PsdEstimate:
    freqs: np.ndarray
    power: np.ndarray
    method: str = "welch"
    params: dict = field(default_factory=dict)


def _window(kind: str, n: int) -> np.ndarray:
    if kind == "hann":
        # periodic (DFT-even) Hann
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))
    if kind == "rect":
        return np.ones(n)
    raise ValueError(f"unknown window kind {kind!r}")


def welch_psd(x: np.ndarray, fs: float, cfg: WelchConfig | None = None) -> PsdEstimate:
    """Welch PSD: mean of windowed, overlapped, zero-padded periodograms.

    One-sided density scaling: P = |X|^2 / (fs * sum(w^2)), interior bins
    doubled.  ``cfg.segment`` larger than the signal is an error.
    """
    cfg = cfg or WelchConfig()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if cfg.segment > x.size:
        raise ValueError(f"segment {cfg.segment} longer than signal {x.size}")
    if not 0.0 <= cfg.overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {cfg.overlap}")
    nfft = max(cfg.nfft, cfg.segment)
    win = _window(cfg.window, cfg.segment)
    step = max(cfg.segment - int(round(cfg.overlap * cfg.segment)), 1)
    scale = 1.0 / (fs * np.sum(win * win))
    acc = np.zeros(nfft // 2 + 1)
    count = 0
    for start in range(0, x.size - cfg.segment + 1, step):
        seg = x[start : start + cfg.segment]
        if cfg.detrend:
            seg = seg - seg.mean()
        spec = np.fft.rfft(seg * win, n=nfft)
        acc += (spec.real**2 + spec.imag**2) * scale
        count += 1
    power = acc / count
    power[1:-1] *= 2.0  # one-sided: double interior bins (DC and Nyquist excluded)
    freqs = np.fft.rfftfreq(nfft, d=1.0 / fs)
    return PsdEstimate(
        freqs=freqs,
        power=power,
        method="welch",
        params={
            "segment": cfg.segment,
            "overlap": cfg.overlap,
            "window": cfg.window,
            "nfft": nfft,
            "n_segments": count,
        },
    )


def estimate_hr(psd: PsdEstimate, f_lo: float, f_hi: float) -> float:
    """60 x the in-band frequency of maximum power (first index on ties)."""
    mask = (psd.freqs >= f_lo) & (psd.freqs <= f_hi)
    if not np.any(mask):
        raise ValueError(f"band ({f_lo}, {f_hi}) Hz does not overlap the PSD grid")
    freqs = psd.freqs[mask]
    power = psd.power[mask]
    return 60.0 * float(freqs[int(np.argmax(power))])


def pearson_corr(x: np.ndarray, y: np.ndarray) -> float | None:
    """Sample Pearson correlation in [-1, 1]; None when undefined (constant
    input), so callers can report a flagged missing value."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("pearson_corr needs length >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    xm = x - x.mean()
    ym = y - y.mean()
    return float(np.sum(xm * ym) / (np.sqrt(np.sum(xm * xm)) * np.sqrt(np.sum(ym * ym))))


def dump_psd(psd: PsdEstimate, path) -> None:
    """Two-column plain text (freq_hz, power) for plotting."""
    with open(path, "w") as fh:
        fh.write("# freq_hz power\n")
        for f, p in zip(psd.freqs, psd.power):
            fh.write(f"{f:.10g} {p:.10g}\n")
