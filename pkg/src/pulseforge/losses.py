"""The dynamic-learning hybrid objective.

Three supervision terms over predicted waveforms:

* ``neg_pearson`` — temporal coherence, 1 minus the sample correlation;
* ``freq_ce`` — cross-entropy of the predicted spectral distribution at the
  ground truth's dominant-frequency bin;
* ``hr_kl`` — KL divergence between heart-rate distributions on a 1-bpm grid.
  Training uses the differentiable gauss-vs-PSD form (an argmax-derived mean
  has zero gradient almost everywhere); evaluation keeps the literal
  gauss-vs-gauss form.

``overall_loss`` combines them as alpha * time + beta * (ce + kl), where beta
follows the epoch schedule lambda * theta^((epoch-1)/total).

The spectral distribution is a differentiable periodogram: a DFT (two
constant matrices), squared magnitude, linear interpolation onto the 1-bpm
grid implied by the frequency band, and sum normalization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from pulseforge import tensor as T
from pulseforge.tensor import DiffTensor, ShapeError

__all__ = [
    "BandConfig",
    "HRDistribution",
    "LossSchedule",
    "LossBreakdown",
    "neg_pearson",
    "psd_distribution",
    "freq_ce",
    "gaussian_pmf",
    "hr_kl",
    "beta_schedule",
    "overall_loss",
    "diagnostics",
    "reset_diagnostics",
    "DEFAULT_HR_SIGMA",
]

log = logging.getLogger(__name__)

DEFAULT_HR_SIGMA = 3.0  # bpm; HR-distribution spread
PMF_FLOOR = 1e-12

# degenerate-input events (constant signals) are counted, not raised
diagnostics = {"constant_pearson": 0, "degenerate_psd": 0}


def reset_diagnostics() -> None:
    for k in diagnostics:
        diagnostics[k] = 0


@dataclass
class BandConfig:
    """Physiological frequency band; implies the 1-bpm heart-rate grid."""

    f_lo: float = 0.66
    f_hi: float = 3.0

    def validate(self, fps: float | None = None) -> None:
        if not 0 < self.f_lo < self.f_hi:
            raise ValueError(f"band must satisfy 0 < f_lo < f_hi, got {self}")
        if fps is not None and self.f_hi >= fps / 2:
            raise ValueError(f"f_hi {self.f_hi} must be below Nyquist {fps / 2}")

    def bpm_grid(self) -> np.ndarray:
        """Integer bpm bins covered by the band, step 1 bpm."""
        self.validate()
        lo = math.ceil(self.f_lo * 60.0)
        hi = math.floor(self.f_hi * 60.0)
        if hi < lo:
            raise ValueError(f"band {self} leaves no whole-bpm bins")
        return np.arange(lo, hi + 1)


@dataclass
class HRDistribution:
    """Probability mass over a bpm grid. ``pmf`` is differentiable when it
    was derived from a differentiable waveform."""

    bins: np.ndarray
    pmf: DiffTensor | np.ndarray
    mu: float
    sigma: float | None = None

    def pmf_values(self) -> np.ndarray:
        return self.pmf.data if isinstance(self.pmf, DiffTensor) else self.pmf


@dataclass
class LossSchedule:
    """Epoch-dependent weighting of the frequency-domain terms."""

    lambda_: float = 1.0
    theta: float = 1.5
    epoch_current: int = 1
    epoch_total: int = 30
    alpha_time: float = 1.0

    def validate(self) -> None:
        if self.epoch_current < 1:
            raise ValueError(f"epoch_current must be >= 1, got {self.epoch_current}")
        if self.epoch_total < 1:
            raise ValueError(f"epoch_total must be >= 1, got {self.epoch_total}")
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")


def _as_wave_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        if x.ndim != 1:
            raise ShapeError(f"expected 1-D waveform, got shape {x.shape}")
        return x
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ShapeError(f"expected 1-D waveform, got shape {arr.shape}")
    return T.tensor(arr.astype(np.float64 if arr.dtype == np.float64 else np.float32))


# -- temporal loss -------------------------------------------------------------


def neg_pearson(pred, gt) -> DiffTensor:
    """1 minus the sample Pearson correlation; range [0, 2].

    A constant pred or gt leaves the correlation undefined: the loss is then
    1 with zero gradient, and the ``constant_pearson`` diagnostic counter is
    bumped (NaN here would poison early training).
    """
    pred = _as_wave_tensor(pred)
    gt = np.asarray(gt, dtype=pred.data.dtype).reshape(-1)
    if pred.size != gt.size:
        raise ShapeError(f"waveform lengths differ: {pred.size} vs {gt.size}")
    if pred.size < 2:
        raise ShapeError("neg_pearson needs length >= 2")
    if np.ptp(gt) == 0 or np.ptp(pred.data) == 0:
        diagnostics["constant_pearson"] += 1
        log.debug("neg_pearson: constant input, returning loss 1 with zero gradient")
        return T.tensor(np.ones((), dtype=pred.data.dtype))
    xm = T.sub(pred, T.reduce_mean(pred))
    ym = gt - gt.mean()
    num = T.reduce_sum(T.mul(xm, ym))
    den = T.mul(
        T.sqrt(T.reduce_sum(T.mul(xm, xm))),
        float(np.sqrt(np.sum(ym * ym))),
    )
    return T.sub(1.0, T.div(num, den))


# -- spectral machinery --------------------------------------------------------


def _dft_interp_matrices(n: int, fps: float, grid: np.ndarray, nfft: int, dtype):
    """Constant matrices: DFT rows covering the band and the 1-bpm interpolator."""
    nfft = max(nfft, n)
    grid_hz = grid.astype(np.float64) / 60.0
    m_lo = int(np.floor(grid_hz[0] * nfft / fps))
    m_hi = int(np.ceil(grid_hz[-1] * nfft / fps)) + 1
    m = np.arange(m_lo, m_hi + 1)
    freqs = m * fps / nfft
    t_idx = np.arange(n)
    ang = 2.0 * np.pi * np.outer(freqs, t_idx) / fps
    cos_m = np.cos(ang).astype(dtype)
    sin_m = np.sin(ang).astype(dtype)

    interp = np.zeros((grid.size, m.size))
    span = fps / nfft
    for i, f in enumerate(grid_hz):
        j = int(np.floor((f - freqs[0]) / span))
        j = min(max(j, 0), m.size - 2)
        frac = (f - freqs[j]) / span
        interp[i, j] = 1.0 - frac
        interp[i, j + 1] = frac
    return cos_m, sin_m, interp.astype(dtype)


def psd_distribution(
    x,
    fps: float,
    band: BandConfig | None = None,
    nfft: int = 2048,
    normalize: str = "sum",
) -> HRDistribution:
    """Differentiable periodogram resampled to the 1-bpm grid of ``band``.

    DFT at ``nfft``-spaced frequencies (linear op), squared magnitude,
    linear interpolation onto whole-bpm bins, normalized to sum 1.  The mean
    is removed first so spectral leakage from a DC offset cannot pollute the
    band.  Scaling the waveform by any positive factor leaves the pmf
    unchanged.  A constant input yields the uniform pmf (degenerate case,
    counted in diagnostics).
    """
    band = band or BandConfig()
    band.validate(fps)
    grid = band.bpm_grid()
    pred = _as_wave_tensor(x)
    n = pred.size
    if n < 16:
        raise ShapeError(f"psd_distribution needs length >= 16, got {n}")
    if normalize not in ("sum", "softmax"):
        raise ValueError(f"unknown normalize mode {normalize!r}")

    if np.ptp(pred.data) == 0:
        diagnostics["degenerate_psd"] += 1
        log.debug("psd_distribution: constant input, returning uniform pmf")
        pmf = np.full(grid.size, 1.0 / grid.size, dtype=pred.data.dtype)
        return HRDistribution(bins=grid, pmf=T.tensor(pmf), mu=float(grid[0]))

    dtype = pred.data.dtype
    cos_m, sin_m, interp = _dft_interp_matrices(n, fps, grid, nfft, dtype)
    col = T.reshape(T.sub(pred, T.reduce_mean(pred)), (n, 1))
    re = T.matmul(T.tensor(cos_m), col)
    im = T.matmul(T.tensor(sin_m), col)
    power = T.add(T.mul(re, re), T.mul(im, im))
    raw = T.reshape(T.matmul(T.tensor(interp), power), (grid.size,))
    if normalize == "sum":
        pmf = T.div(raw, T.reduce_sum(raw))
    else:
        pmf = T.softmax(raw, axis=0)
    mu = float(grid[int(np.argmax(pmf.data))])
    return HRDistribution(bins=grid, pmf=pmf, mu=mu)


def freq_ce(pred, gt, fps: float, band: BandConfig | None = None, nfft: int = 2048) -> DiffTensor:
    """Cross-entropy at the ground truth's dominant bin: -log pmf_pred[k*]."""
    band = band or BandConfig()
    gt_dist = psd_distribution(np.asarray(gt, dtype=np.float64), fps, band, nfft)
    k_star = int(np.argmax(gt_dist.pmf_values()))
    pred_dist = psd_distribution(pred, fps, band, nfft)
    pmf = pred_dist.pmf
    onehot = np.zeros(pmf.shape, dtype=pmf.data.dtype)
    onehot[k_star] = 1.0
    picked = T.reduce_sum(T.mul(pmf, T.tensor(onehot)))
    return T.neg(T.log(T.clamp_min(picked, PMF_FLOOR)))


def gaussian_pmf(mu: float, sigma: float, grid: np.ndarray) -> HRDistribution:
    """Discretized normal density on the bpm grid, renormalized to sum 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    grid = np.asarray(grid)
    z = (grid.astype(np.float64) - mu) / sigma
    pmf = np.exp(-0.5 * z * z)
    pmf /= pmf.sum()
    return HRDistribution(bins=grid, pmf=pmf, mu=float(mu), sigma=float(sigma))


def _kl_discrete(p: np.ndarray, q: np.ndarray) -> float:
    q = np.maximum(q, PMF_FLOOR)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def hr_kl(
    gt_hr: float,
    pred,
    fps: float | None = None,
    band: BandConfig | None = None,
    mode: str = "gauss-psd",
    sigma: float = DEFAULT_HR_SIGMA,
    nfft: int = 2048,
):
    """KL divergence between ground-truth and predicted HR distributions.

    ``gauss-psd`` (training): KL(gaussian(gt_hr, sigma) || psd(pred)); the
    result is a differentiable scalar.  ``gauss-gauss`` (evaluation):
    KL between two discretized Gaussians where the predicted mean is either
    the given bpm value or the argmax of the predicted waveform's PSD;
    returns a plain float.
    """
    band = band or BandConfig()
    grid = band.bpm_grid()
    if mode == "gauss-gauss":
        if np.isscalar(pred) or (isinstance(pred, (int, float))):
            mu_pred = float(pred)
        else:
            if fps is None:
                raise ValueError("hr_kl on a waveform needs fps")
            mu_pred = psd_distribution(np.asarray(pred, dtype=np.float64), fps, band, nfft).mu
        p = gaussian_pmf(gt_hr, sigma, grid).pmf
        q = gaussian_pmf(mu_pred, sigma, grid).pmf
        return _kl_discrete(p, q)
    if mode != "gauss-psd":
        raise ValueError(f"unknown hr_kl mode {mode!r}")
    if fps is None:
        raise ValueError("hr_kl gauss-psd needs fps")
    p = gaussian_pmf(gt_hr, sigma, grid).pmf
    q = psd_distribution(pred, fps, band, nfft).pmf
    p_t = p.astype(q.data.dtype)
    neg_entropy = float(np.sum(p[p > 0] * np.log(p[p > 0])))
    cross = T.reduce_sum(T.mul(T.tensor(p_t), T.log(T.clamp_min(q, PMF_FLOOR))))
    return T.sub(neg_entropy, cross)


def beta_schedule(s: LossSchedule) -> float:
    """beta = lambda * theta^((epoch_current - 1) / epoch_total)."""
    s.validate()
    return s.lambda_ * s.theta ** ((s.epoch_current - 1) / s.epoch_total)


@dataclass
class LossBreakdown:
    total: DiffTensor
    time: float
    ce: float
    hr: float
    beta: float


def overall_loss(
    pred,
    gt_wave,
    gt_hr: float,
    fps: float,
    schedule: LossSchedule,
    band: BandConfig | None = None,
    nfft: int = 2048,
) -> LossBreakdown:
    """alpha * L_time + beta * (L_ce + L_hr), with components for logging."""
    band = band or BandConfig()
    beta = beta_schedule(schedule)
    l_time = neg_pearson(pred, gt_wave)
    l_ce = freq_ce(pred, gt_wave, fps, band, nfft)
    l_hr = hr_kl(gt_hr, pred, fps, band, mode="gauss-psd", nfft=nfft)
    total = T.add(
        T.scale(l_time, schedule.alpha_time),
        T.scale(T.add(l_ce, l_hr), beta),
    )
    return LossBreakdown(
        total=total, time=l_time.item(), ce=l_ce.item(), hr=l_hr.item(), beta=beta
    )
