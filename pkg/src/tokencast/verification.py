"""Evaluation and skill scores for reconstructions and ensemble nowcasts.

Continuous scores (MAE, MSE, SSIM) and power spectra operate in dBZ;
categorical scores (CSI, frequency BIAS) and the object-based SAL
decomposition (see :mod:`tokencast.sal`) operate on rain rates in mm/h.
Ensemble scores are the continuous ranked probability score and the rank
histogram with its Kullback-Leibler divergence from the uniform
distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tokencast import kernels


def _vals(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


class VerificationError(ValueError):
    """Contract violation in a verification operation."""


# ---------------------------------------------------------------------------
# continuous scores
# ---------------------------------------------------------------------------


def _gaussian_filter2d(x: np.ndarray, radius: int = 5, sigma: float = 1.5) -> np.ndarray:
    """Separable Gaussian mean with edge-replicate padding (11-tap default)."""
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    k /= k.sum()
    xp = np.pad(x, radius, mode="edge")
    rows = sliding_window_view(xp, 2 * radius + 1, axis=0) @ k
    return sliding_window_view(rows, 2 * radius + 1, axis=1) @ k


def ssim(obs, pred, data_range: float = 60.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale structural similarity with an 11-pixel Gaussian window.

    Standard constants C1 = (k1*L)^2, C2 = (k2*L)^2 with L the dynamic
    range (60 dBZ for preprocessed reflectivity); the score is the mean of
    the local SSIM map with a (window-1)/2 border crop.
    """
    x = _vals(obs)
    y = _vals(pred)
    if x.shape != y.shape:
        raise VerificationError(f"shape mismatch {x.shape} vs {y.shape}")
    radius = 5
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ux = _gaussian_filter2d(x, radius)
    uy = _gaussian_filter2d(y, radius)
    uxx = _gaussian_filter2d(x * x, radius)
    uyy = _gaussian_filter2d(y * y, radius)
    uxy = _gaussian_filter2d(x * y, radius)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s[radius:-radius, radius:-radius].mean())


def continuous_scores(obs, pred, data_range: float = 60.0) -> dict[str, float]:
    """MAE, MSE and SSIM between two same-shape fields (dBZ space)."""
    x = _vals(obs)
    y = _vals(pred)
    if x.shape != y.shape:
        raise VerificationError(f"shape mismatch {x.shape} vs {y.shape}")
    return {
        "mae": float(np.abs(x - y).mean()),
        "mse": float(((x - y) ** 2).mean()),
        "ssim": ssim(x, y, data_range),
    }


# ---------------------------------------------------------------------------
# categorical scores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContingencyTable:
    """Event counts at one rain-rate threshold."""

    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int
    threshold_mmh: float

    @classmethod
    def from_fields(cls, obs, pred, threshold_mmh: float) -> "ContingencyTable":
        o = _vals(obs) >= threshold_mmh
        p = _vals(pred) >= threshold_mmh
        if o.shape != p.shape:
            raise VerificationError(f"shape mismatch {o.shape} vs {p.shape}")
        return cls(
            hits=int((o & p).sum()),
            misses=int((o & ~p).sum()),
            false_alarms=int((~o & p).sum()),
            correct_negatives=int((~o & ~p).sum()),
            threshold_mmh=float(threshold_mmh),
        )

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    @property
    def no_events(self) -> bool:
        return self.hits + self.misses + self.false_alarms == 0

    @property
    def csi(self) -> float:
        denom = self.hits + self.misses + self.false_alarms
        return self.hits / denom if denom else float("nan")

    @property
    def bias(self) -> float:
        denom = self.hits + self.misses
        return (self.hits + self.false_alarms) / denom if denom else float("nan")


def categorical_scores(obs_rain, pred_rain, thresholds=(1.0, 10.0, 50.0)) -> dict[float, dict]:
    """CSI and frequency BIAS per threshold; NaN flagged when no events."""
    out = {}
    for thr in thresholds:
        table = ContingencyTable.from_fields(obs_rain, pred_rain, thr)
        out[float(thr)] = {
            "csi": table.csi,
            "bias": table.bias,
            "no_events": table.no_events,
            "table": table,
        }
    return out


# ---------------------------------------------------------------------------
# radially averaged power spectral density
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectrumResult:
    """Mean spectral power per integer radial wavenumber bin."""

    wavelength_km: np.ndarray
    power: np.ndarray
    power_db: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.power.shape[0]


def rapsd(fld, resolution_km: float | None = None) -> SpectrumResult:
    """Radially averaged power spectral density of one 2-D field.

    The 2-D DFT power is binned by the nearest integer radial wavenumber
    (1..min(H,W)//2, DC excluded) and averaged per bin; the wavelength axis
    is domain_size / wavenumber in km.
    """
    x = _vals(fld)
    if x.ndim != 2 or min(x.shape) < 4:
        raise VerificationError(f"need a 2-D field with dims >= 4, got {x.shape}")
    if resolution_km is None:
        resolution_km = float(getattr(fld, "resolution_km", 1.0))
    h, w = x.shape
    power = np.abs(np.fft.fft2(x)) ** 2
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    r = np.round(np.hypot(ky[:, None], kx[None, :])).astype(np.int64)
    nbins = min(h, w) // 2
    flat_r = r.reshape(-1)
    flat_p = power.reshape(-1)
    sums = np.bincount(flat_r, weights=flat_p, minlength=nbins + 1)
    counts = np.bincount(flat_r, minlength=nbins + 1)
    mean = sums[1 : nbins + 1] / np.maximum(counts[1 : nbins + 1], 1)
    wavenumber = np.arange(1, nbins + 1, dtype=np.float64)
    with np.errstate(divide="ignore"):
        power_db = 10.0 * np.log10(mean)
    return SpectrumResult(
        wavelength_km=min(h, w) * resolution_km / wavenumber,
        power=mean,
        power_db=power_db,
    )


# ---------------------------------------------------------------------------
# ensemble scores
# ---------------------------------------------------------------------------


def crps_values(members: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Per-sample CRPS of an empirical ensemble against scalar observations.

    ``members`` is (n, ...) against obs of shape (...). Uses the exact
    identity mean|X - y| - 0.5 * mean|X - X'| over all ordered member
    pairs, which reduces to |x - y| for a single member.
    """
    members = np.asarray(members, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if members.ndim < 1 or members.shape[0] < 1:
        raise VerificationError("ensemble must have at least one member")
    if members.shape[1:] != obs.shape:
        raise VerificationError(f"members {members.shape} do not match obs {obs.shape}")
    flat = members.reshape(members.shape[0], -1)
    out = kernels.crps_pixels(flat, obs.reshape(-1))
    return out.reshape(obs.shape)


def crps(members: np.ndarray, obs: np.ndarray) -> float:
    """Mean CRPS over all samples."""
    return float(crps_values(members, obs).mean())


def crps_per_leadtime(ensemble: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """CRPS aggregated over pixels for each lead step.

    ``ensemble`` is (n_members, m, H, W); ``obs`` is (m, H, W).
    """
    ensemble = np.asarray(ensemble, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if ensemble.shape[1:] != obs.shape:
        raise VerificationError(f"ensemble {ensemble.shape} does not match obs {obs.shape}")
    return np.array([crps(ensemble[:, t], obs[t]) for t in range(obs.shape[0])])


@dataclass(frozen=True)
class RankHistogramResult:
    """Counts of the observation's rank among sorted ensemble members."""

    counts: np.ndarray
    kl_from_uniform: float
    n_samples: int

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / max(self.n_samples, 1)


def rank_histogram(
    members: np.ndarray,
    obs: np.ndarray,
    seed: int = 0,
    wet_mask: np.ndarray | None = None,
) -> RankHistogramResult:
    """Rank histogram over n_members + 1 ranks with randomized ties.

    ``members`` is (n_members, N) against N observations. The rank counts
    members strictly below the observation; ties are broken uniformly with
    a generator seeded by ``seed`` (one draw per sample, so the stream does
    not depend on the data). ``wet_mask`` optionally restricts the samples.
    The KL divergence from the uniform rank distribution uses natural log
    with empty bins contributing zero.
    """
    members = np.asarray(members, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if members.ndim != 2 or members.shape[1] != obs.shape[0]:
        raise VerificationError(f"members {members.shape} do not match obs {obs.shape}")
    if wet_mask is not None:
        wet_mask = np.asarray(wet_mask, dtype=bool).reshape(-1)
        members = members[:, wet_mask]
        obs = obs[wet_mask]
    n = members.shape[0]
    rng = np.random.default_rng(seed)
    tie_u = rng.random(obs.shape[0])
    ranks = kernels.ensemble_ranks(members, obs, tie_u)
    counts = np.bincount(ranks, minlength=n + 1)
    return RankHistogramResult(
        counts=counts,
        kl_from_uniform=kl_from_uniform(counts),
        n_samples=int(obs.shape[0]),
    )


def kl_from_uniform(counts: np.ndarray) -> float:
    """KL(observed rank frequencies || uniform), natural log, 0*log0 = 0."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    nz = p > 0
    return float((p[nz] * np.log(p[nz] * counts.shape[0])).sum())
