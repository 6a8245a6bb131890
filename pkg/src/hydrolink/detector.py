"""CIR change detection with a delay/gain compensation filter.

A reference response ``H0`` is allowed to absorb small delay shifts and a
complex gain through a short filter ``g`` expanded on complex exponentials
``exp(j 2 pi p k / K)`` for ``p = -P..P``. Whatever the filter cannot explain,
normalized by the reference energy, is the detection statistic.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.ndimage import median_filter

from .channelsim import CirSeries
from .errors import ConfigurationError, UndefinedReferenceError
from .gridmap import _atomic_write


@dataclass(frozen=True)
class DetectorParams:
    P: int = 15
    K: int = 2048
    epsilon: float = 1e-3
    threshold: float | None = None      # None: threshold_factor x running median
    threshold_factor: float = 5.0
    median_window: int = 101
    reference_index: int = 0

    def __post_init__(self):
        if self.P < 0 or self.K < 2 * self.P + 1:
            raise ConfigurationError(f"need K >= 2P+1, got P={self.P}, K={self.K}")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0")
        if self.median_window < 1:
            raise ConfigurationError("median_window must be >= 1")


@dataclass
class CompensationFit:
    coefficients: np.ndarray
    fitted: np.ndarray
    residual: np.ndarray


@dataclass
class DetectionSeries:
    statistic: np.ndarray
    detections: np.ndarray
    threshold: np.ndarray
    params: DetectorParams
    times: np.ndarray | None = None


def msd(h0, h) -> float:
    """Raw mean squared deviation ``sum |h0 - h|^2``."""
    h0 = np.asarray(h0)
    h = np.asarray(h)
    if h0.shape != h.shape:
        raise ValueError(f"length mismatch: {h0.shape} vs {h.shape}")
    return float(np.sum(np.abs(h0 - h) ** 2))


def msd_frequency(H0, H) -> float:
    """Frequency-domain MSD; equals :func:`msd` of the inverse DFTs (1/K factor)."""
    H0 = np.asarray(H0)
    return float(np.sum(np.abs(H0 - np.asarray(H)) ** 2) / H0.size)


def basis(H0, P: int) -> np.ndarray:
    """``G[k, p] = H0(k) exp(j 2 pi (p - P) k / K)`` for ``p = 0..2P``."""
    H0 = np.asarray(H0, dtype=complex)
    K = H0.size
    k = np.arange(K)
    return H0[:, None] * np.exp(2j * np.pi * np.outer(k, np.arange(-P, P + 1)) / K)


def solve_compensation(H0, H, params: DetectorParams) -> CompensationFit:
    """Ridge fit of ``H ~ G c`` with loading ``epsilon``."""
    H0 = np.asarray(H0, dtype=complex)
    H = np.asarray(H, dtype=complex)
    if H0.shape != H.shape:
        raise ValueError("H0 and H lengths differ")
    G = basis(H0, params.P)
    R = G.conj().T @ G
    b = G.conj().T @ H
    c = cho_solve(cho_factor(R + params.epsilon * np.eye(R.shape[0]), lower=True), b)
    fitted = G @ c
    return CompensationFit(c, fitted, fitted - H)


def _batch_residuals(H0: np.ndarray, Hs: np.ndarray, params: DetectorParams):
    """Residual energies for many ``H`` rows against one ``H0`` (one factorization)."""
    P = params.P
    G = basis(H0, P)
    R = G.conj().T @ G
    factor = cho_factor(R + params.epsilon * np.eye(2 * P + 1), lower=True)
    B = G.conj().T @ Hs.T                                    # (2P+1, N)
    C = cho_solve(factor, B)
    resid = G @ C - Hs.T
    return np.sum(np.abs(resid) ** 2, axis=0)


def normalized_msd(H0, H, params: DetectorParams) -> float:
    """Compensated residual energy over reference energy."""
    H0 = np.asarray(H0, dtype=complex)
    den = float(np.sum(np.abs(H0) ** 2))
    if den == 0.0:
        raise UndefinedReferenceError("reference response is identically zero")
    fit = solve_compensation(H0, H, params)
    return float(np.sum(np.abs(fit.residual) ** 2)) / den


def statistic_series(series: CirSeries, params: DetectorParams, chunk: int = 64) -> np.ndarray:
    if len(series) == 0:
        raise ConfigurationError("empty CIR series")
    if not 0 <= params.reference_index < len(series):
        raise ConfigurationError(f"reference_index {params.reference_index} out of range")
    taps = series.taps
    if taps.shape[1] > params.K:
        raise ConfigurationError(f"snapshot length {taps.shape[1]} exceeds K={params.K}")
    H0 = np.fft.fft(taps[params.reference_index], params.K)
    den = float(np.sum(np.abs(H0) ** 2))
    if den == 0.0:
        raise UndefinedReferenceError("reference snapshot is identically zero")
    out = np.empty(len(series))
    for a in range(0, len(series), chunk):
        Hs = np.fft.fft(taps[a:a + chunk], params.K, axis=1)
        out[a:a + chunk] = _batch_residuals(H0, Hs, params) / den
    return out


def running_median(x, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return median_filter(x, size=min(window, max(1, x.size)), mode="nearest")


def detect_series(series: CirSeries, params: DetectorParams = DetectorParams()) -> DetectionSeries:
    """Statistic per snapshot and the snapshots at or above threshold."""
    stat = statistic_series(series, params)
    if params.threshold is not None:
        thr = np.full(stat.size, float(params.threshold))
    else:
        thr = params.threshold_factor * running_median(stat, params.median_window)
    hit = stat >= thr
    hit[params.reference_index] = False
    return DetectionSeries(stat, np.flatnonzero(hit), thr, params, series.times.copy())


def detection_csv(ds: DetectionSeries) -> str:
    buf = io.StringIO()
    params = ",".join(f"{k}={v}" for k, v in asdict(ds.params).items())
    buf.write(f"# {params}\n")
    buf.write("packet,time,statistic,threshold,detected\n")
    flags = np.zeros(ds.statistic.size, dtype=int)
    flags[ds.detections] = 1
    times = ds.times if ds.times is not None else np.arange(ds.statistic.size, dtype=float)
    for i, (t, s, th, f) in enumerate(zip(times, ds.statistic, ds.threshold, flags)):
        buf.write(f"{i},{t:.6f},{s:.9e},{th:.9e},{f}\n")
    return buf.getvalue()


def save_detection_csv(path, ds: DetectionSeries):
    _atomic_write(Path(path), detection_csv(ds).encode())


def group_detections(indices, gap: int = 1):
    """Split sorted detection indices into runs separated by more than ``gap``."""
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(indices) > gap) + 1
    return np.split(indices, cuts)
