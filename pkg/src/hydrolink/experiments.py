"""Analysis helpers for the interpolation trials and the lake scenario."""

from __future__ import annotations

import io
import time
from dataclasses import dataclass

import numpy as np

from .channelsim import CirPlan, CirSeries, Trajectory, link_response, baseband_amplitudes
from .fieldinterp import InterpMode, interpolate_map, msd_interp
from .geoacoustics import Environment, Position, compute_arrivals
from .gridmap import GridMapSet, GridSpec


# crossing geometry


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def crossing_times(traj: Trajectory, a: Position, b: Position) -> np.ndarray:
    """Times at which the horizontal path crosses the segment ``a``-``b``."""
    p = traj.points[:, :2]
    t = traj.times
    A = np.array([a.x, a.y])
    B = np.array([b.x, b.y])
    out = []
    for k in range(len(t) - 1):
        p0, p1 = p[k], p[k + 1]
        d = p1 - p0
        e = B - A
        den = _cross2(d, e)
        if abs(den) < 1e-12:
            continue
        s = _cross2(A - p0, e) / den          # along the path leg
        u = _cross2(A - p0, d) / den          # along the link
        if 0 <= s < 1 and 0 <= u <= 1:
            out.append(t[k] + s * (t[k + 1] - t[k]))
    return np.array(out)


def distance_to_segment(points, a: Position, b: Position) -> np.ndarray:
    """Horizontal distance from (N, >=2) points to the segment ``a``-``b``."""
    p = np.atleast_2d(np.asarray(points, dtype=float))[:, :2]
    A = np.array([a.x, a.y])
    e = np.array([b.x, b.y]) - A
    u = np.clip((p - A) @ e / (e @ e), 0.0, 1.0)
    return np.hypot(*(p - (A + u[:, None] * e)).T)


@dataclass
class CrossingWindow:
    time: float
    lo: float
    hi: float
    sampled: bool
    nearest_distance: float
    peak_ratio: float = 0.0
    detected: bool = False


def crossing_windows(traj: Trajectory, a: Position, b: Position, epochs,
                     half_window: float = 3.0, sample_distance: float = 0.25) -> list:
    """One window per crossing; ``sampled`` when some epoch in it has the
    target within ``sample_distance`` of the link."""
    epochs = np.asarray(epochs, dtype=float)
    lo_t, hi_t = traj.span
    out = []
    for tc in crossing_times(traj, a, b):
        lo, hi = tc - half_window, tc + half_window
        sel = (epochs >= lo) & (epochs <= hi) & (epochs >= lo_t) & (epochs <= hi_t)
        dist = distance_to_segment(traj.positions(epochs[sel]), a, b) if np.any(sel) else []
        near = float(np.min(dist)) if len(dist) else np.inf
        out.append(CrossingWindow(float(tc), lo, hi, near <= sample_distance, near))
    return out


def score_windows(windows, statistic, epochs, factor: float = 5.0, exclude=(0,)) -> list:
    """Mark windows whose peak statistic reaches ``factor`` x the series median."""
    statistic = np.asarray(statistic, dtype=float)
    epochs = np.asarray(epochs, dtype=float)
    keep = np.ones(statistic.size, dtype=bool)
    keep[list(exclude)] = False
    med = float(np.median(statistic[keep]))
    for w in windows:
        sel = (epochs >= w.lo) & (epochs <= w.hi) & keep
        peak = float(statistic[sel].max()) if np.any(sel) else 0.0
        w.peak_ratio = peak / med if med > 0 else np.inf
        w.detected = w.peak_ratio >= factor
    return windows


def crossing_table_csv(rows) -> str:
    """Rows of (link, CrossingWindow)."""
    buf = io.StringIO()
    buf.write("link,crossing_time,window_lo,window_hi,sampled,nearest_m,peak_ratio,detected\n")
    for link, w in rows:
        buf.write(f"{link},{w.time:.3f},{w.lo:.3f},{w.hi:.3f},{int(w.sampled)},"
                  f"{w.nearest_distance:.4f},{w.peak_ratio:.4f},{int(w.detected)}\n")
    return buf.getvalue()


def echo_excess_delay(echo: CirSeries, direct_delay: float, fraction: float = 0.3) -> np.ndarray:
    """Excess delay of the earliest strong echo tap per snapshot.

    The echo onset is the first tap reaching ``fraction`` of that snapshot's
    strongest echo tap, refined to its local peak.
    """
    mag = np.abs(echo.taps)
    out = np.full(len(echo), np.nan)
    for i, row in enumerate(mag):
        top = row.max()
        if top == 0:
            continue
        k = int(np.flatnonzero(row >= fraction * top)[0])
        while k + 1 < row.size and row[k + 1] > row[k]:
            k += 1
        out[i] = echo.delay_offset + k / echo.tap_rate - direct_delay
    return out


# interpolation accuracy trials


def cir_from_arrays(delay, amplitude, carrier: float, plan: CirPlan, reference: float = 0.0):
    """Band-limited CIR taps of one arrival list."""
    g = baseband_amplitudes(delay, amplitude, 0.0, 0.0, carrier)
    H = link_response(delay, g, plan.k, plan.bin_spacing, reference)
    full = np.zeros(plan.taps, dtype=complex)
    full[plan.k % plan.taps] = H
    return np.fft.ifft(full)


def interpolation_trials(env: Environment, maps: GridMapSet, n_trials: int,
                         rng: np.random.Generator, range_bounds, depth_bounds, source_bounds,
                         carrier: float = 32000.0, plan: CirPlan = CirPlan(),
                         max_bounces: int = 6, modes=(InterpMode.PLANE, InterpMode.SPHERICAL)):
    """MSD_interp in dB per trial and mode against exact image-source fields.

    Returns a dict mode -> array of length ``n_trials``.
    """
    out = {InterpMode.parse(m): np.empty(n_trials) for m in modes}
    for n in range(n_trials):
        r = rng.uniform(*range_bounds)
        z = rng.uniform(*depth_bounds)
        zs = rng.uniform(*source_bounds)
        truth = compute_arrivals(env, Position(0, 0, zs), Position(r, 0, z), max_bounces)
        ref = float(truth.delay[0])
        h = cir_from_arrays(truth.delay, truth.amplitude, carrier, plan, ref)
        gmap, dD = maps.nearest(zs)
        for mode in out:
            b = interpolate_map(gmap, r, z, dD, mode)
            est = cir_from_arrays(b.delay[0], b.amplitude[0], carrier, plan, ref)
            out[mode][n] = msd_interp(est, h)
    return out


def success_rate(msd_db, threshold: float = -15.0) -> float:
    return float(np.mean(np.asarray(msd_db) <= threshold))


def cdf_csv(results: dict) -> str:
    buf = io.StringIO()
    buf.write("trial,mode,msd_db\n")
    for mode, vals in results.items():
        for i, v in enumerate(vals):
            buf.write(f"{i},{InterpMode.parse(mode).value},{v:.6f}\n")
    return buf.getvalue()


# field evaluation benchmark


def field_benchmark(env: Environment, spec: GridSpec, source_depth: float, ranges, depths,
                    max_bounces: int = 6, mode=InterpMode.SPHERICAL, direct_limit=None):
    """Seconds for direct per-sample image-source fields vs grid + batch interpolation.

    ``direct_limit`` caps how many samples the direct path evaluates; its time
    is scaled up linearly to the full sample count.
    """
    ranges = np.asarray(ranges, dtype=float)
    depths = np.asarray(depths, dtype=float)
    n = ranges.size
    m = n if direct_limit is None else min(n, direct_limit)
    src = Position(0.0, 0.0, source_depth)
    t0 = time.perf_counter()
    for i in range(m):
        compute_arrivals(env, src, Position(ranges[i], 0.0, depths[i]), max_bounces)
    direct = (time.perf_counter() - t0) * n / m

    from .gridmap import build_gridmap
    t0 = time.perf_counter()
    gmap = build_gridmap(env, source_depth, spec, max_bounces, on_degenerate="skip")
    for a in range(0, n, 8192):
        interpolate_map(gmap, ranges[a:a + 8192], depths[a:a + 8192], 0.0, mode)
    grid = time.perf_counter() - t0
    return direct, grid
