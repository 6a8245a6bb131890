"""Time-varying channel simulation for a source, a receiver and a moving target.

Three propagation links are evaluated per baseband sample or per CIR epoch:
link 1 runs source to receiver, link 2 source to target and link 3 target to
receiver. The target acts as a single-tap filter whose gain is the rigid
sphere target strength at the current bistatic angle.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import j1

from .errors import (CausalityError, CoverageError, DegenerateGeometryError, DomainError,
                     GridFormatError, GridTruncatedError, GridVersionError,
                     MissingArtifactError, OutOfBoundsError)
from .fieldinterp import FieldBatch, InterpMode, interpolate_map
from .geoacoustics import Arrival, ArrivalSet, Position
from .gridmap import GridMapSet, _atomic_write


# trajectories


class Trajectory:
    """Piecewise-linear path through timed waypoints.

    A single waypoint describes a stationary node valid for all times.
    """

    def __init__(self, waypoints: Sequence, sample_rate: float = 12000.0):
        if not waypoints:
            raise DomainError("trajectory needs at least one waypoint")
        times = np.array([float(t) for t, _ in waypoints])
        pts = np.array([p.as_array() if isinstance(p, Position) else np.asarray(p, float)
                        for _, p in waypoints], dtype=float).reshape(-1, 3)
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise DomainError("waypoint times must be strictly increasing")
        self.times = times
        self.points = pts
        self.sample_rate = float(sample_rate)

    @classmethod
    def static(cls, position: Position, sample_rate: float = 12000.0) -> "Trajectory":
        return cls([(0.0, position)], sample_rate)

    @property
    def is_static(self) -> bool:
        return self.times.size == 1

    @property
    def span(self):
        if self.is_static:
            return (-np.inf, np.inf)
        return (float(self.times[0]), float(self.times[-1]))

    def positions(self, t) -> np.ndarray:
        """Positions at times ``t`` as an (N, 3) array."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.is_static:
            return np.broadcast_to(self.points[0], (t.size, 3)).copy()
        lo, hi = self.span
        if t.size and (t.min() < lo - 1e-9 or t.max() > hi + 1e-9):
            raise DomainError(f"times [{t.min():.4g}, {t.max():.4g}] s exceed trajectory span "
                              f"[{lo:.4g}, {hi:.4g}] s")
        return np.stack([np.interp(t, self.times, self.points[:, k]) for k in range(3)], axis=-1)

    def position(self, t: float) -> Position:
        x, y, z = self.positions([t])[0]
        return Position(float(x), float(y), float(z))

    def speeds(self) -> np.ndarray:
        """Horizontal speed on each leg."""
        if self.is_static:
            return np.zeros(0)
        d = np.hypot(*np.diff(self.points[:, :2], axis=0).T)
        return d / np.diff(self.times)


def resample_trajectory(traj: Trajectory, rate: float, duration: float, start: float = 0.0):
    """Sample times and positions at ``rate`` over ``[start, start + duration)``."""
    n = int(round(duration * rate))
    lo, hi = traj.span
    if start < lo - 1e-9 or start + duration > hi + 1e-9:
        raise DomainError(f"duration {duration} s from {start} s exceeds trajectory span")
    times = start + np.arange(n) / rate
    return times, traj.positions(times)


# target model


@dataclass(frozen=True)
class TargetModel:
    radius: float
    wavelength: float

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("target radius must be > 0")
        if not self.wavelength > 0:
            raise DomainError("wavelength must be > 0")

    @classmethod
    def for_carrier(cls, radius: float, sound_speed: float, carrier: float) -> "TargetModel":
        return cls(radius, sound_speed / carrier)

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength


@dataclass(frozen=True)
class Beampattern:
    """Directional gain as a function of ray angle; omnidirectional by default."""

    gain: Optional[Callable] = None

    def __call__(self, angle):
        angle = np.asarray(angle, dtype=float)
        if self.gain is None:
            return np.ones_like(angle)
        g = np.asarray(self.gain(angle), dtype=float)
        if np.any(~np.isfinite(g)) or np.any(g < 0):
            raise DomainError("beampattern gain must be finite and >= 0")
        return g


OMNI = Beampattern()


def bistatic_angles(source, target, receiver) -> np.ndarray:
    """Vectorized bistatic angle for (N, 3) position arrays.

    The angle is measured at the target between the horizontal directions to
    the source and to the receiver: pi when the target sits on the
    source-receiver segment (forward scatter), 0 when source and receiver
    coincide (backscatter).
    """
    s = np.atleast_2d(np.asarray(source, dtype=float))[:, :2]
    t = np.atleast_2d(np.asarray(target, dtype=float))[:, :2]
    r = np.atleast_2d(np.asarray(receiver, dtype=float))[:, :2]
    u = s - t
    v = r - t
    nu = np.hypot(u[:, 0], u[:, 1])
    nv = np.hypot(v[:, 0], v[:, 1])
    if np.any(nu == 0) or np.any(nv == 0):
        raise DegenerateGeometryError("target horizontally coincides with source or receiver")
    cross = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
    dot = np.sum(u * v, axis=1)
    return np.abs(np.arctan2(cross, dot))


def bistatic_angle(source: Position, target: Position, receiver: Position) -> float:
    return float(bistatic_angles(source.as_array(), target.as_array(), receiver.as_array())[0])


def target_strength(alpha, model: TargetModel):
    """Rigid-sphere target strength coefficient at bistatic angle ``alpha``."""
    alpha = np.asarray(alpha, dtype=float)
    a, w = model.radius, model.wavenumber
    forward = alpha == np.pi
    safe = np.where(forward, 0.0, alpha)
    general = a * a / 4.0 * (1.0 + np.tan(safe / 2.0) ** 2 * j1(w * a * np.sin(safe)) ** 2)
    out = np.where(forward, a * a / 4.0 * (1.0 + (w * a) ** 2), general)
    return float(out) if out.ndim == 0 else out


def baseband_amplitude(arr: Arrival, source_pattern: Beampattern = OMNI,
                       receiver_pattern: Beampattern = OMNI, carrier: float = 32000.0) -> complex:
    """Complex baseband gain of one arrival."""
    g = float(source_pattern(arr.departure_angle)) * float(receiver_pattern(arr.incident_angle))
    return complex(g * arr.amplitude * _carrier_phase(arr.delay, carrier))


def baseband_amplitudes(delay, amplitude, departure, incident, carrier,
                        source_pattern: Beampattern = OMNI, receiver_pattern: Beampattern = OMNI):
    """Vectorized :func:`baseband_amplitude` over arrival arrays."""
    delay = np.asarray(delay, dtype=float)
    g = source_pattern(departure) * receiver_pattern(incident)
    return g * np.asarray(amplitude) * _carrier_phase(delay, carrier)


def _carrier_phase(delay, carrier):
    """``exp(-j 2 pi f_c tau)``, reducing ``tau`` modulo a carrier period first."""
    if carrier == 0:
        return np.ones_like(np.asarray(delay, dtype=float), dtype=complex)
    return np.exp(-2j * np.pi * carrier * np.mod(delay, 1.0 / carrier))


# signal path


def keys_weights(frac):
    """Cubic convolution weights (a = -0.5) for samples n-1, n, n+1, n+2."""
    t = np.asarray(frac, dtype=float)
    t2, t3 = t * t, t * t * t
    return np.stack([
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ], axis=-1)


def fractional_read(x: np.ndarray, pos) -> np.ndarray:
    """Evaluate ``x`` at fractional sample positions; outside samples read 0."""
    pos = np.asarray(pos, dtype=float)
    base = np.floor(pos).astype(np.int64)
    w = keys_weights(pos - base)
    out = np.zeros(pos.shape, dtype=np.result_type(x.dtype, np.complex128))
    n = x.size
    for k, off in enumerate((-1, 0, 1, 2)):
        idx = base + off
        ok = (idx >= 0) & (idx < n)
        out += np.where(ok, x[np.clip(idx, 0, n - 1)], 0) * w[..., k]
    return out


def _field_arrays(fields, n):
    if isinstance(fields, FieldBatch):
        return fields.delay, fields.amplitude, fields.departure_angle, fields.incident_angle
    if isinstance(fields, tuple):
        return fields
    sets = list(fields)
    if len(sets) != n:
        raise ValueError(f"{len(sets)} field entries for {n} samples")
    m = max((len(s) for s in sets), default=0)
    cols = [np.zeros((n, max(m, 1))) for _ in range(4)]
    cols[1] = cols[1].astype(complex)
    for i, s in enumerate(sets):
        k = len(s)
        cols[0][i, :k] = s.delay
        cols[1][i, :k] = s.amplitude
        cols[2][i, :k] = s.departure_angle
        cols[3][i, :k] = s.incident_angle
    return tuple(cols)


def link_output(signal, fields, carrier: float, rate: float,
                source_pattern: Beampattern = OMNI, receiver_pattern: Beampattern = OMNI,
                start_index: int = 0) -> np.ndarray:
    """Output of one propagation link driven by ``signal``.

    ``fields`` holds per-output-sample arrivals: a sequence of
    :class:`ArrivalSet`, a :class:`FieldBatch`, or a tuple of (N, M) arrays
    ``(delay, amplitude, departure, incident)``. ``start_index`` is the input
    sample index of the first output sample.
    """
    x = np.asarray(signal, dtype=complex)
    n = x.size - start_index
    delay, amp, dep, inc = _field_arrays(fields, n)
    delay = np.asarray(delay, dtype=float)
    if np.any(delay < 0):
        raise CausalityError("negative propagation delay")
    gains = baseband_amplitudes(delay, amp, dep, inc, carrier, source_pattern, receiver_pattern)
    pos = (start_index + np.arange(delay.shape[0]))[:, None] - delay * rate
    return np.sum(gains * fractional_read(x, pos), axis=1)


def received_signal(r1, r3) -> np.ndarray:
    r1 = np.asarray(r1)
    r3 = np.asarray(r3)
    if r1.shape != r3.shape:
        raise ValueError(f"link outputs differ in length: {r1.shape} vs {r3.shape}")
    return r1 + r3


# frequency response and CIR


@dataclass(frozen=True)
class CirPlan:
    """Frequency grid and tap layout shared by every snapshot of a run.

    ``bins`` two-sided bins ``k = -bins/2 .. bins/2`` at ``bin_spacing`` Hz
    are placed into a ``taps``-point inverse DFT, so taps are spaced at
    ``taps * bin_spacing`` Hz.
    """

    bins: int = 256
    bin_spacing: float = 6000.0 / 256
    taps: int = 512

    def __post_init__(self):
        if self.bins % 2 or self.bins < 2:
            raise DomainError("bins must be even and >= 2")
        if self.taps < self.bins + 1:
            raise DomainError("tap count must exceed the bin count")

    @property
    def k(self) -> np.ndarray:
        return np.arange(-self.bins // 2, self.bins // 2 + 1)

    @property
    def tap_rate(self) -> float:
        return self.taps * self.bin_spacing

    @property
    def bandwidth(self) -> float:
        return self.bins * self.bin_spacing


def link_response(delay, gains, k, bin_spacing, reference: float = 0.0) -> np.ndarray:
    """``sum_m gain_m exp(-j 2 pi k df (tau_m - reference))`` along the last axis."""
    delay = np.asarray(delay, dtype=float)
    gains = np.asarray(gains, dtype=complex)
    phase = -2j * np.pi * bin_spacing * (delay - reference)
    return np.einsum("...m,...km->...k", gains, np.exp(phase[..., None, :] * k[:, None]))


def channel_frequency_response(fields1: ArrivalSet, fields2: Optional[ArrivalSet],
                               fields3: Optional[ArrivalSet], sigma: float, carrier: float,
                               bins: int, bin_spacing: float, reference: float = 0.0,
                               source_pattern: Beampattern = OMNI,
                               receiver_pattern: Beampattern = OMNI) -> np.ndarray:
    """Two-sided response ``H(k) = H1 + sigma H2 H3`` for ``k = -bins/2 .. bins/2``.

    ``reference`` is subtracted from the delays of link 1 and link 3 so the
    CIR window can start just before the first arrival.
    """
    k = np.arange(-bins // 2, bins // 2 + 1)

    def resp(f, ref, sp, rp):
        g = baseband_amplitudes(f.delay, f.amplitude, f.departure_angle, f.incident_angle,
                                carrier, sp, rp)
        return link_response(f.delay, g, k, bin_spacing, ref)

    h = resp(fields1, reference, source_pattern, receiver_pattern)
    if sigma != 0 and fields2 is not None and fields3 is not None:
        h = h + sigma * resp(fields2, 0.0, source_pattern, OMNI) * resp(
            fields3, reference, OMNI, receiver_pattern)
    return h


def to_fft_order(two_sided: np.ndarray, size: int) -> np.ndarray:
    """Place bins ``-B/2..B/2`` (last axis) into a length-``size`` DFT vector."""
    two_sided = np.asarray(two_sided)
    b = two_sided.shape[-1] - 1
    k = np.arange(-b // 2, b // 2 + 1)
    out = np.zeros(two_sided.shape[:-1] + (size,), dtype=complex)
    out[..., k % size] = two_sided
    return out


@dataclass
class CirSnapshot:
    time: float
    taps: np.ndarray
    bin_spacing: float
    tap_rate: float = 12000.0
    delay_offset: float = 0.0

    @property
    def delays(self) -> np.ndarray:
        """Absolute delay of each tap."""
        return self.delay_offset + np.arange(self.taps.size) / self.tap_rate


def cir_snapshot(H, size: Optional[int] = None, time: float = 0.0, bin_spacing: float = 1.0,
                 delay_offset: float = 0.0) -> CirSnapshot:
    """Inverse DFT (1/K normalization) of a response given in FFT order.

    With ``size`` larger than ``len(H)`` the response must be two-sided
    (``-B/2..B/2``) and is zero-padded into FFT order first.
    """
    H = np.asarray(H, dtype=complex)
    if size is not None and size != H.size:
        H = to_fft_order(H, size)
    taps = np.fft.ifft(H)
    return CirSnapshot(time, taps, bin_spacing, H.size * bin_spacing, delay_offset)


class CirSeries:
    """Time-ordered CIR snapshots of one link at a uniform cadence."""

    def __init__(self, times, taps, bin_spacing: float, tap_rate: float,
                 delay_offset: float = 0.0, link: str = "", metadata: Optional[dict] = None):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.taps = np.asarray(taps, dtype=complex).reshape(self.times.size, -1)
        if self.times.size > 2:
            d = np.diff(self.times)
            if np.ptp(d) > 1e-9 * max(1.0, abs(d[0])):
                raise DomainError("snapshot cadence must be uniform")
        self.bin_spacing = float(bin_spacing)
        self.tap_rate = float(tap_rate)
        self.delay_offset = float(delay_offset)
        self.link = link
        self.metadata = dict(metadata or {})

    def __len__(self):
        return self.times.size

    def __getitem__(self, i) -> CirSnapshot:
        return CirSnapshot(float(self.times[i]), self.taps[i], self.bin_spacing,
                           self.tap_rate, self.delay_offset)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_snapshots(cls, snapshots: Sequence[CirSnapshot], link: str = "", metadata=None):
        s0 = snapshots[0]
        return cls([s.time for s in snapshots], np.stack([s.taps for s in snapshots]),
                   s0.bin_spacing, s0.tap_rate, s0.delay_offset, link, metadata)

    def with_taps(self, taps) -> "CirSeries":
        return CirSeries(self.times, taps, self.bin_spacing, self.tap_rate, self.delay_offset,
                         self.link, self.metadata)


def add_cir_noise(taps, msd_db: float, rng: np.random.Generator) -> np.ndarray:
    """Complex white Gaussian noise per tap at ``msd_db`` relative to each snapshot's energy."""
    taps = np.asarray(taps, dtype=complex)
    energy = np.sum(np.abs(taps) ** 2, axis=-1, keepdims=True)
    var = energy * 10.0 ** (msd_db / 10.0) / taps.shape[-1]
    noise = rng.standard_normal(taps.shape) + 1j * rng.standard_normal(taps.shape)
    return taps + noise * np.sqrt(var / 2.0)


# file formats

_SIG_MAGIC = b"HSIG"
_CIR_MAGIC = b"HCIR"
_VERSION = 1


def encode_signal(samples, rate: float, carrier: float) -> bytes:
    x = np.asarray(samples, dtype=np.complex128)
    head = _SIG_MAGIC + struct.pack("<HddQ", _VERSION, rate, carrier, x.size)
    return head + x.astype("<c16").tobytes()


def _unpack_header(fmt, data):
    if len(data) < 4 + struct.calcsize(fmt):
        raise GridTruncatedError("file ends inside its header")
    return struct.unpack_from(fmt, data, 4)


def decode_signal(data: bytes):
    """Return ``(samples, rate, carrier)``."""
    if data[:4] != _SIG_MAGIC:
        raise GridFormatError("not a signal file")
    version, rate, carrier, n = _unpack_header("<HddQ", data)
    if version != _VERSION:
        raise GridVersionError(f"unsupported signal version {version}")
    off = 4 + struct.calcsize("<HddQ")
    body = data[off:]
    if len(body) < 16 * n:
        raise GridTruncatedError("signal payload truncated")
    if len(body) != 16 * n:
        raise GridFormatError("signal payload length mismatch")
    return np.frombuffer(body, dtype="<c16").astype(np.complex128), rate, carrier


def save_signal(path, samples, rate: float, carrier: float):
    _atomic_write(Path(path), encode_signal(samples, rate, carrier))


def load_signal(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"signal file not found: {path}")
    return decode_signal(path.read_bytes())


def encode_cir_series(series: CirSeries) -> bytes:
    meta = json.dumps(series.metadata, sort_keys=True).encode()
    link = series.link.encode()
    head = _CIR_MAGIC + struct.pack("<HQQdddHI", _VERSION, len(series), series.taps.shape[1],
                                    series.bin_spacing, series.tap_rate, series.delay_offset,
                                    len(link), len(meta))
    body = b"".join(
        struct.pack("<d", t) + row.astype("<c16").tobytes()
        for t, row in zip(series.times, series.taps))
    return head + link + meta + body


def decode_cir_series(data: bytes) -> CirSeries:
    if data[:4] != _CIR_MAGIC:
        raise GridFormatError("not a CIR series file")
    fmt = "<HQQdddHI"
    version, n, taps, df, rate, offset, nlink, nmeta = _unpack_header(fmt, data)
    if version != _VERSION:
        raise GridVersionError(f"unsupported CIR version {version}")
    off = 4 + struct.calcsize(fmt)
    rec = np.dtype([("t", "<f8"), ("h", "<c16", (taps,))])
    if len(data) < off + nlink + nmeta + rec.itemsize * n:
        raise GridTruncatedError("CIR series file truncated")
    link = data[off:off + nlink].decode()
    off += nlink
    meta = json.loads(data[off:off + nmeta].decode())
    off += nmeta
    if len(data) - off != rec.itemsize * n:
        raise GridFormatError("CIR payload length mismatch")
    arr = np.frombuffer(data[off:], dtype=rec)
    return CirSeries(arr["t"].astype(float), arr["h"].astype(complex), df, rate, offset, link, meta)


def save_cir_series(path, series: CirSeries):
    _atomic_write(Path(path), encode_cir_series(series))


def load_cir_series(path) -> CirSeries:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"CIR series not found: {path}")
    return decode_cir_series(path.read_bytes())


def cir_magnitude_csv(series: CirSeries) -> str:
    """Magnitude matrix: one row per snapshot, first column time."""
    lines = ["time," + ",".join(f"tap{i}" for i in range(series.taps.shape[1]))]
    for t, row in zip(series.times, np.abs(series.taps)):
        lines.append(f"{t:.6f}," + ",".join(f"{v:.6e}" for v in row))
    return "\n".join(lines) + "\n"


# link simulation


@dataclass
class LinkGeometry:
    """Everything :func:`simulate_link` needs about one source-receiver pair."""

    source: Trajectory
    receiver: Trajectory
    target: Optional[Trajectory] = None
    target_model: Optional[TargetModel] = None
    sigma_override: Optional[float] = None
    source_pattern: Beampattern = OMNI
    receiver_pattern: Beampattern = OMNI


@dataclass
class LinkFields:
    """Interpolated per-sample fields of the three links (links 2-3 may be None)."""

    link1: FieldBatch
    link2: Optional[FieldBatch]
    link3: Optional[FieldBatch]
    sigma: np.ndarray


@dataclass
class SimulationResult:
    cirs: CirSeries
    signal: Optional[np.ndarray] = None
    echo_cirs: Optional[CirSeries] = None
    clean_cirs: Optional[CirSeries] = None
    sigma: Optional[np.ndarray] = field(default=None, repr=False)


def _field_batch(maps: GridMapSet, src: np.ndarray, rcv: np.ndarray, mode, what: str,
                 offset: int = 0) -> FieldBatch:
    """Interpolated fields for aligned (N, 3) source and receiver positions."""
    rng = np.hypot(*(rcv[:, :2] - src[:, :2]).T)
    zs = src[:, 2]
    # group samples by their nearest map so each group is one vectorized call
    depths = np.array(maps.source_depths)
    choice = np.empty(zs.size, dtype=np.int64)
    uniq, inv = np.unique(zs, return_inverse=True)
    for u_i, z in enumerate(uniq):
        gmap, _ = maps.nearest(float(z))
        choice[inv == u_i] = int(np.flatnonzero(depths == gmap.source_depth)[0])
    parts = {}
    for m in np.unique(choice):
        idx = np.flatnonzero(choice == m)
        gmap = maps[float(depths[m])]
        try:
            parts[m] = (idx, interpolate_map(gmap, rng[idx], rcv[idx, 2],
                                             zs[idx] - gmap.source_depth, mode))
        except OutOfBoundsError as exc:
            bad = _first_outside(gmap, rng[idx], rcv[idx, 2])
            k = int(idx[bad]) + offset if bad is not None else None
            raise CoverageError(f"{what}: {exc} (sample {k})", sample_index=k) from exc
    width = max(b.delay.shape[1] for _, b in parts.values())
    n = zs.size

    def alloc(dtype):
        return np.zeros((n, width), dtype=dtype)

    cols = {name: alloc(dt) for name, dt in (
        ("delay", float), ("amplitude", complex), ("departure_angle", float),
        ("incident_angle", float), ("surface_bounces", np.uint16),
        ("bottom_bounces", np.uint16), ("mask", bool))}
    weights = np.zeros((n, 4))
    for idx, b in parts.values():
        w = b.delay.shape[1]
        for name, arr in cols.items():
            arr[idx, :w] = getattr(b, name)
        # padded columns repeat the last delay so nothing looks acausal
        cols["delay"][idx, w:] = b.delay[:, -1:]
        weights[idx] = b.weights
    return FieldBatch(**cols, weights=weights)


def _first_outside(gmap, ranges, depths):
    r, d = gmap.ranges, gmap.depths
    bad = (ranges < r[0] - 1e-9) | (ranges > r[-1] + 1e-9) | (depths < d[0] - 1e-9) | (
        depths > d[-1] + 1e-9)
    hits = np.flatnonzero(bad)
    return int(hits[0]) if hits.size else None


def link_fields(maps: GridMapSet, geom: LinkGeometry, times, mode=InterpMode.SPHERICAL,
                sample_offset: int = 0) -> LinkFields:
    """Interpolate all link fields and the target gain at ``times``."""
    mode = InterpMode.parse(mode)
    times = np.asarray(times, dtype=float)
    src = geom.source.positions(times)
    rcv = geom.receiver.positions(times)
    f1 = _field_batch(maps, src, rcv, mode, "link 1", sample_offset)
    if geom.target is None:
        return LinkFields(f1, None, None, np.zeros(times.size))
    tgt = geom.target.positions(times)
    if geom.sigma_override is not None:
        sigma = np.full(times.size, float(geom.sigma_override))
    else:
        if geom.target_model is None:
            raise DomainError("target present without a target model or sigma override")
        sigma = np.asarray(target_strength(bistatic_angles(src, tgt, rcv), geom.target_model),
                           dtype=float).reshape(-1)
    if np.all(sigma == 0):
        return LinkFields(f1, None, None, sigma)
    f2 = _field_batch(maps, src, tgt, mode, "link 2", sample_offset)
    f3 = _field_batch(maps, tgt, rcv, mode, "link 3", sample_offset)
    return LinkFields(f1, f2, f3, sigma)


def _gains(b: FieldBatch, carrier, sp=OMNI, rp=OMNI):
    return baseband_amplitudes(b.delay, b.amplitude, b.departure_angle, b.incident_angle,
                               carrier, sp, rp)


def cir_from_fields(fields: LinkFields, plan: CirPlan, carrier: float, reference: float,
                    geom: Optional[LinkGeometry] = None, echo_only: bool = False) -> np.ndarray:
    """CIR taps (N, plan.taps) for every entry of ``fields``."""
    sp = geom.source_pattern if geom else OMNI
    rp = geom.receiver_pattern if geom else OMNI
    k = plan.k
    n = fields.link1.delay.shape[0]
    H = np.zeros((n, k.size), dtype=complex)
    if not echo_only:
        H += link_response(fields.link1.delay, _gains(fields.link1, carrier, sp, rp), k,
                           plan.bin_spacing, reference)
    if fields.link2 is not None:
        H2 = link_response(fields.link2.delay, _gains(fields.link2, carrier, sp, OMNI), k,
                           plan.bin_spacing)
        H3 = link_response(fields.link3.delay, _gains(fields.link3, carrier, OMNI, rp), k,
                           plan.bin_spacing, reference)
        H += fields.sigma[:, None] * H2 * H3
    return np.fft.ifft(to_fft_order(H, plan.taps), axis=-1)


def packet_epochs(n_packets: int, period: float, duration: float, offset: float = 0.0):
    """Packet centre times."""
    return offset + np.arange(n_packets) * period + duration / 2.0


def delay_reference(maps: GridMapSet, geom: LinkGeometry, time: float, rate: float,
                    precursor: float = 2e-3, mode=InterpMode.SPHERICAL) -> float:
    """CIR window start: earliest link-1 arrival minus ``precursor``, on the tap grid."""
    f = link_fields(maps, LinkGeometry(geom.source, geom.receiver), [time], mode).link1
    first = float(f.delay[0][f.mask[0]].min())
    return max(0.0, np.round((first - precursor) * rate) / rate)


def simulate_link(maps: GridMapSet, geom: LinkGeometry, epochs, *, carrier: float = 32000.0,
                  plan: CirPlan = CirPlan(), mode=InterpMode.SPHERICAL,
                  noise_msd_db: Optional[float] = None, rng: Optional[np.random.Generator] = None,
                  reference: Optional[float] = None, keep_echo: bool = False,
                  signal=None, signal_rate: float = 12000.0, signal_windows=None,
                  link: str = "", metadata: Optional[dict] = None) -> SimulationResult:
    """Simulate one link: CIR snapshots at ``epochs`` and optionally the received signal.

    ``signal`` is the transmitted baseband stream at ``signal_rate``; when
    given, the received signal is synthesized over ``signal_windows`` (pairs
    of sample indices, default the whole stream) and is zero elsewhere.
    """
    epochs = np.asarray(epochs, dtype=float)
    if reference is None:
        reference = delay_reference(maps, geom, float(epochs[0]), plan.tap_rate, mode=mode)
    fields = link_fields(maps, geom, epochs, mode)
    clean = cir_from_fields(fields, plan, carrier, reference, geom)
    meta = {"carrier": carrier, "mode": InterpMode.parse(mode).value}
    meta.update(metadata or {})
    clean_series = CirSeries(epochs, clean, plan.bin_spacing, plan.tap_rate, reference, link, meta)
    if noise_msd_db is not None:
        if rng is None:
            raise DomainError("noise injection needs a seeded generator")
        noisy = add_cir_noise(clean, noise_msd_db, rng)
        meta = dict(meta, noise_msd_db=noise_msd_db)
        cirs = CirSeries(epochs, noisy, plan.bin_spacing, plan.tap_rate, reference, link, meta)
    else:
        cirs = clean_series
    echo = None
    if keep_echo:
        echo = clean_series.with_taps(cir_from_fields(fields, plan, carrier, reference, geom,
                                                      echo_only=True))
    y = None
    if signal is not None:
        y = synthesize_received(maps, geom, signal, signal_rate, carrier, mode, signal_windows)
    return SimulationResult(cirs, y, echo, clean_series, fields.sigma)


def synthesize_received(maps: GridMapSet, geom: LinkGeometry, signal, rate: float,
                        carrier: float, mode=InterpMode.SPHERICAL, windows=None,
                        chunk: int = 4096) -> np.ndarray:
    """Received baseband samples ``y = r1 + r3`` with ``r3`` fed by ``sigma * r2``."""
    x = np.asarray(signal, dtype=complex)
    y = np.zeros(x.size, dtype=complex)
    if windows is None:
        windows = [(0, x.size)]
    for lo, hi in windows:
        lo, hi = max(0, int(lo)), min(x.size, int(hi))
        for a in range(lo, hi, chunk):
            b = min(hi, a + chunk)
            t = np.arange(a, b) / rate
            f = link_fields(maps, geom, t, mode, sample_offset=a)
            r1 = _link_chunk(x, f.link1, a, rate, carrier, geom.source_pattern,
                             geom.receiver_pattern)
            if f.link2 is None:
                y[a:b] = r1
                continue
            r3 = _cascade(x, maps, geom, f, a, b, rate, carrier, mode)
            y[a:b] = received_signal(r1, r3)
    return y


def _link_chunk(x, batch: FieldBatch, start, rate, carrier, sp, rp):
    g = baseband_amplitudes(batch.delay, batch.amplitude, batch.departure_angle,
                            batch.incident_angle, carrier, sp, rp)
    if np.any(batch.delay < 0):
        raise CausalityError("negative propagation delay")
    pos = (start + np.arange(batch.delay.shape[0]))[:, None] - batch.delay * rate
    return np.sum(g * fractional_read(x, pos), axis=1)


def _cascade(x, maps, geom, f: LinkFields, a, b, rate, carrier, mode):
    """Link 3 output for samples [a, b) given its input ``sigma * r2``.

    Link 3 reads its input up to ``max delay`` samples into the past, so r2 is
    evaluated on the span it needs.
    """
    d3 = f.link3.delay
    lo = max(0, int(np.floor(a - d3.max() * rate)) - 2)
    hi = b + 2
    t = np.arange(lo, hi) / rate
    f_hist = link_fields(maps, geom, np.clip(t, *_span(geom, t)), mode, sample_offset=lo)
    r2 = _link_chunk(x, f_hist.link2, lo, rate, carrier, geom.source_pattern, OMNI)
    u = np.zeros(x.size, dtype=complex)
    u[lo:min(hi, x.size)] = (f_hist.sigma * r2)[: min(hi, x.size) - lo]
    return _link_chunk(u, f.link3, a, rate, carrier, OMNI, geom.receiver_pattern)


def _span(geom: LinkGeometry, t):
    lo, hi = -np.inf, np.inf
    for tr in (geom.source, geom.receiver, geom.target):
        if tr is not None:
            a, b = tr.span
            lo, hi = max(lo, a), min(hi, b)
    return lo, hi
