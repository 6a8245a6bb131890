"""Acoustic field interpolation from grid maps.

The field at an off-grid receiver is the union of the arrivals stored at
the four surrounding lattice points, each with its delays corrected for the
receiver offset and its amplitudes scaled by bilinear weights. A source
depth that has no map of its own borrows the nearest map after a per-path
delay correction. Two correction schemes are provided:

* plane wave: first-order travel-time change along the ray direction;
* spherical wave: exact cosine-rule distance to the image source (receiver
  offset) or image receiver (source offset).

Lattice coordinates are (range, depth) with depth positive downward. Ray
angles are positive for upward propagation, so a receiver offset enters the
plane-wave correction through its *height* change, ``-(depth - depth_b)``.

Corner labels follow the bilinear weight table::

    a1 (1,1): lower range,  shallower depth   weight (1-w1)(1-w2)
    a2 (1,2): lower range,  deeper depth      weight (1-w1) w2
    a3 (2,2): higher range, deeper depth      weight w1 w2
    a4 (2,1): higher range, shallower depth   weight w1 (1-w2)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, GeometryError, OutOfBoundsError, UndefinedReferenceError
from .geoacoustics import ArrivalSet, Position
from .gridmap import GridMap, GridMapSet

CORNERS = ((1, 1), (1, 2), (2, 2), (2, 1))
MSD_FLOOR_DB = -300.0
_SNAP = 1e-9


class InterpMode(str, enum.Enum):
    PLANE = "plane"
    SPHERICAL = "spherical"

    @classmethod
    def parse(cls, value) -> "InterpMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown interpolation mode {value!r}") from None


@dataclass
class InterpolatedField:
    """Interpolated arrivals plus the bilinear corner weights (a1..a4)."""

    arrivals: ArrivalSet
    weights: np.ndarray
    corners: tuple
    source_offset: float = 0.0


# per-path delay corrections


def plane_receiver_delay(delay, incident_angle, d_range, d_depth, c):
    """Plane-wave travel-time change for a receiver moved by (d_range, d_depth)."""
    d_height = -np.asarray(d_depth, dtype=float)
    return delay + (d_range * np.cos(incident_angle) + d_height * np.sin(incident_angle)) / c


def corner_gamma(theta, beta, corner):
    """Angle between the ray back toward the image source and the offset.

    ``theta`` is the incident angle and ``beta = atan(|dy|/|dx|)``; the case
    table depends on which corner of the cell the offset starts from.
    """
    theta = np.asarray(theta, dtype=float)
    if corner == (1, 1):
        s = theta + beta
        return np.where(theta < 0, np.pi - np.sign(s) * s, np.pi - s)
    if corner == (1, 2):
        s = theta - beta
        return np.where(theta > 0, np.pi - np.sign(s) * s, np.pi + s)
    if corner == (2, 1):
        s = theta - beta
        return np.where(theta > 0, np.sign(s) * s, s)
    if corner == (2, 2):
        s = theta + beta
        return np.where(theta < 0, np.sign(s) * s, s)
    raise ValueError(f"unknown corner {corner}")


def spherical_receiver_delay(delay, incident_angle, d_range, d_depth, c, corner):
    """Cosine-rule travel-time change for a receiver moved from a corner."""
    d_range = np.abs(np.asarray(d_range, dtype=float))
    d_depth = np.abs(np.asarray(d_depth, dtype=float))
    d1 = c * np.asarray(delay, dtype=float)
    d2 = np.hypot(d_range, d_depth)
    beta = np.arctan2(d_depth, d_range)
    gamma = corner_gamma(incident_angle, beta, corner)
    # d3 - d1 without cancellation
    num = d2 * d2 - 2.0 * d1 * d2 * np.cos(gamma)
    d3 = np.sqrt(np.maximum(d1 * d1 + num, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        step = np.where(d2 > 0, num / (d3 + d1), 0.0)
    return delay + step / c


def _spherical_receiver_signed(delay, sin_i, cos_i, d_range, d_height, c):
    """Same cosine rule as :func:`spherical_receiver_delay` with signed offsets.

    Every corner case of the gamma table reduces to
    ``d2 cos(gamma) = -(d_range cos(theta) + d_height sin(theta))``, so no
    angles need to be formed.
    """
    d1 = c * delay
    proj = d_range * cos_i + d_height * sin_i
    num = d_range * d_range + d_height * d_height + 2.0 * d1 * proj
    d3 = np.sqrt(np.maximum(d1 * d1 + num, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        step = np.where(d3 + d1 > 0, num / (d3 + d1), 0.0)
    return delay + step / c


def plane_source_adjust(arrivals: ArrivalSet, delta_depth: float, c: float,
                        sort: bool = True) -> ArrivalSet:
    """Shift a source ``delta_depth`` metres deeper, plane-wave approximation.

    With angles positive upward, moving the source down lengthens upward
    paths: ``tau' = tau + delta_depth * sin(theta_d) / c``.
    """
    if delta_depth == 0:
        return arrivals
    delay = arrivals.delay + delta_depth * np.sin(arrivals.departure_angle) / c
    return arrivals.replace(delay=delay, sort=sort)


def spherical_source_adjust(arrivals: ArrivalSet, delta_depth: float, c: float,
                            literal: bool = False, sort: bool = True) -> ArrivalSet:
    """Shift a source ``delta_depth`` metres deeper using the cosine rule.

    The distance from the moved source to the image receiver and the new
    incident angle are both exact. With ``literal=True`` the distance uses the
    printed two-branch form (unsigned displacement, incident angle in the
    cosine), exact only when the source moves toward the receiver side of the
    ray, and the incident angle is rotated by the cosine-rule angle between
    old and new rays in the direction ``sign(theta_i) * sign(dtau)``.
    """
    if delta_depth == 0 or len(arrivals) == 0:
        return arrivals
    dD = np.full(len(arrivals), float(delta_depth))
    delay, theta = _spherical_source_array(arrivals.delay, arrivals.departure_angle,
                                           arrivals.incident_angle, dD, c,
                                           np.ones(len(arrivals), bool), literal)
    return arrivals.replace(delay=delay, incident_angle=theta, sort=sort)


# lattice location


def _axis_locate(values: np.ndarray, q: np.ndarray, name: str):
    lo, n = values[0], values.size
    q = np.asarray(q, dtype=float)
    span = values[-1] - lo
    tol = _SNAP * max(1.0, abs(values[-1]))
    bad = (q < lo - tol) | (q > values[-1] + tol)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise OutOfBoundsError(
            f"{name} {q.flat[k]:.6g} m outside lattice [{lo:.6g}, {values[-1]:.6g}]")
    if n == 1:
        return np.zeros(q.shape, dtype=np.int64), np.zeros(q.shape)
    step = span / (n - 1)
    t = (q - lo) / step
    near = np.round(t)
    t = np.where(np.abs(t - near) < _SNAP, near, t)
    t = np.clip(t, 0.0, n - 1)
    i = np.minimum(np.floor(t).astype(np.int64), n - 2)
    return i, t - i


def bilinear_weights(w1, w2):
    """Corner weights a1..a4 stacked on the last axis."""
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    return np.stack([(1 - w1) * (1 - w2), (1 - w1) * w2, w1 * w2, w1 * (1 - w2)], axis=-1)


@dataclass
class FieldBatch:
    """Interpolated arrivals for many query points, padded to a common width.

    Padding and zero-weight corner entries are flagged off in ``mask``; they
    carry zero amplitude so CIR synthesis may ignore the mask.
    """

    delay: np.ndarray           # (N, P)
    amplitude: np.ndarray       # (N, P) complex, weights applied
    departure_angle: np.ndarray
    incident_angle: np.ndarray
    surface_bounces: np.ndarray
    bottom_bounces: np.ndarray
    mask: np.ndarray
    weights: np.ndarray         # (N, 4)

    def __len__(self):
        return self.delay.shape[0]

    def arrival_set(self, n: int) -> ArrivalSet:
        keep = self.mask[n]
        return ArrivalSet(self.delay[n, keep], self.amplitude[n, keep],
                          self.departure_angle[n, keep], self.incident_angle[n, keep],
                          self.surface_bounces[n, keep], self.bottom_bounces[n, keep])


def _spherical_source_array(tau, thd, thi, dD, c, moved, literal):
    d1 = c * tau
    if np.any(d1[moved] <= np.abs(dD[moved])):
        raise GeometryError("source displacement reaches an image receiver (d1 <= |dD|)")
    if literal:
        cosang = np.where(thd > 0, np.cos(np.pi / 2 - thi), np.cos(np.pi / 2 + thi))
        num = dD * dD - 2.0 * d1 * np.abs(dD) * cosang
    else:
        num = dD * dD + 2.0 * d1 * dD * np.sin(thd)
    d2 = np.sqrt(np.maximum(d1 * d1 + num, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        dtau = num / (d2 + d1) / c
        cosg = (d1 * d1 + d2 * d2 - dD * dD) / (2.0 * d1 * d2)
    if literal:
        gamma = np.arccos(np.clip(np.nan_to_num(cosg, nan=1.0), -1.0, 1.0))
        theta_new = thi + np.sign(thi) * np.sign(dtau) * gamma
    else:
        # unfolded ray: the image source moves vertically by -dD (even parity)
        # or +dD (odd parity); parity shows as theta_i == +-theta_d
        parity = np.where(np.abs(thi - thd) <= np.abs(thi + thd), 1.0, -1.0)
        theta_new = np.arctan2(d1 * np.sin(thi) + parity * dD, d1 * np.cos(thi))
    return np.where(moved, tau + dtau, tau), np.where(moved, theta_new, thi)


def interpolate_map(gmap: GridMap, ranges, depths, delta_depth=0.0, mode=InterpMode.SPHERICAL,
                    source_literal: bool = False) -> FieldBatch:
    """Vectorized field interpolation on one map.

    ``ranges``/``depths`` give receiver positions relative to the map's source;
    ``delta_depth`` is the true source depth minus the map's source depth.
    Steps: source-depth delay correction (and, for spherical mode, incident
    angle rotation), then receiver-offset correction per corner, then
    bilinear amplitude weighting.
    """
    mode = InterpMode.parse(mode)
    c = gmap.env.sound_speed
    ranges, depths, dD = (a.ravel() for a in np.broadcast_arrays(
        np.asarray(ranges, dtype=float), np.asarray(depths, dtype=float),
        np.asarray(delta_depth, dtype=float)))
    lat_r, lat_d = gmap.ranges, gmap.depths
    i, w1 = _axis_locate(lat_r, ranges, "range")
    j, w2 = _axis_locate(lat_d, depths, "depth")
    weights = bilinear_weights(w1, w2)
    nr, nd = gmap.shape
    i2 = np.minimum(i + 1, nr - 1)
    j2 = np.minimum(j + 1, nd - 1)
    ci = np.stack([i, i, i2, i2], axis=-1)
    cj = np.stack([j, j2, j2, j], axis=-1)
    tau, amp, thd, thi, valid, ns, nb = (a[ci, cj] for a in gmap.dense())   # (N, 4, M)
    valid = valid & (weights[..., None] > 0)

    dDn = np.broadcast_to(dD[:, None, None], tau.shape)
    if mode is InterpMode.PLANE:
        tau = tau + dDn * np.sin(thd) / c
    else:
        moved = (dDn != 0) & valid
        if np.any(moved):
            tau, thi = _spherical_source_array(tau, thd, thi, dDn, c, moved, source_literal)

    d_range = ranges[:, None] - lat_r[ci]       # (N, 4)
    d_depth = depths[:, None] - lat_d[cj]
    if mode is InterpMode.PLANE:
        tau = plane_receiver_delay(tau, thi, d_range[..., None], d_depth[..., None], c)
    else:
        out = _spherical_receiver_signed(tau, np.sin(thi), np.cos(thi), d_range[..., None],
                                         -d_depth[..., None], c)
        tau = np.where(valid, out, tau)

    amp = np.where(valid, amp * weights[..., None], 0)
    n = ranges.size
    flat = (a.reshape(n, -1) for a in (tau, amp, thd, thi, ns, nb, valid))
    return FieldBatch(*flat, weights=weights)


# scalar API


def _single(gmap, receiver, mode, delta_depth=0.0) -> InterpolatedField:
    rng, depth = receiver
    batch = interpolate_map(gmap, rng, depth, delta_depth, mode)
    return InterpolatedField(batch.arrival_set(0), batch.weights[0], CORNERS, float(delta_depth))


def plane_receiver_interp(gmap: GridMap, receiver) -> InterpolatedField:
    """Plane-wave interpolation at ``receiver = (range, depth)``."""
    return _single(gmap, receiver, InterpMode.PLANE)


def spherical_receiver_interp(gmap: GridMap, receiver) -> InterpolatedField:
    """Spherical-wave interpolation at ``receiver = (range, depth)``."""
    return _single(gmap, receiver, InterpMode.SPHERICAL)


def interpolate_field(maps, source: Position, receiver: Position,
                      mode=InterpMode.SPHERICAL) -> InterpolatedField:
    """Field at ``receiver`` due to ``source`` from the nearest-depth map.

    ``maps`` is a :class:`GridMapSet` or a single :class:`GridMap`. The
    3-D geometry is reduced to horizontal range and receiver depth.
    """
    if isinstance(maps, GridMap):
        maps = GridMapSet([maps])
    if len(maps) == 0:
        raise ConfigurationError("empty grid-map set")
    gmap, delta = maps.nearest(source.depth)
    rng = source.horizontal_distance(receiver)
    return _single(gmap, (rng, receiver.depth), mode, delta)


def msd_interp(cir_est, cir_true) -> float:
    """Magnitude-deviation MSD in dB between an estimated and a true CIR."""
    est = np.asarray(cir_est)
    true = np.asarray(cir_true)
    if est.shape != true.shape:
        raise ValueError(f"CIR lengths differ: {est.shape} vs {true.shape}")
    den = float(np.sum(np.abs(true) ** 2))
    if den == 0.0:
        raise UndefinedReferenceError("reference CIR is identically zero")
    num = float(np.sum((np.abs(est) - np.abs(true)) ** 2))
    if num == 0.0:
        return MSD_FLOOR_DB
    return max(10.0 * np.log10(num / den), MSD_FLOOR_DB)
