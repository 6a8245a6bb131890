"""Iso-velocity ray arrivals in a flat waveguide by the image source method.

Depth is positive downward. Angles are elevation angles of the propagation
direction, positive when the ray travels upward (toward the surface). The
departure angle is taken at the source, the incident angle at the receiver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import DegenerateGeometryError, DomainError

DEFAULT_MAX_BOUNCES = 6


@dataclass(frozen=True)
class Environment:
    """Flat-surface, flat-bottom waveguide with constant sound speed."""

    water_depth: float = 100.0
    sound_speed: float = 1500.0
    surface_reflection: complex = -1.0
    bottom_reflection: complex = 0.5

    def __post_init__(self):
        if not self.water_depth > 0:
            raise DomainError(f"water_depth must be > 0, got {self.water_depth}")
        if not self.sound_speed > 0:
            raise DomainError(f"sound_speed must be > 0, got {self.sound_speed}")
        for name in ("surface_reflection", "bottom_reflection"):
            value = complex(getattr(self, name))
            if abs(value) > 1.0:
                raise DomainError(f"|{name}| must be <= 1, got {abs(value)}")
            object.__setattr__(self, name, value)

    def check_depth(self, depth: float, what: str = "depth"):
        if not 0.0 <= depth <= self.water_depth:
            raise DomainError(f"{what} {depth} m outside waveguide [0, {self.water_depth}]")


@dataclass(frozen=True)
class Position:
    x: float
    y: float
    depth: float

    def horizontal_distance(self, other: "Position") -> float:
        return math.hypot(other.x - self.x, other.y - self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.depth], dtype=float)


@dataclass(frozen=True)
class Arrival:
    delay: float
    amplitude: complex
    departure_angle: float
    incident_angle: float
    surface_bounces: int
    bottom_bounces: int


class ArrivalSet:
    """Arrivals at one point, held column-wise and sorted by delay.

    The columns are numpy arrays; iterating yields :class:`Arrival` objects.
    Instances are treated as immutable.
    """

    __slots__ = ("delay", "amplitude", "departure_angle", "incident_angle",
                 "surface_bounces", "bottom_bounces")

    def __init__(self, delay, amplitude, departure_angle, incident_angle,
                 surface_bounces=None, bottom_bounces=None, *, sort=True):
        delay = np.asarray(delay, dtype=np.float64).reshape(-1)
        n = delay.size
        amplitude = np.asarray(amplitude, dtype=np.complex128).reshape(-1)
        departure_angle = np.asarray(departure_angle, dtype=np.float64).reshape(-1)
        incident_angle = np.asarray(incident_angle, dtype=np.float64).reshape(-1)
        if surface_bounces is None:
            surface_bounces = np.zeros(n, dtype=np.uint16)
        if bottom_bounces is None:
            bottom_bounces = np.zeros(n, dtype=np.uint16)
        surface_bounces = np.asarray(surface_bounces, dtype=np.uint16).reshape(-1)
        bottom_bounces = np.asarray(bottom_bounces, dtype=np.uint16).reshape(-1)
        cols = (amplitude, departure_angle, incident_angle, surface_bounces, bottom_bounces)
        if any(c.size != n for c in cols):
            raise ValueError("ArrivalSet columns must have equal length")
        if sort and n > 1:
            order = np.argsort(delay, kind="stable")
            delay = delay[order]
            amplitude, departure_angle, incident_angle, surface_bounces, bottom_bounces = (
                c[order] for c in cols)
        self.delay = delay
        self.amplitude = amplitude
        self.departure_angle = departure_angle
        self.incident_angle = incident_angle
        self.surface_bounces = surface_bounces
        self.bottom_bounces = bottom_bounces

    @classmethod
    def empty(cls) -> "ArrivalSet":
        return cls(np.empty(0), np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def from_arrivals(cls, arrivals: Iterable[Arrival]) -> "ArrivalSet":
        arrivals = list(arrivals)
        return cls(
            [a.delay for a in arrivals],
            [a.amplitude for a in arrivals],
            [a.departure_angle for a in arrivals],
            [a.incident_angle for a in arrivals],
            [a.surface_bounces for a in arrivals],
            [a.bottom_bounces for a in arrivals],
        )

    @classmethod
    def concatenate(cls, sets: Iterable["ArrivalSet"]) -> "ArrivalSet":
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(*(np.concatenate([getattr(s, name) for s in sets]) for name in cls.__slots__))

    def replace(self, sort=True, **columns) -> "ArrivalSet":
        values = {name: columns.get(name, getattr(self, name)) for name in self.__slots__}
        return ArrivalSet(**values, sort=sort)

    def __len__(self):
        return self.delay.size

    def __getitem__(self, i) -> Arrival:
        return Arrival(
            float(self.delay[i]), complex(self.amplitude[i]),
            float(self.departure_angle[i]), float(self.incident_angle[i]),
            int(self.surface_bounces[i]), int(self.bottom_bounces[i]),
        )

    def __iter__(self) -> Iterator[Arrival]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, ArrivalSet):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in self.__slots__)

    def __repr__(self):
        return f"ArrivalSet(n={len(self)}, first_delay={self.delay[:1]})"


def _image_table(max_bounces: int):
    """Image families ordered by bounce count.

    Returns (sign, m, n_surface, n_bottom) per image; the image depth is
    ``sign * zs + 2 * m * D``.
    """
    rows = [(1, 0, 0, 0)]
    for k in range(1, max_bounces + 1):
        n = (k + 1) // 2
        if k % 2:
            # odd: one more bottom than surface bounce, or the reverse
            rows.append((-1, n, n - 1, n))
            rows.append((-1, -(n - 1), n, n - 1))
        else:
            rows.append((1, n, n, n))
            rows.append((1, -n, n, n))
    return np.array(rows, dtype=np.int64)


def image_arrays(env: Environment, source_depth, horizontal_range, receiver_depth,
                 max_bounces: int = DEFAULT_MAX_BOUNCES):
    """Vectorized image-source kernel, unsorted and unchecked.

    Inputs broadcast against each other; outputs gain a trailing image axis.
    Returns ``(delay, amplitude, departure_angle, incident_angle,
    path_length, n_surface, n_bottom)``.
    """
    table = _image_table(max_bounces)
    sign, m, ns, nb = table.T
    zs = np.asarray(source_depth, dtype=float)[..., None]
    r = np.asarray(horizontal_range, dtype=float)[..., None]
    zr = np.asarray(receiver_depth, dtype=float)[..., None]
    z_img = sign * zs + 2.0 * m * env.water_depth
    rise = z_img - zr
    length = np.hypot(r, rise)
    incident = np.arctan2(rise, r)
    departure = sign * incident
    coeff = env.surface_reflection ** ns * env.bottom_reflection ** nb
    amplitude = coeff / length
    delay = length / env.sound_speed
    return delay, amplitude, departure, incident, length, ns, nb


def compute_arrivals(env: Environment, source: Position, receiver: Position,
                     max_bounces: int = DEFAULT_MAX_BOUNCES) -> ArrivalSet:
    """All image paths from ``source`` to ``receiver`` up to ``max_bounces``."""
    if max_bounces < 0:
        raise DomainError("max_bounces must be >= 0")
    env.check_depth(source.depth, "source depth")
    env.check_depth(receiver.depth, "receiver depth")
    r = source.horizontal_distance(receiver)
    if r == 0.0 and source.depth == receiver.depth:
        raise DegenerateGeometryError("source and receiver coincide")
    delay, amp, dep, inc, _, ns, nb = image_arrays(
        env, source.depth, r, receiver.depth, max_bounces)
    return ArrivalSet(delay, amp, dep, inc, ns, nb)


def image_path_lengths(env: Environment, source: Position, receiver: Position,
                       max_bounces: int = DEFAULT_MAX_BOUNCES) -> dict:
    """Map (image sign, image index m) -> straight-line image distance.

    Written from the image geometry directly so tests can check delays
    without going through :func:`compute_arrivals`.
    """
    r = source.horizontal_distance(receiver)
    D = env.water_depth
    out = {}
    for sign, m, ns, nb in _image_table(max_bounces):
        z = sign * source.depth + 2 * m * D
        out[(int(sign), int(m))] = math.sqrt(r * r + (z - receiver.depth) ** 2)
    return out
