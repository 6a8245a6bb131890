"""Target positioning from first-arrival delays at several fixed nodes."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .channelsim import CirSnapshot
from .errors import DomainError, GeometryError, NoDetectionError
from .geoacoustics import Position
from .gridmap import _atomic_write


@dataclass
class NodeSet:
    ids: list
    positions: np.ndarray     # (Q, 3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.ids) != self.positions.shape[0]:
            raise DomainError("ids and positions differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DomainError("node ids must be unique")
        if len(self.ids) < 3:
            raise DomainError("at least three nodes are needed")
        xy = self.positions[:, :2] - self.positions[0, :2]
        if np.linalg.matrix_rank(xy, tol=1e-6) < 2:
            raise DomainError("nodes are collinear in the horizontal plane")

    @classmethod
    def from_positions(cls, nodes: dict) -> "NodeSet":
        return cls(list(nodes), np.array([p.as_array() for p in nodes.values()]))

    def __len__(self):
        return len(self.ids)


@dataclass
class PositionEstimate:
    position: Position
    residual: float
    ranges: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flagged: bool = False


def first_arrival_delay(cir: CirSnapshot, noise_floor_factor: float = 6.0,
                        peak_fraction: float = 0.0) -> float:
    """Delay of the earliest tap above the noise floor.

    The floor is ``noise_floor_factor`` times the median tap magnitude and, if
    ``peak_fraction`` is positive, at least that fraction of the strongest
    tap. From the first crossing the search climbs to the local maximum so
    the reported tap is the arrival's peak.
    """
    mag = np.abs(np.asarray(cir.taps))
    if mag.size == 0:
        raise NoDetectionError("empty snapshot")
    floor = max(noise_floor_factor * float(np.median(mag)), peak_fraction * float(mag.max()))
    above = np.flatnonzero(mag > floor)
    if above.size == 0:
        raise NoDetectionError("no tap exceeds the detection floor")
    i = int(above[0])
    while i + 1 < mag.size and mag[i + 1] > mag[i]:
        i += 1
    return cir.delay_offset + i / cir.tap_rate


def _cost(points: np.ndarray, nodes: np.ndarray, ranges: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(points[:, None, :] - nodes[None, :, :], axis=-1)
    return np.sum(np.abs(d - ranges[None, :]), axis=1)


def _grid(lo, hi, step):
    n = max(1, int(np.floor((hi - lo) / step + 1e-9)) + 1)
    return lo + step * np.arange(n)


def multilaterate(delays: Sequence[float], nodes: NodeSet, prev: PositionEstimate | Position,
                  sound_speed: float, depth_bounds=(0.3, 2.0), step_bound: float = 2.0,
                  coarse: float = 0.1, fine: float = 0.01, residual_limit: float = 5.0
                  ) -> PositionEstimate:
    """Minimize the summed absolute range error in a box around ``prev``.

    A coarse lattice search over ``x, y`` within ``+-step_bound`` of the
    previous position and depth within ``depth_bounds`` is followed by a
    fine lattice search around the coarse optimum (clipped to the same box).
    Estimates with residual above ``residual_limit`` metres are flagged.
    """
    delays = np.asarray(delays, dtype=float)
    if delays.size != len(nodes) or delays.size < 3:
        raise DomainError("need one delay per node and at least three nodes")
    ranges = delays * sound_speed
    p0 = prev.position if isinstance(prev, PositionEstimate) else prev
    zlo, zhi = depth_bounds
    if zlo > zhi or step_bound <= 0:
        raise GeometryError("empty search box")
    box = np.array([[p0.x - step_bound, p0.x + step_bound],
                    [p0.y - step_bound, p0.y + step_bound],
                    [zlo, zhi]])
    best = None
    centre = None
    for step, half in ((coarse, None), (fine, coarse)):
        axes = []
        for k in range(3):
            lo, hi = box[k]
            if half is not None:
                lo, hi = max(lo, centre[k] - half), min(hi, centre[k] + half)
            axes.append(_grid(lo, hi, step))
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        cost = _cost(pts, nodes.positions, ranges)
        i = int(np.argmin(cost))
        centre = pts[i]
        best = float(cost[i])
    x, y, z = centre
    return PositionEstimate(Position(float(x), float(y), float(z)), best, ranges,
                            flagged=best > residual_limit)


def track(delay_rows, times, nodes: NodeSet, start: Position, sound_speed: float,
          **kwargs) -> list:
    """Sequential estimates, each seeded at the previous one."""
    out = []
    prev: PositionEstimate | Position = start
    for row in delay_rows:
        est = multilaterate(row, nodes, prev, sound_speed, **kwargs)
        out.append(est)
        prev = est
    return out


def trajectory_csv(times, estimates: Sequence[PositionEstimate]) -> str:
    buf = io.StringIO()
    buf.write("time,x,y,depth,residual\n")
    for t, e in zip(times, estimates):
        p = e.position
        buf.write(f"{t:.6f},{p.x:.4f},{p.y:.4f},{p.depth:.4f},{e.residual:.6f}\n")
    return buf.getvalue()


def save_trajectory_csv(path, times, estimates):
    _atomic_write(Path(path), trajectory_csv(times, estimates).encode())
