"""Pre-computed arrival grids on a (range, depth) lattice, and their files.

A :class:`GridMap` holds one :class:`ArrivalSet` per lattice point for a
single source depth. Several maps (one per source depth) form a
:class:`GridMapSet`, stored on disk as one binary file per depth plus a JSON
manifest.

Binary layout (little-endian)::

    b"HGRD", u16 version, u16 reserved
    f64 water_depth, f64 sound_speed, f64 surf.re, f64 surf.im, f64 bot.re, f64 bot.im
    f64 range_min, range_max, range_step, depth_min, depth_max, depth_step
    u32 n_source_depths, f64 * n_source_depths
    f64 source_depth, u32 max_bounces, u32 n_range, u32 n_depth
    u32 n_degenerate, (u32 i, u32 j) * n_degenerate
    per cell, row-major over (range, depth):
        u32 count, count * (f64 delay, f64 re, f64 im, f64 theta_d, f64 theta_i, u16 ns, u16 nb)
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (ConfigurationError, DegenerateGeometryError, DomainError,
                     GridChecksumError, GridFormatError, GridTruncatedError,
                     GridVersionError, MissingArtifactError)
from .geoacoustics import (DEFAULT_MAX_BOUNCES, ArrivalSet, Environment, Position,
                           compute_arrivals)

MAGIC = b"HGRD"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

ARRIVAL_DTYPE = np.dtype([
    ("delay", "<f8"), ("re", "<f8"), ("im", "<f8"),
    ("theta_d", "<f8"), ("theta_i", "<f8"),
    ("ns", "<u2"), ("nb", "<u2"),
])


def _lattice(lo, hi, step):
    n = int(round((hi - lo) / step)) + 1
    return lo + step * np.arange(n, dtype=float)


@dataclass(frozen=True)
class GridSpec:
    range_min: float
    range_max: float
    range_step: float
    depth_min: float
    depth_max: float
    depth_step: float
    source_depths: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "source_depths", tuple(float(d) for d in self.source_depths))
        if self.range_min < 0:
            raise DomainError("range_min must be >= 0")
        if not (self.range_step > 0 and self.depth_step > 0):
            raise DomainError("grid steps must be > 0")
        if self.range_max < self.range_min or self.depth_max < self.depth_min:
            raise DomainError("grid max must be >= min")
        sd = self.source_depths
        if list(sd) != sorted(sd):
            raise DomainError("source_depths must be ascending")
        if len(sd) > 2:
            gaps = np.diff(sd)
            if not np.allclose(gaps, gaps[0], rtol=0, atol=1e-9):
                raise DomainError("source_depths must be uniformly spaced")

    @property
    def ranges(self) -> np.ndarray:
        return _lattice(self.range_min, self.range_max, self.range_step)

    @property
    def depths(self) -> np.ndarray:
        return _lattice(self.depth_min, self.depth_max, self.depth_step)

    @property
    def shape(self):
        return self.ranges.size, self.depths.size

    @property
    def source_depth_step(self):
        if len(self.source_depths) < 2:
            return None
        return self.source_depths[1] - self.source_depths[0]


class GridMap:
    """Arrival sets for one source depth on a (range, depth) lattice.

    Cells are stored ragged: ``counts[i, j]`` arrivals for range index ``i``
    and depth index ``j``, packed row-major into flat column arrays.
    """

    def __init__(self, env: Environment, source_depth: float, spec: GridSpec,
                 max_bounces: int, counts: np.ndarray, columns: dict,
                 degenerate: Sequence = ()):
        self.env = env
        self.source_depth = float(source_depth)
        self.spec = spec
        self.max_bounces = int(max_bounces)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != spec.shape:
            raise ValueError(f"counts shape {self.counts.shape} != lattice {spec.shape}")
        self.offsets = np.concatenate([[0], np.cumsum(self.counts.ravel())])
        self.columns = {k: np.asarray(v) for k, v in columns.items()}
        self.degenerate = tuple(tuple(int(v) for v in c) for c in degenerate)
        self._dense = None

    @property
    def shape(self):
        return self.counts.shape

    @property
    def ranges(self):
        return self.spec.ranges

    @property
    def depths(self):
        return self.spec.depths

    def cell(self, i: int, j: int) -> ArrivalSet:
        k = i * self.shape[1] + j
        s = slice(self.offsets[k], self.offsets[k + 1])
        c = self.columns
        return ArrivalSet(c["delay"][s], c["amplitude"][s], c["departure_angle"][s],
                          c["incident_angle"][s], c["surface_bounces"][s],
                          c["bottom_bounces"][s], sort=False)

    def __getitem__(self, index):
        i, j = index
        return self.cell(i, j)

    @property
    def cells(self):
        """2-D object array of ArrivalSet, indexed (range, depth)."""
        out = np.empty(self.shape, dtype=object)
        for i in range(self.shape[0]):
            for j in range(self.shape[1]):
                out[i, j] = self.cell(i, j)
        return out

    def dense(self):
        """Zero-padded arrays of shape (n_range, n_depth, max_count).

        Returns (delay, amplitude, departure, incident, valid, n_surface,
        n_bottom).

        Padding entries carry zero amplitude and a copy of the cell's last
        delay so they contribute nothing and never look acausal.
        """
        if self._dense is None:
            nr, nd = self.shape
            m = int(self.counts.max()) if self.counts.size else 0
            m = max(m, 1)
            delay = np.zeros((nr * nd, m))
            amp = np.zeros((nr * nd, m), dtype=complex)
            thd = np.zeros((nr * nd, m))
            thi = np.zeros((nr * nd, m))
            counts = self.counts.ravel()
            idx = np.arange(m)
            valid = idx[None, :] < counts[:, None]
            flat = self.offsets[:-1, None] + np.minimum(idx[None, :], np.maximum(counts[:, None] - 1, 0))
            has = counts > 0
            c = self.columns
            delay[has] = c["delay"][flat[has]]
            amp[has] = np.where(valid[has], c["amplitude"][flat[has]], 0)
            thd[has] = c["departure_angle"][flat[has]]
            thi[has] = c["incident_angle"][flat[has]]
            ns = np.zeros((nr * nd, m), dtype=np.uint16)
            nb = np.zeros((nr * nd, m), dtype=np.uint16)
            ns[has] = c["surface_bounces"][flat[has]]
            nb[has] = c["bottom_bounces"][flat[has]]
            shape = (nr, nd, m)
            self._dense = tuple(a.reshape(shape) for a in (delay, amp, thd, thi, valid, ns, nb))
        return self._dense

    def __eq__(self, other):
        if not isinstance(other, GridMap):
            return NotImplemented
        return (self.env == other.env and self.source_depth == other.source_depth
                and self.spec == other.spec and self.max_bounces == other.max_bounces
                and np.array_equal(self.counts, other.counts)
                and self.degenerate == other.degenerate
                and all(np.array_equal(self.columns[k], other.columns[k]) for k in self.columns))

    def __repr__(self):
        return (f"GridMap(source_depth={self.source_depth}, shape={self.shape}, "
                f"arrivals={self.offsets[-1]})")


_COLUMN_NAMES = ("delay", "amplitude", "departure_angle", "incident_angle",
                 "surface_bounces", "bottom_bounces")


def build_gridmap(env: Environment, source_depth: float, spec: GridSpec,
                  max_bounces: int = DEFAULT_MAX_BOUNCES,
                  on_degenerate: str = "raise") -> GridMap:
    """Fill every lattice cell with :func:`compute_arrivals`.

    The source sits at range 0 and ``source_depth``. A lattice point that
    coincides with the source raises :class:`DegenerateGeometryError` naming
    the cell, unless ``on_degenerate="skip"``, in which case the cell is
    stored empty and listed in ``GridMap.degenerate``.
    """
    env.check_depth(source_depth, "source depth")
    if on_degenerate not in ("raise", "skip"):
        raise ValueError("on_degenerate must be 'raise' or 'skip'")
    ranges, depths = spec.ranges, spec.depths
    for d in (depths[0], depths[-1]):
        env.check_depth(d, "lattice depth")
    source = Position(0.0, 0.0, source_depth)
    sets = []
    counts = np.zeros(spec.shape, dtype=np.int64)
    degenerate = []
    for i, r in enumerate(ranges):
        for j, z in enumerate(depths):
            try:
                arr = compute_arrivals(env, source, Position(float(r), 0.0, float(z)), max_bounces)
            except DegenerateGeometryError as exc:
                if on_degenerate == "raise":
                    raise DegenerateGeometryError(
                        f"cell ({i}, {j}) at range {r} m, depth {z} m: {exc}") from None
                degenerate.append((i, j))
                arr = ArrivalSet.empty()
            counts[i, j] = len(arr)
            sets.append(arr)
    columns = {name: np.concatenate([getattr(s, name) for s in sets]) for name in _COLUMN_NAMES}
    return GridMap(env, source_depth, spec, max_bounces, counts, columns, degenerate)


# persistence


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_gridmap(gmap: GridMap) -> bytes:
    env, spec = gmap.env, gmap.spec
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, 0)]
    parts.append(struct.pack("<6d", env.water_depth, env.sound_speed,
                             env.surface_reflection.real, env.surface_reflection.imag,
                             env.bottom_reflection.real, env.bottom_reflection.imag))
    parts.append(struct.pack("<6d", spec.range_min, spec.range_max, spec.range_step,
                             spec.depth_min, spec.depth_max, spec.depth_step))
    parts.append(struct.pack("<I", len(spec.source_depths)))
    parts.append(struct.pack(f"<{len(spec.source_depths)}d", *spec.source_depths))
    nr, nd = gmap.shape
    parts.append(struct.pack("<dIII", gmap.source_depth, gmap.max_bounces, nr, nd))
    parts.append(struct.pack("<I", len(gmap.degenerate)))
    for i, j in gmap.degenerate:
        parts.append(struct.pack("<II", i, j))
    c = gmap.columns
    rec = np.empty(gmap.offsets[-1], dtype=ARRIVAL_DTYPE)
    rec["delay"] = c["delay"]
    rec["re"] = c["amplitude"].real
    rec["im"] = c["amplitude"].imag
    rec["theta_d"] = c["departure_angle"]
    rec["theta_i"] = c["incident_angle"]
    rec["ns"] = c["surface_bounces"]
    rec["nb"] = c["bottom_bounces"]
    raw = rec.tobytes()
    size = ARRIVAL_DTYPE.itemsize
    for k, n in enumerate(gmap.counts.ravel()):
        parts.append(struct.pack("<I", n))
        parts.append(raw[gmap.offsets[k] * size:gmap.offsets[k + 1] * size])
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_gridmap(gmap: GridMap, path) -> None:
    _atomic_write(Path(path), encode_gridmap(gmap))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise GridTruncatedError(
                f"file truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_gridmap(data: bytes) -> GridMap:
    if len(data) < 4 or data[:4] != MAGIC:
        raise GridFormatError("not a grid-map file (bad magic)")
    rd = _Reader(data)
    rd.take(4)
    version, _ = rd.unpack("<HH")
    if version != FORMAT_VERSION:
        raise GridVersionError(f"unsupported grid-map version {version}")
    depth, c, sre, sim, bre, bim = rd.unpack("<6d")
    env = Environment(depth, c, complex(sre, sim), complex(bre, bim))
    rmin, rmax, rstep, dmin, dmax, dstep = rd.unpack("<6d")
    (nsd,) = rd.unpack("<I")
    sds = rd.unpack(f"<{nsd}d")
    spec = GridSpec(rmin, rmax, rstep, dmin, dmax, dstep, sds)
    source_depth, max_bounces, nr, nd = rd.unpack("<dIII")
    if (nr, nd) != spec.shape:
        raise GridFormatError(f"cell dimensions {(nr, nd)} disagree with lattice {spec.shape}")
    (ndeg,) = rd.unpack("<I")
    degenerate = [rd.unpack("<II") for _ in range(ndeg)]
    counts = np.zeros(nr * nd, dtype=np.int64)
    chunks = []
    size = ARRIVAL_DTYPE.itemsize
    for k in range(nr * nd):
        (n,) = rd.unpack("<I")
        counts[k] = n
        chunks.append(rd.take(n * size))
    (stored,) = rd.unpack("<I")
    if rd.pos != len(data):
        raise GridFormatError("trailing bytes after checksum")
    if zlib.crc32(data[:rd.pos - 4]) != stored:
        raise GridChecksumError("grid-map checksum mismatch")
    rec = np.frombuffer(b"".join(chunks), dtype=ARRIVAL_DTYPE)
    columns = {
        "delay": rec["delay"].astype(np.float64),
        "amplitude": rec["re"] + 1j * rec["im"],
        "departure_angle": rec["theta_d"].astype(np.float64),
        "incident_angle": rec["theta_i"].astype(np.float64),
        "surface_bounces": rec["ns"].astype(np.uint16),
        "bottom_bounces": rec["nb"].astype(np.uint16),
    }
    return GridMap(env, source_depth, spec, max_bounces, counts.reshape(nr, nd), columns,
                   degenerate)


def load_gridmap(path) -> GridMap:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"grid-map file not found: {path}")
    return decode_gridmap(path.read_bytes())


# map sets


def gridmap_filename(source_depth: float) -> str:
    return f"gridmap_sd{source_depth:.4f}".replace(".", "p") + ".hgrd"


class GridMapSet:
    """Grid maps for several source depths, optionally loaded lazily from disk."""

    def __init__(self, maps: Sequence[GridMap] = (), *, directory=None, files=None,
                 source_depths=None, depth_tolerance=None):
        self._maps = {}
        self._files = {}
        self.directory = Path(directory) if directory is not None else None
        for m in maps:
            self._maps[m.source_depth] = m
        if files is not None:
            for d, f in zip(source_depths, files):
                self._files[float(d)] = f
        self.source_depths = sorted(set(self._maps) | set(self._files))
        if depth_tolerance is None and len(self.source_depths) >= 2:
            depth_tolerance = 0.5 * min(np.diff(self.source_depths))
        self.depth_tolerance = depth_tolerance

    def __len__(self):
        return len(self.source_depths)

    def __iter__(self):
        for d in self.source_depths:
            yield self[d]

    def __getitem__(self, depth: float) -> GridMap:
        depth = float(depth)
        if depth not in self._maps:
            if depth not in self._files:
                raise KeyError(depth)
            self._maps[depth] = load_gridmap(self.directory / self._files[depth])
        return self._maps[depth]

    def nearest(self, depth: float):
        """Return ``(map, delta)`` with ``delta = depth - map.source_depth``.

        Ties go to the shallower map.
        """
        if not self.source_depths:
            raise ConfigurationError("empty grid-map set")
        sds = np.array(self.source_depths)
        dist = np.abs(sds - depth)
        best = int(np.flatnonzero(dist == dist.min())[0])
        on = float(sds[best])
        if self.depth_tolerance is not None and dist[best] > self.depth_tolerance + 1e-12:
            raise DomainError(
                f"source depth {depth} m outside map-set span "
                f"[{sds[0] - self.depth_tolerance}, {sds[-1] + self.depth_tolerance}]")
        return self[on], depth - on

    @classmethod
    def build(cls, env: Environment, spec: GridSpec, max_bounces=DEFAULT_MAX_BOUNCES,
              on_degenerate="raise"):
        return cls([build_gridmap(env, d, spec, max_bounces, on_degenerate)
                    for d in spec.source_depths])

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for d in self.source_depths:
            name = gridmap_filename(d)
            save_gridmap(self[d], directory / name)
            files.append(name)
        manifest = {
            "format": "hydrolink-gridset",
            "version": FORMAT_VERSION,
            "source_depths": list(self.source_depths),
            "files": files,
        }
        _atomic_write(directory / MANIFEST_NAME,
                      (json.dumps(manifest, indent=2) + "\n").encode())
        return directory / MANIFEST_NAME

    @classmethod
    def open(cls, directory) -> "GridMapSet":
        directory = Path(directory)
        mpath = directory / MANIFEST_NAME
        if not mpath.exists():
            raise MissingArtifactError(f"grid-map manifest not found: {mpath}")
        manifest = json.loads(mpath.read_text())
        if manifest.get("format") != "hydrolink-gridset":
            raise GridFormatError(f"{mpath} is not a grid-map manifest")
        if manifest.get("version") != FORMAT_VERSION:
            raise GridVersionError(f"unsupported manifest version {manifest.get('version')}")
        return cls(directory=directory, files=manifest["files"],
                   source_depths=manifest["source_depths"])
