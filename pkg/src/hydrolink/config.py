"""Scenario configuration: JSON loading, schema validation and typed views."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .channelsim import CirPlan, Trajectory
from .detector import DetectorParams
from .errors import ConfigurationError, DomainError, MissingArtifactError
from .fieldinterp import InterpMode
from .geoacoustics import Environment, Position
from .gridmap import GridSpec
from .modem import PacketSpec


def _load_json_resource(name: str):
    return json.loads(resources.files("hydrolink.data").joinpath(name).read_text())


SCHEMA = _load_json_resource("scenario.schema.json")


def default_config(name: str = "lake") -> dict:
    """A bundled scenario as a plain dict (``lake`` or ``lake_sigma1``)."""
    return _load_json_resource(f"{name}.json")


@dataclass
class Node:
    id: str
    position: Position
    role: str = "receiver"


@dataclass
class TargetConfig:
    present: bool
    radius: float
    sigma_override: Optional[float]
    trajectory: Optional[Trajectory]
    legs: list = field(default_factory=list)     # (t0, t1) of each moving leg


@dataclass
class WaveformConfig:
    packet: PacketSpec
    period: float
    start_offset: float
    n_packets: int
    synthesize_signal: bool
    signal_snr_db: Optional[float]

    def packet_starts(self) -> np.ndarray:
        return self.start_offset + self.period * np.arange(self.n_packets)

    def epochs(self) -> np.ndarray:
        return self.packet_starts() + self.packet.duration / 2.0


@dataclass
class NavigationConfig:
    carrier: float
    receivers: list
    noise_floor_factor: float
    peak_fraction: float
    depth_bounds: tuple
    step_bound: float


@dataclass
class ReportConfig:
    crossing_half_window: float = 3.0
    crossing_sample_distance: float = 0.25
    figures: bool = True


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    environment: Environment
    grid: GridSpec
    max_bounces: int
    nodes: dict
    links: list
    target: TargetConfig
    waveform: WaveformConfig
    cir: CirPlan
    precursor: float
    estimate_taps: int
    detector: DetectorParams
    cir_source: str
    noise_msd_db: Optional[float]
    mode: InterpMode
    navigation: Optional[NavigationConfig]
    report: ReportConfig
    raw: dict = field(repr=False, default_factory=dict)

    def rng(self, *purpose: int) -> np.random.Generator:
        """Independent generator for a purpose tuple, derived from the scenario seed."""
        return np.random.default_rng([self.seed, *purpose])

    def link_ids(self):
        return [f"{s}_{r}" for s, r in self.links]


def traverse_trajectory(start, end, depth: float, speed: float, pauses) -> tuple:
    """Back-and-forth path between two points.

    ``pauses`` holds the dwell before each pass and after the last, so
    ``len(pauses) - 1`` passes are made. Returns the trajectory and the
    (start, end) times of each pass.
    """
    a = np.array([start[0], start[1], depth], dtype=float)
    b = np.array([end[0], end[1], depth], dtype=float)
    leg = float(np.linalg.norm(b - a)) / speed
    t = 0.0
    waypoints = [(t, a)]
    legs = []
    cur, nxt = a, b
    for k, pause in enumerate(pauses):
        if pause > 0:
            t += pause
            waypoints.append((t, cur))
        if k == len(pauses) - 1:
            break
        legs.append((t, t + leg))
        t += leg
        waypoints.append((t, nxt))
        cur, nxt = nxt, cur
    return Trajectory([(tt, Position(*p)) for tt, p in waypoints]), legs


def _path(error: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in error.absolute_path) or "<root>"


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigurationError(exc.message, path=_path(exc)) from None


def _complex(v):
    return complex(v[0], v[1]) if isinstance(v, list) else complex(v)


def parse_config(raw: dict) -> ScenarioConfig:
    """Validate a scenario dict and build the typed configuration."""
    raw = copy.deepcopy(raw)
    validate(raw)
    env_raw = raw["environment"]
    try:
        env = Environment(env_raw["water_depth"], env_raw["sound_speed"],
                          _complex(env_raw.get("surface_reflection", -1.0)),
                          _complex(env_raw.get("bottom_reflection", 0.5)))
    except DomainError as exc:
        raise ConfigurationError(str(exc), path="environment") from None

    g = raw["grid"]
    try:
        grid = GridSpec(g["range_min"], g["range_max"], g["range_step"], g["depth_min"],
                        g["depth_max"], g["depth_step"], tuple(g["source_depths"]))
    except (DomainError, ValueError) as exc:
        raise ConfigurationError(str(exc), path="grid") from None
    if grid.depth_max > env.water_depth + 1e-9:
        raise ConfigurationError("grid deeper than the water column", path="grid.depth_max")

    nodes = {}
    for i, n in enumerate(raw["nodes"]):
        if n["id"] in nodes:
            raise ConfigurationError(f"duplicate node id {n['id']!r}", path=f"nodes.{i}.id")
        pos = Position(*n["position"])
        if not 0 <= pos.depth <= env.water_depth:
            raise ConfigurationError("node depth outside the water column",
                                     path=f"nodes.{i}.position")
        nodes[n["id"]] = Node(n["id"], pos, n.get("role", "receiver"))
    links = []
    for i, (s, r) in enumerate(raw["links"]):
        for j, nid in enumerate((s, r)):
            if nid not in nodes:
                raise ConfigurationError(f"unknown node {nid!r}", path=f"links.{i}.{j}")
        if s == r:
            raise ConfigurationError("link endpoints must differ", path=f"links.{i}")
        links.append((s, r))

    t = raw.get("target", {})
    present = bool(t.get("present", False))
    traj, legs = None, []
    if present:
        if "traverse" in t:
            tv = t["traverse"]
            traj, legs = traverse_trajectory(tv["start"], tv["end"], tv["depth"], tv["speed"],
                                             tv["pauses"])
        elif "waypoints" in t:
            try:
                traj = Trajectory([(w[0], Position(*w[1:])) for w in t["waypoints"]])
            except DomainError as exc:
                raise ConfigurationError(str(exc), path="target.waypoints") from None
        else:
            raise ConfigurationError("a present target needs waypoints or a traverse",
                                     path="target")
        if "radius" not in t and t.get("sigma_override") is None:
            raise ConfigurationError("target needs a radius or a sigma override", path="target")
    target = TargetConfig(present, float(t.get("radius", 0.1)), t.get("sigma_override"),
                          traj, legs)

    w = raw["waveform"]
    try:
        packet = PacketSpec(n_symbols=w.get("n_symbols", 600), symbol_rate=w.get("symbol_rate", 6000.0),
                            sample_rate=w.get("sample_rate", 12000.0), rolloff=w.get("rolloff", 0.2),
                            span=w.get("span", 40), carrier=w.get("carrier", 32000.0),
                            pilot_seed=raw["seed"] + 1, interleaver_seed=raw["seed"] + 2)
    except DomainError as exc:
        raise ConfigurationError(str(exc), path="waveform") from None
    period = float(w.get("packet_period", 1.0))
    if period < packet.duration:
        raise ConfigurationError("packet period shorter than packet duration",
                                 path="waveform.packet_period")
    offset = float(w.get("start_offset", 0.0))
    n_packets = w.get("n_packets")
    if n_packets is None:
        if traj is None or traj.is_static:
            raise ConfigurationError("n_packets is required without a moving target",
                                     path="waveform.n_packets")
        n_packets = int(np.floor((traj.span[1] - offset - packet.duration) / period)) + 1
    if traj is not None and not traj.is_static:
        last = offset + (n_packets - 1) * period + packet.duration
        if last > traj.span[1] + 1e-9:
            raise ConfigurationError(f"packets run to {last:.3f} s, past the target path end "
                                     f"{traj.span[1]:.3f} s", path="waveform.n_packets")
    waveform = WaveformConfig(packet, period, offset, int(n_packets),
                              bool(w.get("synthesize_signal", False)), w.get("signal_snr_db"))

    c = raw.get("cir", {})
    bins = int(c.get("bins", 256))
    taps = int(c.get("taps", 512))
    try:
        plan = CirPlan(bins, packet.sample_rate / taps, taps)
    except DomainError as exc:
        raise ConfigurationError(str(exc), path="cir") from None

    d = raw.get("detector", {})
    try:
        det = DetectorParams(P=d.get("P", 15), K=d.get("K", 2048), epsilon=d.get("epsilon", 1e-3),
                             threshold=d.get("threshold"),
                             threshold_factor=d.get("threshold_factor", 5.0),
                             median_window=d.get("median_window", 101),
                             reference_index=d.get("reference_index", 0))
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc), path="detector") from None
    if det.reference_index >= waveform.n_packets:
        raise ConfigurationError("reference index beyond the packet count",
                                 path="detector.reference_index")

    nav = None
    if "navigation" in raw:
        nv = raw["navigation"]
        recv = nv.get("receivers", [])
        for i, nid in enumerate(recv):
            if nid not in nodes:
                raise ConfigurationError(f"unknown node {nid!r}", path=f"navigation.receivers.{i}")
        nav = NavigationConfig(float(nv.get("carrier", 24000.0)), list(recv),
                               float(nv.get("noise_floor_factor", 6.0)),
                               float(nv.get("peak_fraction", 0.3)),
                               tuple(nv.get("depth_bounds", (0.3, 2.0))),
                               float(nv.get("step_bound", 2.0)))
    rp = raw.get("report", {})
    report = ReportConfig(float(rp.get("crossing_half_window", 3.0)),
                          float(rp.get("crossing_sample_distance", 0.25)),
                          bool(rp.get("figures", True)))

    return ScenarioConfig(
        name=raw["name"], seed=int(raw["seed"]), environment=env, grid=grid,
        max_bounces=int(g.get("max_bounces", 6)), nodes=nodes, links=links, target=target,
        waveform=waveform, cir=plan, precursor=float(c.get("precursor", 2e-3)),
        estimate_taps=int(c.get("estimate_taps", 64)), detector=det,
        cir_source=d.get("cir_source", "simulated"),
        noise_msd_db=raw.get("noise", {}).get("cir_msd_db"),
        mode=InterpMode.parse(raw.get("interpolation", "spherical")), navigation=nav,
        report=report, raw=raw)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON: {exc}", path=str(path)) from None
    return parse_config(raw)
