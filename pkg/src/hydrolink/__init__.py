"""Bistatic underwater acoustic link simulation, CIR change detection and positioning."""

from .errors import (CapacityError, CausalityError, ConfigurationError, CoverageError,
                     DegenerateGeometryError, DomainError, GeometryError, GridFileError,
                     HydrolinkError, MissingArtifactError, NoDetectionError, OutOfBoundsError,
                     SingularSystemError, UndefinedReferenceError)
from .geoacoustics import Arrival, ArrivalSet, Environment, Position, compute_arrivals
from .gridmap import GridMap, GridMapSet, GridSpec, build_gridmap, load_gridmap, save_gridmap
from .fieldinterp import InterpMode, interpolate_field, interpolate_map, msd_interp
from .channelsim import (CirPlan, CirSeries, CirSnapshot, LinkGeometry, TargetModel, Trajectory,
                         bistatic_angle, simulate_link, target_strength)
from .modem import PacketSpec, build_packet, estimate_cir
from .detector import DetectorParams, detect_series, normalized_msd
from .navloc import NodeSet, PositionEstimate, first_arrival_delay, multilaterate, track
from .config import ScenarioConfig, load_config, parse_config

__version__ = "0.1.0"
