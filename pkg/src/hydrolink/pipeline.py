"""Command implementations: every function reads and writes artifacts under ``out``.

Layout::

    out/grid/manifest.json, out/grid/*.hgrd
    out/sim/<SRC>_<RCV>.hcir        noisy (or clean) CIR series
    out/sim/<SRC>_<RCV>_clean.hcir  noiseless CIR series
    out/sim/<SRC>_<RCV>.csv         CIR magnitude matrix
    out/sim/<SRC>_<RCV>.hsig        received baseband (when synthesized)
    out/est/<SRC>_<RCV>.hcir        modem-estimated CIR series
    out/detect/<SRC>_<RCV>.csv      detection statistic
    out/navigation.csv              estimated target track
    out/report/...                  summary tables and figures
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .channelsim import (CirSeries, LinkGeometry, TargetModel, Trajectory, cir_magnitude_csv,
                         delay_reference, load_cir_series, load_signal, save_cir_series,
                         save_signal, simulate_link)
from .config import ScenarioConfig
from .detector import detect_series, detection_csv
from .errors import ConfigurationError, MissingArtifactError
from .experiments import crossing_table_csv, crossing_windows, score_windows
from .fieldinterp import InterpMode
from .gridmap import MANIFEST_NAME, GridMapSet, _atomic_write
from .modem import build_packet, estimate_cir, random_bits
from .navloc import NodeSet, first_arrival_delay, save_trajectory_csv, track


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, text.encode())


def select_links(cfg: ScenarioConfig, link: Optional[str]):
    if link is None:
        return list(cfg.links)
    try:
        src, rcv = link.split(":")
    except ValueError:
        raise ConfigurationError(f"link must look like SRC:RCV, got {link!r}", path="--link")
    if (src, rcv) not in cfg.links:
        raise ConfigurationError(f"link {link} is not configured", path="--link")
    return [(src, rcv)]


def link_name(src: str, rcv: str) -> str:
    return f"{src}_{rcv}"


# precompute


def precompute(cfg: ScenarioConfig, out: Path) -> GridMapSet:
    maps = GridMapSet.build(cfg.environment, cfg.grid, cfg.max_bounces, on_degenerate="skip")
    maps.save(out / "grid")
    return maps


def load_maps(out: Path) -> GridMapSet:
    grid = out / "grid"
    if not (grid / MANIFEST_NAME).exists():
        raise MissingArtifactError(f"grid maps not found under {grid}; run precompute first")
    return GridMapSet.open(grid)


# simulate


def link_geometry(cfg: ScenarioConfig, src: str, rcv: str, carrier: Optional[float] = None,
                  with_target: bool = True) -> LinkGeometry:
    s = Trajectory.static(cfg.nodes[src].position)
    r = Trajectory.static(cfg.nodes[rcv].position)
    t = cfg.target
    if not (with_target and t.present):
        return LinkGeometry(s, r)
    carrier = carrier or cfg.waveform.packet.carrier
    model = TargetModel.for_carrier(t.radius, cfg.environment.sound_speed, carrier)
    return LinkGeometry(s, r, t.trajectory, model, t.sigma_override)


def transmitted_stream(cfg: ScenarioConfig):
    """Baseband transmit stream with one packet per period; returns (samples, packets, starts)."""
    w = cfg.waveform
    rate = w.packet.sample_rate
    rng = cfg.rng(1)
    starts = np.round(w.packet_starts() * rate).astype(np.int64)
    packets = [build_packet(w.packet, random_bits(w.packet, rng)) for _ in range(w.n_packets)]
    length = int(starts[-1] + packets[-1].samples.size + rate)
    x = np.zeros(length, dtype=complex)
    for s, p in zip(starts, packets):
        x[s:s + p.samples.size] += p.samples
    return x, packets, starts


def simulate(cfg: ScenarioConfig, out: Path, link: Optional[str] = None,
             mode: Optional[InterpMode] = None, keep_echo: bool = False) -> dict:
    maps = load_maps(out)
    mode = mode or cfg.mode
    epochs = cfg.waveform.epochs()
    results = {}
    stream = None
    for idx, (src, rcv) in enumerate(cfg.links):
        if (src, rcv) not in select_links(cfg, link):
            continue
        name = link_name(src, rcv)
        geom = link_geometry(cfg, src, rcv)
        ref = delay_reference(maps, geom, float(epochs[0]), cfg.cir.tap_rate, cfg.precursor, mode)
        kwargs = {}
        if cfg.waveform.synthesize_signal:
            if stream is None:
                stream = transmitted_stream(cfg)
            x, packets, starts = stream
            spread = int(np.ceil((ref + 0.05) * cfg.waveform.packet.sample_rate))
            kwargs = dict(signal=x, signal_rate=cfg.waveform.packet.sample_rate,
                          signal_windows=[(s, s + p.samples.size + spread)
                                          for s, p in zip(starts, packets)])
        res = simulate_link(maps, geom, epochs, carrier=cfg.waveform.packet.carrier, plan=cfg.cir,
                            mode=mode, noise_msd_db=cfg.noise_msd_db, rng=cfg.rng(2, idx),
                            reference=ref, keep_echo=keep_echo, link=name,
                            metadata={"source": src, "receiver": rcv}, **kwargs)
        sim = out / "sim"
        sim.mkdir(parents=True, exist_ok=True)
        save_cir_series(sim / f"{name}.hcir", res.cirs)
        save_cir_series(sim / f"{name}_clean.hcir", res.clean_cirs)
        _write(sim / f"{name}.csv", cir_magnitude_csv(res.cirs))
        if res.signal is not None:
            y = res.signal
            snr = cfg.waveform.signal_snr_db
            if snr is not None:
                rng = cfg.rng(3, idx)
                p = np.mean(np.abs(y[np.abs(y) > 0]) ** 2)
                noise = rng.standard_normal(y.size) + 1j * rng.standard_normal(y.size)
                y = y + noise * np.sqrt(p * 10 ** (-snr / 10) / 2)
            save_signal(sim / f"{name}.hsig", y, cfg.waveform.packet.sample_rate,
                        cfg.waveform.packet.carrier)
        results[name] = res
    return results


# estimate


def estimate(cfg: ScenarioConfig, out: Path, link: Optional[str] = None) -> dict:
    spec = cfg.waveform.packet
    _, packets, starts = transmitted_stream(cfg)
    results = {}
    for src, rcv in select_links(cfg, link):
        name = link_name(src, rcv)
        y, rate, _ = load_signal(out / "sim" / f"{name}.hsig")
        ref_series = load_cir_series(out / "sim" / f"{name}_clean.hcir")
        lag = int(round(ref_series.delay_offset * rate))
        taps = []
        for s, t in zip(starts, cfg.waveform.epochs()):
            snap = estimate_cir(y[s + lag:], spec, cfg.estimate_taps, float(t),
                                delay_offset=ref_series.delay_offset)
            taps.append(snap.taps)
        series = CirSeries(cfg.waveform.epochs(), np.array(taps), spec.symbol_rate / cfg.estimate_taps,
                           spec.symbol_rate, ref_series.delay_offset, name,
                           {"source": src, "receiver": rcv, "estimated": True})
        (out / "est").mkdir(parents=True, exist_ok=True)
        save_cir_series(out / "est" / f"{name}.hcir", series)
        results[name] = series
    return results


# detect


def cir_path(cfg: ScenarioConfig, out: Path, name: str) -> Path:
    sub = "est" if cfg.cir_source == "estimated" else "sim"
    return out / sub / f"{name}.hcir"


def detect(cfg: ScenarioConfig, out: Path, link: Optional[str] = None) -> dict:
    results = {}
    for src, rcv in select_links(cfg, link):
        name = link_name(src, rcv)
        series = load_cir_series(cir_path(cfg, out, name))
        ds = detect_series(series, cfg.detector)
        _write(out / "detect" / f"{name}.csv", detection_csv(ds))
        results[name] = ds
    return results


def read_detection_csv(path: Path):
    """Return (times, statistic, detected flags)."""
    if not path.exists():
        raise MissingArtifactError(f"detection table not found: {path}; run detect first")
    rows = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
    data = np.loadtxt(io.StringIO("\n".join(rows[1:])), delimiter=",", ndmin=2)
    return data[:, 1], data[:, 2], data[:, 4].astype(bool)


# navigate


def navigation_delays(cfg: ScenarioConfig, maps: GridMapSet, mode=None):
    """First-arrival delays (packets x receivers) of the target's navigation signal."""
    nav = cfg.navigation
    if nav is None:
        raise ConfigurationError("scenario has no navigation section", path="navigation")
    if not cfg.target.present:
        raise ConfigurationError("navigation needs a moving target", path="target")
    epochs = cfg.waveform.epochs()
    tgt = cfg.target.trajectory
    rows = np.empty((epochs.size, len(nav.receivers)))
    for q, rid in enumerate(nav.receivers):
        geom = LinkGeometry(tgt, Trajectory.static(cfg.nodes[rid].position))
        res = simulate_link(maps, geom, epochs, carrier=nav.carrier, plan=cfg.cir,
                            mode=mode or cfg.mode, noise_msd_db=cfg.noise_msd_db,
                            rng=cfg.rng(4, q), reference=0.0, link=f"nav_{rid}")
        for i, snap in enumerate(res.cirs):
            rows[i, q] = first_arrival_delay(snap, nav.noise_floor_factor, nav.peak_fraction)
    return epochs, rows


def navigate(cfg: ScenarioConfig, out: Path, mode=None):
    maps = load_maps(out)
    epochs, delays = navigation_delays(cfg, maps, mode)
    nav = cfg.navigation
    nodes = NodeSet(list(nav.receivers),
                    np.array([cfg.nodes[r].position.as_array() for r in nav.receivers]))
    start = cfg.target.trajectory.position(float(epochs[0]))
    est = track(delays, epochs, nodes, start, cfg.environment.sound_speed,
                depth_bounds=nav.depth_bounds, step_bound=nav.step_bound)
    save_trajectory_csv(out / "navigation.csv", epochs, est)
    return epochs, est


# report


def report(cfg: ScenarioConfig, out: Path, link: Optional[str] = None) -> dict:
    rep = out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    epochs = cfg.waveform.epochs()
    summary = []
    table = []
    series_for_plots = {}
    for src, rcv in select_links(cfg, link):
        name = link_name(src, rcv)
        times, stat, flags = read_detection_csv(out / "detect" / f"{name}.csv")
        windows = []
        if cfg.target.present and not cfg.target.trajectory.is_static:
            windows = crossing_windows(cfg.target.trajectory, cfg.nodes[src].position,
                                       cfg.nodes[rcv].position, epochs,
                                       cfg.report.crossing_half_window,
                                       cfg.report.crossing_sample_distance)
            score_windows(windows, stat, times, cfg.detector.threshold_factor,
                          exclude=(cfg.detector.reference_index,))
            for w in windows:
                w.detected = bool(np.any(flags[(times >= w.lo) & (times <= w.hi)]))
        table.extend((name, w) for w in windows)
        summary.append({
            "link": name,
            "packets": int(times.size),
            "detections": int(flags.sum()),
            "crossings": len(windows),
            "crossings_sampled": sum(w.sampled for w in windows),
            "crossings_detected": sum(w.detected for w in windows),
        })
        keep = np.arange(times.size) != cfg.detector.reference_index
        series_for_plots[name] = (times[keep], stat[keep], windows)
    lines = ["link,packets,detections,crossings,crossings_sampled,crossings_detected"]
    lines += [f"{s['link']},{s['packets']},{s['detections']},{s['crossings']},"
              f"{s['crossings_sampled']},{s['crossings_detected']}" for s in summary]
    _write(rep / "summary.csv", "\n".join(lines) + "\n")
    _write(rep / "crossings.csv", crossing_table_csv(table))
    _write(rep / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg.report.figures:
        from . import plotting
        for name, (times, stat, windows) in series_for_plots.items():
            plotting.statistic_figure(rep / f"{name}_statistic.png", times, stat, windows, name)
            cir_file = out / "sim" / f"{name}.hcir"
            if cir_file.exists():
                plotting.cir_figure(rep / f"{name}_cir.png", load_cir_series(cir_file))
        nav = out / "navigation.csv"
        if nav.exists() and cfg.target.present:
            plotting.trajectory_figure(rep / "trajectory.png", nav, cfg)
    return {"summary": summary, "crossings": table}
