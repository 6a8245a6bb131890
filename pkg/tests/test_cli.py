import csv
import json
import subprocess
import sys

import pytest

from hydrolink.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from hydrolink.config import default_config

PIPELINE = ("precompute", "simulate", "detect", "navigate", "report")


def write_config(path, raw):
    path.write_text(json.dumps(raw))
    return str(path)


def run_all(cfg, out, extra=()):
    for cmd in PIPELINE:
        assert main([cmd, "--config", cfg, "--out", str(out), *extra]) == EXIT_OK, cmd


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in root.rglob("*") if p.is_file()}


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(row for row in f if not row.startswith("#")))


@pytest.fixture(scope="module")
def lake_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("lake")
    cfg = write_config(root / "lake.json", default_config("lake"))
    run_all(cfg, root / "a")
    return cfg, root


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["precompute", "--config", str(tmp_path / "x.json"),
                     "--out", str(tmp_path)]) == EXIT_MISSING

    def test_invalid_config(self, tmp_path, capsys):
        raw = default_config("lake")
        raw["waveform"]["packet_period"] = 0.01
        cfg = write_config(tmp_path / "c.json", raw)
        assert main(["precompute", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "waveform.packet_period" in capsys.readouterr().err

    def test_missing_upstream(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", default_config("lake"))
        out = str(tmp_path / "o")
        assert main(["simulate", "--config", cfg, "--out", out]) == EXIT_MISSING
        assert main(["detect", "--config", cfg, "--out", out]) == EXIT_MISSING
        assert main(["report", "--config", cfg, "--out", out]) == EXIT_MISSING

    def test_unknown_link(self, lake_run):
        cfg, root = lake_run
        assert main(["detect", "--config", cfg, "--out", str(root / "a"),
                     "--link", "T1:H9"]) == EXIT_CONFIG

    def test_console_script(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "hydrolink.cli", "precompute", "--config",
                            str(tmp_path / "none.json"), "--out", str(tmp_path)],
                           capture_output=True, text=True)
        assert r.returncode == EXIT_MISSING


class TestPipeline:
    def test_precompute_artifacts(self, lake_run):
        _, root = lake_run
        grid = sorted(p.name for p in (root / "a" / "grid").iterdir())
        assert grid == ["gridmap_sd1p5000.hgrd", "gridmap_sd4p6000.hgrd", "manifest.json"]
        manifest = json.loads((root / "a" / "grid" / "manifest.json").read_text())
        assert manifest["source_depths"] == [1.5, 4.6]
        assert len(manifest["files"]) == 2

    def test_outputs(self, lake_run):
        _, root = lake_run
        out = root / "a"
        for name in ("T1_H1", "T1_H5"):
            rows = read_csv(out / "detect" / f"{name}.csv")
            assert len(rows) == 243
            assert all(float(r["statistic"]) >= 0 for r in rows)
        summary = read_csv(out / "report" / "summary.csv")
        assert [r["link"] for r in summary] == ["T1_H1", "T1_H5"]
        assert all(int(r["crossings"]) == 5 for r in summary)
        nav = read_csv(out / "navigation.csv")
        assert len(nav) == 243
        assert (out / "report" / "trajectory.png").stat().st_size > 0

    def test_csv_conventions(self, lake_run):
        _, root = lake_run
        raw = (root / "a" / "detect" / "T1_H1.csv").read_bytes()
        assert b"\r\n" not in raw
        assert raw.split(b"\n")[1] == b"packet,time,statistic,threshold,detected"

    def test_byte_identical_rerun(self, lake_run):
        cfg, root = lake_run
        run_all(cfg, root / "b")
        a, b = tree(root / "a"), tree(root / "b")
        assert a.keys() == b.keys()
        assert [k for k in a if a[k] != b[k]] == []

    def test_seed_override_changes_noise(self, lake_run, tmp_path):
        cfg, root = lake_run
        out = tmp_path / "s"
        for cmd in ("precompute", "simulate"):
            assert main([cmd, "--config", cfg, "--out", str(out), "--seed", "7"]) == EXIT_OK
        assert (out / "sim" / "T1_H1_clean.hcir").read_bytes() == \
            (root / "a" / "sim" / "T1_H1_clean.hcir").read_bytes()
        assert (out / "sim" / "T1_H1.hcir").read_bytes() != \
            (root / "a" / "sim" / "T1_H1.hcir").read_bytes()

    def test_single_link_and_mode(self, lake_run, tmp_path):
        cfg, root = lake_run
        out = tmp_path / "m"
        assert main(["precompute", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert main(["simulate", "--config", cfg, "--out", str(out), "--link", "T1:H5",
                     "--mode", "plane"]) == EXIT_OK
        assert sorted(p.name for p in (out / "sim").iterdir()) == \
            ["T1_H5.csv", "T1_H5.hcir", "T1_H5_clean.hcir"]

    def test_no_target_gives_zero_detections(self, tmp_path):
        raw = default_config("lake")
        raw["target"] = {"present": False}
        cfg = write_config(tmp_path / "c.json", raw)
        for cmd in ("precompute", "simulate", "detect", "report"):
            assert main([cmd, "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
        summary = read_csv(tmp_path / "o" / "report" / "summary.csv")
        assert [int(r["detections"]) for r in summary] == [0, 0]

    @pytest.mark.xfail(strict=True, reason="no crossing clears 5x the median at -20 dB CIR "
                                           "noise for any start offset; both runs report 0")
    def test_start_offset_changes_detection_count(self, tmp_path):
        counts = []
        for offset in (0.0, 0.3):
            raw = default_config("lake")
            raw["waveform"]["start_offset"] = offset
            raw["waveform"]["n_packets"] = 242
            raw["links"] = [["T1", "H1"]]
            cfg = write_config(tmp_path / f"c{offset}.json", raw)
            out = str(tmp_path / f"o{offset}")
            for cmd in ("precompute", "simulate", "detect", "report"):
                assert main([cmd, "--config", cfg, "--out", out]) == EXIT_OK
            counts.append(int(read_csv(tmp_path / f"o{offset}" / "report" /
                                       "summary.csv")[0]["crossings_detected"]))
        assert counts[0] != counts[1]


class TestEstimatedPath:
    def test_detect_on_estimated_cirs(self, tmp_path):
        raw = default_config("lake")
        raw["links"] = [["T1", "H1"]]
        raw["waveform"].update(n_packets=6, synthesize_signal=True, signal_snr_db=30)
        raw["detector"]["cir_source"] = "estimated"
        raw.pop("navigation", None)
        cfg = write_config(tmp_path / "c.json", raw)
        out = tmp_path / "o"
        assert main(["precompute", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert main(["detect", "--config", cfg, "--out", str(out)]) == EXIT_MISSING
        assert main(["estimate", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert main(["detect", "--config", cfg, "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "detect" / "T1_H1.csv")
        assert len(rows) == 6
        assert list(rows[0]) == ["packet", "time", "statistic", "threshold", "detected"]
        assert all(float(r["statistic"]) < 0.1 for r in rows)
