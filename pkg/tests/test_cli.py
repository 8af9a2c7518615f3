import json
import socket
import subprocess
import sys
import threading

import pytest

from scmii.cli import DEFAULTS, ConfigError, config_from_dict, load_config, main, save_config
from scmii.geometry import load_calibration, transform_error


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


class TestConfig:
    def test_defaults_filled(self):
        cfg = config_from_dict({})
        assert cfg.doc == DEFAULTS and cfg.synthetic

    def test_partial_section_merged(self):
        cfg = config_from_dict({"link": {"bandwidth_mbps": 100}})
        assert cfg.section("link")["bandwidth_mbps"] == 100
        assert cfg.section("link")["latency_ms"] == DEFAULTS["link"]["latency_ms"]

    def test_unknown_key_names_path(self):
        with pytest.raises(ConfigError, match=r"\$\.link.*bandwith"):
            config_from_dict({"link": {"bandwith": 100}})

    def test_bad_type_names_path(self):
        with pytest.raises(ConfigError, match=r"\$\.scene\.devices"):
            config_from_dict({"scene": {"devices": "two"}})

    def test_scene_and_inputs_exclusive(self, tmp_path):
        (tmp_path / "a.bin").write_bytes(b"")
        with pytest.raises(ConfigError, match="either"):
            config_from_dict({"scene": {}, "inputs": {"frames": [["a.bin"]]}}, tmp_path)

    def test_missing_input_file(self, tmp_path):
        with pytest.raises(ConfigError, match=r"\$\.inputs\.frames\[0\]\[1\]"):
            (tmp_path / "a.bin").write_bytes(b"")
            config_from_dict({"inputs": {"frames": [["a.bin", "b.bin"]]}}, tmp_path)

    def test_round_trip(self, tmp_path):
        cfg = config_from_dict({"scene": {"seed": 4}, "fusion": {"method": "concat3"}})
        save_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg


class TestCommands:
    def test_gen_scene_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert main(["gen-scene", "--seed", "5", "--out", str(tmp_path / d)]) == 0
        for f in ("frame_000/device_0.bin", "frame_000/device_1.bin", "truth.json", "calibration_truth.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_run_writes_reports(self, tmp_path, capsys):
        assert main(["run", "--seed", "3", "--out", str(tmp_path)]) == 0
        for f in ("detections.json", "timing.json", "timing.txt", "report.json", "report.txt"):
            assert (tmp_path / f).exists()
        labels = [r["label"] for r in json.loads((tmp_path / "report.json").read_text())["rows"]]
        assert labels == ["single-sensor d0", "single-sensor d1", "input-fusion", "max", "concat-k1", "concat-k3"]
        assert "speedup" in capsys.readouterr().out

    def test_eval_matches_run_report(self, tmp_path):
        assert main(["run", "--seed", "3", "--out", str(tmp_path)]) == 0
        assert main(["gen-scene", "--seed", "3", "--out", str(tmp_path / "scene")]) == 0
        assert main(["eval", str(tmp_path / "detections.json"), str(tmp_path / "scene" / "truth.json"),
                     "--out", str(tmp_path / "ev")]) == 0
        ev = json.loads((tmp_path / "ev" / "eval.json").read_text())["rows"][0]["ap"]
        rows = {r["label"]: r["ap"] for r in json.loads((tmp_path / "report.json").read_text())["rows"]}
        assert ev == rows["max"]

    def test_calibrate_from_files(self, tmp_path):
        assert main(["gen-scene", "--seed", "2", "--out", str(tmp_path)]) == 0
        cfg = {"inputs": {"frames": [["frame_000/device_0.bin", "frame_000/device_1.bin"]]},
               "calibration": {"guesses": {"1": [16.7, 15.3, 0.0, 0.0, 0.0, 3.48]}}}
        assert main(["calibrate", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path / "cal")]) == 0
        got, ref = load_calibration(tmp_path / "cal" / "calibration.json")
        truth, _ = load_calibration(tmp_path / "calibration_truth.json")
        assert ref == 0
        dt, dr = transform_error(got[1], truth[1])
        assert dt < 0.1 and dr < 0.01

    def test_missing_calibration_path_exit_1(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.json", {"calibration": {"path": "nope.json"}})
        assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == 1
        assert "$.calibration.path" in capsys.readouterr().err

    def test_bad_config_exit_1(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.json", {"link": {"bandwith": 5}})
        assert main(["run", "--config", cfg]) == 1
        assert "bandwith" in capsys.readouterr().err

    def test_usage_exit_2(self, capsys):
        assert main([]) == 2
        assert main(["run", "--fusion", "sum"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_socket_transport_rejected_by_run(self, tmp_path):
        cfg = write(tmp_path / "c.json", {"runtime": {"transport": "socket"}})
        assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == 1

    def test_bench(self, tmp_path):
        assert main(["bench", "--seed", "1", "--out", str(tmp_path)]) == 0
        assert len(json.loads((tmp_path / "bench.json").read_text())["rows"]) == 12

    def test_serve_and_edge_match_run(self, tmp_path):
        args = ["--seed", "3", "--timeout-ms", "30000"]
        assert main(["run", *args, "--out", str(tmp_path / "sim")]) == 0
        port = free_port()
        server = threading.Thread(target=main, args=(["serve", *args, "--listen", f"127.0.0.1:{port}",
                                                      "--out", str(tmp_path / "sock")],))
        server.start()
        edges = [threading.Thread(target=main, args=(["edge", *args, "--connect", f"127.0.0.1:{port}",
                                                      "--device-id", str(d)],)) for d in (0, 1)]
        for e in edges:
            e.start()
        for e in edges:
            e.join(60)
        server.join(60)
        assert (tmp_path / "sock" / "detections.json").read_bytes() == \
            (tmp_path / "sim" / "detections.json").read_bytes()

    def test_console_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "scmii.cli", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "gen-scene" in r.stdout
