import json
import shutil
import subprocess
import sys

import pytest

from decoypns import __version__
from decoypns.cli import EXIT_ATTACK, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

FAST = ["--rounds", "4", "--round-target", "600", "--calibration-rounds", "30", "--seed", "1"]


def _yaml(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text)
    return str(p)


class TestExitCodes:
    def test_clean_run_is_ok(self, tmp_path, capsys):
        code = main(["run", "--preset", "table4-baseline", "--attack", "off", "--out", str(tmp_path)] + FAST)
        assert code == EXIT_OK
        assert "Secure" in capsys.readouterr().out
        assert (tmp_path / "rounds.csv").is_file()

    def test_attack_detected(self, tmp_path):
        cfg = _yaml(tmp_path, "preset: table4-baseline\nlink: {distance_km: 50}\n")
        assert main(["run", "--config", cfg, "--attack", "on", "--out", str(tmp_path / "o")] + FAST) == EXIT_ATTACK

    def test_config_error(self, tmp_path, capsys):
        cfg = _yaml(tmp_path, "preset: table4-baseline\nprotocol: {s_mu: 0.69}\n")
        assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "line 2" in capsys.readouterr().err

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["run", "--preset", "nope", "--out", "x"])
        assert err.value.code == EXIT_CONFIG

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == EXIT_CONFIG

    def test_bad_workers(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["run", "--workers", "0", "--out", str(tmp_path)])
        assert err.value.code == EXIT_CONFIG

    def test_runtime_error_on_budget(self, tmp_path, capsys):
        cfg = _yaml(tmp_path, "preset: table4-baseline\npulse_budget: 1000\n")
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")] + FAST) == EXIT_RUNTIME
        assert "runtime error" in capsys.readouterr().err

    def test_config_and_preset_conflict(self, tmp_path):
        cfg = _yaml(tmp_path, "preset: table4-baseline\n")
        assert main(["run", "--config", cfg, "--preset", "table4", "--out", str(tmp_path)]) == EXIT_CONFIG


class TestSubcommands:
    def test_calibrate_then_optimize(self, tmp_path, capsys):
        assert main(["calibrate", "--preset", "table5-fielded", "--out", str(tmp_path)] + FAST) == EXIT_OK
        cal = json.loads((tmp_path / "calibration.json").read_text())
        cell = cal["configurations"]["table5-fielded"]
        assert cell["rounds"] == 30 and cell["delta"] > 0 and cell["q_mu"] > cell["q_nu"] > cell["y0"]
        capsys.readouterr()
        assert main(["optimize", "--calibration", str(tmp_path / "calibration.json"), "--out", str(tmp_path)]) == 0
        opt = json.loads((tmp_path / "optimization.json").read_text())
        assert opt["result"]["feasible"] and opt["input"]["q_mu"] == cell["q_mu"]

    def test_optimize_fielded_preset(self, capsys):
        assert main(["optimize", "--preset", "table5-fielded"]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["result"]["s_mu"] == pytest.approx(0.99434, abs=5e-6)
        assert out["throughput_gain_vs_reference"] == pytest.approx(0.3258, abs=5e-4)

    def test_optimize_missing_gains(self):
        assert main(["optimize", "--q-mu", "0.01"]) == EXIT_CONFIG

    def test_optimize_integrity_violation(self):
        assert main(["optimize", "--q-mu", "0.01", "--q-nu", "1e-4", "--y0", "1e-4"]) == EXIT_CONFIG

    def test_factorial_subset_and_report(self, tmp_path, capsys):
        out = tmp_path / "f"
        cfg = _yaml(tmp_path, "preset: table4-baseline\n")
        code = main(["factorial", "--config", cfg, "--out", str(out)] + FAST)
        assert code == EXIT_ATTACK  # 20 km attack suppresses decoys
        summary = (out / "summary.json").read_text()
        (out / "summary.json").unlink()
        assert main(["report", "--out", str(out)]) == EXIT_ATTACK
        assert (out / "summary.json").read_text() == summary

    def test_report_needs_files(self, tmp_path):
        assert main(["report", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_workers_identical_output(self, tmp_path):
        for w in ("1", "2"):
            main(["run", "--preset", "table4-baseline", "--attack", "both", "--workers", w,
                  "--out", str(tmp_path / w)] + FAST)
        assert (tmp_path / "1" / "rounds.csv").read_bytes() == (tmp_path / "2" / "rounds.csv").read_bytes()


def test_console_script_version():
    exe = shutil.which("decoypns")
    cmd = [exe] if exe else [sys.executable, "-m", "decoypns.cli"]
    res = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout
