import csv
import json
import subprocess
import sys

import pytest

from entropy_trap.cli import run_command
from entropy_trap.mdp import read_mdp


def run(tmp_path, *argv):
    return run_command([*argv, "--out", str(tmp_path)])


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def error_doc(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestToyCommand:
    def test_outputs(self, tmp_path):
        assert run(tmp_path, "toy") == 0
        rows = list(csv.DictReader((tmp_path / "landscape.csv").open()))
        s0 = {r["atom_id"]: r for r in rows if r["state_id"] == "s_0"}
        assert float(s0["A_1"]["q_soft"]) == pytest.approx(-0.603, abs=1e-3)
        assert float(s0["A_2"]["q_soft"]) == pytest.approx(-0.304, abs=1e-3)
        m = manifest(tmp_path)
        assert m["exit_code"] == 0 and m["version"] and "wall_time_s" in m

    def test_deterministic_csv(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        run(a, "toy")
        run(b, "toy")
        assert (a / "landscape.csv").read_bytes() == (b / "landscape.csv").read_bytes()

    def test_env_var_out(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ENTROPY_TRAP_OUT", str(tmp_path))
        assert run_command(["toy"]) == 0
        assert (tmp_path / "manifest.json").exists()


class TestExtendVerify:
    def test_round_trip_and_tamper(self, tmp_path, capsys):
        src = tmp_path / "src"
        src.mkdir()
        run(src, "toy")
        ext = tmp_path / "ext"
        ext.mkdir()
        assert run(ext, "extend", "--mdp", str(src / "toy.json"), "--state", "s_0",
                   "--target", "A_1:0.01,A_2:0.99") == 0
        report = json.loads((ext / "report.json").read_text())
        assert report["kl_at_target"] < 1e-6

        ver = tmp_path / "ver"
        ver.mkdir()
        args = ["verify", "--original", str(src / "toy.json"), "--extended", str(ext / "extended.json"),
                "--target", str(ext / "target.json")]
        assert run(ver, *args) == 0

        doc = json.loads((ext / "extended.json").read_text())
        trap = next(s for s in doc["states"] if s.endswith("::muT"))
        doc["states"][trap]["terminal_reward"] += 1.0
        (ext / "extended.json").write_text(json.dumps(doc))
        capsys.readouterr()
        assert run(ver, *args) == 2
        assert error_doc(capsys)["code"] == "certificate_failed"
        assert manifest(ver)["exit_code"] == 2

    def test_missing_target(self, tmp_path, capsys):
        run(tmp_path, "toy")
        capsys.readouterr()
        assert run(tmp_path, "extend", "--mdp", str(tmp_path / "toy.json")) == 2
        assert error_doc(capsys)["code"] == "usage"


class TestValidate:
    def test_valid(self, tmp_path):
        run(tmp_path, "toy")
        assert run(tmp_path, "validate", "--mdp", str(tmp_path / "toy.json")) == 0

    def test_invalid(self, tmp_path, capsys):
        run(tmp_path, "toy")
        doc = json.loads((tmp_path / "toy.json").read_text())
        doc["states"]["s_b"]["atoms"][0]["weight"] = -1.0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        capsys.readouterr()
        assert run(tmp_path, "validate", "--mdp", str(bad)) == 2
        err = error_doc(capsys)
        assert err["code"] == "invalid_mdp"
        assert any("nonpositive weight" in v for v in err["detail"]["violations"])

    def test_missing_file(self, tmp_path, capsys):
        assert run(tmp_path, "validate", "--mdp", str(tmp_path / "nope.json")) == 2
        assert error_doc(capsys)["code"] == "unreadable_input"


class TestLandscape:
    def test_filter(self, tmp_path):
        assert run(tmp_path, "landscape", "--env", "toy", "--state", "s_0") == 0
        rows = list(csv.DictReader((tmp_path / "landscape.csv").open()))
        assert [r["atom_id"] for r in rows] == ["A_1", "A_2"]

    def test_unknown_state(self, tmp_path, capsys):
        assert run(tmp_path, "landscape", "--env", "toy", "--state", "zz") == 2
        assert error_doc(capsys)["code"] == "usage"


class TestWorstCase:
    def test_chain(self, tmp_path):
        assert run(tmp_path, "worst-case", "--length", "3") == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["j_plus"] == pytest.approx(2.9701, abs=1e-9)
        assert report["j_minus"] == pytest.approx(-2.9701, abs=1e-9)
        assert read_mdp(tmp_path / "extended.json")


class TestTrainEval:
    def test_train_then_eval(self, tmp_path):
        assert run(tmp_path, "train", "--env", "toy", "--mode", "plain", "--episodes", "300",
                   "--seeds", "0,1", "--behavior", "epsilon_greedy", "--epsilon-explore", "0.3") == 0
        for seed in (0, 1):
            assert (tmp_path / f"train_plain_seed{seed}.csv").exists()
        summary = list(csv.DictReader((tmp_path / "summary_plain.csv").open()))
        assert [r["seed"] for r in summary] == ["0", "1"]
        ev = tmp_path / "ev"
        ev.mkdir()
        assert run(ev, "eval", "--env", "toy", "--tables", str(tmp_path / "tables_plain_seed0.json"),
                   "--selection", "greedy_plain", "--n-episodes", "3") == 0
        doc = json.loads((ev / "eval.json").read_text())
        assert doc["mean_return"] == pytest.approx(0.99)

    def test_train_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        for d in (a, b):
            run(d, "train", "--env", "trap-chain", "--length", "3", "--mode", "adaent", "--episodes", "100")
        assert (a / "train_adaent_seed0.csv").read_bytes() == (b / "train_adaent_seed0.csv").read_bytes()


class TestUsage:
    def test_unknown_command(self, tmp_path):
        assert run_command(["frobnicate"]) == 2

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "entropy_trap.cli", "toy", "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert (tmp_path / "toy.json").exists()
