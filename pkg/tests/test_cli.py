"""Command-line entry point: subcommands, overrides, reports and error records."""

import json
import subprocess
import sys

import pytest

from adapterlab.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def smoke(tmp_path, *argv):
    return ["--preset", "smoke", "--out-dir", str(tmp_path), *argv]


class TestSingleRuns:
    def test_pretrain_finetune_eval_chain(self, capsys, tmp_path):
        code, out, _ = run(capsys, *smoke(tmp_path, "pretrain", "--mode", "with_adapter"))
        assert code == 0
        pre = json.loads(out)
        assert pre["iterations"] == 8 and 0 < pre["adapter_param_fraction"] < 1

        code, out, _ = run(capsys, *smoke(tmp_path, "finetune", "--checkpoint", pre["checkpoint"]))
        assert code == 0
        ft = json.loads(out)
        assert set(ft["metrics"]) >= {"accuracy", "f1", "mcc"}

        code, out, _ = run(capsys, *smoke(tmp_path, "eval", "--checkpoint", ft["checkpoint"]))
        assert code == 0 and json.loads(out)["metrics"] == ft["metrics"]

    def test_log_written(self, capsys, tmp_path):
        _, out, _ = run(capsys, *smoke(tmp_path, "finetune", "--mode", "without_adapter"))
        lines = open(json.loads(out)["log"]).read().splitlines()
        assert lines and all("loss" in json.loads(x) for x in lines)

    def test_attack_one_checkpoint(self, capsys, tmp_path):
        _, out, _ = run(capsys, *smoke(tmp_path, "finetune"))
        code, out, _ = run(capsys, *smoke(tmp_path, "attack", "--checkpoint", json.loads(out)["checkpoint"]))
        rec = json.loads(out)
        assert code == 0 and 0.0 <= rec["rate"] <= 1.0

    def test_override_changes_budget(self, capsys, tmp_path):
        _, out, _ = run(capsys, *smoke(tmp_path, "pretrain", "--pretrain.with_adapter.schedule.length=3"))
        assert json.loads(out)["iterations"] == 3


class TestSweeps:
    def test_sweep_and_report_regeneration(self, capsys, tmp_path):
        code, out, _ = run(capsys, *smoke(tmp_path / "s", "sweep-seeds"))
        assert code == 0
        rec = json.loads(out)
        assert rec["run_count"] == 6
        summaries = tmp_path / "s" / "sweep-seeds-summaries.csv"
        original = summaries.read_bytes()
        code, _, _ = run(capsys, "--out-dir", str(tmp_path / "r"), "report", str(tmp_path / "s" / "sweep-seeds.json"))
        assert code == 0
        assert (tmp_path / "r" / "sweep-seeds-summaries.csv").read_bytes() == original

    def test_seed_flag_moves_sweep_base(self, capsys, tmp_path):
        run(capsys, *smoke(tmp_path, "--seed", "40", "sweep-seeds", "--format", "json"))
        rep = json.loads((tmp_path / "sweep-seeds.json").read_text())
        assert rep["spec"]["seed_base"] == 40
        assert sorted({r["run_seed"] for r in rep["runs"]}) == [40, 41, 42]


class TestErrors:
    def test_bad_workers_is_usage(self, capsys, tmp_path):
        code, _, err = run(capsys, *smoke(tmp_path, "--workers", "0", "sweep-seeds"))
        assert code == 2 and json.loads(err)["error"] == "usage"

    def test_bad_config_value(self, capsys, tmp_path):
        code, _, err = run(capsys, *smoke(tmp_path, "sweep-seeds", "--sweeps.random_seed.values=[3,1]"))
        assert code == 2 and json.loads(err)["error"] == "config"

    def test_missing_checkpoint_is_io(self, capsys, tmp_path):
        code, _, err = run(capsys, *smoke(tmp_path, "eval", "--checkpoint", str(tmp_path / "none.ckpt")))
        assert code == 1 and json.loads(err)["error"] == "io"

    def test_missing_report(self, capsys, tmp_path):
        code, _, err = run(capsys, "report", str(tmp_path / "nope.json"))
        assert code == 1 and json.loads(err)["error"] == "io"

    def test_schema_violation(self, capsys, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"kind": "x", "runs": [{}], "summaries": [{}]}))
        code, _, err = run(capsys, "--out-dir", str(tmp_path), "report", str(tmp_path / "bad.json"))
        assert code == 1 and json.loads(err)["error"] == "schema"

    def test_unknown_preset(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--preset", "huge", "sweep-seeds"])
        assert exc.value.code == 2

    def test_stray_positional(self, capsys):
        with pytest.raises(SystemExit):
            main(["sweep-seeds", "extra"])

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "adapterlab", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "sweep-finetune" in out.stdout
