"""
Test the voxslice command line

Commands are driven through main() with argument lists; output lands in tmp_path.
"""

import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import replace

import pandas as pd
import pytest

from voxslice import cli, gradcheck, pipeline
from voxslice.config import ExperimentConfig, PathsConfig, dump_toml, save_config
from voxslice.errors import ExitCode
from voxslice.gradcheck import GradcheckCase

from test_gradcheck import _broken_case


@pytest.fixture
def config_file(tmp_path, tiny_experiment):
    """The tiny experiment saved as TOML."""
    return str(save_config(tiny_experiment, tmp_path / "tiny.toml"))


@pytest.fixture
def data_dir(tmp_path, config_file):
    """Three generated samples on the tiny grid."""
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--config", config_file, "--out", str(out), "--count", "3"]) == ExitCode.OK
    return out


class TestGlobalFlags:
    """Test flags handled before any command runs."""

    def test_print_defaults(self, capsys):
        """Test --print-defaults writes the default config as TOML."""
        assert cli.main(["--print-defaults"]) == ExitCode.OK
        out = capsys.readouterr().out
        assert out == dump_toml(ExperimentConfig())
        assert tomllib.loads(out)["train"]["steps"] == ExperimentConfig().train.steps

    def test_no_command(self):
        """Test a bare invocation is a usage error."""
        assert cli.main([]) == ExitCode.USAGE

    def test_bad_choice(self):
        """Test argparse rejects unknown suites with exit 2."""
        with pytest.raises(SystemExit) as info:
            cli.main(["ablate", "--suite", "depth", "--out", "x"])
        assert info.value.code == 2


class TestGenData:
    """Test sample generation."""

    def test_files(self, data_dir):
        """Test three samples give nine tensor files and a manifest."""
        files = sorted(p.name for p in data_dir.iterdir())
        assert len([f for f in files if f.endswith(".ssoc")]) == 9
        assert "manifest.json" in files
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["seeds"] == [0, 1, 2]
        assert manifest["num_classes"] == 4
        assert len(manifest["artifacts"]) == 9

    def test_reproducible(self, tmp_path, config_file, data_dir):
        """Test a rerun writes byte-identical files."""
        again = tmp_path / "again"
        cli.main(["gen-data", "--config", config_file, "--out", str(again), "--count", "3"])
        for path in data_dir.iterdir():
            assert (again / path.name).read_bytes() == path.read_bytes()

    def test_default_out_from_paths(self, tmp_path, tiny_experiment):
        """Test gen-data without --out writes to paths.data_dir."""
        cfg = replace(tiny_experiment, paths=PathsConfig(data_dir=str(tmp_path / "from_config")))
        path = str(save_config(cfg, tmp_path / "paths.toml"))
        assert cli.main(["gen-data", "--config", path, "--count", "1"]) == ExitCode.OK
        assert (tmp_path / "from_config" / "manifest.json").exists()

    def test_invalid_partition(self, tmp_path):
        """Test a partition with a gap exits with the usage code."""
        bad = tmp_path / "bad.toml"
        bad.write_text("[model]\npartition = [[-5.0, -3.0], [-2.0, 3.0]]\n")
        code = cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o"), "--count", "1"])
        assert code == ExitCode.USAGE
        assert not (tmp_path / "o").exists()

    def test_mistyped_value(self, tmp_path):
        """Test a string for an integer field exits with the usage code."""
        bad = tmp_path / "typed.toml"
        bad.write_text('[train]\nsteps = "ten"\n')
        code = cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o"), "--count", "1"])
        assert code == ExitCode.USAGE
        assert not (tmp_path / "o").exists()

    def test_missing_config(self, tmp_path):
        """Test a missing config file exits with the usage code."""
        code = cli.main(["gen-data", "--config", str(tmp_path / "absent.toml"), "--out", str(tmp_path), "--count", "1"])
        assert code == ExitCode.USAGE


class TestTrainEval:
    """Test training and evaluation from the command line."""

    def test_train_outputs(self, tmp_path, config_file, capsys):
        """Test train writes the checkpoint, config, trace, metrics and manifest."""
        out = tmp_path / "run"
        assert cli.main(["train", "--config", config_file, "--out", str(out)]) == ExitCode.OK
        names = {p.name for p in out.iterdir()}
        assert names == {"model.ckpt", "config.toml", "trace.csv", "metrics.csv", "metrics.json", "manifest.json"}
        assert pd.read_csv(out / "trace.csv")["step"].tolist() == [2, 4]
        metrics = json.loads((out / "metrics.json").read_text())
        assert "final_loss" in metrics
        assert "miou:" in capsys.readouterr().out

    def test_train_deterministic(self, tmp_path, config_file):
        """Test two runs write identical checkpoints."""
        cli.main(["train", "--config", config_file, "--out", str(tmp_path / "a")])
        cli.main(["train", "--config", config_file, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()

    def test_train_then_eval(self, tmp_path, config_file, data_dir):
        """Test a trained checkpoint evaluates on generated data."""
        run = tmp_path / "run"
        assert cli.main(["train", "--config", config_file, "--out", str(run), "--data", str(data_dir)]) == ExitCode.OK
        report_dir = tmp_path / "report"
        code = cli.main(
            ["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(data_dir), "--out", str(report_dir)]
        )
        assert code == ExitCode.OK
        frame = pd.read_csv(report_dir / "metrics.csv")
        assert len(frame) == 3
        manifest = json.loads((report_dir / "manifest.json").read_text())
        assert manifest["seeds"] == [0, 1, 2]

    def test_eval_missing_checkpoint(self, tmp_path, data_dir):
        """Test a missing checkpoint is a usage error."""
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(data_dir)])
        assert code == ExitCode.USAGE

    def test_divergence_exit_code(self, tmp_path, config_file, monkeypatch):
        """Test a non-finite loss exits with the divergence code."""
        real = pipeline.total_loss

        def nan_loss(p, y, cfg=None, alpha=None):
            loss, breakdown = real(p, y, cfg, alpha)
            return loss, replace(breakdown, total=float("inf"))

        monkeypatch.setattr(pipeline, "total_loss", nan_loss)
        code = cli.main(["train", "--config", config_file, "--out", str(tmp_path / "run")])
        assert code == ExitCode.DIVERGENCE


class TestAblate:
    """Test ablation runs from the command line."""

    def test_fusion_suite(self, tmp_path, config_file):
        """Test the table holds one row per variant and seed."""
        out = tmp_path / "abl"
        assert cli.main(["ablate", "--suite", "fusion", "--config", config_file, "--out", str(out)]) == ExitCode.OK
        table = pd.read_csv(out / "ablation.csv")
        assert len(table) == 4
        summary = json.loads((out / "ablation_summary.json").read_text())
        assert summary["baseline"] == "concat_fusion"
        assert json.loads((out / "manifest.json").read_text())["inputs"]["suite"] == "fusion"


class TestGradcheckCommand:
    """Test the gradient check command."""

    def test_attention_passes(self, capsys):
        """Test the attention module passes and reports each case."""
        assert cli.main(["gradcheck", "--module", "attention"]) == ExitCode.OK
        assert "gradient checks passed" in capsys.readouterr().out

    def test_broken_case_fails(self, monkeypatch, capsys):
        """Test a wrong backward exits with the verification code."""
        monkeypatch.setattr(gradcheck, "REGISTRY", {"double": GradcheckCase("double", "core", _broken_case)})
        assert cli.main(["gradcheck", "--module", "core"]) == ExitCode.VERIFICATION_FAILED
        assert "FAIL" in capsys.readouterr().out


class TestHistogram:
    """Test the height histogram command."""

    def test_histogram(self, data_dir, capsys):
        """Test one row per class including empty."""
        assert cli.main(["histogram", "--data", str(data_dir), "--bin-width", "2"]) == ExitCode.OK
        out = capsys.readouterr().out
        assert "class_0" in out and "class_3" in out
        assert "z6" in out

    def test_empty_directory(self, tmp_path):
        """Test a directory without a manifest is a usage error."""
        assert cli.main(["histogram", "--data", str(tmp_path)]) == ExitCode.USAGE
