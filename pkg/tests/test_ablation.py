"""
Test the ablation harness
"""

import json

import numpy as np
import pandas as pd
import pytest

from voxslice import ablation
from voxslice.config import ExperimentConfig
from voxslice.errors import ConfigError
from voxslice.vsf import DEFAULT_INTERVALS_M


class TestVariants:
    """Test suite definitions."""

    def test_slices(self):
        """Test the four slice rows in report order."""
        names = [v.name for v in ablation.suite_variants("slices", ExperimentConfig())]
        assert names == ["none", "local_only", "global_only", "full"]

    def test_strategy_intervals(self):
        """Test the three interval sets of the strategy suite."""
        variants = ablation.suite_variants("strategy", ExperimentConfig())
        partitions = {v.name: dict(v.changes)["partition"] for v in variants}
        assert partitions["uniform-8"] == tuple((float(lo), float(lo + 1)) for lo in range(-5, 3))
        assert partitions["uniform-4"] == ((-5.0, -3.0), (-3.0, -1.0), (-1.0, 1.0), (1.0, 3.0))
        assert partitions["default-6"] == DEFAULT_INTERVALS_M

    def test_attention_and_fusion(self):
        """Test the attention and fusion pairs."""
        cfg = ExperimentConfig()
        assert [v.name for v in ablation.suite_variants("attention", cfg)] == ["senet", "seattention3d"]
        assert [v.name for v in ablation.suite_variants("fusion", cfg)] == ["concat_fusion", "full"]

    def test_unknown_suite(self):
        """Test unknown suites are configuration errors."""
        with pytest.raises(ConfigError, match="depth"):
            ablation.suite_variants("depth", ExperimentConfig())

    def test_cell_config(self, tiny_experiment):
        """Test a cell applies the variant and the seed to the model only."""
        variant = ablation.suite_variants("attention", tiny_experiment)[0]
        cell = ablation.cell_config(tiny_experiment, variant, 7)
        assert cell.model.attention == "senet"
        assert cell.model.seed == 7
        assert cell.scene == tiny_experiment.scene


class TestPairing:
    """Test matched initialization across variants."""

    @pytest.mark.parametrize("suite", ["slices", "attention", "fusion", "strategy"])
    def test_shared_parameters_identical(self, tiny_experiment, suite):
        """Test variants of one seed share every parameter they have in common."""
        variants = ablation.suite_variants(suite, tiny_experiment)
        shared = ablation.paired_parameters(tiny_experiment, variants[0], variants[-1], seed=1)
        assert shared
        assert all(shared.values())

    def test_seeds_differ(self, tiny_experiment):
        """Test different seeds give different initial parameters."""
        from voxslice.pipeline import OccupancyModel

        v = ablation.suite_variants("fusion", tiny_experiment)[1]
        a = OccupancyModel(ablation.cell_config(tiny_experiment, v, 0).model).params
        b = OccupancyModel(ablation.cell_config(tiny_experiment, v, 1).model).params
        assert not np.array_equal(a["head.0.weight"].data, b["head.0.weight"].data)


class TestRunSuite:
    """Test running and summarizing suites."""

    def test_fusion_rows(self, tiny_experiment):
        """Test one row per (variant, seed) in variant then seed order."""
        table = ablation.run_suite("fusion", tiny_experiment)
        assert list(table.columns) == ablation.COLUMNS
        assert table["variant"].tolist() == ["concat_fusion", "concat_fusion", "full", "full"]
        assert table["seed"].tolist() == [0, 1, 0, 1]
        assert table["miou"].between(0.0, 1.0).all()

    def test_strategy_rows(self, tiny_experiment):
        """Test the strategy suite emits three variants per seed."""
        table = ablation.run_suite("strategy", tiny_experiment)
        assert len(table) == 3 * len(tiny_experiment.train.seeds)

    def test_rows_reproducible(self, tiny_experiment):
        """Test repeated runs give identical tables."""
        a = ablation.run_suite("attention", tiny_experiment)
        b = ablation.run_suite("attention", tiny_experiment)
        pd.testing.assert_frame_equal(a, b)

    @pytest.mark.slow
    @pytest.mark.timeout(600)
    def test_parallel_matches_serial(self, tiny_experiment):
        """Test worker processes reproduce the serial table."""
        serial = ablation.run_suite("fusion", tiny_experiment, jobs=1)
        parallel = ablation.run_suite("fusion", tiny_experiment, jobs=2)
        pd.testing.assert_frame_equal(serial, parallel)

    def test_slices_suite_summary(self, tiny_experiment):
        """Test a real slices run reports the ordering check for every seed."""
        table = ablation.run_suite("slices", tiny_experiment)
        assert len(table) == 4 * len(tiny_experiment.train.seeds)
        ordering = ablation.summarize(table, "slices")["ordering"]
        assert set(ordering["per_seed"]) == {str(s) for s in tiny_experiment.train.seeds}
        assert ordering["seeds"] == len(tiny_experiment.train.seeds)
        assert ordering["holds"] == sum(ordering["per_seed"].values())

    @pytest.mark.slow
    @pytest.mark.timeout(3600)
    def test_default_benchmark_slices_ordering(self):
        """Test full >= max(global_only, local_only) >= none holds in at least 4 of 5 default seeds."""
        cfg = ExperimentConfig().validate()
        assert cfg.scene.grid == (24, 24, 16) and cfg.train.steps == 200
        table = ablation.run_suite("slices", cfg, jobs=4)
        ordering = ablation.summarize(table, "slices")["ordering"]
        assert ordering["seeds"] == 5
        assert ordering["holds"] >= 4, ordering["per_seed"]

    def test_summary(self):
        """Test mean, std and gain relative to the first variant."""
        table = pd.DataFrame(
            [
                {"variant": "none", "seed": 0, "miou": 0.2},
                {"variant": "none", "seed": 1, "miou": 0.4},
                {"variant": "full", "seed": 0, "miou": 0.4},
                {"variant": "full", "seed": 1, "miou": 0.5},
            ]
        )
        summary = ablation.summarize(table, "fusion")
        assert summary["baseline"] == "none"
        assert summary["variants"]["none"]["mean_miou"] == pytest.approx(0.3)
        assert summary["variants"]["none"]["std_miou"] == pytest.approx(0.1)
        assert summary["variants"]["full"]["relative_gain"] == pytest.approx(0.5)
        assert summary["variants"]["full"]["seeds"] == 2
        assert "ordering" not in summary

    def test_slices_ordering(self):
        """Test per-seed ordering full >= max(global_only, local_only) >= none."""
        rows = []
        for seed, values in enumerate([(0.1, 0.2, 0.3, 0.4), (0.3, 0.2, 0.2, 0.25)]):
            for name, miou in zip(["none", "local_only", "global_only", "full"], values):
                rows.append({"variant": name, "seed": seed, "miou": miou})
        ordering = ablation.summarize(pd.DataFrame(rows), "slices")["ordering"]
        assert ordering["per_seed"] == {"0": True, "1": False}
        assert ordering["holds"] == 1 and ordering["seeds"] == 2

    def test_write_results(self, tmp_path):
        """Test the CSV table and JSON summary are written."""
        table = pd.DataFrame([{c: 0 for c in ablation.COLUMNS}])
        table["variant"] = "full"
        table["miou"] = float("nan")
        summary = ablation.summarize(table, "fusion")
        csv_path, json_path = ablation.write_results(table, summary, tmp_path / "out")
        assert pd.read_csv(csv_path).shape == (1, len(ablation.COLUMNS))
        assert json.loads(json_path.read_text())["variants"]["full"]["mean_miou"] is None
