"""
Matched-variant ablation runs

A suite is an ordered list of variants, each a set of ModelConfig overrides.
Every (variant, seed) cell trains from the same seed, so variants of one seed
share all parameters they have in common and see the same data.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from voxslice.config import ExperimentConfig
from voxslice.errors import ConfigError
from voxslice.pipeline import OccupancyModel, train
from voxslice.synthscene import dataset
from voxslice.vsf import DEFAULT_INTERVALS_M, uniform_partition

logger = logging.getLogger(__name__)

SUITES = ("slices", "strategy", "attention", "fusion")
COLUMNS = ["variant", "seed", "miou", "geo_iou", "loss_final", "miou_small", "miou_large"]


@dataclass(frozen=True)
class Variant:
    name: str
    changes: Tuple[Tuple[str, Any], ...]


def _uniform_intervals(cfg: ExperimentConfig, n: int) -> Tuple[Tuple[float, float], ...]:
    scene = cfg.scene
    return uniform_partition(scene.grid[2], n, scene.z_min_m, scene.z_max_m).local_intervals


def suite_variants(suite: str, cfg: ExperimentConfig) -> List[Variant]:
    """Variants in report order; the first is the baseline."""
    if suite == "slices":
        return [Variant(m, (("vsf_mode", m),)) for m in ("none", "local_only", "global_only", "full")]
    if suite == "strategy":
        return [
            Variant("uniform-8", (("partition", _uniform_intervals(cfg, 8)),)),
            Variant("uniform-4", (("partition", _uniform_intervals(cfg, 4)),)),
            Variant("default-6", (("partition", DEFAULT_INTERVALS_M),)),
        ]
    if suite == "attention":
        return [Variant(v, (("attention", v),)) for v in ("senet", "seattention3d")]
    if suite == "fusion":
        return [Variant(m, (("vsf_mode", m),)) for m in ("concat_fusion", "full")]
    raise ConfigError(f"unknown ablation suite {suite!r} (expected one of {list(SUITES)})")


def cell_config(cfg: ExperimentConfig, variant: Variant, seed: int) -> ExperimentConfig:
    return cfg.with_model(seed=seed, **dict(variant.changes)).validate()


def run_cell(cfg: ExperimentConfig, variant: Variant, seed: int) -> Dict[str, Any]:
    """Train one (variant, seed) cell and return its table row."""
    cell = cell_config(cfg, variant, seed)
    base_seed = cell.train.data_seed + seed * cell.train.n_train
    train_data, val_data = dataset(cell.scene, cell.train.n_train, cell.train.n_val, base_seed)
    result = train(cell.model, cell.train, train_data, val_data, cell.loss, cell.scene.class_names)
    report = result.report
    row = {
        "variant": variant.name,
        "seed": seed,
        "miou": report.miou,
        "geo_iou": report.geo_iou,
        "loss_final": result.final_loss,
        "miou_small": report.group_miou(cell.scene.group("small")),
        "miou_large": report.group_miou(cell.scene.group("large")),
    }
    logger.info("%s seed %d: miou %.4f geo_iou %.4f", variant.name, seed, report.miou, report.geo_iou)
    return row


def run_suite(suite: str, cfg: ExperimentConfig, jobs: int = 1) -> pd.DataFrame:
    """One row per (variant, seed), sorted by variant order then seed."""
    variants = suite_variants(suite, cfg)
    cells = [(v, s) for v in variants for s in cfg.train.seeds]
    if jobs <= 1:
        rows = [run_cell(cfg, v, s) for v, s in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, cfg, v, s) for v, s in cells]
            rows = [f.result() for f in futures]
    order = {v.name: i for i, v in enumerate(variants)}
    table = pd.DataFrame(rows, columns=COLUMNS)
    table["_order"] = table["variant"].map(order)
    table = table.sort_values(["_order", "seed"], kind="mergesort").drop(columns="_order")
    return table.reset_index(drop=True)


def _json_float(value) -> Optional[float]:
    value = float(value)
    return None if math.isnan(value) else value


def summarize(table: pd.DataFrame, suite: str) -> Dict[str, Any]:
    """Per-variant mean/std mIoU and gain relative to the first variant."""
    variants = list(dict.fromkeys(table["variant"]))
    grouped = table.groupby("variant", sort=False)["miou"]
    means = grouped.mean()
    stds = grouped.std(ddof=0)
    baseline = means[variants[0]]
    summary: Dict[str, Any] = {"suite": suite, "baseline": variants[0], "variants": {}}
    for name in variants:
        gain = (means[name] - baseline) / baseline if baseline else float("nan")
        summary["variants"][name] = {
            "mean_miou": _json_float(means[name]),
            "std_miou": _json_float(stds[name]),
            "relative_gain": _json_float(gain),
            "seeds": int((table["variant"] == name).sum()),
        }
    if suite == "slices":
        summary["ordering"] = slices_ordering(table)
    return summary


def slices_ordering(table: pd.DataFrame) -> Dict[str, Any]:
    """Per seed, whether full >= max(global_only, local_only) >= none holds."""
    wide = table.pivot(index="seed", columns="variant", values="miou")
    per_seed = {}
    for seed, row in wide.iterrows():
        branch = max(row["global_only"], row["local_only"])
        per_seed[str(int(seed))] = bool(row["full"] >= branch >= row["none"])
    return {"per_seed": per_seed, "holds": sum(per_seed.values()), "seeds": len(per_seed)}


def write_results(table: pd.DataFrame, summary: Dict[str, Any], out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    table.to_csv(csv_path, index=False)
    json_path = out_dir / "ablation_summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [csv_path, json_path]


def paired_parameters(cfg: ExperimentConfig, a: Variant, b: Variant, seed: int) -> Dict[str, bool]:
    """For every parameter name two variants share, whether initial values are identical."""
    pa = OccupancyModel(cell_config(cfg, a, seed).model).params
    pb = OccupancyModel(cell_config(cfg, b, seed).model).params
    return {name: bool(np.array_equal(pa[name].data, pb[name].data)) for name in pa if name in pb}
