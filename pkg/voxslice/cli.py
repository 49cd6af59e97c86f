"""
Command-line entry point

    voxslice gen-data [--config F] [--out DIR] --count N [--seed S]
    voxslice train [--config F] [--out DIR] [--data DIR]
    voxslice eval --checkpoint P --data DIR [--out DIR]
    voxslice ablate --suite NAME [--config F] [--out DIR] [--jobs N]
    voxslice gradcheck [--module NAME]
    voxslice histogram --data DIR [--bin-width W]

Exit codes follow voxslice.errors.ExitCode.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from voxslice import ablation, gradcheck
from voxslice.codec import file_digest
from voxslice.config import ExperimentConfig, dump_toml, load_config, save_config
from voxslice.errors import ExitCode, GradcheckError, ValidationError, VoxSliceError
from voxslice.metrics import OccupancyGrid, height_histogram
from voxslice.pipeline import evaluate, load_checkpoint, save_checkpoint, train
from voxslice.synthscene import dataset, generate, load_data_dir, save_sample

logger = logging.getLogger("voxslice.cli")

MANIFEST = "manifest.json"
CHECKPOINT = "model.ckpt"


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="[%(levelname)s] %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def write_manifest(out_dir: Path, command: str, inputs: Dict[str, Any], seeds: Sequence[int],
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    """manifest.json listing inputs, seeds and a sha256 of every artifact under out_dir."""
    artifacts = {
        p.relative_to(out_dir).as_posix(): file_digest(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != MANIFEST
    }
    payload = {"command": command, "inputs": inputs, "seeds": list(seeds), "artifacts": artifacts}
    if extra:
        payload.update(extra)
    path = out_dir / MANIFEST
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _config_inputs(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {"config": None}
    return {"config": path, "config_sha256": file_digest(path)}


def _out_dir(args, default) -> Path:
    """--out when given, else the location from the config [paths] table."""
    return Path(args.out) if args.out else Path(default)


def _print_report(report) -> None:
    print(report.to_frame().to_string(index=False))
    print(f"miou: {report.miou:.6f}")
    print(f"geo_iou: {report.geo_iou:.6f}")


# ---- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out_dir = _out_dir(args, cfg.paths.data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(args.count):
        seed = args.seed + i
        stem = f"sample_{i:04d}"
        save_sample(generate(cfg.scene, seed), out_dir, stem)
        samples.append({"stem": stem, "seed": seed})
        logger.debug("wrote %s (seed %d)", stem, seed)
    write_manifest(
        out_dir,
        "gen-data",
        _config_inputs(args.config),
        [s["seed"] for s in samples],
        {
            "samples": samples,
            "num_classes": cfg.scene.num_classes,
            "class_names": list(cfg.scene.class_names),
            "grid": list(cfg.scene.grid),
        },
    )
    logger.info("generated %d samples in %s", args.count, out_dir)
    return ExitCode.OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = _out_dir(args, Path(cfg.paths.out_dir) / "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = _config_inputs(args.config)
    if args.data:
        train_data = load_data_dir(args.data)
        val_data = None
        inputs["data"] = args.data
        inputs["data_manifest_sha256"] = file_digest(Path(args.data) / MANIFEST)
    else:
        train_data, val_data = dataset(cfg.scene, cfg.train.n_train, cfg.train.n_val, cfg.train.data_seed)

    result = train(cfg.model, cfg.train, train_data, val_data, cfg.loss, cfg.scene.class_names)
    save_checkpoint(out_dir / CHECKPOINT, result.model, {"class_names": list(cfg.scene.class_names)})
    save_config(cfg, out_dir / "config.toml")
    pd.DataFrame([t.as_dict() for t in result.trace]).to_csv(out_dir / "trace.csv", index=False)
    result.report.write_csv(out_dir / "metrics.csv")
    result.report.write_json(
        out_dir / "metrics.json",
        {"initial_loss": result.initial_loss, "final_loss": result.final_loss},
    )
    write_manifest(out_dir, "train", inputs, [cfg.model.seed, cfg.train.data_seed])
    _print_report(result.report)
    return ExitCode.OK


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    samples = load_data_dir(args.data)
    k = model.config.num_classes
    if samples and samples[0].gt.num_classes != k:
        raise ValidationError(
            f"data has {samples[0].gt.num_classes} classes, checkpoint model predicts {k}"
        )
    report = evaluate(model, samples, meta.get("class_names", ()))
    _print_report(report)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "metrics.csv")
        report.write_json(out_dir / "metrics.json")
        write_manifest(
            out_dir,
            "eval",
            {
                "checkpoint": args.checkpoint,
                "checkpoint_sha256": file_digest(args.checkpoint),
                "data": args.data,
            },
            [s.seed for s in samples],
        )
    return ExitCode.OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out_dir = _out_dir(args, Path(cfg.paths.out_dir) / f"ablate-{args.suite}")
    table = ablation.run_suite(args.suite, cfg, jobs=args.jobs)
    summary = ablation.summarize(table, args.suite)
    ablation.write_results(table, summary, out_dir)
    write_manifest(out_dir, "ablate", {**_config_inputs(args.config), "suite": args.suite}, cfg.train.seeds)
    print(table.to_string(index=False))
    if "ordering" in summary:
        ordering = summary["ordering"]
        print(f"ordering full >= max(global_only, local_only) >= none: {ordering['holds']}/{ordering['seeds']} seeds")
    return ExitCode.OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.module)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.op_name:<24} {r.max_rel_error:.3e}  coords={r.checked:<4} kinks={r.kinks:<3} {status}")
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        raise GradcheckError(worst.op_name, worst.max_rel_error, worst.worst)
    print(f"{len(results)} gradient checks passed")
    return ExitCode.OK


def cmd_histogram(args) -> int:
    samples = load_data_dir(args.data)
    if not samples:
        raise ValidationError(f"no samples in {args.data}")
    grid = OccupancyGrid(
        np.concatenate([s.gt.labels for s in samples], axis=0), samples[0].gt.num_classes
    )
    hist = height_histogram(grid, args.bin_width)
    frame = pd.DataFrame(
        hist.distributions,
        index=[f"class_{c}" for c in range(grid.num_classes)],
        columns=[f"z{b * args.bin_width}" for b in range(hist.distributions.shape[1])],
    )
    print(frame.round(3).to_string())
    return ExitCode.OK


# ---- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxslice", description="Vertical-slice occupancy experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    parser.add_argument("--print-defaults", action="store_true", help="print the default config as TOML")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate synthetic samples")
    p.add_argument("--config")
    p.add_argument("--out", help="output directory (default: paths.data_dir)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--out", help="output directory (default: paths.out_dir/train)")
    p.add_argument("--data", help="generated data directory (default: generate from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=ablation.SUITES)
    p.add_argument("--config")
    p.add_argument("--out", help="output directory (default: paths.out_dir/ablate-SUITE)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", choices=gradcheck.MODULES)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("histogram", help="per-class height distributions of a data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--bin-width", type=int, default=1)
    p.set_defaults(func=cmd_histogram)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    if args.print_defaults:
        sys.stdout.write(dump_toml(ExperimentConfig()))
        return ExitCode.OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return ExitCode.USAGE

    try:
        return int(args.func(args))
    except VoxSliceError as e:
        logger.error("%s", e.to_error_string())
        return int(e.code)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        logger.error("%s", e)
        return int(ExitCode.USAGE)


if __name__ == "__main__":
    sys.exit(main())
