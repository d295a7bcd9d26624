"""Command-line entry point for reproducible runs.

Subcommands: gen-data, train, eval, predict, robustness, export-map.
Every run writes one manifest.json into its output directory recording the
command, the effective configuration (config-file values overridden by
flags), seeds, input/output paths, a version string and wall-clock timings;
re-running with the same seed and version reproduces the artifacts
byte-identically.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .errors import ConfigError, CrossRiskError
from .export import write_pair_pgm, write_pgm, write_values_csv
from .grid_branch import Switches
from .metrics import write_reports_csv, write_reports_json
from .model import ModelConfig, load_checkpoint, model_forward
from .stt1 import read_json, write_json, write_stt1
from .synth import GeneratorProfile, generate_city, load_dataset, save_dataset
from .training import (
    TrainConfig,
    build_joint_data,
    city_inputs_at,
    evaluate,
    measure_timings,
    robustness_sweep,
    train,
)

DEFAULT_CITY_PROFILES = [
    # dense metropolis: full modality set, mid-week reporting origin
    {"name": "metro_a", "w": 20, "h": 20, "n": 64, "valid_fraction": 243 / 400, "has_poi": True, "origin_weekday": 1},
    # sparser city: no functional-similarity modality, Monday origin
    {"name": "metro_b", "w": 20, "h": 20, "n": 48, "valid_fraction": 197 / 400, "has_poi": False, "origin_weekday": 0},
]

PROFILE_KEYS = set(GeneratorProfile.__dataclass_fields__)


def positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def noise_levels(text: str) -> list:
    try:
        levels = [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad noise levels {text!r}") from None
    if not levels or any(x < 0 for x in levels):
        raise argparse.ArgumentTypeError(f"noise levels must be nonnegative, got {text!r}")
    return levels


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"crossrisk-{__version__}"


def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = read_json(path)
    # a previous run's manifest is also a valid config source
    if "config" in cfg and "command" in cfg:
        return cfg["config"]
    return cfg


def effective_config(args: argparse.Namespace, keys: list) -> dict:
    """Config-file values overridden by explicitly given flags."""
    file_cfg = load_config(args.config)
    merged = {}
    for key in keys:
        flag_val = getattr(args, key.replace("-", "_"), None)
        merged[key] = flag_val if flag_val is not None else file_cfg.get(key)
    for key, val in file_cfg.items():
        merged.setdefault(key, val)
    return merged


def write_manifest(out_dir: Path, command: str, config: dict, inputs: list, outputs: list, started: float) -> None:
    write_json(
        out_dir / "manifest.json",
        {
            "command": command,
            "config": config,
            "version": _git_describe(),
            "package_version": __version__,
            "inputs": [str(p) for p in inputs],
            "outputs": [str(p) for p in outputs],
            "wall_seconds": time.time() - started,
        },
    )


def _city_profiles(cfg: dict) -> list:
    n_cities = int(cfg.get("cities") or 2)
    profiles = cfg.get("city_profiles") or DEFAULT_CITY_PROFILES
    out = []
    for i in range(n_cities):
        if i < len(profiles):
            spec = dict(profiles[i])
        else:
            spec = {"name": f"city_{i + 1}", "w": 12, "h": 12, "n": 24, "origin_weekday": i % 7}
        out.append(spec)
    return out


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = effective_config(args, ["cities", "weeks", "seed", "out", "city_profiles"])
    cfg["weeks"] = int(cfg["weeks"] or 8)
    cfg["seed"] = int(cfg["seed"] or 0)
    out_dir = Path(cfg["out"] or "data")
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, spec in enumerate(_city_profiles(cfg)):
        spec = dict(spec)
        name = spec.pop("name", f"city_{i + 1}")
        w = int(spec.pop("w", 20))
        h = int(spec.pop("h", 20))
        n = int(spec.pop("n", 48))
        weeks = int(spec.pop("weeks", cfg["weeks"]))
        profile = GeneratorProfile(**{k: v for k, v in spec.items() if k in PROFILE_KEYS})
        ds = generate_city(seed=cfg["seed"] + i, w=w, h=h, n=n, weeks=weeks, profile=profile, name=name)
        save_dataset(ds, out_dir / name)
        outputs.append(out_dir / name)
        print(f"generated {name}: {w}x{h} grid, {n} nodes, {weeks} weeks -> {out_dir / name}")
    write_manifest(out_dir, "gen-data", cfg, [], outputs, started)
    return 0


def _load_datasets(data_dir) -> list:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ConfigError(f"dataset directory {data_dir} does not exist")
    dirs = sorted(p for p in data_dir.iterdir() if (p / "manifest.json").exists())
    if not dirs:
        raise ConfigError(f"no city datasets under {data_dir}")
    return [load_dataset(p) for p in dirs]


def cmd_train(args) -> int:
    started = time.time()
    keys = ["data", "out", "seed", "max-epochs", "patience", "window", "ablate", "batch-size", "lr", "d", "heads", "layers"]
    cfg = effective_config(args, keys)
    if not cfg.get("data"):
        raise ConfigError("--data is required")
    out_dir = Path(cfg["out"] or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = _load_datasets(cfg["data"])
    joint = build_joint_data(datasets, t_in=int(cfg["window"] or 12))
    switches = Switches.from_tokens(cfg["ablate"] or [])
    train_cfg = TrainConfig(
        lr=float(cfg["lr"] or 1e-3),
        max_epochs=int(cfg["max-epochs"] or 50),
        patience=int(cfg["patience"] or 10),
        batch_size=int(cfg["batch-size"] or 32),
        seed=int(cfg["seed"] or 0),
        switches=switches,
    )
    model_cfg = ModelConfig(
        f_geo=joint.datasets[0].x_geo.shape[2],
        f_sem=joint.datasets[0].x_sem.shape[2],
        d=int(cfg["d"] or 8),
        heads=int(cfg["heads"] or 2),
        layers=int(cfg["layers"]) if cfg["layers"] is not None else 2,
    )
    result = train(joint, train_cfg, model_config=model_cfg, out_dir=out_dir)
    print(
        f"trained {len(result.history)} epochs; best val loss "
        f"{min(h['val_loss'] for h in result.history):.6g} at epoch {result.best_epoch}"
    )
    outputs = [out_dir / "checkpoint", out_dir / "history.csv"]
    write_manifest(out_dir, "train", cfg, [cfg["data"]], outputs, started)
    return 0


def _checkpoint_and_data(cfg):
    if not cfg.get("data") or not cfg.get("checkpoint"):
        raise ConfigError("both --data and --checkpoint are required")
    datasets = _load_datasets(cfg["data"])
    params = load_checkpoint(cfg["checkpoint"])
    joint = build_joint_data(datasets, t_in=int(cfg["window"] or 12))
    return params, joint


def cmd_eval(args) -> int:
    started = time.time()
    cfg = effective_config(args, ["data", "checkpoint", "out", "period", "window", "ablate", "seed"])
    out_dir = Path(cfg["out"] or "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    params, joint = _checkpoint_and_data(cfg)
    switches = Switches.from_tokens(cfg["ablate"] or [])
    period = cfg["period"] or "all-day"
    report = evaluate(params, joint, period=period, switches=switches)
    report.t_forward, report.t_batch = measure_timings(params, joint, TrainConfig(batch_size=8))
    write_reports_csv([report], out_dir / "metrics.csv")
    write_reports_json([report], out_dir / "metrics.json")
    for row in report.rows():
        print(
            f"{row['city']} [{row['period']}] rmse={row['rmse']:.4f} "
            f"recall={row['recall_pct'] if row['recall_pct'] is not None else 'n/a'} map={row['map'] if row['map'] is not None else 'n/a'}"
        )
    write_manifest(out_dir, "eval", cfg, [cfg["data"], cfg["checkpoint"]], [out_dir / "metrics.csv", out_dir / "metrics.json"], started)
    return 0


def cmd_predict(args) -> int:
    started = time.time()
    cfg = effective_config(args, ["data", "checkpoint", "out", "step", "window", "heatmap", "seed"])
    out_dir = Path(cfg["out"] or "predict")
    out_dir.mkdir(parents=True, exist_ok=True)
    params, joint = _checkpoint_and_data(cfg)
    step = int(cfg["step"]) if cfg["step"] is not None else int(joint.samples.test_idx[0])
    if step not in set(joint.samples.test_idx.tolist()):
        raise ConfigError(f"step {step} outside the test range [{joint.samples.test_idx[0]}, {joint.samples.test_idx[-1]}]")
    batch = [city_inputs_at(ds, step, joint.t_in) for ds in joint.datasets]
    outputs = []
    for risk_map, ds in zip(model_forward(batch, params), joint.datasets):
        stt_path = out_dir / f"riskmap_{ds.name}.stt1"
        write_stt1(stt_path, risk_map.values)
        outputs.append(stt_path)
        if cfg["heatmap"]:
            pgm_path = out_dir / f"riskmap_{ds.name}.pgm"
            write_pgm(pgm_path, risk_map.values.data, ds.mask)
            outputs.append(pgm_path)
        print(f"{ds.name}: wrote risk map for sample {step} (target step {joint.samples.target_index(step)})")
    write_manifest(out_dir, "predict", {**cfg, "step": step}, [cfg["data"], cfg["checkpoint"]], outputs, started)
    return 0


def cmd_robustness(args) -> int:
    started = time.time()
    cfg = effective_config(args, ["data", "checkpoint", "out", "noise-levels", "period", "window", "seed"])
    out_dir = Path(cfg["out"] or "robustness")
    out_dir.mkdir(parents=True, exist_ok=True)
    params, joint = _checkpoint_and_data(cfg)
    levels = cfg["noise-levels"] or [0.0, 0.1, 0.2, 0.3, 0.5]
    period = cfg["period"] or "all-day"
    reports = robustness_sweep(params, joint, levels=levels, seed=int(cfg["seed"] or 0), period=period)
    write_reports_csv(reports, out_dir / "robustness.csv")
    write_reports_json(reports, out_dir / "robustness.json")
    for report in reports:
        for row in report.rows():
            print(f"noise={row['noise_level']} {row['city']}: rmse={row['rmse']:.4f}")
    write_manifest(out_dir, "robustness", cfg, [cfg["data"], cfg["checkpoint"]], [out_dir / "robustness.csv"], started)
    return 0


def cmd_export_map(args) -> int:
    started = time.time()
    cfg = effective_config(args, ["data", "checkpoint", "out", "step", "window", "seed"])
    out_dir = Path(cfg["out"] or "maps")
    out_dir.mkdir(parents=True, exist_ok=True)
    params, joint = _checkpoint_and_data(cfg)
    step = int(cfg["step"]) if cfg["step"] is not None else int(joint.samples.test_idx[0])
    if step not in set(joint.samples.test_idx.tolist()):
        raise ConfigError(f"step {step} outside the test range [{joint.samples.test_idx[0]}, {joint.samples.test_idx[-1]}]")
    batch = [city_inputs_at(ds, step, joint.t_in) for ds in joint.datasets]
    outputs = []
    for risk_map, ds in zip(model_forward(batch, params), joint.datasets):
        truth = ds.targets[joint.samples.target_index(step)]
        stem = out_dir / f"{ds.name}_step{step}"
        write_pgm(f"{stem}_pred.pgm", risk_map.values.data, ds.mask)
        write_pgm(f"{stem}_truth.pgm", truth, ds.mask)
        write_pair_pgm(f"{stem}_pair.pgm", risk_map.values.data, truth, ds.mask)
        write_stt1(f"{stem}_pred.stt1", risk_map.values)
        write_values_csv(f"{stem}.csv", risk_map.values.data, truth, ds.mask)
        outputs.extend([f"{stem}_pred.pgm", f"{stem}_truth.pgm", f"{stem}_pair.pgm", f"{stem}.csv"])
        print(f"{ds.name}: exported prediction/truth pair for sample {step}")
    write_manifest(out_dir, "export-map", {**cfg, "step": step}, [cfg["data"], cfg["checkpoint"]], outputs, started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossrisk", description="Multi-city accident-risk forecasting harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (or a previous run's manifest); flags override")
        p.add_argument("--seed", type=int, help="base random seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="generate synthetic city datasets")
    common(p)
    p.add_argument("--cities", type=positive_int, help="number of cities (default 2)")
    p.add_argument("--weeks", type=positive_int, help="weeks of hourly data per city (default 8)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on generated datasets")
    common(p)
    p.add_argument("--data", help="directory holding city dataset subdirectories")
    p.add_argument("--max-epochs", type=positive_int)
    p.add_argument("--patience", type=positive_int, help="early-stopping patience (default 10)")
    p.add_argument("--window", type=positive_int, help="input window length (default 12)")
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--d", type=positive_int, help="embedding width")
    p.add_argument("--heads", type=positive_int)
    p.add_argument("--layers", type=int)
    p.add_argument("--ablate", action="append", choices=["stg", "sts", "stm", "lma"], help="disable a component (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--period", choices=["all-day", "high-freq"])
    p.add_argument("--window", type=positive_int)
    p.add_argument("--ablate", action="append", choices=["stg", "sts", "stm", "lma"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write next-step risk maps for one test sample")
    common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--step", type=int, help="sample index (must fall in the test split)")
    p.add_argument("--window", type=positive_int)
    p.add_argument("--heatmap", action="store_true", help="also write PGM heatmaps")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("robustness", help="input-noise robustness sweep")
    common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--noise-levels", type=noise_levels, help="comma-separated levels, e.g. 0,0.1,0.5")
    p.add_argument("--period", choices=["all-day", "high-freq"])
    p.add_argument("--window", type=positive_int)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("export-map", help="export prediction/truth heatmaps and CSV")
    common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--step", type=int)
    p.add_argument("--window", type=positive_int)
    p.set_defaults(func=cmd_export_map)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CrossRiskError as exc:
        print(f"error[{type(exc).__module__}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
