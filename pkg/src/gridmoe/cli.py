"""Command line entry point: train runs, parameter sweeps, gate inspection.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as gdata
from .checkpoint import load_checkpoint
from .errors import ConfigError, GridMoeError, ShapeError, TrainingAborted
from .model import Model
from .moe import ExpertStats, export_top1_map, write_top1_map_csv
from .runconfig import (
    CONFIG_SNAPSHOT_NAME,
    RunManifest,
    load_config_file,
    parse_config,
    resolve_out_dir,
    set_path,
)
from .train import EVAL_INDEX_OFFSET, sweep_rows, train, write_sweep_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridmoe")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training job from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--no-dso", action="store_true",
                         help="force all learning-rate multipliers to 1")
    p_train.add_argument("--no-moe", action="store_true",
                         help="replace expert mixtures with their base projection")
    p_train.add_argument("--force", action="store_true",
                         help="allow writing into a non-empty output directory")

    p_sweep = sub.add_parser("sweep", help="cross-product of config overrides")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--grid", required=True,
                         help='e.g. "moe.n_experts=2,4,8 dso.tau=2,3,4"')
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--seeds", default="0",
                         help="comma list of seeds shared by every cell")
    p_sweep.add_argument("--force", action="store_true")

    p_inspect = sub.add_parser("inspect-gates", help="routing statistics of a checkpoint")
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.add_argument("--config", default=None,
                           help="defaults to the config snapshot next to the checkpoint")
    p_inspect.add_argument("--modality", required=True, choices=["A", "B", "C"])
    p_inspect.add_argument("--n", type=int, required=True)
    p_inspect.add_argument("--out", default=None)
    p_inspect.add_argument("--force", action="store_true")
    return parser


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError("out_dir", f"{path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _parse_grid(spec: str) -> dict[str, list]:
    grid: dict[str, list] = {}
    for token in spec.split():
        if "=" not in token:
            raise ConfigError("grid", f"expected key=v1,v2 tokens, got {token!r}")
        key, _, values = token.partition("=")
        parsed = [_parse_scalar(v) for v in values.split(",") if v != ""]
        if not parsed:
            raise ConfigError("grid", f"no values for {key!r}")
        grid[key] = parsed
    if not grid:
        raise ConfigError("grid", "empty sweep grid")
    return grid


def _parse_scalar(token: str):
    if "|" in token:
        return [int(v) for v in token.split("|") if v != ""]
    lowered = token.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def cmd_train(args) -> int:
    raw = load_config_file(args.config)
    if args.seed is not None:
        set_path(raw, "run.seed", args.seed)
    if args.out is not None:
        set_path(raw, "run.out_dir", args.out)
    if args.no_dso:
        set_path(raw, "run.dso", False)
    if args.no_moe:
        set_path(raw, "run.moe", False)
    cfg = parse_config(raw)
    out_dir = resolve_out_dir(cfg.out_dir)
    _prepare_out_dir(out_dir, args.force)
    set_path(raw, "run.out_dir", str(out_dir))
    cfg = parse_config(raw)
    manifest = RunManifest.start(out_dir, cfg, args.config)
    try:
        result = train(cfg, keep_model=False)
    except TrainingAborted as exc:
        manifest.finish(out_dir, {"diagnostic_dump": exc.dump_path}, EXIT_RUNTIME)
        print(f"runtime abort: {exc} (dump: {exc.dump_path})", file=sys.stderr)
        return EXIT_RUNTIME
    artifacts = {
        "losses": str(result.loss_csv()),
        "dso_log": str(result.dso_csv()),
        "expert_stats": str(out_dir / "expert_stats.csv"),
        "checkpoint": str(result.checkpoint_bin()),
        "config_snapshot": str(out_dir / CONFIG_SNAPSHOT_NAME),
    }
    manifest.finish(out_dir, artifacts, EXIT_OK)
    final = ", ".join(f"{t}={result.final_losses[t]:.4f}" for t in result.task_order)
    print(f"done: {cfg.iterations} iterations, final losses {final}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    raw = load_config_file(args.config)
    grid = _parse_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise ConfigError("seeds", "need at least one seed")
    base_out = resolve_out_dir(args.out if args.out is not None
                               else raw.get("run", {}).get("out_dir", "sweep"))
    _prepare_out_dir(base_out, args.force)
    rows = sweep_rows(raw, grid, seeds, base_out)
    sweep_csv = base_out / "sweep.csv"
    write_sweep_csv(sweep_csv, rows)
    print(f"{len(rows)} runs -> {sweep_csv}")
    return EXIT_OK


def cmd_inspect_gates(args) -> int:
    checkpoint_path = Path(args.checkpoint)
    config_path = Path(args.config) if args.config else checkpoint_path.parent / CONFIG_SNAPSHOT_NAME
    cfg = parse_config(load_config_file(config_path))
    modalities = gdata.default_modalities(cfg.model.channels, cfg.modality_seed)
    tasks = gdata.default_tasks(cfg.label_noise_dict())
    active_tasks = {m: t for m, t in tasks.items() if m in set(cfg.sampler.modalities)}
    model = Model(cfg.model, active_tasks, seed=cfg.seed, moe_enabled=cfg.moe_enabled)
    try:
        model.load_state(load_checkpoint(checkpoint_path))
    except ShapeError as exc:
        raise ConfigError("checkpoint", str(exc)) from exc

    stats = ExpertStats()
    for layer in model.moe_layer_names:
        stats.register_layer(layer, model.spec.n_experts)
    out_dir = Path(args.out) if args.out else checkpoint_path.parent / "inspect"
    _prepare_out_dir(out_dir, args.force)
    maps_dir = out_dir / "top1_maps"
    maps_dir.mkdir(exist_ok=True)
    mod = modalities[args.modality]
    task = tasks[args.modality]
    for j in range(args.n):
        image, _ = gdata.generate_sample(mod, task, EVAL_INDEX_OFFSET + j,
                                         cfg.height, cfg.width)
        _, routings = model.features(image)
        for layer, decision in routings:
            stats.accumulate(decision, args.modality, layer)
            if j == 0:
                write_top1_map_csv(
                    maps_dir / f"{args.modality}_{layer.replace('.', '_')}.csv",
                    export_top1_map(decision),
                )
    stats.to_csv(out_dir / "participation.csv")
    print(f"modality {args.modality}, {args.n} samples")
    for row in stats.rows():
        share = row["participation_mass"] / max(row["grid_positions"], 1)
        print(f"  {row['layer']} expert {row['expert']}: mass/position {share:.4f} "
              f"top1 {row['top1_count']}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "sweep": cmd_sweep, "inspect-gates": cmd_inspect_gates}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except GridMoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
