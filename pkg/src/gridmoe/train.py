"""Training loop wiring the governor to parameter groups, plus sweeps.

Per iteration: draw a mixed batch (every task present), compute per-task mean
losses, let the governor turn loss statistics into learning-rate multipliers,
then run one plain SGD step with per-group effective rates. The governor only
transforms learning rates, so disabling it reproduces the plain joint loop
bit-for-bit under a fixed seed.
"""

from __future__ import annotations

import collections
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as gdata
from . import dso
from .checkpoint import save_checkpoint
from .csvio import CsvLogger
from .errors import TrainingAborted
from .model import Model
from .moe import ExpertStats, export_top1_map, write_top1_map_csv
from .runconfig import RunConfig, write_config_snapshot

# Evaluation samples use indices far above anything training can reach.
EVAL_INDEX_OFFSET = 1_000_000


@dataclass
class TrainResult:
    out_dir: Path
    task_order: list[str]
    loss_history: dict[str, list[float]]
    final_losses: dict[str, float]
    gamma_min: float
    gamma_max: float
    stats: ExpertStats
    init_entropy: dict[str, float] = field(default_factory=dict)
    final_entropy: dict[str, float] = field(default_factory=dict)
    model: Model | None = None

    def loss_csv(self) -> Path:
        return self.out_dir / "losses.csv"

    def dso_csv(self) -> Path:
        return self.out_dir / "dso_log.csv"

    def checkpoint_bin(self) -> Path:
        return self.out_dir / "checkpoint.bin"


def build_setup(cfg: RunConfig):
    modalities = gdata.default_modalities(cfg.model.channels, cfg.modality_seed)
    tasks = gdata.default_tasks(cfg.label_noise_dict())
    wanted = set(cfg.sampler.modalities)
    modalities = {m: spec for m, spec in modalities.items() if m in wanted}
    tasks = {m: spec for m, spec in tasks.items() if m in wanted}
    model = Model(cfg.model, tasks, seed=cfg.seed, moe_enabled=cfg.moe_enabled)
    sampler = gdata.BatchSampler(cfg.sampler)
    return modalities, tasks, model, sampler


def evaluate_stats(model: Model, modalities, tasks, n_samples: int, height: int, width: int,
                   index_offset: int = EVAL_INDEX_OFFSET) -> ExpertStats:
    """Routing statistics over fresh evaluation samples (no training indices)."""
    stats = ExpertStats()
    for layer in model.moe_layer_names:
        stats.register_layer(layer, model.spec.n_experts)
    for modality in sorted(modalities):
        for j in range(n_samples):
            image, _ = gdata.generate_sample(
                modalities[modality], tasks[modality], index_offset + j, height, width
            )
            _, routings = model.features(image)
            for layer, decision in routings:
                stats.accumulate(decision, modality, layer)
    return stats


def train(cfg: RunConfig, keep_model: bool = True) -> TrainResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config_snapshot(out_dir, cfg)

    modalities, tasks, model, sampler = build_setup(cfg)
    order = model.task_order
    n_tasks = len(order)
    groups = model.param_groups()

    tracker = dso.LossTracker(n_tasks)
    identity = dso.LrMultipliers.identity(n_tasks)

    init_entropy: dict[str, float] = {}
    if model.moe_layer_names and cfg.stats_samples > 0:
        init_stats = evaluate_stats(model, modalities, tasks, cfg.stats_samples,
                                    cfg.height, cfg.width)
        init_stats.to_csv(out_dir / "expert_stats_init.csv")
        init_entropy = {m: init_stats.participation_entropy(m) for m in sorted(modalities)}

    train_stats = ExpertStats()
    for layer in model.moe_layer_names:
        train_stats.register_layer(layer, model.spec.n_experts)

    loss_columns = ["iteration", *(f"loss_{t}" for t in order), "total"]
    dso_columns = [
        "iteration",
        *(f"cur_{t}" for t in order),
        *(f"his_{t}" for t in order),
        *(f"w_{t}" for t in order),
        *(f"lambda_{t}" for t in order),
        "C",
        "gamma",
        *(f"lr_head_{t}" for t in order),
        "lr_backbone",
    ]

    history: dict[str, list[float]] = {t: [] for t in order}
    gamma_min, gamma_max = float("inf"), float("-inf")
    recent = collections.deque(maxlen=10)

    with CsvLogger(out_dir / "losses.csv", loss_columns, "losses") as loss_log, \
         CsvLogger(out_dir / "dso_log.csv", dso_columns, "dso_log") as dso_log:
        for iteration in range(cfg.iterations):
            batch = sampler.next_batch()
            samples = []
            for item in batch:
                image, target = gdata.generate_sample(
                    modalities[item.modality], tasks[item.modality],
                    item.sample_index, cfg.height, cfg.width,
                )
                samples.append((item.modality, item.sample_index, image, target))

            losses, routings = model.forward_batch(samples)
            values = np.array([losses[t].item() for t in order])
            if not np.all(np.isfinite(values)):
                dump_path = out_dir / "diagnostic_dump.csv"
                _write_dump(dump_path, loss_columns, recent)
                raise TrainingAborted(
                    f"non-finite loss at iteration {iteration}: "
                    + ", ".join(f"{t}={v}" for t, v in zip(order, values)),
                    str(dump_path),
                )

            for modality, layer, decision in routings:
                train_stats.accumulate(decision, modality, layer)

            if cfg.dso_enabled:
                multipliers = dso.step(tracker, values, cfg.dso)
                ratios = (dso.convergence_ratios(tracker)
                          if tracker.cur is not None else np.ones(n_tasks))
            else:
                multipliers = identity
                if dso.losses_valid(values):
                    dso.update_ema(tracker, values, cfg.dso)
                ratios = np.ones(n_tasks)

            total = losses[order[0]]
            for t in order[1:]:
                total = ad.add(total, losses[t])
            ad.backward(total)
            effective = {}
            for group_name, params in groups.items():
                lr = dso.apply_multipliers(cfg.base_lr, group_name, multipliers)
                effective[group_name] = lr
                for param in params:
                    if param.grad is not None:
                        param.data = param.data - lr * param.grad
                    param.grad = None

            for t, v in zip(order, values):
                history[t].append(float(v))
            gamma_min = min(gamma_min, multipliers.backbone_gamma)
            gamma_max = max(gamma_max, multipliers.backbone_gamma)

            loss_row = {"iteration": iteration, "total": float(values.sum())}
            for t, v in zip(order, values):
                loss_row[f"loss_{t}"] = float(v)
            loss_log.write(loss_row)
            recent.append(loss_row)

            log_cur = tracker.cur if tracker.cur is not None else values
            log_his = tracker.his if tracker.his is not None else values
            dso_row = {"iteration": iteration, "C": multipliers.consistency,
                       "gamma": multipliers.backbone_gamma,
                       "lr_backbone": effective["backbone"]}
            for idx, t in enumerate(order):
                dso_row[f"cur_{t}"] = float(log_cur[idx])
                dso_row[f"his_{t}"] = float(log_his[idx])
                dso_row[f"w_{t}"] = float(ratios[idx])
                dso_row[f"lambda_{t}"] = float(multipliers.head_lambdas[idx])
                dso_row[f"lr_head_{t}"] = effective[model.head_group_name(t)]
            dso_log.write(dso_row)

    save_checkpoint(out_dir / "checkpoint.bin", model.state_dict())
    train_stats.to_csv(out_dir / "expert_stats.csv")

    final_entropy: dict[str, float] = {}
    if model.moe_layer_names and cfg.stats_samples > 0:
        final_stats = evaluate_stats(model, modalities, tasks, cfg.stats_samples,
                                     cfg.height, cfg.width)
        final_stats.to_csv(out_dir / "expert_stats_final.csv")
        final_entropy = {m: final_stats.participation_entropy(m) for m in sorted(modalities)}
        _export_maps(out_dir / "top1_maps", model, modalities, tasks, cfg)

    return TrainResult(
        out_dir=out_dir,
        task_order=order,
        loss_history=history,
        final_losses={t: history[t][-1] for t in order},
        gamma_min=gamma_min,
        gamma_max=gamma_max,
        stats=train_stats,
        init_entropy=init_entropy,
        final_entropy=final_entropy,
        model=model if keep_model else None,
    )


def _write_dump(path: Path, columns, rows) -> None:
    with CsvLogger(path, columns, "diagnostic_dump") as log:
        for row in rows:
            log.write(row)


def _export_maps(maps_dir: Path, model: Model, modalities, tasks, cfg: RunConfig) -> None:
    maps_dir.mkdir(parents=True, exist_ok=True)
    for modality in sorted(modalities):
        image, _ = gdata.generate_sample(
            modalities[modality], tasks[modality], EVAL_INDEX_OFFSET, cfg.height, cfg.width
        )
        _, routings = model.features(image)
        for layer, decision in routings:
            write_top1_map_csv(
                maps_dir / f"{modality}_{layer.replace('.', '_')}.csv",
                export_top1_map(decision),
            )


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def sweep_rows(base_raw: dict, grid: dict[str, list], seeds, out_root: Path,
               keep_models: bool = False) -> list[dict]:
    """Cross-product of grid values x seeds; one training run per cell.

    Every cell reuses the same seed list, so cells are comparable. Returns
    one row per run with the swept parameters and final metrics.
    """
    from .runconfig import parse_config, set_path
    import copy
    import itertools

    keys = sorted(grid)
    rows: list[dict] = []
    if not keys or any(not grid[k] for k in keys):
        raise ValueError("sweep grid is empty")
    for cell_index, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        for seed in seeds:
            raw = copy.deepcopy(base_raw)
            for key, value in zip(keys, combo):
                set_path(raw, key, value)
            set_path(raw, "run.seed", int(seed))
            set_path(raw, "run.out_dir", str(out_root / f"cell{cell_index:03d}_seed{seed}"))
            cfg = parse_config(raw)
            result = train(cfg, keep_model=keep_models)
            row = {key: _render(value) for key, value in zip(keys, combo)}
            row["seed"] = int(seed)
            for t in result.task_order:
                row[f"final_loss_{t}"] = result.final_losses[t]
            row["final_total"] = float(sum(result.final_losses.values()))
            row["gamma_min"] = result.gamma_min
            row["gamma_max"] = result.gamma_max
            rows.append(row)
    return rows


def _render(value):
    if isinstance(value, (list, tuple)):
        return "|".join(str(v) for v in value)
    return value


def write_sweep_csv(path, rows: list[dict]) -> None:
    from .csvio import write_csv

    columns = list(rows[0].keys())
    write_csv(path, columns, rows, schema="sweep")


# ---------------------------------------------------------------------------
# scripted-imbalance benchmark
# ---------------------------------------------------------------------------

BENCHMARK_BASE_NOISE = 0.1
BENCHMARK_HARD_MULTIPLIER = 4.0


@dataclass
class BenchmarkSeedResult:
    seed: int
    spread_with_dso: float
    spread_without_dso: float
    init_entropy: dict[str, float]
    final_entropy: dict[str, float]


@dataclass
class BenchmarkResult:
    per_seed: list[BenchmarkSeedResult]

    def median_spread_with(self) -> float:
        return statistics.median(r.spread_with_dso for r in self.per_seed)

    def median_spread_without(self) -> float:
        return statistics.median(r.spread_without_dso for r in self.per_seed)

    def median_entropy_drop(self, modality: str) -> float:
        return statistics.median(
            r.final_entropy[modality] - r.init_entropy[modality] for r in self.per_seed
        )


def benchmark_config(seed: int, iterations: int, out_dir: str, dso_enabled: bool,
                     hard_task: str = "A") -> RunConfig:
    """Three modalities, one task 4x harder via label noise, 8x8x8 inputs.

    The hard task's flip rate (0.4) keeps it mid-descent at 2000 iterations
    while the clean tasks reach their floors early; the governor uses a
    sharp head softmax and a balance point of 1, so the backbone rate never
    exceeds the base and the head policy carries the balancing.
    """
    from .runconfig import parse_config

    noise = {m: BENCHMARK_BASE_NOISE for m in ("A", "B", "C")}
    noise[hard_task] = BENCHMARK_BASE_NOISE * BENCHMARK_HARD_MULTIPLIER
    raw = {
        "model": {"depth": 4, "channels": 8, "moe_layers": [0, 2]},
        "moe": {"n_experts": 4, "top_k": 2, "gate_temperature": 0.3},
        "dso": {"alpha": 0.05, "theta": 0.3, "bias_b": 1.0},
        "sampler": {"counts": {"A": 2, "B": 1, "C": 1}, "batch_size": 4},
        "data": {"height": 8, "width": 8, "label_noise": noise},
        "run": {
            "seed": seed,
            "iterations": iterations,
            "out_dir": out_dir,
            "base_lr": 0.05,
            "dso": dso_enabled,
            "moe": True,
            "stats_samples": 8,
        },
    }
    return parse_config(raw)


def normalized_loss_spread(history: dict[str, list[float]], window: int = 50) -> float:
    """Cross-task standard deviation of (final loss / initial loss).

    Initial and final levels are means over the first and last ``window``
    iterations to suppress single-batch noise.
    """
    ratios = []
    for series in history.values():
        w = min(window, max(1, len(series) // 4))
        initial = float(np.mean(series[:w]))
        final = float(np.mean(series[-w:]))
        ratios.append(final / initial)
    return float(np.std(ratios))


def imbalance_benchmark(out_root, seeds=(0, 1, 2, 3, 4), iterations: int = 2000,
                        hard_task: str = "A") -> BenchmarkResult:
    """Paired runs (governor on/off) per seed on the scripted-imbalance setup."""
    out_root = Path(out_root)
    per_seed = []
    for seed in seeds:
        with_dso = train(
            benchmark_config(seed, iterations, str(out_root / f"seed{seed}_dso"), True,
                             hard_task),
            keep_model=False,
        )
        without_dso = train(
            benchmark_config(seed, iterations, str(out_root / f"seed{seed}_plain"), False,
                             hard_task),
            keep_model=False,
        )
        per_seed.append(
            BenchmarkSeedResult(
                seed=seed,
                spread_with_dso=normalized_loss_spread(with_dso.loss_history),
                spread_without_dso=normalized_loss_spread(without_dso.loss_history),
                init_entropy=with_dso.init_entropy,
                final_entropy=with_dso.final_entropy,
            )
        )
    return BenchmarkResult(per_seed)
