"""Grid-level sparse mixture-of-experts layer.

Routing runs independently per grid position: the input vector is projected
into gating space, compared against every expert embedding by temperature-
scaled cosine similarity, softmaxed into a full probability vector, and
sparsified by keeping the top-k probabilities as-is while zeroing the rest
(no renormalization). The layer output is the probability-weighted sum of the
selected 1x1-projection experts only.

With all experts initialized as copies of one pretrained projection and all
embeddings identical, the layer reproduces the pretrained output scaled by
k/N; that scaling is a documented consequence of not renormalizing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, UsageError
from .numerics import NORM_EPS, cosine_logits, stable_softmax

GATE_INIT_STD = 0.02


@dataclass(frozen=True)
class MoEConfig:
    """Static layer shape: expert count, sparsity, gating space, channels."""

    n_experts: int
    top_k: int
    in_channels: int
    out_channels: int
    gate_temperature: float = 0.07
    gate_dim: int | None = None

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError("moe.n_experts", f"must be >= 1, got {self.n_experts}")
        if not (1 <= self.top_k <= self.n_experts):
            raise ConfigError(
                "moe.top_k", f"must be in [1, n_experts={self.n_experts}], got {self.top_k}"
            )
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("moe.channels", "channel counts must be positive")
        if self.gate_temperature <= 0.0:
            raise ConfigError(
                "moe.gate_temperature", f"must be > 0, got {self.gate_temperature}"
            )
        if self.gate_dim is not None and self.gate_dim < 1:
            raise ConfigError("moe.gate_dim", f"must be positive, got {self.gate_dim}")

    @property
    def effective_gate_dim(self) -> int:
        return self.in_channels if self.gate_dim is None else self.gate_dim


class GateParams:
    """Gating transform W (gate_dim x in_channels) and embeddings E (gate_dim x N)."""

    def __init__(self, W: Tensor, E: Tensor):
        if W.data.ndim != 2 or E.data.ndim != 2 or W.shape[0] != E.shape[0]:
            raise ShapeError(f"gate parameter shapes are inconsistent: W {W.shape}, E {E.shape}")
        norms = np.linalg.norm(E.data, axis=0)
        if np.any(norms <= NORM_EPS):
            raise ShapeError("every expert embedding column must have norm > 1e-12")
        self.W = W
        self.E = E


class ExpertBank:
    """N per-grid linear experts with identical shapes."""

    def __init__(self, weights: Sequence[Tensor], biases: Sequence[Tensor]):
        if len(weights) != len(biases) or not weights:
            raise ShapeError("expert bank needs matching, non-empty weight/bias lists")
        shape = weights[0].shape
        for w, b in zip(weights, biases):
            if w.shape != shape or b.shape != (shape[0],):
                raise ShapeError("all experts must share identical shapes")
        self.weights = list(weights)
        self.biases = list(biases)

    @property
    def n_experts(self) -> int:
        return len(self.weights)


@dataclass
class RoutingDecision:
    """Routing outcome per grid position.

    ``selected_indices`` holds k distinct expert ids ordered by descending
    probability with ties broken toward the lowest index; ``gate_weights``
    are the matching full-softmax entries (everything else is implicitly
    zero); ``full_softmax`` keeps the dense probabilities for statistics.
    Leading axes are the grid axes (a single position has none).
    """

    selected_indices: np.ndarray
    gate_weights: np.ndarray
    full_softmax: np.ndarray
    expert_applications: int = 0

    @property
    def top_k(self) -> int:
        return self.selected_indices.shape[-1]

    @property
    def n_experts(self) -> int:
        return self.full_softmax.shape[-1]


def topk_select(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, stable ties.

    Stable descending sort means equal probabilities resolve to the lowest
    expert index, which pins down routing for oracle comparisons.
    """
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def route_probabilities(u: np.ndarray, embeddings: np.ndarray, temperature: float) -> np.ndarray:
    """Full softmax over temperature-scaled cosine logits (plain numpy path)."""
    logits, _, _ = cosine_logits(u, embeddings, temperature)
    return stable_softmax(logits, axis=-1)


def gate(x_grid, params: GateParams, cfg: MoEConfig) -> RoutingDecision:
    """Route a single grid position.

    A degenerate projection (|W x| < 1e-12, e.g. a zero input) falls back to
    the uniform distribution, so the first k experts are selected with weight
    1/N each.
    """
    x = np.asarray(x_grid, dtype=np.float64).reshape(-1)
    if x.shape[0] != cfg.in_channels:
        raise ShapeError(f"gate: expected {cfg.in_channels} channels, got {x.shape[0]}")
    u = params.W.data @ x
    probs = route_probabilities(u, params.E.data, cfg.gate_temperature)
    k = min(cfg.top_k, cfg.n_experts)
    selected = topk_select(probs, k)
    return RoutingDecision(
        selected_indices=selected,
        gate_weights=probs[selected].copy(),
        full_softmax=probs,
        expert_applications=k,
    )


def moe_forward(
    x: Tensor, bank: ExpertBank, params: GateParams, cfg: MoEConfig
) -> tuple[Tensor, RoutingDecision]:
    """Apply the sparse expert mixture to a full grid feature map.

    ``x`` has shape (..., in_channels) with the leading axes treated as grid
    axes. Exactly k experts are evaluated per position; gradients flow to the
    input, the gate parameters, and the selected experts only.
    """
    if x.shape[-1] != cfg.in_channels:
        raise ShapeError(
            f"moe_forward: expected {cfg.in_channels} channels, got {x.shape[-1]}"
        )
    if bank.n_experts != cfg.n_experts or params.E.shape[1] != cfg.n_experts:
        raise ShapeError("moe_forward: expert count disagrees with the configuration")

    u = ad.grid_linear(x, params.W)
    logits = ad.gate_logits(u, params.E, cfg.gate_temperature)
    probs = ad.softmax(logits)
    k = min(cfg.top_k, cfg.n_experts)
    selected = topk_select(probs.data, k)
    selected_w = ad.gather_last(probs, selected)
    out, applications = ad.mix_experts(x, bank.weights, bank.biases, selected, selected_w)
    decision = RoutingDecision(
        selected_indices=selected,
        gate_weights=selected_w.data.copy(),
        full_softmax=probs.data.copy(),
        expert_applications=applications,
    )
    return out, decision


def init_from_pretrained(
    pretrained_weight: np.ndarray,
    pretrained_bias: np.ndarray,
    cfg: MoEConfig,
    seed: int = 0,
    identical_embeddings: bool = False,
) -> tuple[ExpertBank, GateParams]:
    """Duplicate one pretrained projection into every expert and seed the gate.

    Every expert starts bit-identical to the pretrained pair so the mixture
    output is routing-independent at step zero. W and E are drawn from a
    seeded zero-mean normal (std 0.02): ties are broken, yet routing stays
    near uniform in expectation. ``identical_embeddings`` is a test mode that
    repeats one embedding column so the gate is exactly uniform.
    """
    weight = np.asarray(pretrained_weight, dtype=np.float64)
    bias = np.asarray(pretrained_bias, dtype=np.float64)
    if weight.shape != (cfg.out_channels, cfg.in_channels) or bias.shape != (cfg.out_channels,):
        raise ShapeError(
            f"init_from_pretrained: weight {weight.shape} / bias {bias.shape} do not match "
            f"({cfg.out_channels}, {cfg.in_channels})"
        )
    rng = np.random.default_rng(seed)
    weights = [Tensor(weight.copy(), requires_grad=True) for _ in range(cfg.n_experts)]
    biases = [Tensor(bias.copy(), requires_grad=True) for _ in range(cfg.n_experts)]

    gate_dim = cfg.effective_gate_dim
    W = _orthogonal_frame(rng, gate_dim, cfg.in_channels, GATE_INIT_STD)
    if identical_embeddings:
        column = _orthogonal_frame(rng, gate_dim, 1, GATE_INIT_STD)[:, 0]
        E = np.repeat(column[:, None], cfg.n_experts, axis=1)
    else:
        E = _orthogonal_frame(rng, gate_dim, cfg.n_experts, GATE_INIT_STD)
    bank = ExpertBank(weights, biases)
    gate_params = GateParams(
        Tensor(W, requires_grad=True), Tensor(E, requires_grad=True)
    )
    return bank, gate_params


def _orthogonal_frame(rng: np.random.Generator, dim: int, count: int, std: float) -> np.ndarray:
    """Seeded zero-mean columns with marginal std ``std``, orthonormal in blocks.

    Orthogonal embedding columns under an isotropy-preserving transform make
    every expert's top-1 region equally likely at initialization (an iid
    gaussian draw skews top-1 frequencies well past the documented +-0.1
    band). Entries of a scaled random orthogonal frame keep zero mean and the
    requested marginal std.
    """
    cols: list[np.ndarray] = []
    while len(cols) < count:
        g = rng.normal(size=(dim, dim))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))  # Haar-distributed frame
        take = min(dim, count - len(cols))
        cols.extend(q[:, i] for i in range(take))
    return np.column_stack(cols) * (std * np.sqrt(dim))


# ---------------------------------------------------------------------------
# participation statistics
# ---------------------------------------------------------------------------

STATS_CSV_COLUMNS = (
    "dataset",
    "layer",
    "expert",
    "participation_mass",
    "top1_count",
    "grid_positions",
)


@dataclass
class _StatsCell:
    participation: np.ndarray
    top1: np.ndarray
    positions: int = 0


@dataclass
class ExpertStats:
    """Per (dataset, layer, expert) routing mass and top-1 counts.

    Participation records the post-top-k gate weight mass; the full softmax
    is retained on each decision, so pre-top-k statistics can be derived if
    ever needed. Accumulation is additive, hence shards merge exactly.
    """

    layers: dict[str, int] = field(default_factory=dict)
    cells: dict[tuple[str, str], _StatsCell] = field(default_factory=dict)

    def register_layer(self, layer: str, n_experts: int) -> None:
        known = self.layers.get(layer)
        if known is not None and known != n_experts:
            raise UsageError(f"layer {layer!r} already registered with {known} experts")
        self.layers[layer] = n_experts

    def accumulate(self, decision: RoutingDecision, dataset: str, layer: str) -> None:
        n = self.layers.get(layer)
        if n is None:
            raise UsageError(f"unknown layer id {layer!r}; register it first")
        if decision.n_experts != n:
            raise UsageError(
                f"decision for layer {layer!r} has {decision.n_experts} experts, expected {n}"
            )
        cell = self.cells.get((dataset, layer))
        if cell is None:
            cell = _StatsCell(np.zeros(n), np.zeros(n, dtype=np.int64))
            self.cells[(dataset, layer)] = cell
        sel = decision.selected_indices.reshape(-1, decision.top_k)
        w = decision.gate_weights.reshape(-1, decision.top_k)
        np.add.at(cell.participation, sel.reshape(-1), w.reshape(-1))
        top1 = np.argmax(decision.full_softmax.reshape(-1, n), axis=-1)
        np.add.at(cell.top1, top1, 1)
        cell.positions += top1.size

    def merge(self, other: "ExpertStats") -> "ExpertStats":
        merged = ExpertStats()
        for layer, n in {**self.layers, **other.layers}.items():
            a, b = self.layers.get(layer), other.layers.get(layer)
            if a is not None and b is not None and a != b:
                raise UsageError(f"layer {layer!r} registered with conflicting expert counts")
            merged.register_layer(layer, n)
        for source in (self, other):
            for key, cell in source.cells.items():
                tgt = merged.cells.get(key)
                if tgt is None:
                    merged.cells[key] = _StatsCell(
                        cell.participation.copy(), cell.top1.copy(), cell.positions
                    )
                else:
                    tgt.participation += cell.participation
                    tgt.top1 += cell.top1
                    tgt.positions += cell.positions

        return merged

    def datasets(self) -> list[str]:
        return sorted({dataset for dataset, _ in self.cells})

    def participation_entropy(self, dataset: str) -> float:
        """Mean (over this dataset's layers) entropy of normalized participation."""
        entropies = []
        for (ds, _layer), cell in sorted(self.cells.items()):
            if ds != dataset:
                continue
            mass = cell.participation
            total = mass.sum()
            if total <= 0.0:
                continue
            p = mass / total
            nonzero = p[p > 0.0]
            entropies.append(float(-(nonzero * np.log(nonzero)).sum()))
        if not entropies:
            raise UsageError(f"no accumulated statistics for dataset {dataset!r}")
        return float(np.mean(entropies))

    def rows(self) -> list[dict]:
        out = []
        for (dataset, layer), cell in sorted(self.cells.items()):
            for expert in range(self.layers[layer]):
                out.append(
                    {
                        "dataset": dataset,
                        "layer": layer,
                        "expert": expert,
                        "participation_mass": float(cell.participation[expert]),
                        "top1_count": int(cell.top1[expert]),
                        "grid_positions": cell.positions,
                    }
                )
        return out

    def to_csv(self, path) -> None:
        from .csvio import write_csv

        write_csv(path, STATS_CSV_COLUMNS, self.rows(), schema="expert_stats")


def accumulate_stats(
    stats: ExpertStats,
    decisions: Iterable[RoutingDecision] | RoutingDecision,
    dataset: str,
    layer: str,
) -> ExpertStats:
    """Fold one decision (or a stream of them) into the statistics, in place."""
    if isinstance(decisions, RoutingDecision):
        decisions = (decisions,)
    for decision in decisions:
        stats.accumulate(decision, dataset, layer)
    return stats


def export_top1_map(decision: RoutingDecision) -> np.ndarray:
    """Grid of winning expert indices (argmax of the full softmax, ties low)."""
    return np.argmax(decision.full_softmax, axis=-1)


def write_top1_map_csv(path, top1_map: np.ndarray) -> None:
    grid = np.atleast_2d(np.asarray(top1_map))
    with open(path, "w", newline="") as fh:
        fh.write("# schema=top1_map.v1\n")
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([int(v) for v in row])
