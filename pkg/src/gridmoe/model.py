"""Shared trunk of per-grid linear blocks with optional MoE, plus task heads.

Every trunk block owns a base 1x1 projection (its "pretrained" weights).
Blocks named in the placement mask wrap that projection in a sparse expert
mixture initialized by duplication; with the mixture disabled the base
projection is used directly, which is the plain-joint-training baseline.
Heads are zero-initialized single projections, one per task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data as gdata
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .moe import ExpertBank, GateParams, MoEConfig, RoutingDecision, init_from_pretrained, moe_forward


@dataclass(frozen=True)
class ModelSpec:
    """Trunk geometry and expert placement."""

    depth: int = 4
    channels: int = 8
    moe_layers: tuple[int, ...] = (0, 2)
    n_experts: int = 4
    top_k: int = 2
    gate_temperature: float = 0.07
    gate_dim: int | None = None

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("model.depth", f"must be >= 1, got {self.depth}")
        if self.channels < 1:
            raise ConfigError("model.channels", f"must be >= 1, got {self.channels}")
        bad = [i for i in self.moe_layers if not (0 <= i < self.depth)]
        if bad:
            raise ConfigError(
                "model.moe_layers", f"indices {bad} outside trunk depth {self.depth}"
            )
        if len(set(self.moe_layers)) != len(self.moe_layers):
            raise ConfigError("model.moe_layers", "duplicate placement indices")

    def moe_config(self) -> MoEConfig:
        return MoEConfig(
            n_experts=self.n_experts,
            top_k=self.top_k,
            in_channels=self.channels,
            out_channels=self.channels,
            gate_temperature=self.gate_temperature,
            gate_dim=self.gate_dim,
        )


class TrunkBlock:
    def __init__(self, index: int, weight: Tensor, bias: Tensor):
        self.index = index
        self.weight = weight
        self.bias = bias
        self.bank: ExpertBank | None = None
        self.gate: GateParams | None = None
        self.cfg: MoEConfig | None = None

    @property
    def has_moe(self) -> bool:
        return self.bank is not None

    def attach_moe(self, cfg: MoEConfig, seed: int, identical_embeddings: bool) -> None:
        self.bank, self.gate = init_from_pretrained(
            self.weight.data, self.bias.data, cfg, seed=seed,
            identical_embeddings=identical_embeddings,
        )
        self.cfg = cfg

    def forward(self, h: Tensor) -> tuple[Tensor, RoutingDecision | None]:
        if self.has_moe:
            out, decision = moe_forward(h, self.bank, self.gate, self.cfg)
            return out, decision
        return ad.grid_linear(h, self.weight, self.bias), None

    def parameters(self) -> list[Tensor]:
        if self.has_moe:
            return [self.gate.W, self.gate.E, *self.bank.weights, *self.bank.biases]
        return [self.weight, self.bias]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        prefix = f"trunk.{self.index}"
        named = [(f"{prefix}.base.weight", self.weight), (f"{prefix}.base.bias", self.bias)]
        if self.has_moe:
            named.append((f"{prefix}.gate.W", self.gate.W))
            named.append((f"{prefix}.gate.E", self.gate.E))
            for n in range(self.bank.n_experts):
                named.append((f"{prefix}.expert.{n}.weight", self.bank.weights[n]))
                named.append((f"{prefix}.expert.{n}.bias", self.bank.biases[n]))
        return named


class Model:
    """Trunk + heads; parameters grouped as one backbone and one group per task."""

    def __init__(self, spec: ModelSpec, tasks: dict[str, gdata.TaskSpec], seed: int = 0,
                 moe_enabled: bool = True, identical_embeddings: bool = False):
        self.spec = spec
        self.tasks = dict(sorted(tasks.items()))
        self.task_order = list(self.tasks)
        self.moe_enabled = moe_enabled
        rng = np.random.default_rng(seed)

        c = spec.channels
        self.blocks: list[TrunkBlock] = []
        for i in range(spec.depth):
            weight = rng.normal(0.0, np.sqrt(2.0 / c), size=(c, c))
            block = TrunkBlock(
                i,
                Tensor(weight, requires_grad=True),
                Tensor(np.zeros(c), requires_grad=True),
            )
            if moe_enabled and i in spec.moe_layers:
                block.attach_moe(spec.moe_config(), seed=seed * 997 + i,
                                 identical_embeddings=identical_embeddings)
            self.blocks.append(block)

        self.heads: dict[str, tuple[Tensor, Tensor]] = {}
        for task_id, task in self.tasks.items():
            w = Tensor(np.zeros((task.head_width, c)), requires_grad=True)
            b = Tensor(np.zeros(task.head_width), requires_grad=True)
            self.heads[task_id] = (w, b)

    @property
    def moe_layer_names(self) -> list[str]:
        return [f"trunk.{b.index}" for b in self.blocks if b.has_moe]

    def features(self, image: np.ndarray) -> tuple[Tensor, list[tuple[str, RoutingDecision]]]:
        if image.ndim != 3 or image.shape[-1] != self.spec.channels:
            raise ShapeError(
                f"expected (H, W, {self.spec.channels}) input, got {image.shape}"
            )
        h = Tensor(image)
        routings: list[tuple[str, RoutingDecision]] = []
        for block in self.blocks:
            h, decision = block.forward(h)
            if decision is not None:
                routings.append((f"trunk.{block.index}", decision))
            h = ad.relu(h)
        return h, routings

    def head_output(self, features: Tensor, task_id: str) -> Tensor:
        w, b = self.heads[task_id]
        return ad.grid_linear(features, w, b)

    def sample_loss(self, image: np.ndarray, target: np.ndarray, task_id: str):
        features, routings = self.features(image)
        out = self.head_output(features, task_id)
        task = self.tasks[task_id]
        if task.kind == gdata.CLASSIFICATION:
            loss = ad.cross_entropy_mean(out, target)
        else:
            loss = ad.smooth_l1_mean(out, target)
        return loss, routings

    def forward_batch(self, samples):
        """Per-task mean losses over a tagged batch.

        ``samples`` is an iterable of (task_id, sample_index, image, target).
        Within a task, losses are summed in sample-index order so the result
        is exactly independent of batch order.
        """
        per_task: dict[str, list[tuple[int, object]]] = {t: [] for t in self.task_order}
        all_routings: list[tuple[str, str, RoutingDecision]] = []
        for task_id, sample_index, image, target in samples:
            if task_id not in per_task:
                raise ShapeError(f"sample tagged with unknown task {task_id!r}")
            loss, routings = self.sample_loss(image, target, task_id)
            per_task[task_id].append((sample_index, loss))
            all_routings.extend((task_id, layer, dec) for layer, dec in routings)

        losses: dict[str, Tensor] = {}
        for task_id, entries in per_task.items():
            if not entries:
                continue
            entries.sort(key=lambda pair: pair[0])
            total = entries[0][1]
            for _, loss in entries[1:]:
                total = ad.add(total, loss)
            losses[task_id] = ad.mul(total, 1.0 / len(entries))
        return losses, all_routings

    # -- parameter bookkeeping -------------------------------------------

    def param_groups(self) -> dict[str, list[Tensor]]:
        """Backbone (trunk, gates, experts) plus one group per task head."""
        groups = {"backbone": []}
        for block in self.blocks:
            groups["backbone"].extend(block.parameters())
        for index, task_id in enumerate(self.task_order):
            groups[f"head_{index}"] = list(self.heads[task_id])
        return groups

    def head_group_name(self, task_id: str) -> str:
        return f"head_{self.task_order.index(task_id)}"

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for block in self.blocks:
            named.extend(block.named_parameters())
        for task_id in self.task_order:
            w, b = self.heads[task_id]
            named.append((f"head.{task_id}.weight", w))
            named.append((f"head.{task_id}.bias", b))
        return named

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        missing = sorted(set(named) - set(state))
        extra = sorted(set(state) - set(named))
        if missing or extra:
            raise ShapeError(
                f"checkpoint does not match the model: missing={missing}, unexpected={extra}"
            )
        for name, tensor in named.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise ShapeError(
                    f"checkpoint entry {name!r} has shape {arr.shape}, expected {tensor.shape}"
                )
            tensor.data = arr.copy()
            tensor.grad = None
