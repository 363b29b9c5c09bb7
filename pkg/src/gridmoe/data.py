"""Synthetic three-modality data with deterministic per-sample generation.

Each modality is a stand-in for a distinct imaging sensor: modality A has
low channel means with multiplicative speckle, B has mid-range smooth blob
fields, and C has high means with sharp hotspots on a low-frequency carrier.
The defaults are tuned so per-channel histograms of different modalities sit
far apart (pairwise symmetric KL well above 0.5), which the generator
self-test verifies.

Targets are derived from the image through a fixed per-task projection, so a
linear trunk plus head can actually learn them; classification labels may be
flipped and regression targets jittered through ``label_noise``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError

CLASSIFICATION = "grid-classification"
REGRESSION = "grid-regression-with-angle"
CROSS_ENTROPY = "cross-entropy"
SMOOTH_L1 = "smooth-l1"


@dataclass(frozen=True)
class ModalitySpec:
    """Distribution parameters for one synthetic sensor."""

    id: str
    channel_means: tuple[float, ...]
    channel_stds: tuple[float, ...]
    spatial_freq: float = 2.0
    speckle_rate: float = 0.0
    blob_density: float = 0.0
    seed: int = 0

    @property
    def channels(self) -> int:
        return len(self.channel_means)


@dataclass(frozen=True)
class TaskSpec:
    """What one task head predicts and how its loss is scored."""

    id: str
    kind: str
    loss: str
    head_width: int
    label_noise: float = 0.0

    def __post_init__(self):
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise ConfigError("task.kind", f"unknown target type {self.kind!r}")
        if self.loss not in (CROSS_ENTROPY, SMOOTH_L1):
            raise ConfigError("task.loss", f"unknown loss type {self.loss!r}")
        if self.kind == CLASSIFICATION and self.loss != CROSS_ENTROPY:
            raise ConfigError("task.loss", "grid classification uses cross-entropy")
        if self.kind == REGRESSION and self.loss != SMOOTH_L1:
            raise ConfigError("task.loss", "grid regression uses smooth-l1")
        if self.head_width < 2:
            raise ConfigError("task.head_width", "need at least 2 output channels")
        if not (0.0 <= self.label_noise <= 1.0):
            raise ConfigError("task.label_noise", "must lie in [0, 1]")


def default_modalities(channels: int = 8, seed: int = 0) -> dict[str, ModalitySpec]:
    """Three well-separated sensor proxies over the requested channel count.

    Each modality gets a distinct per-channel mean pattern of moderate
    magnitude (alternating signs, a positive hump, a rising ramp) with
    texture on a comparable scale, so per-channel histograms sit far apart
    while grid positions inside one image still spread over many feature
    directions, the regime grid-level routing is meant for.
    """
    idx = np.arange(channels)
    mean_a = 0.45 * np.where(idx % 2 == 0, 1.0, -1.0)
    mean_b = 0.585 * np.sin(np.pi * (idx + 0.5) / channels)
    mean_c = -0.3825 + 0.099 * idx
    return {
        "A": ModalitySpec(
            id="A",
            channel_means=tuple(mean_a),
            channel_stds=tuple(np.full(channels, 0.22)),
            spatial_freq=4.0,
            speckle_rate=0.3,
            blob_density=0.0,
            seed=seed * 1000 + 11,
        ),
        "B": ModalitySpec(
            id="B",
            channel_means=tuple(mean_b),
            channel_stds=tuple(np.full(channels, 0.26)),
            spatial_freq=1.5,
            speckle_rate=0.0,
            blob_density=3.0,
            seed=seed * 1000 + 23,
        ),
        "C": ModalitySpec(
            id="C",
            channel_means=tuple(mean_c),
            channel_stds=tuple(np.full(channels, 0.20)),
            spatial_freq=2.5,
            speckle_rate=0.0,
            blob_density=1.5,
            seed=seed * 1000 + 37,
        ),
    }


def default_tasks(label_noise: dict[str, float] | None = None) -> dict[str, TaskSpec]:
    """One task head per modality: A classifies, B and C regress with angle."""
    noise = {"A": 0.0, "B": 0.0, "C": 0.0}
    if label_noise:
        noise.update(label_noise)
    return {
        "A": TaskSpec("A", CLASSIFICATION, CROSS_ENTROPY, head_width=4, label_noise=noise["A"]),
        "B": TaskSpec("B", REGRESSION, SMOOTH_L1, head_width=5, label_noise=noise["B"]),
        "C": TaskSpec("C", REGRESSION, SMOOTH_L1, head_width=5, label_noise=noise["C"]),
    }


def with_noise_multiplier(task: TaskSpec, multiplier: float, base: float) -> TaskSpec:
    return replace(task, label_noise=min(1.0, base * multiplier))


def _texture_field(rng: np.random.Generator, height: int, width: int, channels: int,
                   freq: float) -> np.ndarray:
    """Smooth oriented sinusoid per channel, random phase and orientation."""
    rows = np.arange(height)[:, None] / max(height, 1)
    cols = np.arange(width)[None, :] / max(width, 1)
    field = np.empty((height, width, channels))
    for c in range(channels):
        angle = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = rows * np.cos(angle) + cols * np.sin(angle)
        field[:, :, c] = np.sin(2.0 * np.pi * freq * wave + phase)
    return field


def _blob_field(rng: np.random.Generator, height: int, width: int, density: float) -> np.ndarray:
    """Sum of Gaussian bumps; expected count set by density."""
    count = rng.poisson(density)
    field = np.zeros((height, width))
    if count == 0:
        return field
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    for _ in range(count):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        sigma = rng.uniform(0.8, 2.0)
        field += np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma**2))
    return field


def target_projection(mod: ModalitySpec, task: TaskSpec) -> np.ndarray:
    """Fixed per-(modality, task) mixing matrix the targets are derived from."""
    rng = np.random.default_rng((mod.seed, 7919))
    return rng.normal(0.0, 1.0, size=(task.head_width, mod.channels))


def generate_sample(
    mod: ModalitySpec, task: TaskSpec, index: int, height: int = 8, width: int = 8
) -> tuple[np.ndarray, np.ndarray]:
    """One (image, target) pair, bit-reproducible from (spec seed, index)."""
    rng = np.random.default_rng((mod.seed, index))
    means = np.asarray(mod.channel_means)
    stds = np.asarray(mod.channel_stds)

    image = means + stds * _texture_field(rng, height, width, mod.channels, mod.spatial_freq)
    if mod.blob_density > 0.0:
        blobs = _blob_field(rng, height, width, mod.blob_density)
        image = image + stds * 2.0 * blobs[:, :, None]
    if mod.speckle_rate > 0.0:
        mask = rng.random((height, width)) < mod.speckle_rate
        boost = rng.exponential(1.0, size=(height, width))
        image = image * (1.0 + (mask * (boost - 1.0))[:, :, None] * 0.5)

    projection = target_projection(mod, task)
    scores = image @ projection.T  # (H, W, head_width)
    if task.kind == CLASSIFICATION:
        target = np.argmax(scores, axis=-1)
        if task.label_noise > 0.0:
            flip = rng.random((height, width)) < task.label_noise
            random_labels = rng.integers(0, task.head_width, size=(height, width))
            target = np.where(flip, random_labels, target)
    else:
        target = np.tanh(scores * 0.5)
        # last channel plays the angle: wrap it through a sine
        target[..., -1] = np.sin(scores[..., -1])
        if task.label_noise > 0.0:
            target = target + rng.normal(0.0, task.label_noise, size=target.shape)
    return image, target


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    """Per-modality counts for every batch (defaults mirror a 2:1:1 mix)."""

    counts: tuple[tuple[str, int], ...] = (("A", 2), ("B", 1), ("C", 1))
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        total = sum(c for _, c in self.counts)
        if total != self.batch_size:
            raise ConfigError(
                "sampler.counts",
                f"counts sum to {total} but batch_size is {self.batch_size}",
            )
        if any(c < 1 for _, c in self.counts):
            raise ConfigError("sampler.counts", "every modality needs >= 1 sample per batch")

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m, _ in self.counts)


@dataclass(frozen=True)
class BatchItem:
    modality: str
    sample_index: int


class BatchSampler:
    """Deterministic stream of mixed batches with exact per-batch composition.

    Sample indices increase monotonically per modality, so the n-th batch is
    a pure function of the seed; the within-batch order is shuffled with the
    sampler's own generator.
    """

    def __init__(self, cfg: SamplerConfig):
        self.cfg = cfg
        self._rng = np.random.default_rng(cfg.seed)
        self._next_index = {m: 0 for m, _ in cfg.counts}

    def next_batch(self) -> list[BatchItem]:
        items: list[BatchItem] = []
        for modality, count in self.cfg.counts:
            start = self._next_index[modality]
            items.extend(BatchItem(modality, start + j) for j in range(count))
            self._next_index[modality] = start + count
        order = self._rng.permutation(len(items))
        return [items[i] for i in order]


def sample_batch(cfg: SamplerConfig, sampler: BatchSampler | None = None) -> list[BatchItem]:
    """One batch; pass a persistent BatchSampler to advance the stream."""
    if sampler is None:
        sampler = BatchSampler(cfg)
    return sampler.next_batch()


# ---------------------------------------------------------------------------
# generator self-test: modality separation
# ---------------------------------------------------------------------------

def histogram_symmetric_kl(
    values_a: np.ndarray, values_b: np.ndarray, bins: int = 64
) -> float:
    """Symmetric KL between two empirical distributions on shared bins."""
    lo = min(values_a.min(), values_b.min())
    hi = max(values_a.max(), values_b.max())
    edges = np.linspace(lo, hi, bins + 1)
    pa, _ = np.histogram(values_a, bins=edges)
    pb, _ = np.histogram(values_b, bins=edges)
    pa = np.maximum(pa / pa.sum(), 1e-12)
    pb = np.maximum(pb / pb.sum(), 1e-12)
    return float(np.sum(pa * np.log(pa / pb)) + np.sum(pb * np.log(pb / pa)))


def modality_separation(
    mods: Sequence[ModalitySpec],
    tasks: dict[str, TaskSpec],
    n_samples: int = 200,
    height: int = 8,
    width: int = 8,
    bins: int = 64,
) -> np.ndarray:
    """Pairwise per-channel symmetric KL (averaged over channels)."""
    channel_values = []
    for mod in mods:
        stack = np.stack(
            [generate_sample(mod, tasks[mod.id], i, height, width)[0] for i in range(n_samples)]
        )
        channel_values.append(stack.reshape(-1, mod.channels))
    m = len(mods)
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            per_channel = [
                histogram_symmetric_kl(channel_values[i][:, c], channel_values[j][:, c], bins)
                for c in range(mods[i].channels)
            ]
            out[i, j] = out[j, i] = float(np.mean(per_channel))
    return out


def self_test(n_samples: int = 200, threshold: float = 0.5) -> np.ndarray:
    """Verify the default modalities stay pairwise separated; returns the matrix."""
    mods = default_modalities()
    tasks = default_tasks()
    matrix = modality_separation(list(mods.values()), tasks, n_samples=n_samples)
    off_diag = matrix[~np.eye(len(mods), dtype=bool)]
    if np.any(off_diag <= threshold):
        raise ShapeError(
            f"modality distributions are not separated: min symmetric KL {off_diag.min():.3f}"
        )
    return matrix
