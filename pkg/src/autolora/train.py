"""Toy data, the epsilon-prediction loss with exact gradients, and Adam training.

The base model trains on a ring of Gaussian components with condition
dropout (so one network provides both conditional and unconditional
predictions). LoRA fine-tuning then fits a handful of points from one
component per label, long enough to overfit.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .denoiser import DenoiserParams, backward, forward
from .lora import LoraAdapter, adapted_weights
from .schedule import NoiseSchedule, forward_marginal_batch

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MixtureSpec:
    """Gaussian components: ``means`` (C, d), ``covs`` (C, d, d), per-component labels and weights.

    ``component_ids`` are indices into the full generator, kept when a spec is
    restricted to a subset.
    """

    means: np.ndarray
    covs: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    component_ids: np.ndarray

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def restrict(self, component_ids: Sequence[int], weights=None) -> "MixtureSpec":
        pos = [int(np.flatnonzero(self.component_ids == c)[0]) for c in component_ids]
        w = self.weights[pos] if weights is None else np.asarray(weights, dtype=np.float64)
        return MixtureSpec(self.means[pos], self.covs[pos], self.labels[pos], w / w.sum(),
                           self.component_ids[pos])

    def for_label(self, label: int) -> "MixtureSpec":
        ids = self.component_ids[self.labels == label]
        if ids.size == 0:
            raise ValueError(f"no components carry label {label}")
        return self.restrict(ids)


@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    components: np.ndarray
    generator_spec: MixtureSpec

    def __post_init__(self) -> None:
        if len(self.points) < 1:
            raise ValueError("dataset must hold at least one point")
        if len(self.labels) != len(self.points) or len(self.components) != len(self.points):
            raise ValueError("points, labels and components must have equal length")

    def __len__(self) -> int:
        return len(self.points)


LAYOUTS = ("interleaved", "contiguous")


def component_layout(K: int, modes_per_label: int, radius: float,
                     layout: str = "contiguous"):
    """Means evenly spaced on a ring plus the label of each component.

    ``interleaved`` gives component ``c`` label ``c % K`` (a label's modes are
    spread around the whole circle); ``contiguous`` gives it ``c // modes_per_label``
    (each label owns one arc).
    """
    C = K * modes_per_label
    angles = 2.0 * np.pi * np.arange(C) / C
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if layout == "interleaved":
        labels = np.arange(C) % K
    elif layout == "contiguous":
        labels = np.arange(C) // modes_per_label
    else:
        raise ValueError(f"unknown layout {layout!r}, expected one of {LAYOUTS}")
    return means, labels


def make_toy_dataset(seed: int, K: int = 4, modes_per_label: int = 4, n_per_mode: int = 500,
                     spread: float = 0.25, radius: float = 4.0,
                     layout: str = "contiguous") -> Dataset:
    if min(K, modes_per_label, n_per_mode) < 1:
        raise ValueError("K, modes_per_label and n_per_mode must be >= 1")
    if spread < 0:
        raise ValueError(f"spread must be nonnegative, got {spread}")
    rng = np.random.default_rng(seed)
    means, labels = component_layout(K, modes_per_label, radius, layout)
    C, d = means.shape
    comp = np.repeat(np.arange(C), n_per_mode)
    points = means[comp] + spread * rng.standard_normal((C * n_per_mode, d))
    spec = MixtureSpec(
        means=means,
        covs=np.tile((spread ** 2) * np.eye(d), (C, 1, 1)),
        labels=labels,
        weights=np.full(C, 1.0 / C),
        component_ids=np.arange(C),
    )
    return Dataset(points, labels[comp], comp, spec)


def default_lora_components(data: Dataset) -> list[int]:
    """One component per label: the lowest-indexed mode of each."""
    spec = data.generator_spec
    return [int(spec.component_ids[spec.labels == y].min()) for y in np.unique(spec.labels)]


def make_lora_subset(data: Dataset, target_components: Sequence[int], n_examples: int,
                     seed: int) -> Dataset:
    """``n_examples`` points split round-robin over ``target_components``."""
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    targets = [int(c) for c in target_components]
    if not targets:
        raise ValueError("no target components given")
    present = set(np.unique(data.components).tolist())
    missing = [c for c in targets if c not in present]
    if missing:
        raise ValueError(f"requested components absent from dataset: {missing}")
    rng = np.random.default_rng(seed)
    counts = [n_examples // len(targets) + (i < n_examples % len(targets))
              for i in range(len(targets))]
    idx = []
    for c, n in zip(targets, counts):
        if n == 0:
            continue
        pool = np.flatnonzero(data.components == c)
        if n > pool.size:
            raise ValueError(f"component {c} has only {pool.size} points, {n} requested")
        idx.append(rng.choice(pool, size=n, replace=False))
    idx = np.concatenate(idx)
    kept = [c for c, n in zip(targets, counts) if n > 0]
    spec = data.generator_spec.restrict(kept, weights=[n for n in counts if n > 0])
    return Dataset(data.points[idx].copy(), data.labels[idx].copy(),
                   data.components[idx].copy(), spec)


# -- loss ----------------------------------------------------------------------

class TrainMode(str, enum.Enum):
    BASE = "BASE"
    LORA_FINETUNE = "LORA_FINETUNE"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 256
    learning_rate: float = 1e-3
    p_uncond: float = 0.1
    seed: int = 0
    mode: TrainMode = TrainMode.BASE
    lora_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", TrainMode(self.mode))
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps >= 0, batch_size >= 1 and learning_rate > 0 required")


@dataclass
class LossDraws:
    """Per-example randomness for one loss evaluation."""

    t: np.ndarray
    eps: np.ndarray
    drop: np.ndarray


def draw_loss_inputs(rng: np.random.Generator, n: int, T: int, data_dim: int,
                     p_uncond: float) -> LossDraws:
    t = rng.integers(1, T + 1, size=n)
    eps = rng.standard_normal((n, data_dim))
    drop = rng.random(n) < p_uncond
    return LossDraws(t, eps, drop)


def ddpm_loss(params: DenoiserParams, x0: np.ndarray, labels: np.ndarray, draws: LossDraws,
              sched: NoiseSchedule, adapter: LoraAdapter | None = None,
              lora_scale: float = 1.0):
    """Mean over the batch of ||eps - eps_theta(x_t, t, c)||^2 and its gradient.

    Without ``adapter`` the gradient is a :class:`DenoiserParams` over every
    parameter. With one, only the adapter factors are trainable and the
    gradient is a :class:`LoraAdapter`.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    x_t = forward_marginal_batch(x0, draws.t, draws.eps, sched)
    cond = np.where(draws.drop, params.K, np.asarray(labels))
    weights = (params.layer_weights if adapter is None
               else adapted_weights(params, adapter, lora_scale))
    out, cache = forward(params, x_t, draws.t, cond, sched.T, weights=weights, keep=True)
    resid = out - draws.eps
    loss = float(np.sum(resid * resid) / n)
    w_grads, b_grads, cond_grad = backward(params, weights, cache, (2.0 / n) * resid)
    if adapter is None:
        grads = params.with_arrays(
            [g for pair in zip(w_grads, b_grads) for g in pair] + [cond_grad]
        )
        return loss, grads
    s = lora_scale * adapter.alpha
    lora_grads = []
    for tg in adapter.targets:
        G = w_grads[tg.layer]
        lora_grads += [s * (G @ tg.B.T), s * (tg.A.T @ G)]
    return loss, adapter.with_arrays(lora_grads)


# -- optimizer -----------------------------------------------------------------

class Adam:
    def __init__(self, arrays: Sequence[np.ndarray], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(arrays, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


@dataclass
class TrainResult:
    params: DenoiserParams
    adapter: LoraAdapter | None
    losses: list[float] = field(default_factory=list)


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    perm = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch_size > n:
            if batch_size >= n:
                yield rng.permutation(n)
                continue
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def train(params: DenoiserParams, data: Dataset, cfg: TrainConfig, sched: NoiseSchedule,
          adapter: LoraAdapter | None = None) -> TrainResult:
    """Adam over shuffled minibatches; deterministic given ``cfg.seed``.

    In LORA_FINETUNE mode ``adapter`` is trained and ``params`` is left
    untouched. Raises :class:`TrainingDiverged` when the loss stays above
    10x its first value for 100 consecutive steps.
    """
    lora = cfg.mode is TrainMode.LORA_FINETUNE
    if lora and adapter is None:
        raise ValueError("LORA_FINETUNE needs an adapter")
    if not lora and adapter is not None:
        raise ValueError("BASE training does not take an adapter")
    if data.points.shape[1] != params.data_dim:
        raise ValueError(f"data dim {data.points.shape[1]} != model dim {params.data_dim}")
    if cfg.steps == 0:
        return TrainResult(params, adapter, [])

    rng = np.random.default_rng(cfg.seed)
    trainable = adapter.copy() if lora else params.copy()
    opt = Adam(trainable.arrays(), cfg.learning_rate)
    batches = _batches(rng, len(data), cfg.batch_size)
    losses: list[float] = []
    over = 0
    for step in range(cfg.steps):
        idx = next(batches)
        draws = draw_loss_inputs(rng, len(idx), sched.T, params.data_dim, cfg.p_uncond)
        if lora:
            loss, grads = ddpm_loss(params, data.points[idx], data.labels[idx], draws, sched,
                                    adapter=trainable, lora_scale=cfg.lora_scale)
        else:
            loss, grads = ddpm_loss(trainable, data.points[idx], data.labels[idx], draws, sched)
        losses.append(loss)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        over = over + 1 if loss > DIVERGENCE_FACTOR * losses[0] else 0
        if over >= DIVERGENCE_PATIENCE:
            raise TrainingDiverged(
                f"loss above {DIVERGENCE_FACTOR}x initial ({losses[0]:.4g}) for "
                f"{DIVERGENCE_PATIENCE} consecutive steps, last {loss:.4g} at step {step}"
            )
        trainable = trainable.with_arrays(opt.step(trainable.arrays(), grads.arrays()))
        if step % 1000 == 0:
            log.debug("%s step %d loss %.5f", cfg.mode.value, step, loss)
    if lora:
        return TrainResult(params, trainable, losses)
    return TrainResult(trainable, None, losses)
