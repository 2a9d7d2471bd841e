"""Guided epsilon combiners and the deterministic reverse sampler.

Combiners (all of the form ``a + s * (b - a)``):

    CFG           eps(x, null) + w * (eps(x, y) - eps(x, null))
    AutoGuidance  eps_bad(x, y) + w * (eps_good(x, y) - eps_bad(x, y))
    AutoLoRA      eps(x, y) + gamma * (eps_lora(x, y) - eps(x, y))
    AutoLoRA+CFG  e1 + gamma * (e2 - e1),  e1 = CFG(base, w1), e2 = CFG(lora, w2)

Sampling iterates t = T..1 with the noise-free update

    x0_hat  = (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
    x_{t-1} = sqrt(abar_{t-1}) * x0_hat + sqrt(1 - abar_{t-1}) * eps_hat
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .denoiser import NULL, Condition, DenoiserParams, forward
from .lora import LoraAdapter, adapted_weights
from .schedule import NoiseSchedule

Predictor = Callable[[np.ndarray, int, Condition], np.ndarray]


class Mode(str, enum.Enum):
    VANILLA = "VANILLA"
    CFG = "CFG"
    AUTOGUIDANCE = "AUTOGUIDANCE"
    AUTOLORA_PLAIN = "AUTOLORA_PLAIN"
    AUTOLORA_CFG = "AUTOLORA_CFG"

    @property
    def needs_adapter(self) -> bool:
        return self in (Mode.AUTOLORA_PLAIN, Mode.AUTOLORA_CFG)


@dataclass(frozen=True)
class GuidanceConfig:
    mode: Mode = Mode.VANILLA
    w: float = 1.0
    w1: float = 1.0
    w2: float = 1.0
    gamma: float = 1.0
    lora_scale: float = 1.0
    steps: int = 200

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        for name in ("w", "w1", "w2", "gamma", "lora_scale"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite nonnegative real, got {value}")
            object.__setattr__(self, name, float(value))
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class SamplerOutput:
    x0: np.ndarray
    seed: int
    config: GuidanceConfig
    condition: Condition
    trajectory: list[np.ndarray] | None = None


@dataclass
class BatchOutput:
    """Vectorized sampler result for many seeds at once; row i belongs to ``seeds[i]``."""

    x0: np.ndarray
    xT: np.ndarray
    seeds: list[int]
    config: GuidanceConfig
    condition: Condition
    trajectory: list[np.ndarray] | None = field(default=None, repr=False)

    def outputs(self) -> list[SamplerOutput]:
        traj = self.trajectory
        return [
            SamplerOutput(self.x0[i], s, self.config, self.condition,
                          None if traj is None else [step[i] for step in traj])
            for i, s in enumerate(self.seeds)
        ]


def _extrapolate(a: np.ndarray, b: np.ndarray, s: float) -> np.ndarray:
    # a + s*(b - a), exact at s == 0, s == 1 and a == b.
    if s == 1:
        return b
    return a + s * (b - a)


def _require_label(y: Condition) -> None:
    if y.is_null:
        raise ValueError("guided prediction needs a label condition, got NULL")


def cfg_eps(model: Predictor, x, t: int, y: Condition, w: float) -> np.ndarray:
    _require_label(y)
    uncond = model(x, t, NULL)
    cond = model(x, t, y)
    return _extrapolate(uncond, cond, w)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}")


def autoguidance_eps(good: Predictor, bad: Predictor, x, t: int, y: Condition,
                     w: float) -> np.ndarray:
    e_bad = bad(x, t, y)
    e_good = good(x, t, y)
    _same_shape(e_bad, e_good)
    return _extrapolate(e_bad, e_good, w)


def autolora_eps_plain(base: Predictor, lora: Predictor, x, t: int, y: Condition,
                       gamma: float) -> np.ndarray:
    e_base = base(x, t, y)
    e_lora = lora(x, t, y)
    _same_shape(e_base, e_lora)
    return _extrapolate(e_base, e_lora, gamma)


def autolora_eps(base: Predictor, lora: Predictor, x, t: int, y: Condition,
                 w1: float, w2: float, gamma: float) -> np.ndarray:
    """Dual-CFG AutoLoRA: four predictor calls (base null/cond, LoRA null/cond)."""
    e1 = cfg_eps(base, x, t, y, w1)
    e2 = cfg_eps(lora, x, t, y, w2)
    _same_shape(e1, e2)
    return _extrapolate(e1, e2, gamma)


def x0_estimate(x_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    abar = sched.alpha_bar(t)
    return (np.asarray(x_t) - np.sqrt(1.0 - abar) * np.asarray(eps_hat)) / np.sqrt(abar)


def reverse_step(x_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    sched.check_t(t)
    x_hat = x0_estimate(x_t, eps_hat, t, sched)
    abar_prev = sched.alpha_bar(t - 1)
    return np.sqrt(abar_prev) * x_hat + np.sqrt(1.0 - abar_prev) * np.asarray(eps_hat)


# -- predictors ---------------------------------------------------------------

class ModelPredictor:
    """Batched epsilon-predictor over fixed (possibly LoRA-adapted) weights.

    ``calls`` counts invocations, one per batched evaluation.
    """

    def __init__(self, params: DenoiserParams, T: int,
                 adapter: LoraAdapter | None = None, lora_scale: float = 0.0):
        self.params = params
        self.T = T
        self.weights = (params.layer_weights if adapter is None
                        else adapted_weights(params, adapter, lora_scale))
        self.calls = 0

    def __call__(self, x, t: int, c: Condition) -> np.ndarray:
        self.calls += 1
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = forward(self.params, x[None, :] if single else x, t, c.index(self.params.K),
                      self.T, weights=self.weights)
        return out[0] if single else out


def initial_noise(seeds: Sequence[int], data_dim: int) -> np.ndarray:
    """x_T rows: seed ``s`` always yields the same standard-normal draw."""
    return np.stack([np.random.default_rng(int(s)).standard_normal(data_dim) for s in seeds])


def make_combiner(cfg: GuidanceConfig, model: Predictor, base: Predictor | None = None,
                  bad: Predictor | None = None) -> Callable[[np.ndarray, int, Condition], np.ndarray]:
    """Select the epsilon rule for ``cfg.mode``.

    ``model`` is the sampled model (LoRA-adapted when an adapter is in play);
    ``base`` is the un-adapted model for the AutoLoRA modes.
    """
    mode = cfg.mode
    if mode is Mode.VANILLA:
        return lambda x, t, y: model(x, t, y)
    if mode is Mode.CFG:
        return lambda x, t, y: cfg_eps(model, x, t, y, cfg.w)
    if mode is Mode.AUTOGUIDANCE:
        if bad is None:
            raise ValueError("AUTOGUIDANCE needs a 'bad' model")
        return lambda x, t, y: autoguidance_eps(model, bad, x, t, y, cfg.w)
    if base is None:
        raise ValueError(f"{mode.value} needs both base and LoRA models")
    if mode is Mode.AUTOLORA_PLAIN:
        return lambda x, t, y: autolora_eps_plain(base, model, x, t, y, cfg.gamma)
    return lambda x, t, y: autolora_eps(base, model, x, t, y, cfg.w1, cfg.w2, cfg.gamma)


def run_sampler(combiner, sched: NoiseSchedule, xT: np.ndarray, y: Condition,
                record_trajectory: bool = False):
    x = xT
    traj = [x] if record_trajectory else None
    for t in range(sched.T, 0, -1):
        eps_hat = combiner(x, t, y)
        x = reverse_step(x, eps_hat, t, sched)
        if traj is not None:
            traj.append(x)
    return x, traj


def sample_batch(base: DenoiserParams, adapter: LoraAdapter | None, sched: NoiseSchedule,
                 cfg: GuidanceConfig, y: Condition, seeds: Sequence[int],
                 bad: DenoiserParams | None = None,
                 record_trajectory: bool = False) -> BatchOutput:
    """Sample one output per seed, all seeds advanced together as a batch.

    Modes other than the AutoLoRA ones sample the LoRA model when ``adapter`` is
    given and the base model otherwise.
    """
    if cfg.steps != sched.T:
        raise ValueError(f"config steps={cfg.steps} but schedule has T={sched.T}")
    if cfg.mode.needs_adapter and adapter is None:
        raise ValueError(f"mode {cfg.mode.value} requires a LoRA adapter")
    if cfg.mode is not Mode.VANILLA:
        _require_label(y)
    else:
        y.index(base.K)
    seeds = [int(s) for s in seeds]
    base_model = ModelPredictor(base, sched.T)
    model = (base_model if adapter is None
             else ModelPredictor(base, sched.T, adapter, cfg.lora_scale))
    bad_model = None if bad is None else ModelPredictor(bad, sched.T)
    combiner = make_combiner(cfg, model, base_model, bad_model)
    xT = initial_noise(seeds, base.data_dim)
    x0, traj = run_sampler(combiner, sched, xT, y, record_trajectory)
    return BatchOutput(x0, xT, seeds, cfg, y, traj)


def sample(base: DenoiserParams, adapter: LoraAdapter | None, sched: NoiseSchedule,
           cfg: GuidanceConfig, y: Condition, seed: int,
           bad: DenoiserParams | None = None, record_trajectory: bool = False
           ) -> SamplerOutput:
    return sample_batch(base, adapter, sched, cfg, y, [seed], bad,
                        record_trajectory).outputs()[0]
