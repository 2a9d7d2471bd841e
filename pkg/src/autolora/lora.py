"""Low-rank adapters on the denoiser's dense layers.

An adapted layer uses ``W + lora_scale * alpha * A @ B`` with ``A`` (d x r)
and ``B`` (r x k). Base weights are never modified in place.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .denoiser import (
    FORMAT_VERSION,
    Condition,
    DenoiserParams,
    _pack,
    _unpack,
    dumps_json,
    forward,
)


@dataclass
class LoraTarget:
    layer: int
    A: np.ndarray
    B: np.ndarray


@dataclass
class LoraAdapter:
    targets: list[LoraTarget]
    rank: int
    alpha: float = 1.0

    @property
    def target_layers(self) -> list[int]:
        return [tg.layer for tg in self.targets]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for tg in self.targets:
            out += [tg.A, tg.B]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "LoraAdapter":
        targets = [LoraTarget(tg.layer, arrays[2 * i], arrays[2 * i + 1])
                   for i, tg in enumerate(self.targets)]
        return LoraAdapter(targets, self.rank, self.alpha)

    def copy(self) -> "LoraAdapter":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "LoraAdapter":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def deltas(self, lora_scale: float) -> dict[int, np.ndarray]:
        s = lora_scale * self.alpha
        return {tg.layer: s * (tg.A @ tg.B) for tg in self.targets}


def apply_lora(W: np.ndarray, A: np.ndarray, B: np.ndarray, alpha: float) -> np.ndarray:
    """W + alpha * A @ B."""
    W, A, B = (np.asarray(m, dtype=np.float64) for m in (W, A, B))
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0] \
            or (A.shape[0], B.shape[1]) != W.shape:
        raise ValueError(f"shape mismatch: W{W.shape}, A{A.shape}, B{B.shape}")
    if alpha == 0:
        return W.copy()
    return W + alpha * (A @ B)


def default_target_layers(base: DenoiserParams) -> list[int]:
    """Every dense layer: the hidden layers and the output head."""
    return list(range(base.n_layers))


def init_adapter(seed: int, base: DenoiserParams, r: int,
                 target_layers: Sequence[int] | None = None,
                 alpha: float = 1.0) -> LoraAdapter:
    """A ~ N(0, 1/r), B = 0, so a fresh adapter leaves the model unchanged.

    Explicit targets must all admit rank ``r``. With the default targets a
    layer narrower than ``r`` (the 2-wide head for 2-d data) gets rank
    ``min(d, k)`` instead, which is the most that layer can hold.
    """
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    clip = target_layers is None
    if clip:
        target_layers = default_target_layers(base)
    rng = np.random.default_rng(seed)
    targets = []
    for layer in target_layers:
        if not 0 <= layer < base.n_layers:
            raise ValueError(f"target layer {layer} does not exist (n_layers={base.n_layers})")
        d, k = base.layer_weights[layer].shape
        r_layer = min(r, d, k) if clip else r
        if r_layer > min(d, k):
            raise ValueError(f"rank {r} too large for layer {layer} of shape {d}x{k}")
        targets.append(LoraTarget(layer, rng.standard_normal((d, r_layer)) / np.sqrt(r_layer),
                                  np.zeros((r_layer, k))))
    return LoraAdapter(targets, int(r), float(alpha))


def check_adapter(base: DenoiserParams, adapter: LoraAdapter) -> None:
    for tg in adapter.targets:
        if not 0 <= tg.layer < base.n_layers:
            raise ValueError(f"adapter targets missing layer {tg.layer}")
        W = base.layer_weights[tg.layer]
        r = tg.A.shape[1] if tg.A.ndim == 2 else -1
        if tg.A.shape != (W.shape[0], r) or tg.B.shape != (r, W.shape[1]) \
                or not 1 <= r <= min(adapter.rank, *W.shape):
            raise ValueError(
                f"shape mismatch on layer {tg.layer}: W{W.shape}, A{tg.A.shape}, B{tg.B.shape}"
            )


def adapted_weights(base: DenoiserParams, adapter: LoraAdapter, lora_scale: float
                    ) -> list[np.ndarray]:
    check_adapter(base, adapter)
    weights = list(base.layer_weights)
    if lora_scale == 0:
        return weights
    s = lora_scale * adapter.alpha
    for tg in adapter.targets:
        weights[tg.layer] = apply_lora(weights[tg.layer], tg.A, tg.B, s)
    return weights


def merge_adapter(base: DenoiserParams, adapter: LoraAdapter, lora_scale: float
                  ) -> DenoiserParams:
    """A new parameter record with adapted layers materialized; ``base`` untouched.

    Negative scales are allowed here so a merge can be undone.
    """
    merged = base.copy()
    merged.layer_weights = [W.copy() for W in adapted_weights(base, adapter, lora_scale)]
    return merged


def predict_eps_lora(base: DenoiserParams, adapter: LoraAdapter, lora_scale: float,
                     x, t: int, c: Condition, T: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if lora_scale < 0:
        raise ValueError(f"lora_scale must be nonnegative, got {lora_scale}")
    single = x.ndim == 1
    weights = adapted_weights(base, adapter, lora_scale)
    out = forward(base, x[None, :] if single else x, t, c.index(base.K), T, weights=weights)
    return out[0] if single else out


def adapter_to_dict(adapter: LoraAdapter) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "lora",
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "target_layers": adapter.target_layers,
        "factors": [{"layer": tg.layer, "A": _pack(tg.A), "B": _pack(tg.B)}
                    for tg in adapter.targets],
    }


def adapter_from_dict(d: dict) -> LoraAdapter:
    if d.get("kind") != "lora":
        raise ValueError(f"not a LoRA checkpoint (kind={d.get('kind')!r})")
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {d.get('format_version')!r}")
    targets = [LoraTarget(int(f["layer"]), _unpack(f["A"]), _unpack(f["B"]))
               for f in d["factors"]]
    if [tg.layer for tg in targets] != list(d["target_layers"]):
        raise ValueError("target_layers does not match factor list")
    return LoraAdapter(targets, int(d["rank"]), float(d["alpha"]))


def save_adapter(adapter: LoraAdapter, path: str | Path) -> str:
    data = dumps_json(adapter_to_dict(adapter)).encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_adapter(path: str | Path) -> LoraAdapter:
    return adapter_from_dict(json.loads(Path(path).read_text()))
