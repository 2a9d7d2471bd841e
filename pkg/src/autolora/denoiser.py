"""Conditional epsilon-prediction MLP over low-dimensional data.

The network input is ``[x || embed_time(t) || cond_embeddings[c]]``; hidden
layers use tanh, the head is linear. Row ``K`` of the condition table is the
learned NULL embedding used for unconditional prediction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .schedule import NoiseSchedule

FORMAT_VERSION = 1
MAX_TIME_FREQUENCY = 100.0


@dataclass(frozen=True)
class Condition:
    """A class label ``0..K-1``, or NULL when ``label`` is None."""

    label: int | None = None

    @classmethod
    def null(cls) -> "Condition":
        return cls(None)

    @property
    def is_null(self) -> bool:
        return self.label is None

    def index(self, K: int) -> int:
        """Row of the embedding table; NULL maps to row ``K``."""
        if self.label is None:
            return K
        if not 0 <= self.label < K:
            raise ValueError(f"label {self.label} outside 0..{K - 1}")
        return int(self.label)

    def __str__(self) -> str:
        return "null" if self.label is None else str(self.label)


NULL = Condition.null()


@dataclass
class DenoiserParams:
    layer_weights: list[np.ndarray]
    layer_biases: list[np.ndarray]
    cond_embeddings: np.ndarray
    time_embed_dim: int
    data_dim: int
    hidden_widths: list[int] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.cond_embeddings.shape[0] - 1

    @property
    def d_emb(self) -> int:
        return self.cond_embeddings.shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_weights)

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays in canonical order (weights/biases interleaved, then embeddings)."""
        out = []
        for W, b in zip(self.layer_weights, self.layer_biases):
            out += [W, b]
        out.append(self.cond_embeddings)
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "DenoiserParams":
        n = self.n_layers
        return DenoiserParams(
            layer_weights=[arrays[2 * i] for i in range(n)],
            layer_biases=[arrays[2 * i + 1] for i in range(n)],
            cond_embeddings=arrays[2 * n],
            time_embed_dim=self.time_embed_dim,
            data_dim=self.data_dim,
            hidden_widths=list(self.hidden_widths),
        )

    def copy(self) -> "DenoiserParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "DenoiserParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])


def init_params(seed: int, data_dim: int, hidden_widths: Sequence[int], K: int,
                time_embed_dim: int, d_emb: int) -> DenoiserParams:
    """Weights ~ N(0, 1/fan_in), zero biases, embeddings ~ N(0, 0.1^2)."""
    dims = [data_dim, time_embed_dim, d_emb, K, *hidden_widths]
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"all dimensions must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    widths = [data_dim + time_embed_dim + d_emb, *hidden_widths, data_dim]
    weights, biases = [], []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in))
        biases.append(np.zeros(d_out))
    cond = 0.1 * rng.standard_normal((K + 1, d_emb))
    return DenoiserParams(weights, biases, cond, int(time_embed_dim), int(data_dim),
                          [int(h) for h in hidden_widths])


def time_frequencies(time_embed_dim: int) -> np.ndarray:
    half = time_embed_dim // 2
    if half <= 1:
        return np.ones(max(half, 0))
    return MAX_TIME_FREQUENCY ** (np.arange(half) / (half - 1))


def embed_time_batch(t: np.ndarray, T: int, time_embed_dim: int) -> np.ndarray:
    """Sinusoidal embedding of ``t / T``: columns sin(f0 u), cos(f0 u), sin(f1 u), ...

    Frequencies are geometric from 1 to ``MAX_TIME_FREQUENCY``; an odd final
    column carries ``u`` itself.
    """
    u = np.asarray(t, dtype=np.float64) / T
    freqs = time_frequencies(time_embed_dim)
    phase = u[:, None] * freqs[None, :]
    emb = np.empty((u.shape[0], time_embed_dim))
    emb[:, 0:2 * len(freqs):2] = np.sin(phase)
    emb[:, 1:2 * len(freqs):2] = np.cos(phase)
    if time_embed_dim % 2:
        emb[:, -1] = u
    return emb


def embed_time(t: int, sched: NoiseSchedule, time_embed_dim: int) -> np.ndarray:
    sched.check_t(t)
    return embed_time_batch(np.array([t]), sched.T, time_embed_dim)[0]


def effective_weights(params: DenoiserParams, deltas: dict[int, np.ndarray] | None = None
                      ) -> list[np.ndarray]:
    if not deltas:
        return params.layer_weights
    return [W + deltas[i] if i in deltas else W for i, W in enumerate(params.layer_weights)]


def _as_index_array(values, n: int, dtype=np.int64) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim == 0:
        arr = np.full(n, arr, dtype=dtype)
    if arr.shape != (n,):
        raise ValueError(f"expected {n} per-row entries, got shape {arr.shape}")
    return arr


def forward(params: DenoiserParams, x: np.ndarray, t, cond_idx, T: int,
            weights: list[np.ndarray] | None = None, keep: bool = False):
    """Batched forward pass.

    ``x`` is (n, data_dim); ``t`` and ``cond_idx`` are scalars or length-n
    integer arrays (``cond_idx == K`` selects NULL). ``weights`` overrides the
    dense weights, e.g. LoRA-adapted ones. With ``keep=True`` returns
    ``(out, cache)`` for :func:`backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.data_dim:
        raise ValueError(f"dimension mismatch: expected (n, {params.data_dim}), got {x.shape}")
    n = x.shape[0]
    t_arr = _as_index_array(t, n)
    if t_arr.size and (t_arr.min() < 1 or t_arr.max() > T):
        raise ValueError(f"step index outside 1..{T}")
    c_arr = _as_index_array(cond_idx, n)
    if c_arr.size and (c_arr.min() < 0 or c_arr.max() > params.K):
        raise ValueError(f"condition index outside 0..{params.K}")
    weights = params.layer_weights if weights is None else weights

    h = np.concatenate(
        [x, embed_time_batch(t_arr, T, params.time_embed_dim), params.cond_embeddings[c_arr]],
        axis=1,
    )
    acts = [h]
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, params.layer_biases)):
        z = h @ W + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    if keep:
        return h, (acts, c_arr)
    return h


def backward(params: DenoiserParams, weights: list[np.ndarray], cache, grad_out: np.ndarray):
    """Gradients of a scalar loss given dL/d(out).

    Returns ``(weight_grads, bias_grads, cond_grad)`` where weight grads are
    with respect to the *effective* weights used in the forward pass.
    """
    acts, c_arr = cache
    n_layers = len(weights)
    w_grads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = grad_out
    for i in range(n_layers - 1, -1, -1):
        w_grads[i] = acts[i].T @ delta
        b_grads[i] = delta.sum(axis=0)
        delta = delta @ weights[i].T
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    cond_grad = np.zeros_like(params.cond_embeddings)
    start = params.data_dim + params.time_embed_dim
    np.add.at(cond_grad, c_arr, delta[:, start:])
    return w_grads, b_grads, cond_grad


def predict_eps(params: DenoiserParams, x, t: int, c: Condition, T: int) -> np.ndarray:
    """epsilon_theta(x, t, c) for one data vector or an (n, data_dim) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = forward(params, x[None, :] if single else x, t, c.index(params.K), T)
    return out[0] if single else out


# -- checkpoints ------------------------------------------------------------

def _pack(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v) for v in a.ravel()]}


def _unpack(d: dict) -> np.ndarray:
    return np.array(d["values"], dtype=np.float64).reshape(d["shape"])


def params_to_dict(params: DenoiserParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "denoiser",
        "data_dim": params.data_dim,
        "time_embed_dim": params.time_embed_dim,
        "hidden_widths": list(params.hidden_widths),
        "K": params.K,
        "layers": [{"weight": _pack(W), "bias": _pack(b)}
                   for W, b in zip(params.layer_weights, params.layer_biases)],
        "cond_embeddings": _pack(params.cond_embeddings),
    }


def params_from_dict(d: dict) -> DenoiserParams:
    if d.get("kind") != "denoiser":
        raise ValueError(f"not a denoiser checkpoint (kind={d.get('kind')!r})")
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {d.get('format_version')!r}")
    params = DenoiserParams(
        layer_weights=[_unpack(layer["weight"]) for layer in d["layers"]],
        layer_biases=[_unpack(layer["bias"]) for layer in d["layers"]],
        cond_embeddings=_unpack(d["cond_embeddings"]),
        time_embed_dim=int(d["time_embed_dim"]),
        data_dim=int(d["data_dim"]),
        hidden_widths=[int(h) for h in d["hidden_widths"]],
    )
    if params.K != d["K"]:
        raise ValueError("condition table does not match K")
    return params


def dumps_json(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_params(params: DenoiserParams, path: str | Path) -> str:
    """Write a checkpoint; returns the sha256 of the written bytes."""
    data = dumps_json(params_to_dict(params)).encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_params(path: str | Path) -> DenoiserParams:
    return params_from_dict(json.loads(Path(path).read_text()))
