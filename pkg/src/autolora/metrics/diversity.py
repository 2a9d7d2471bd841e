"""Pairwise-cosine diversity over a same-condition batch.

    diversity(X) = 1 - 2 / (N (N - 1)) * sum_{i<j} cos(f(x_i), f(x_j))
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class FeatureExtractor:
    """Maps an (N, d) batch to (N, D) features."""

    dim: int | None = None

    def __call__(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Identity(FeatureExtractor):
    def __call__(self, X):
        return np.asarray(X, dtype=np.float64)


@dataclass
class Standardized(FeatureExtractor):
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, points: np.ndarray) -> "Standardized":
        points = np.asarray(points, dtype=np.float64)
        std = points.std(axis=0)
        if np.any(std == 0):
            raise ValueError("cannot standardize a coordinate with zero spread")
        return cls(points.mean(axis=0), std)

    def __call__(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


class Remote(FeatureExtractor):
    """Embeddings from an HTTP endpoint: POST ``{"payload": [...]}`` -> ``{"embedding": [...]}``.

    ``send`` replaces the HTTP call (used for offline tests).
    """

    def __init__(self, endpoint: str | None = None, token: str | None = None,
                 send: Callable[[list], list] | None = None, timeout: float = 30.0):
        self.endpoint = endpoint or os.environ.get("AUTOLORA_EMBED_ENDPOINT")
        self.token = token
        self.timeout = timeout
        self._send = send

    def _post(self, row: list) -> list:
        import httpx

        if not self.endpoint:
            raise ValueError("Remote extractor has no endpoint")
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        resp = httpx.post(self.endpoint, json={"payload": row}, headers=headers,
                          timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()["embedding"]

    def __call__(self, X):
        send = self._send or self._post
        feats = np.array([send(list(map(float, row))) for row in np.asarray(X)], dtype=np.float64)
        if self.dim is None:
            self.dim = feats.shape[1]
        elif feats.shape[1] != self.dim:
            raise ValueError(f"remote embedding dim changed from {self.dim} to {feats.shape[1]}")
        return feats


def pairwise_cosines(F: np.ndarray) -> np.ndarray:
    """Cosines of all pairs i < j, in lexicographic (i, j) order."""
    F = np.asarray(F, dtype=np.float64)
    norms = np.linalg.norm(F, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"zero-norm feature vector at index {int(zero[0])}")
    U = F / norms[:, None]
    iu = np.triu_indices(F.shape[0], k=1)
    return (U @ U.T)[iu]


def diversity(X: np.ndarray, extractor: FeatureExtractor | None = None) -> float:
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"diversity needs at least 2 samples, got {n}")
    feats = (extractor or Identity())(X)
    # left-to-right sum over the lexicographic pair order
    total = sum(pairwise_cosines(feats).tolist())
    return 1.0 - 2.0 * total / (n * (n - 1))


def div_product(diversity_value: float, score: float) -> float:
    return diversity_value * score


def diversity_of_groups(groups: Sequence[np.ndarray], extractor=None) -> list[float]:
    return [diversity(g, extractor) for g in groups]
