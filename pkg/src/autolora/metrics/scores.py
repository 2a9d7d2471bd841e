"""Analytic 0-5 scores standing in for the VLM judges.

Both scores work against a Gaussian :class:`~autolora.train.MixtureSpec`:

* presence: banded minimum Mahalanobis distance to a set of components
  (character presence / prompt correspondence analogs);
* style likelihood: mixture log-density mapped affinely so a component mean
  scores 5 and a point ``anchor_sigma`` standard deviations out scores 0.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ..train import MixtureSpec

# (max Mahalanobis distance, score); beyond the last threshold scores 0.
DEFAULT_BANDS: tuple[tuple[float, float], ...] = (
    (1.0, 5.0), (1.5, 4.0), (2.0, 3.0), (2.5, 2.0), (3.5, 1.0),
)
DEFAULT_ANCHOR_SIGMA = 3.5
MAX_SCORE = 5.0


def _cholesky_factors(spec: MixtureSpec) -> list[np.ndarray]:
    out = []
    for c, cov in enumerate(spec.covs):
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError(f"singular covariance for component {int(spec.component_ids[c])}")
        if np.min(np.diag(L)) <= 1e-12 * max(1.0, np.max(np.diag(L))):
            raise ValueError(f"singular covariance for component {int(spec.component_ids[c])}")
        out.append(L)
    return out


def _mahalanobis_sq(X: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """(N, C) squared Mahalanobis distances."""
    X = np.asarray(X, dtype=np.float64)
    chol = _cholesky_factors(spec)
    out = np.empty((X.shape[0], spec.n_components))
    for c, L in enumerate(chol):
        z = np.linalg.solve(L, (X - spec.means[c]).T)
        out[:, c] = np.sum(z * z, axis=0)
    return out


def band_score(d: np.ndarray, bands: Sequence[tuple[float, float]] = DEFAULT_BANDS) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    scores = np.zeros_like(d)
    # walk from the loosest band inward so tighter bands overwrite
    for threshold, score in sorted(bands, key=lambda b: -b[0]):
        scores = np.where(d <= threshold, score, scores)
    return scores


def target_presence_score(X: np.ndarray, target: MixtureSpec,
                          bands: Sequence[tuple[float, float]] = DEFAULT_BANDS) -> float:
    d_min = np.sqrt(np.min(_mahalanobis_sq(X, target), axis=1))
    return float(np.mean(band_score(d_min, bands)))


def _component_log_terms(X: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """(N, C) values of log w_c + log N(x; mu_c, Sigma_c)."""
    if spec.n_components == 0 or np.any(spec.weights <= 0) \
            or not np.isclose(spec.weights.sum(), 1.0):
        raise ValueError("invalid mixture: weights must be positive and sum to 1")
    d = spec.means.shape[1]
    m2 = _mahalanobis_sq(X, spec)
    chol = _cholesky_factors(spec)
    log_norm = np.array([-0.5 * d * np.log(2 * np.pi) - np.sum(np.log(np.diag(L)))
                         for L in chol])
    return np.log(spec.weights)[None, :] + log_norm[None, :] - 0.5 * m2


def mixture_log_density(X: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    return logsumexp(_component_log_terms(X, spec), axis=1)


def style_anchors(spec: MixtureSpec, anchor_sigma: float = DEFAULT_ANCHOR_SIGMA):
    """Per-component (high, low) log-density anchors: at the mean, and
    ``anchor_sigma`` standard deviations along a principal axis."""
    d = spec.means.shape[1]
    chol = _cholesky_factors(spec)
    hi = np.array([np.log(w) - 0.5 * d * np.log(2 * np.pi) - np.sum(np.log(np.diag(L)))
                   for w, L in zip(spec.weights, chol)])
    return hi, hi - 0.5 * anchor_sigma ** 2


def style_map(log_density: np.ndarray, hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    """Affine map onto [0, 5] with clamping; arrays broadcast per sample."""
    return np.clip(MAX_SCORE * (log_density - lo) / (hi - lo), 0.0, MAX_SCORE)


def style_likelihood_score(X: np.ndarray, lora_spec: MixtureSpec,
                           anchor_sigma: float = DEFAULT_ANCHOR_SIGMA) -> float:
    """Mean of per-sample clamped scores; each sample is calibrated against the
    anchors of the component dominating its density."""
    terms = _component_log_terms(X, lora_spec)
    log_p = logsumexp(terms, axis=1)
    hi, lo = style_anchors(lora_spec, anchor_sigma)
    owner = np.argmax(terms, axis=1)
    return float(np.mean(style_map(log_p, hi[owner], lo[owner])))
