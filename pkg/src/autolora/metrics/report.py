from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..denoiser import Condition
from ..guidance import GuidanceConfig
from ..train import MixtureSpec
from .diversity import FeatureExtractor, Identity, diversity, div_product
from .scores import (
    DEFAULT_ANCHOR_SIGMA,
    DEFAULT_BANDS,
    target_presence_score,
    style_likelihood_score,
)

REPORT_COLUMNS = (
    "lora_scale", "mode", "w", "w1", "w2", "gamma",
    "diversity", "cps", "pc", "sa", "div_cps", "div_pc", "div_sa", "n_samples",
)


@dataclass
class ScoreReport:
    diversity: float
    cps: float
    pc: float
    sa: float
    div_cps: float
    div_pc: float
    div_sa: float
    n_samples: int
    condition: Condition | None
    config: GuidanceConfig | None

    @classmethod
    def from_scores(cls, div: float, cps: float, pc: float, sa: float, n_samples: int,
                    condition=None, config=None) -> "ScoreReport":
        return cls(div, cps, pc, sa, div_product(div, cps), div_product(div, pc),
                   div_product(div, sa), n_samples, condition, config)

    def row(self) -> dict:
        cfg = self.config or GuidanceConfig()
        return {
            "lora_scale": cfg.lora_scale, "mode": cfg.mode.value, "w": cfg.w,
            "w1": cfg.w1, "w2": cfg.w2, "gamma": cfg.gamma,
            "diversity": self.diversity, "cps": self.cps, "pc": self.pc, "sa": self.sa,
            "div_cps": self.div_cps, "div_pc": self.div_pc, "div_sa": self.div_sa,
            "n_samples": self.n_samples,
        }


def build_report(X: np.ndarray, extractor: FeatureExtractor | None, target: MixtureSpec,
                 lora_spec: MixtureSpec, config: GuidanceConfig | None = None,
                 condition: Condition | None = None, prompt_spec: MixtureSpec | None = None,
                 bands: Sequence[tuple[float, float]] = DEFAULT_BANDS,
                 anchor_sigma: float = DEFAULT_ANCHOR_SIGMA) -> ScoreReport:
    """Score one same-condition batch.

    ``target`` drives CPS (presence of the fine-tuned subject), ``prompt_spec``
    drives PC (presence of any mode of the requested label; defaults to
    ``target``), ``lora_spec`` drives SA.
    """
    X = np.asarray(X, dtype=np.float64)
    div = diversity(X, extractor or Identity())
    cps = target_presence_score(X, target, bands)
    pc = target_presence_score(X, prompt_spec if prompt_spec is not None else target, bands)
    sa = style_likelihood_score(X, lora_spec, anchor_sigma)
    return ScoreReport.from_scores(div, cps, pc, sa, X.shape[0], condition, config)


def aggregate_reports(reports: Sequence[ScoreReport]) -> ScoreReport:
    """Mean of each factor over conditions; Div products of the means."""
    if not reports:
        raise ValueError("nothing to aggregate")
    mean = lambda name: float(np.mean([getattr(r, name) for r in reports]))  # noqa: E731
    return ScoreReport.from_scores(mean("diversity"), mean("cps"), mean("pc"), mean("sa"),
                                   sum(r.n_samples for r in reports), None, reports[0].config)


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow([format_value(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def render_table(rows: Sequence[dict], digits: int = 3) -> str:
    """Plain-text table with scores rounded for display."""
    lines = ["  ".join(f"{c:>10}" for c in REPORT_COLUMNS)]
    for row in rows:
        cells = []
        for c in REPORT_COLUMNS:
            v = row[c]
            cells.append(f"{v:>10.{digits}f}" if isinstance(v, float) else f"{v!s:>10}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
