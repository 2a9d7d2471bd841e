from .diversity import (
    FeatureExtractor,
    Identity,
    Remote,
    Standardized,
    div_product,
    diversity,
    pairwise_cosines,
)
from .report import (
    REPORT_COLUMNS,
    ScoreReport,
    aggregate_reports,
    build_report,
    render_table,
    reports_to_csv,
)
from .scores import (
    DEFAULT_ANCHOR_SIGMA,
    DEFAULT_BANDS,
    band_score,
    mixture_log_density,
    style_likelihood_score,
    target_presence_score,
)
from .vlm import Template, VLMResult, VLMTransportError, parse_reply, render_prompt, vlm_score
