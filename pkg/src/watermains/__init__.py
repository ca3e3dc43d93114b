"""Water-main failure analytics.

Library + CLI covering the full pipeline: data quality audit, work-order
to asset matching, environmental joins, failure-rate factor tables,
random-forest failure-likelihood scoring, grid-search long-term
forecasting, and ranked-inspection evaluation, with a synthetic network
generator providing ground truth for verification.
"""

__version__ = "0.1.0"

from .core import (
    BURST,
    FAILURE_TYPES,
    FITTING,
    MATERIALS,
    EnvironmentRecord,
    ExposureError,
    FailureRecord,
    MatchedDataset,
    PipeAsset,
    QualityReport,
    RatePoint,
    failure_rate,
    risk_score,
)

__all__ = [
    "BURST",
    "FAILURE_TYPES",
    "FITTING",
    "MATERIALS",
    "EnvironmentRecord",
    "ExposureError",
    "FailureRecord",
    "MatchedDataset",
    "PipeAsset",
    "QualityReport",
    "RatePoint",
    "failure_rate",
    "risk_score",
    "__version__",
]
