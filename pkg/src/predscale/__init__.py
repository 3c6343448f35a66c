"""Trace-driven experiments for predictive horizontal autoscaling."""

from .autoscaler import (
    Autoscaler,
    AutoscalerConfig,
    InsufficientData,
    Recommendation,
    RecommendationHistory,
    forecast_hold,
    forecast_knn,
    forecast_linear,
    forecast_oracle,
    reactive_recommend,
)
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    compare_models,
    config_from_dict,
    load_config,
    run_experiment,
    serve_stub_target,
)
from .loadgen import Batch, BatchResult, execute_batch, plan_batches, run_load
from .scoring import PenaltyBreakdown, PenaltyParams, ReplicaTimeline, average_replicas, latency_term, penalty
from .simcluster import Cluster, ClusterTarget, ServiceModel
from .trace import (
    BinaryRecordLayout,
    RateSeries,
    TraceEvent,
    parse_binary_trace,
    parse_text_trace,
    slice_window,
    to_rate_series,
)

__version__ = "0.1.0"
