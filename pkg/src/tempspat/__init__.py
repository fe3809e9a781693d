"""Temporal-spatial nonparametric regression: trend filtering for d = 1 and
the K-nearest-neighbor fused lasso for general d, with simulation and
evaluation tooling."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    AlignmentError,
    DatasetError,
    TemporalSpatialDataset,
    harmonic_mean_m,
    read_dataset_csv,
    weighted_sq_norm,
    write_dataset_csv,
)
from .gfl import (  # noqa: E402
    AdmmOptions,
    FitResult,
    fit_constrained_knnfl,
    fit_penalized_knnfl,
    graph_tv_prox,
    predict_knn_average,
    theta_update,
)
from .knn_graph import KnnGraph, build_knn_graph, graph_tv  # noqa: E402
from .simgen import ScenarioConfig, generate  # noqa: E402
from .tf1d import TfFit, TfOptions, evaluate_tf, fit_constrained_tf, fit_penalized_tf  # noqa: E402

__all__ = [
    "AlignmentError",
    "DatasetError",
    "TemporalSpatialDataset",
    "harmonic_mean_m",
    "read_dataset_csv",
    "weighted_sq_norm",
    "write_dataset_csv",
    "AdmmOptions",
    "FitResult",
    "fit_constrained_knnfl",
    "fit_penalized_knnfl",
    "graph_tv_prox",
    "predict_knn_average",
    "theta_update",
    "KnnGraph",
    "build_knn_graph",
    "graph_tv",
    "ScenarioConfig",
    "generate",
    "TfFit",
    "TfOptions",
    "evaluate_tf",
    "fit_constrained_tf",
    "fit_penalized_tf",
]
