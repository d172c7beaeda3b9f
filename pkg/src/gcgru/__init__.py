"""Relationship-driven stock movement prediction.

Multiple corporate-relationship graphs (shareholding, industry lead-lag,
shared news topics) are fused by graph convolution; the resulting
cross-effect features are concatenated with historical market features and
fed into a GRU that predicts next-day up/down movement for every stock in
the universe. Forward and backward passes are written by hand in numpy and
verified against central finite differences.
"""

__version__ = "0.1.0"

from .universe import (
    StockUniverse,
    RawSeries,
    PriceRow,
    PanelDataset,
    WindowSample,
    load_prices,
    align_and_fill,
    make_labels,
    minmax_normalize,
    window_dataset,
    chrono_split,
    build_panel,
)
from .graphs import (
    AdjacencyMatrix,
    Laplacian,
    build_shareholding_graph,
    build_industry_graph,
    build_topicality_graph,
    normalized_laplacian,
    matrix_polynomial,
    graph_density,
)
from .model import (
    ModelDims,
    ModelParams,
    Propagators,
    ForwardTrace,
    init_params,
    build_propagators,
    assemble_propagator,
    forward_window,
    backward_window,
    save_checkpoint,
    load_checkpoint,
)
from .training import (
    TrainConfig,
    TrainHistory,
    AdamState,
    TrainingDiverged,
    cross_entropy_loss,
    adam_step,
    train,
    gradcheck,
    gradcheck_all,
)
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    classify,
    confusion,
    compute_metrics,
)
from .synth import SynthConfig, SynthResult, generate, oracle_accuracy
