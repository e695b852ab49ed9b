"""Geographic priors for species classification.

Train a coordinate-based species distribution model on presence-only
observations, use its per-species probabilities as a multiplicative
prior over a vision classifier's predictions, and measure the Top-1
accuracy gain plus range-map quality against expert rasters.
"""

from .evaluation import (
    EvalItem,
    EvalReport,
    GeoPriorEvalSet,
    MapResult,
    SweepRow,
    TrainingJob,
    average_precision,
    eval_geo_prior,
    map_from_scores,
    mean_average_precision,
    sweep,
)
from .fusion import (
    UNMAPPED,
    FusedPrediction,
    FusionConfig,
    TaxonomyMap,
    build_prior,
    fuse,
)
from .grids import ExpertRangeSet, GridSpec
from .io import (
    DirectoryCheckpointSink,
    FileFormatError,
    compile_taxonomy,
    export_range_map,
    load_matrix,
    load_model,
    load_observations,
    load_ranges,
    save_matrix,
    save_model,
    save_observations,
    save_ranges,
)
from .model import (
    GeoCoordinate,
    ModelConfig,
    SinrModel,
    encode_location,
    init_model,
)
from .synthworld import (
    ConfusionPair,
    ConfusionPlan,
    SyntheticSpecies,
    SyntheticWorld,
    generate_world,
    make_confusion_plan,
    sample_eval_items,
    sample_observations,
    synth_vision_predictions,
)
from .training import (
    LossBreakdown,
    Observation,
    ObservationSet,
    TrainConfig,
    an_full_loss,
    cap_observations,
    loss_gradients,
    sample_random_locations,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "EvalItem",
    "EvalReport",
    "GeoPriorEvalSet",
    "MapResult",
    "SweepRow",
    "TrainingJob",
    "average_precision",
    "eval_geo_prior",
    "map_from_scores",
    "mean_average_precision",
    "sweep",
    "UNMAPPED",
    "FusedPrediction",
    "FusionConfig",
    "TaxonomyMap",
    "build_prior",
    "fuse",
    "ExpertRangeSet",
    "GridSpec",
    "DirectoryCheckpointSink",
    "FileFormatError",
    "compile_taxonomy",
    "export_range_map",
    "load_matrix",
    "load_model",
    "load_observations",
    "load_ranges",
    "save_matrix",
    "save_model",
    "save_observations",
    "save_ranges",
    "GeoCoordinate",
    "ModelConfig",
    "SinrModel",
    "encode_location",
    "init_model",
    "ConfusionPair",
    "ConfusionPlan",
    "SyntheticSpecies",
    "SyntheticWorld",
    "generate_world",
    "make_confusion_plan",
    "sample_eval_items",
    "sample_observations",
    "synth_vision_predictions",
    "Observation",
    "ObservationSet",
    "TrainConfig",
    "LossBreakdown",
    "an_full_loss",
    "cap_observations",
    "loss_gradients",
    "sample_random_locations",
    "train",
    "__version__",
]
