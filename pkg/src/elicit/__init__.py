"""Sequential expert-knowledge elicitation for sparse multi-output regression."""

__version__ = "0.1.0"

from .data import (
    ColumnTransform,
    DataError,
    Dataset,
    DrugInfo,
    FeatureInfo,
    dataset_from_arrays,
    load_dataset,
    standardize,
)
from .model import (
    FeedbackAnswer,
    FeedbackEvent,
    FeedbackSet,
    GaussianPredictive,
    Hyperparameters,
    ModelError,
    ModelParameters,
    map_answer,
)

__all__ = [
    "ColumnTransform",
    "DataError",
    "Dataset",
    "DrugInfo",
    "FeatureInfo",
    "FeedbackAnswer",
    "FeedbackEvent",
    "FeedbackSet",
    "GaussianPredictive",
    "Hyperparameters",
    "ModelError",
    "ModelParameters",
    "dataset_from_arrays",
    "load_dataset",
    "map_answer",
    "standardize",
    "__version__",
]
