"""Environmental time-series regression from generated text descriptions.

Tabular daily records are linearized into ``[name: value]`` pairs, rendered
as short descriptions, embedded by a small transformer and fed through an
LSTM. Models are pretrained on simulator output and fine-tuned on sparse
observations.
"""
__version__ = "0.1.0"

from .core import Dataset, Sample, load_dataset, split_by_date, subsample_labels  # noqa: E402
from .estimator import DescriptionTransformer, FREERegressor  # noqa: E402
from .train import FreeModel, ModelConfig, TrainConfig  # noqa: E402

__all__ = [
    "Dataset",
    "Sample",
    "load_dataset",
    "split_by_date",
    "subsample_labels",
    "DescriptionTransformer",
    "FREERegressor",
    "FreeModel",
    "ModelConfig",
    "TrainConfig",
]
