"""Missing-value imputation for multidimensional time series."""

from .data import DatasetTensor, DimensionCatalog, from_matrix, load_dense, load_long, normalize
from .model import DeepMviModel, TrainerConfig, fit_impute, impute, load_checkpoint, save_checkpoint, train
from .scenarios import MissScenario, block_shapes, generate

__all__ = [
    "DatasetTensor", "DimensionCatalog", "from_matrix", "load_dense", "load_long", "normalize",
    "DeepMviModel", "TrainerConfig", "fit_impute", "impute", "load_checkpoint",
    "save_checkpoint", "train", "MissScenario", "block_shapes", "generate",
]
__version__ = "0.1.0"
