"""splitbd: split learning without label sharing, and what a malicious
server can do to it after the fact."""

__version__ = "0.1.0"

from .config import ExperimentConfig, from_ini, load_config, save_config, to_ini
from .data import DatasetSplit, ImageBatch, NoiseSpec, TriggerSpec, load_dataset

__all__ = [
    "ExperimentConfig", "from_ini", "load_config", "save_config", "to_ini",
    "DatasetSplit", "ImageBatch", "NoiseSpec", "TriggerSpec", "load_dataset",
    "__version__",
]
