"""Fixed-scale patch SSL pretraining, explicit co-occurrence factorization,
and patch-aggregation evaluation at desk scale."""

from . import aggregate_eval, cooc, dataset_io, losses, nn
from .errors import ConfigError, DataError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "NumericalError",
    "aggregate_eval",
    "cooc",
    "dataset_io",
    "losses",
    "nn",
]
