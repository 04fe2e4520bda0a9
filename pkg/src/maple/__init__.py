"""Mahalanobis-distance uncertainty and OOD detection with self-supervised
intra-class relabelling (X-Means) during training.
"""

from .errors import ConfigError, DataError, MapleError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "MapleError", "NumericalError", "__version__"]
