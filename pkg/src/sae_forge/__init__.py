"""Sparse autoencoders with token-masked training on a toy token model."""

from .errors import (
    BadMagicError,
    ConfigError,
    DataExhaustedError,
    DimensionError,
    FormatError,
    HeaderMismatchError,
    NumericError,
    SaeForgeError,
    TruncatedFileError,
)
from .sae import SaeParams, SparseAutoencoder, SparsityVariant

__version__ = "0.1.0"
