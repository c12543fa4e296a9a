"""stylevc: one-shot voice conversion with stylized transformer blocks.

Disentangles speech into a content latent (variational Conformer encoder
with instance normalization) and a speaker embedding (Conformer encoder
without it), then recombines them with a decoder whose attention weights
are modulated by the split speaker embedding.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InputError,
    IntegrityError,
    NumericError,
    ParseError,
    StyleVCError,
    VersionMismatchError,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "InputError",
    "IntegrityError",
    "NumericError",
    "ParseError",
    "StyleVCError",
    "VersionMismatchError",
    "__version__",
]
