"""embgen: generative modeling over speaker-embedding tables.

Learns a deep hierarchical VAE (and a diagonal-covariance GMM baseline) over
N x D embedding tables, samples novel embeddings with temperature control,
and scores generation quality with a cosine-similarity and WER/CER metric
suite. See the README for the CLI surface.
"""

__version__ = "0.1.0"

from .errors import (
    EmbgenError,
    NumericalError,
    ParseError,
    StateError,
    ValidationError,
)
from .store import (
    EmbeddingDataset,
    EmbeddingRecord,
    NormalizationStats,
    denormalize,
    fit_normalizer,
    load_dataset,
    normalize,
    save_dataset,
)

__all__ = [
    "EmbgenError",
    "NumericalError",
    "ParseError",
    "StateError",
    "ValidationError",
    "EmbeddingDataset",
    "EmbeddingRecord",
    "NormalizationStats",
    "denormalize",
    "fit_normalizer",
    "load_dataset",
    "normalize",
    "save_dataset",
    "__version__",
]
