"""Image embedding sidecar.

Turns a dataset manifest into the shared embedding file format consumed by
the retrieval store: unit-norm 512-dimensional vectors, one JSONL record per
image, plus a manifest. Also embeds single query images on demand.
"""

__version__ = "0.1.0"

from .encoders import DecodeError, EncoderUnavailable, get_encoder
from .pipeline import embed_dataset, embed_query

__all__ = ["DecodeError", "EncoderUnavailable", "embed_dataset", "embed_query", "get_encoder"]
