"""Learned lossy compression for spatiotemporal scientific fields.

Hyperprior transform coding of [T, H, W] float32 series with a post-hoc
correction stage that enforces a hard per-block reconstruction error bound,
which in aggregate guarantees a user-chosen NRMSE ceiling.

The usual entry points:

    from fieldcodec import compress, decompress, evaluate_nrmse
    from fieldcodec.transforms import WeightStore
    from fieldcodec.training import train_foundation, fine_tune
"""

from .codec import (
    CodecError,
    compress,
    compression_ratio,
    decompress,
    evaluate_nrmse,
    inspect,
    rd_curve,
)
from .data import FieldManifest, FieldSeries, load_field, save_field

__version__ = "0.1.0"

__all__ = [
    "CodecError",
    "FieldManifest",
    "FieldSeries",
    "compress",
    "compression_ratio",
    "decompress",
    "evaluate_nrmse",
    "inspect",
    "load_field",
    "rd_curve",
    "save_field",
    "__version__",
]
