"""Incremental implicit language mapping toolkit."""

import os as _os

# Cap math worker threads before numpy loads its BLAS. Has no effect if numpy
# was already imported by the embedding application.
_threads = _os.environ.get("LILMAP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .adaptive import (  # noqa: E402
    AdaptiveReport,
    DivergenceError,
    FeatureBank,
    optimize,
    seed_encoding_for,
    unique,
    unknown,
)
from .fusion import FusionConfig, FusionGrid, FusionMode, alpha  # noqa: E402
from .geometry import (  # noqa: E402
    InsertReport,
    InterpolationRecord,
    OctreeConfig,
    SparseFeatureOctree,
    UnmappedPointError,
)
from .neural import (  # noqa: E402
    Adam,
    AdamConfig,
    DecoderConfig,
    LanguageDecoder,
    cosine_rows,
    cosine_similarity,
    vl_loss,
)
from .pipeline import (  # noqa: E402
    CameraIntrinsics,
    Frame,
    FrameReport,
    LanguagePointCloud,
    MappingConfig,
    MappingState,
    project_frame,
)

__version__ = "0.1.0"

__all__ = [
    "Adam", "AdamConfig", "AdaptiveReport", "CameraIntrinsics", "DecoderConfig",
    "DivergenceError", "FeatureBank", "Frame", "FrameReport", "FusionConfig",
    "FusionGrid", "FusionMode", "InsertReport", "InterpolationRecord",
    "LanguageDecoder", "LanguagePointCloud", "MappingConfig", "MappingState",
    "OctreeConfig", "SparseFeatureOctree", "UnmappedPointError", "alpha",
    "cosine_rows", "cosine_similarity", "optimize", "project_frame",
    "seed_encoding_for", "unique", "unknown", "vl_loss",
]
