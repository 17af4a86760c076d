"""Cross-scan multi-class segmentation engine (Unet family + NUMSnet)."""

from numsnet._core import (
    ChecksumError,
    EngineError,
    Model,
    ShapeError,
    __version__,
    count_params,
    gradcheck,
    gradcheck_case_names,
    load,
    losses,
    metrics,
    sample_split,
    synth_stack,
    train_synth,
    transfer_adapt,
)

__all__ = [
    "ChecksumError",
    "EngineError",
    "Model",
    "ShapeError",
    "__version__",
    "count_params",
    "gradcheck",
    "gradcheck_case_names",
    "load",
    "losses",
    "metrics",
    "sample_split",
    "synth_stack",
    "train_synth",
    "transfer_adapt",
]
