"""Transformer-based sEMG gesture recognition with a self-contained autodiff engine."""

__version__ = "0.1.0"

from .model import ModelConfig, TemgNet, count_params, init_params, variant_config  # noqa: E402
from .recording import EmgRecording  # noqa: E402
from .segmentation import SegmentDataset, segment, split_by_repetition  # noqa: E402
from .sigproc import FilterSpec, butterworth_lowpass, mu_law  # noqa: E402
from .tensor import Tensor, backward  # noqa: E402

__all__ = [
    "EmgRecording",
    "FilterSpec",
    "ModelConfig",
    "SegmentDataset",
    "TemgNet",
    "Tensor",
    "backward",
    "butterworth_lowpass",
    "count_params",
    "init_params",
    "mu_law",
    "segment",
    "split_by_repetition",
    "variant_config",
]
