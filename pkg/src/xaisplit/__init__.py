"""Split inference with importance-skewed features.

A small feature extractor runs on the device.  Training pushes most of the
attributed importance into the first ``k`` feature channels, which a light local
head consumes.  The remaining channels are quantized, LZW-compressed and sent to
a remote head, and the two heads' logits are mixed by a learned weight.
"""

from .codec import Quantizer, lzw_decode, lzw_encode
from .nn import ExtractorConfig, SplitModel, predict
from .skewtrain import SkewnessSpec, TrainConfig, train_pipeline

__version__ = "0.1.0"

__all__ = [
    "ExtractorConfig",
    "Quantizer",
    "SkewnessSpec",
    "SplitModel",
    "TrainConfig",
    "lzw_decode",
    "lzw_encode",
    "predict",
    "train_pipeline",
]
