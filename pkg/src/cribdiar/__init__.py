"""Frame-level speaker-role diarization for infant-centred audio, on a small numpy autodiff engine."""

from .autodiff import Tensor, backward, check_gradients, no_grad
from .features import TimedSegment, Waveform, load_wav, logmel, rasterize_labels
from .models import DiarizationModel, ModelSpec
from .scoring import der, der_breakdown, frame_error_rate, read_rttm, write_rttm
from .training import TrainConfig, bce_loss, focal_loss, predict, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "check_gradients",
    "no_grad",
    "TimedSegment",
    "Waveform",
    "load_wav",
    "logmel",
    "rasterize_labels",
    "DiarizationModel",
    "ModelSpec",
    "der",
    "der_breakdown",
    "frame_error_rate",
    "read_rttm",
    "write_rttm",
    "TrainConfig",
    "bce_loss",
    "focal_loss",
    "predict",
    "train",
]
