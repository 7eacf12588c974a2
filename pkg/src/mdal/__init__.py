"""Meta-learned per-parameter step sizes and gated online adaptation for video segmentation."""
from .checkpoint import MetaLearnerState, load_checkpoint, save_checkpoint
from .errors import (ConfigurationError, ContractViolation, GraphReuseError, InputError, LoadError,
                     MDALError, NonFiniteError, VideoTooShortError)
from .metatrain import MetaConfig, base_train, meta_train
from .metrics import EvalReport, dice, evaluate_run, iou
from .online import AdaptConfig, adapt_video
from .params import Arch, ParamSet
from .synthvid import REFERENCE_SPECS, DomainSpec, Video, render_sequence

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "Arch", "ConfigurationError", "ContractViolation", "DomainSpec", "EvalReport",
    "GraphReuseError", "InputError", "LoadError", "MDALError", "MetaConfig", "MetaLearnerState",
    "NonFiniteError", "ParamSet", "REFERENCE_SPECS", "Video", "VideoTooShortError", "adapt_video",
    "base_train", "dice", "evaluate_run", "iou", "load_checkpoint", "meta_train", "render_sequence",
    "save_checkpoint",
]
