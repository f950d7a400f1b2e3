"""pytsr - target-speaker speech extraction and RNN-T recognition with uncertainty features."""

__version__ = "1.0.0"

from .config import ExperimentConfig, load_config, save_config  # noqa: E402
from .errors import (  # noqa: E402
    CheckpointError,
    ConfigError,
    DecodeError,
    InferenceError,
    LatticeError,
    ManifestError,
    PyTSRError,
    RecipeError,
    ShapeMismatchError,
    SignalError,
    StageError,
)
from .models import (  # noqa: E402
    AudioSignal,
    ErrorBreakdown,
    EvaluationReport,
    FeatureSequence,
    MixtureRecord,
    SpeakerEmbedding,
    TokenSequence,
    UncertaintyFeatures,
)
from .system import MODEL_VARIANTS, TargetSpeakerSystem, load_system  # noqa: E402

__author__ = "pytsr developers"

__all__ = [
    "ExperimentConfig",
    "load_config",
    "save_config",
    "PyTSRError",
    "ConfigError",
    "SignalError",
    "ShapeMismatchError",
    "ManifestError",
    "LatticeError",
    "DecodeError",
    "CheckpointError",
    "StageError",
    "RecipeError",
    "InferenceError",
    "AudioSignal",
    "FeatureSequence",
    "SpeakerEmbedding",
    "UncertaintyFeatures",
    "TokenSequence",
    "MixtureRecord",
    "ErrorBreakdown",
    "EvaluationReport",
    "TargetSpeakerSystem",
    "MODEL_VARIANTS",
    "load_system",
]
