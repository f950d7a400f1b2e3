"""Exception hierarchy for pytsr."""

from typing import Any, Optional, Sequence


class PyTSRError(Exception):
    """Base exception for pytsr.

    Every error carries a short machine-readable ``code`` next to the
    human-readable message.
    """

    code = "pytsr_error"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self) -> str:
        return f"{self.code}: {super().__str__()}"


class ConfigError(PyTSRError):
    """Raised when a configuration file or override is invalid."""

    code = "invalid_config"


class SignalError(PyTSRError):
    """Raised when an audio signal cannot be processed."""

    code = "invalid_signal"


class ShapeMismatchError(PyTSRError):
    """Raised when a tensor does not have the shape a layer or operation expects."""

    code = "shape_mismatch"

    def __init__(self, where: str, expected: Any, actual: Sequence[int]):
        super().__init__(f"{where}: expected shape {expected}, got {tuple(actual)}")
        self.where = where
        self.expected = expected
        self.actual = tuple(actual)


class ManifestError(PyTSRError):
    """Raised when a corpus manifest is empty, malformed or inconsistent."""

    code = "invalid_manifest"


class LatticeError(PyTSRError):
    """Raised when a transducer lattice or label sequence is invalid."""

    code = "invalid_lattice"


class DecodeError(PyTSRError):
    """Raised when decoding features into a transcript fails."""

    code = "decode_failed"


class CheckpointError(PyTSRError):
    """Raised when a checkpoint archive cannot be read or written."""

    code = "invalid_checkpoint"


class StageError(PyTSRError):
    """Raised when a training stage cannot run or breaks its freeze contract."""

    code = "stage_failed"


class RecipeError(PyTSRError):
    """Raised when an experiment recipe is not a valid step graph."""

    code = "invalid_recipe"


class InferenceError(PyTSRError):
    """Raised when single-utterance inference fails; the message names the step."""

    code = "inference_failed"

    def __init__(self, step: str, cause: Exception):
        super().__init__(f"[{step}] {cause}")
        self.step = step


class GradientCheckError(PyTSRError):
    """Raised when the gradient verification harness cannot evaluate a loss."""

    code = "non_finite_loss"


class SpeakerLabelError(PyTSRError):
    """Raised when a speaker id is not part of the training speaker set."""

    code = "unknown_speaker"


class ProbabilityError(PyTSRError):
    """Raised when a posterior matrix is not row-stochastic."""

    code = "not_stochastic"
