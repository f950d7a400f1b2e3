"""Pydantic models for pytsr."""

from typing import Dict, List, Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

MANIFEST_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1

BLANK_SYMBOL = "<blank>"


class AudioSignal(BaseModel):
    """Mono waveform with its sample rate."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: np.ndarray = Field(..., description="1-D float64 samples, nominal range [-1, 1]")
    sample_rate: int = Field(16000, gt=0, description="Sample rate in Hz")

    @field_validator("samples", mode="before")
    @classmethod
    def _as_float_array(cls, value: object) -> np.ndarray:
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        array = np.asarray(value, dtype=np.float64)
        if array.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {array.shape}")
        if array.size == 0:
            raise ValueError("samples must not be empty")
        if not np.all(np.isfinite(array)):
            raise ValueError("samples must be finite")
        return array

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate

    def tensor(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """Samples as a torch tensor (a copy, safe to hand to autograd)."""
        return torch.tensor(self.samples, dtype=dtype)

    @classmethod
    def from_tensor(cls, samples: torch.Tensor, sample_rate: int = 16000) -> "AudioSignal":
        return cls(samples=samples.detach().cpu().double().numpy(), sample_rate=sample_rate)


class FeatureSequence(BaseModel):
    """T x D feature matrix with its framing."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: torch.Tensor = Field(..., description="T x D feature matrix")
    frame_shift_s: float = Field(0.010, gt=0, description="Frame shift in seconds")
    frame_length_s: float = Field(0.025, gt=0, description="Frame length in seconds")

    @field_validator("frames")
    @classmethod
    def _check_frames(cls, value: torch.Tensor) -> torch.Tensor:
        if value.dim() != 2:
            raise ValueError(f"frames must be T x D, got shape {tuple(value.shape)}")
        if value.shape[0] < 1:
            raise ValueError("frames must contain at least one frame")
        if not bool(torch.isfinite(value).all()):
            raise ValueError("frames must be finite")
        return value

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


class SpeakerEmbedding(BaseModel):
    """Utterance-level or mixture-pooled speaker embedding."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    vector: torch.Tensor = Field(..., description="D_e-dimensional embedding")
    source: Literal["enrollment", "mixture_pooled"] = Field(
        "enrollment", description="Where the embedding came from"
    )

    @field_validator("vector")
    @classmethod
    def _check_vector(cls, value: torch.Tensor) -> torch.Tensor:
        if value.dim() != 1:
            raise ValueError(f"embedding must be 1-D, got shape {tuple(value.shape)}")
        if not bool(torch.isfinite(value).all()):
            raise ValueError("embedding must be finite")
        return value

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def normalized(self) -> torch.Tensor:
        return self.vector / self.vector.norm().clamp_min(1e-12)


class UncertaintyFeatures(BaseModel):
    """Per-recognizer-frame speaker entropy and speech enhancement uncertainty."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    u_spk: Optional[torch.Tensor] = Field(None, description="T' speaker entropies in nats")
    u_speech: Optional[torch.Tensor] = Field(None, description="T' x H CNU hidden states")

    @model_validator(mode="after")
    def _check_alignment(self) -> "UncertaintyFeatures":
        if self.u_spk is None and self.u_speech is None:
            raise ValueError("at least one uncertainty stream is required")
        if self.u_spk is not None and self.u_spk.dim() != 1:
            raise ValueError("u_spk must be a 1-D sequence")
        if self.u_speech is not None and self.u_speech.dim() != 2:
            raise ValueError("u_speech must be T' x H")
        if (
            self.u_spk is not None
            and self.u_speech is not None
            and self.u_spk.shape[0] != self.u_speech.shape[0]
        ):
            raise ValueError("u_spk and u_speech must have the same frame count")
        return self

    @property
    def num_frames(self) -> int:
        stream = self.u_spk if self.u_spk is not None else self.u_speech
        assert stream is not None
        return int(stream.shape[0])

    def as_matrix(self) -> torch.Tensor:
        """T' x (1 + H) matrix: u_spk column first, then u_speech."""
        columns = []
        if self.u_spk is not None:
            columns.append(self.u_spk.unsqueeze(-1))
        if self.u_speech is not None:
            columns.append(self.u_speech)
        return torch.cat(columns, dim=-1)


class TokenSequence(BaseModel):
    """Character-level transcript; never contains the blank symbol."""

    tokens: List[str] = Field(default_factory=list, description="Transcript symbols")

    @field_validator("tokens")
    @classmethod
    def _no_blank(cls, value: List[str]) -> List[str]:
        if BLANK_SYMBOL in value:
            raise ValueError("label sequences must not contain the blank symbol")
        return value

    @classmethod
    def from_text(cls, text: str) -> "TokenSequence":
        return cls(tokens=list(text))

    @property
    def text(self) -> str:
        return "".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


class SpeakerProfile(BaseModel):
    """Parameters of one synthetic voice."""

    speaker_id: int = Field(..., ge=0, description="Corpus-wide unique speaker id")
    base_pitch_hz: float = Field(..., gt=0, description="Mean fundamental frequency")
    formant_scale: float = Field(..., gt=0, description="Vocal tract length factor")
    speaking_rate: float = Field(..., gt=0, description="Tokens per nominal token slot")
    timbre_hz: float = Field(..., gt=0, description="Centre of the speaker's fixed resonance")
    breathiness: float = Field(..., ge=0, le=1, description="Aspiration noise level")


class UtteranceRef(BaseModel):
    """One synthetic utterance: who says what, rendered with which seed."""

    speaker_id: int = Field(..., ge=0, description="Speaker id")
    transcript: str = Field(..., min_length=1, description="Transcript text")
    seed: int = Field(..., ge=0, description="Synthesis seed")


class MixtureRecord(BaseModel):
    """One simulated utterance of the corpus manifest."""

    schema_version: int = Field(MANIFEST_SCHEMA_VERSION, description="Manifest schema version")
    mixture_id: str = Field(..., description="Unique record id")
    split: Literal["train", "dev", "test"] = Field(..., description="Corpus split")
    target: UtteranceRef = Field(..., description="Target utterance")
    enrollment: UtteranceRef = Field(..., description="Enrollment utterance of the target speaker")
    interferers: List[UtteranceRef] = Field(
        default_factory=list, description="Interfering utterances (0-2)"
    )
    interferer_offsets: List[float] = Field(
        default_factory=list, description="Interferer start offsets as target-length fractions"
    )
    sir_db: float = Field(..., description="Per-interferer signal-to-interference ratio")
    snr_db: Optional[float] = Field(..., description="Ambient noise SNR; None renders no noise")
    noise_kind: str = Field("pink", description="Noise bank entry")
    noise_seed: int = Field(0, ge=0, description="Noise generator seed")
    rir_id: int = Field(0, ge=0, description="Synthetic room response id")
    mixture_path: Optional[str] = Field(None, description="Rendered mixture WAV")
    clean_path: Optional[str] = Field(None, description="Rendered clean target WAV")
    enrollment_path: Optional[str] = Field(None, description="Rendered enrollment WAV")

    @model_validator(mode="after")
    def _check_record(self) -> "MixtureRecord":
        if len(self.interferers) not in (0, 1, 2):
            raise ValueError("a mixture has 0, 1 or 2 interferers")
        if len(self.interferer_offsets) != len(self.interferers):
            raise ValueError("one offset per interferer is required")
        if self.enrollment == self.target:
            raise ValueError("enrollment utterance must differ from the target utterance")
        if self.enrollment.speaker_id != self.target.speaker_id:
            raise ValueError("enrollment must come from the target speaker")
        if any(i.speaker_id == self.target.speaker_id for i in self.interferers):
            raise ValueError("interferers must be other speakers")
        return self

    @property
    def target_speaker_id(self) -> int:
        return self.target.speaker_id

    @property
    def transcript(self) -> str:
        return self.target.transcript

    @property
    def interferer_count(self) -> int:
        return len(self.interferers)

    @property
    def num_speakers(self) -> int:
        """Total speakers present: target plus interferers."""
        return 1 + len(self.interferers)


class ErrorBreakdown(BaseModel):
    """Insertion, deletion and substitution counts of an alignment."""

    insertions: int = Field(0, ge=0, description="Inserted hypothesis symbols")
    deletions: int = Field(0, ge=0, description="Deleted reference symbols")
    substitutions: int = Field(0, ge=0, description="Substituted symbols")
    reference_length: int = Field(0, ge=0, description="Reference symbol count")

    @computed_field  # type: ignore[misc]
    @property
    def errors(self) -> int:
        return self.insertions + self.deletions + self.substitutions

    @computed_field  # type: ignore[misc]
    @property
    def cer(self) -> float:
        return self.errors / max(1, self.reference_length)

    def __add__(self, other: "ErrorBreakdown") -> "ErrorBreakdown":
        return ErrorBreakdown(
            insertions=self.insertions + other.insertions,
            deletions=self.deletions + other.deletions,
            substitutions=self.substitutions + other.substitutions,
            reference_length=self.reference_length + other.reference_length,
        )


class UtteranceResult(BaseModel):
    """Decode outcome of one test utterance."""

    mixture_id: str = Field(..., description="Record id")
    num_speakers: int = Field(..., ge=1, le=3, description="Speakers present")
    reference: str = Field(..., description="Reference transcript")
    hypothesis: str = Field("", description="Decoded transcript")
    breakdown: ErrorBreakdown = Field(..., description="Alignment counts")
    failed: bool = Field(False, description="Decoding raised; scored as all deletions")
    error: Optional[str] = Field(None, description="Failure message")


class EvaluationReport(BaseModel):
    """CER report of one model over one manifest."""

    schema_version: int = Field(REPORT_SCHEMA_VERSION, description="Report schema version")
    model: str = Field(..., description="Model label")
    manifest_digest: str = Field(..., description="Digest of the evaluated record ids")
    condition: Literal["noisy", "clean"] = Field("noisy", description="Test condition")
    mode: str = Field("greedy", description="Decoding mode")
    overall: ErrorBreakdown = Field(..., description="Length-weighted totals")
    slices: Dict[str, ErrorBreakdown] = Field(
        default_factory=dict, description="Totals keyed by speaker count ('1', '2', '3')"
    )
    failures: List[str] = Field(default_factory=list, description="Records whose decode failed")
    entropy_overlap: Optional[float] = Field(
        None, description="Mean speaker entropy on overlapped frames"
    )
    entropy_non_overlap: Optional[float] = Field(
        None, description="Mean speaker entropy on non-overlapped frames"
    )
    utterances: List[UtteranceResult] = Field(default_factory=list, description="Per utterance")


class ComparisonRow(BaseModel):
    """One metric across the compared reports."""

    metric: str = Field(..., description="Metric name")
    values: List[float] = Field(..., description="Metric value per report")
    relative_change: List[Optional[float]] = Field(
        ..., description="(value - baseline) / baseline per report; None when undefined"
    )


class ComparisonTable(BaseModel):
    """Side-by-side metrics of several reports over the same manifest."""

    models: List[str] = Field(..., description="Report labels, baseline first")
    manifest_digest: str = Field(..., description="Shared manifest digest")
    rows: List[ComparisonRow] = Field(..., description="Metric rows")
