"""Declarative experiment configuration.

All hyperparameters live in one versioned :class:`ExperimentConfig` tree that
is read from and written to JSON. Defaults keep the
reference front end, loss weights, learning rates and recognizer depth, with
desk-scale sizes everywhere else.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

SCHEMA_VERSION = 1

UncertaintyMode = Literal["none", "spk", "speech", "both"]


class StftConfig(BaseModel):
    """Framing and STFT parameters."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    sample_rate: int = Field(16000, gt=0, description="Corpus-wide sample rate in Hz")
    window_length_s: float = Field(0.025, gt=0, description="Analysis window length in seconds")
    shift_s: float = Field(0.010, gt=0, description="Frame shift in seconds")
    fft_size: int = Field(512, gt=0, description="FFT size in samples")
    window: Literal["hann"] = Field("hann", description="Analysis window function")

    @model_validator(mode="after")
    def _check_fft_size(self) -> "StftConfig":
        if self.fft_size < self.window_samples:
            raise ValueError(
                f"fft_size {self.fft_size} is smaller than the window ({self.window_samples})"
            )
        if self.shift_samples < 1:
            raise ValueError("frame shift must be at least one sample")
        return self

    @property
    def window_samples(self) -> int:
        return int(round(self.window_length_s * self.sample_rate))

    @property
    def shift_samples(self) -> int:
        return int(round(self.shift_s * self.sample_rate))

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        """Frame count for a signal of ``num_samples`` (0 when shorter than a window)."""
        if num_samples < self.window_samples:
            return 0
        return 1 + (num_samples - self.window_samples) // self.shift_samples


class MfccConfig(StftConfig):
    """MFCC front end; 25 ms / 10 ms / 512-point FFT / 40 mel bins by default."""

    mel_bins: int = Field(40, ge=1, description="Number of mel filters")
    mfcc_dim: int = Field(40, ge=1, description="Number of cepstral coefficients kept")
    log_floor: float = Field(1e-10, gt=0, description="Floor applied before the log")
    f_min: float = Field(0.0, ge=0, description="Lowest mel filter edge in Hz")
    f_max: Optional[float] = Field(None, description="Highest mel filter edge (Nyquist if unset)")

    @model_validator(mode="after")
    def _check_dims(self) -> "MfccConfig":
        if self.mfcc_dim > self.mel_bins:
            raise ValueError("mfcc_dim must not exceed mel_bins")
        return self

    @property
    def stft(self) -> StftConfig:
        return StftConfig(
            sample_rate=self.sample_rate,
            window_length_s=self.window_length_s,
            shift_s=self.shift_s,
            fft_size=self.fft_size,
            window=self.window,
        )


class CorpusConfig(BaseModel):
    """Synthetic corpus and mixture simulation recipe."""

    model_config = ConfigDict(extra="forbid")

    vocabulary: str = Field("abcdefghijklmnopqrst", description="Closed character vocabulary")
    min_tokens: int = Field(3, ge=1, description="Shortest transcript")
    max_tokens: int = Field(8, ge=1, description="Longest transcript")
    enrollment_tokens: int = Field(12, ge=1, description="Transcript length of enrollments")
    token_duration_s: float = Field(0.12, gt=0, description="Token duration at rate 1.0")
    num_train_speakers: int = Field(10, ge=2, description="Training speaker pool size")
    num_dev_speakers: int = Field(4, ge=3, description="Dev speaker pool size")
    num_test_speakers: int = Field(4, ge=3, description="Test speaker pool size")
    interferer_counts: List[int] = Field([0, 1, 2], description="Interfering speaker counts")
    sir_choices_db: List[float] = Field([0.0, 6.0, 12.0], description="Per-interferer SIRs")
    snr_choices_db: List[float] = Field(
        [6.0, 12.0, 18.0, 24.0, 30.0], description="Ambient noise SNRs"
    )
    noise_kinds: List[str] = Field(["pink", "brown", "babble"], description="Noise bank")
    num_rirs: int = Field(8, ge=1, description="Number of synthetic room responses")
    max_rir_s: float = Field(0.05, gt=0, le=0.05, description="Longest room response")
    reverberant: bool = Field(True, description="False renders every record with identity RIRs")
    max_interferer_offset: float = Field(
        0.5, ge=0, lt=1, description="Largest interferer start offset, as a fraction of the target"
    )
    peak_level: float = Field(0.9, gt=0, le=1, description="Peak level of rendered WAV files")

    @model_validator(mode="after")
    def _check_ranges(self) -> "CorpusConfig":
        if self.min_tokens > self.max_tokens:
            raise ValueError("min_tokens must not exceed max_tokens")
        if any(c not in (0, 1, 2) for c in self.interferer_counts):
            raise ValueError("interferer counts must be drawn from {0, 1, 2}")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("vocabulary symbols must be unique")
        return self


class EmbedderConfig(BaseModel):
    """TDNN enrollment embedder."""

    model_config = ConfigDict(extra="forbid")

    embedding_dim: int = Field(128, ge=1, description="Speaker embedding dimension D_e")
    channels: int = Field(128, ge=1, description="TDNN channels")
    kernel_sizes: List[int] = Field([5, 3, 3], description="TDNN kernel sizes")
    dilations: List[int] = Field([1, 2, 3], description="TDNN dilations")
    min_enrollment_s: float = Field(1.0, gt=0, description="Shortest accepted enrollment")

    @model_validator(mode="after")
    def _check_blocks(self) -> "EmbedderConfig":
        if len(self.kernel_sizes) != len(self.dilations):
            raise ValueError("kernel_sizes and dilations must have the same length")
        return self


class SpeakerLossWeights(BaseModel):
    """Multi-task speaker objective weights and margins."""

    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(0.2, ge=0, description="Weight of the large margin cosine loss")
    beta: float = Field(0.001, ge=0, description="Weight of the embedding L2 term")
    triplet_margin: float = Field(0.2, ge=0, description="Triplet hinge margin")
    lmc_margin: float = Field(0.35, ge=0, description="Large margin cosine margin m")
    lmc_scale: float = Field(30.0, gt=0, description="Large margin cosine scale s")
    joint_term: Literal["lmc", "triplet"] = Field(
        "lmc", description="Single speaker term used inside the joint objectives"
    )


class ExtractorConfig(BaseModel):
    """Toy Conv-TasNet style extractor."""

    model_config = ConfigDict(extra="forbid")

    encoder_filters: int = Field(128, ge=1, description="Encoder filters N")
    encoder_kernel: int = Field(32, ge=2, description="Encoder kernel L in samples")
    bottleneck: int = Field(64, ge=1, description="Bottleneck channels B")
    hidden: int = Field(128, ge=1, description="Conv block hidden channels")
    repeats: int = Field(2, ge=1, description="Separator repeats")
    blocks: int = Field(4, ge=1, description="Conv blocks per repeat")
    kernel: int = Field(3, ge=1, description="Depthwise conv kernel")
    use_mixture_embedding: bool = Field(True, description="Fuse the pooled mixture embedding")
    ce_weight: float = Field(0.1, ge=0, description="Mixture embedder cross-entropy weight")

    @property
    def encoder_stride(self) -> int:
        return self.encoder_kernel // 2


class MixtureEmbedderConfig(BaseModel):
    """Frame-wise CNN mixture embedder."""

    model_config = ConfigDict(extra="forbid")

    channels: int = Field(64, ge=1, description="CNN channels")
    kernel: int = Field(3, ge=1, description="CNN kernel (odd, same padding)")

    @model_validator(mode="after")
    def _odd_kernel(self) -> "MixtureEmbedderConfig":
        if self.kernel % 2 == 0:
            raise ValueError("mixture embedder kernel must be odd")
        return self


class CnuConfig(BaseModel):
    """Convolutional neural uncertainty estimator."""

    model_config = ConfigDict(extra="forbid")

    channels: int = Field(128, ge=1, description="Conv output channels")
    kernel: int = Field(11, ge=1, description="Conv kernel (odd, stride 1)")
    hidden: int = Field(32, ge=1, description="Hidden linear size (U_speech dimension)")
    negative_slope: float = Field(0.01, ge=0, description="Leaky-ReLU slope")
    feature_source: Literal["hidden", "prediction"] = Field(
        "hidden", description="Which CNU output feeds the recognizer"
    )

    @model_validator(mode="after")
    def _odd_kernel(self) -> "CnuConfig":
        if self.kernel % 2 == 0:
            raise ValueError("CNU kernel must be odd to keep the frame count")
        return self


class RnntConfig(BaseModel):
    """Recognizer and feature wrapper."""

    model_config = ConfigDict(extra="forbid")

    hidden_size: int = Field(64, ge=1, description="LSTM hidden size (512 at full scale)")
    encoder_layers: int = Field(4, ge=1, description="Bidirectional encoder layers")
    decoder_layers: int = Field(2, ge=1, description="Prediction network layers")
    dropout: float = Field(0.2, ge=0, lt=1, description="LSTM dropout")
    embed_dim: int = Field(32, ge=1, description="Prediction network token embedding")
    joint_dim: int = Field(64, ge=1, description="Joint network hidden size")
    wrapper_channels: int = Field(40, ge=1, description="Wrapper conv output channels")
    wrapper_kernel: int = Field(7, ge=1, description="Wrapper conv kernel")
    wrapper_stride: int = Field(3, ge=1, description="Wrapper conv stride")
    uncertainty: UncertaintyMode = Field("none", description="Uncertainty features appended")
    max_symbols_per_step: int = Field(5, ge=1, description="Decoding emission limit per frame")
    beam_size: int = Field(4, ge=1, description="Default beam size")

    def uncertainty_dim(self, cnu_dim: int) -> int:
        """Number of feature columns the uncertainty mode appends."""
        return {"none": 0, "spk": 1, "speech": cnu_dim, "both": cnu_dim + 1}[self.uncertainty]

    def wrapper_frames(self, num_mfcc_frames: int) -> int:
        if num_mfcc_frames < self.wrapper_kernel:
            return 0
        return 1 + (num_mfcc_frames - self.wrapper_kernel) // self.wrapper_stride


class JointLossWeights(BaseModel):
    """Weights of the joint objective."""

    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(0.01, ge=0, description="Weight of the extraction terms")
    phi: float = Field(1.0, ge=0, description="Weight of the speaker term")


class OptimizerSpec(BaseModel):
    """Adam learning rates and plateau rule."""

    model_config = ConfigDict(extra="forbid")

    algorithm: Literal["adam"] = "adam"
    learning_rate: float = Field(1e-3, gt=0, description="Initial LR of pre-training stages")
    joint_rnnt_lr: float = Field(1e-5, gt=0, description="Recognizer LR in joint training")
    joint_extractor_lr: float = Field(1e-7, gt=0, description="Extractor LR in joint training")
    joint_embedder_lr: float = Field(2e-7, gt=0, description="Embedder LR in joint training")
    plateau_factor: float = Field(0.5, gt=0, lt=1, description="LR factor on plateau")
    plateau_patience: int = Field(0, ge=0, description="Flat epochs tolerated before halving")
    grad_clip: float = Field(5.0, gt=0, description="Gradient norm clip")


class TrainingConfig(BaseModel):
    """Epoch, batch and loader settings."""

    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(8, ge=1, description="Utterances per batch")
    max_epochs: int = Field(30, ge=1, description="Epoch limit per stage")
    early_stop_patience: int = Field(5, ge=1, description="Flat epochs before stopping")
    steps_per_epoch: int = Field(50, ge=1, description="Batches per epoch")
    dev_size: int = Field(32, ge=1, description="Dev utterances scored per epoch")
    condition: Literal["noisy", "multi_condition"] = Field(
        "noisy", description="Noisy-only training or clean/noisy multi-condition training"
    )
    clean_ratio_default: float = Field(0.5, ge=0, le=1, description="Clean ratio, plain models")
    clean_ratio_uncertainty: float = Field(
        0.2, ge=0, le=1, description="Clean ratio, uncertainty models"
    )
    num_threads: int = Field(1, ge=1, description="Torch intra-op threads")
    deterministic: bool = Field(True, description="Request deterministic torch kernels")


class ExperimentConfig(BaseModel):
    """Root configuration object."""

    model_config = ConfigDict(extra="forbid")

    schema_version: int = Field(SCHEMA_VERSION, description="Config schema version")
    seed: int = Field(0, ge=0, description="Root seed; all substreams derive from it")
    features: MfccConfig = Field(default_factory=MfccConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    embedder: EmbedderConfig = Field(default_factory=EmbedderConfig)
    speaker_loss: SpeakerLossWeights = Field(default_factory=SpeakerLossWeights)
    extractor: ExtractorConfig = Field(default_factory=ExtractorConfig)
    mixture_embedder: MixtureEmbedderConfig = Field(default_factory=MixtureEmbedderConfig)
    cnu: CnuConfig = Field(default_factory=CnuConfig)
    rnnt: RnntConfig = Field(default_factory=RnntConfig)
    joint: JointLossWeights = Field(default_factory=JointLossWeights)
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)
    training: TrainingConfig = Field(default_factory=TrainingConfig)

    @model_validator(mode="after")
    def _check_version(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(
                f"config schema version {self.schema_version} is not supported "
                f"(expected {SCHEMA_VERSION})"
            )
        return self

    @property
    def stft(self) -> StftConfig:
        return self.features.stft

    @property
    def num_speakers(self) -> int:
        """Size of the training speaker set S."""
        return self.corpus.num_train_speakers

    @property
    def vocab_size(self) -> int:
        return len(self.corpus.vocabulary)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Load and validate an experiment config from a JSON file.

    Args:
        path: JSON file path

    Returns:
        The validated config

    Raises:
        ConfigError: If the file is missing, not JSON, or fails validation
    """
    path = Path(path)
    try:
        return ExperimentConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> None:
    """Write a config as indented JSON."""
    Path(path).write_text(config.model_dump_json(indent=2), encoding="utf-8")


def config_digest(config: ExperimentConfig) -> str:
    """Sha256 of the canonical JSON form of a config."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """Return a copy of ``config`` with dotted ``key=value`` overrides applied.

    Values are parsed as JSON when possible (``rnnt.hidden_size=32``,
    ``corpus.reverberant=false``) and kept as strings otherwise
    (``training.condition=multi_condition``).
    """
    data: Dict[str, Any] = config.model_dump(mode="json")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section in override: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key in override: {key}")
        node[parts[-1]] = _parse_value(raw.strip())
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid override: {e}") from e


def derive_seed(root: int, *names: object) -> int:
    """Seed of a named substream of the root seed."""
    key = ":".join([str(root)] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:4], "little") & 0x7FFFFFFF
