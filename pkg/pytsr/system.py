"""The joint target-speaker recognition system and its model variants.

A :class:`TargetSpeakerSystem` bundles every trainable network, grouped the
way the training stages freeze and unfreeze them:

- ``embedder``: enrollment embedder and its cosine-margin speaker head
- ``extractor``: speech extractor and frame-wise mixture embedder
- ``recognizer``: feature wrapper and RNN-T
- ``cnu``: neural uncertainty estimator
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch
from pydantic import BaseModel, Field
from torch import nn

from . import __version__
from .checkpoint import CheckpointHeader, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, UncertaintyMode, config_digest, derive_seed
from .corpus import speaker_pool
from .dsp import SignalLike, as_tensor, compute_mfcc
from .embedder import EnrollEmbedder, LmcHead
from .errors import CheckpointError, ConfigError, DecodeError
from .extractor import MixtureEmbedder, SpeakerExtractor
from .models import TokenSequence, UncertaintyFeatures
from .nn import parameter_checksum
from .transducer import DecodeMode, RnntModel, Vocabulary, recognize, wrapper_features
from .uncertainty import (
    ConvUncertaintyEstimator,
    align_to_recognizer_frames,
    cnu_forward,
    speaker_entropy,
)

logger = logging.getLogger(__name__)

GROUPS = ("embedder", "extractor", "recognizer", "cnu")

_GROUP_MODULES = {
    "embedder": ("embedder", "speaker_head"),
    "extractor": ("extractor", "mixture_embedder"),
    "recognizer": ("recognizer",),
    "cnu": ("cnu",),
}


class FrontEndOutput(BaseModel):
    """Extraction front-end tensors of one utterance."""

    model_config = {"arbitrary_types_allowed": True}

    e_target: torch.Tensor = Field(..., description="Enrolled embedding")
    estimate: torch.Tensor = Field(..., description="Extracted target waveform")
    e_mix: torch.Tensor = Field(..., description="Frame-wise mixture embeddings")
    log_posteriors: torch.Tensor = Field(..., description="Frame-wise speaker log posteriors")


class UncertaintyOutput(BaseModel):
    """CNU prediction and the recognizer-aligned uncertainty columns."""

    model_config = {"arbitrary_types_allowed": True}

    y_hat: torch.Tensor = Field(..., description="MFCC of the estimate")
    ou_hat: torch.Tensor = Field(..., description="Predicted normalised OU")
    u_spk: torch.Tensor = Field(..., description="Per-STFT-frame speaker entropy")
    extra: Optional[torch.Tensor] = Field(None, description="Aligned recognizer columns")


class ModelVariant(BaseModel):
    """One rung of the model ladder."""

    name: str = Field(..., description="Roman numeral label")
    checkpoint: str = Field(..., description="Recipe step producing the checkpoint")
    use_front_end: bool = Field(True, description="Decode the extracted target (else the mixture)")
    uncertainty: UncertaintyMode = Field("none", description="Uncertainty columns fed to RNN-T")
    description: str = Field("", description="What the variant is")


MODEL_VARIANTS: Dict[str, ModelVariant] = {
    v.name: v
    for v in [
        ModelVariant(
            name="I",
            checkpoint="rnnt_clean",
            use_front_end=False,
            description="Clean-trained RNN-T decoding the raw mixture",
        ),
        ModelVariant(
            name="II",
            checkpoint="model_ii",
            description="Pre-trained extractor and clean RNN-T composed without training",
        ),
        ModelVariant(
            name="III",
            checkpoint="model_iii",
            description="RNN-T fine-tuned behind the frozen front end",
        ),
        ModelVariant(
            name="IV", checkpoint="model_iv", description="Full joint training from Model III"
        ),
        ModelVariant(
            name="V",
            checkpoint="model_v",
            uncertainty="spk",
            description="Frozen front end, RNN-T with speaker entropy",
        ),
        ModelVariant(
            name="VI",
            checkpoint="model_vi",
            uncertainty="speech",
            description="Frozen front end, RNN-T with CNU hidden states",
        ),
        ModelVariant(
            name="VII",
            checkpoint="model_vii",
            uncertainty="both",
            description="Frozen front end, RNN-T with both uncertainty streams",
        ),
    ]
}


class TargetSpeakerSystem(nn.Module):
    """Enrollment embedder, extractor, mixture embedder, CNU and recognizer."""

    def __init__(self, config: ExperimentConfig, recognizer_extra_dim: Optional[int] = None):
        super().__init__()
        self.config = config
        seed = config.seed
        d_e = config.embedder.embedding_dim
        self.label_index = {
            speaker: i for i, speaker in enumerate(speaker_pool("train", config.corpus))
        }
        self.vocabulary = Vocabulary(config.corpus.vocabulary)
        self.embedder = EnrollEmbedder(
            config.embedder, config.features, seed=derive_seed(seed, "embedder")
        )
        self.speaker_head = LmcHead(d_e, config.num_speakers, seed=derive_seed(seed, "head"))
        self.extractor = SpeakerExtractor(
            config.extractor, d_e, seed=derive_seed(seed, "extractor")
        )
        self.mixture_embedder = MixtureEmbedder(
            config.mixture_embedder,
            config.stft,
            d_e,
            config.num_speakers,
            seed=derive_seed(seed, "mixture_embedder"),
        )
        self.cnu = ConvUncertaintyEstimator(
            config.cnu, config.features.mfcc_dim, seed=derive_seed(seed, "cnu")
        )
        if recognizer_extra_dim is None:
            recognizer_extra_dim = config.rnnt.uncertainty_dim(self.speech_dim)
        self.recognizer = RnntModel(
            config.rnnt,
            config.features,
            self.vocabulary,
            extra_dim=recognizer_extra_dim,
            seed=derive_seed(seed, "recognizer"),
        )

    @property
    def speech_dim(self) -> int:
        """Width of the u_speech stream."""
        if self.config.cnu.feature_source == "hidden":
            return self.config.cnu.hidden
        return self.config.features.mfcc_dim

    @property
    def dtype(self) -> torch.dtype:
        return self.recognizer.dtype

    def group(self, name: str) -> List[nn.Module]:
        if name not in _GROUP_MODULES:
            raise ConfigError(f"unknown module group {name!r}; expected one of {GROUPS}")
        return [getattr(self, attr) for attr in _GROUP_MODULES[name]]

    def group_parameters(self, name: str) -> List[nn.Parameter]:
        return [p for module in self.group(name) for p in module.parameters()]

    def group_checksum(self, name: str) -> str:
        return parameter_checksum(self.group(name))

    def group_state(self, name: str) -> Dict[str, torch.Tensor]:
        state: Dict[str, torch.Tensor] = {}
        for attr in _GROUP_MODULES[name]:
            for key, value in getattr(self, attr).state_dict().items():
                state[f"{attr}.{key}"] = value
        return state

    def load_group(self, name: str, state: Mapping[str, torch.Tensor]) -> None:
        """Load one group from a flat state dict, widening the recognizer input if needed."""
        for attr in _GROUP_MODULES[name]:
            prefix = f"{attr}."
            sub = {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}
            if not sub:
                raise CheckpointError(f"checkpoint has no parameters for {attr}")
            if attr == "recognizer":
                self._load_recognizer(sub)
                continue
            module = getattr(self, attr)
            module.load_state_dict({k: v.to(_dtype_of(module, v)) for k, v in sub.items()})

    def _load_recognizer(self, sub: Dict[str, torch.Tensor]) -> RnntModel:
        stored = sub["encoder.lstm.weight_ih_l0"].shape[1] - self.config.rnnt.wrapper_channels
        wanted = self.recognizer.extra_dim
        if stored > wanted:
            raise CheckpointError(
                f"recognizer checkpoint expects {stored} uncertainty columns, system has {wanted}"
            )
        fresh = RnntModel(
            self.config.rnnt, self.config.features, self.vocabulary, extra_dim=stored
        ).to(self.dtype)
        fresh.load_state_dict({k: v.to(self.dtype) for k, v in sub.items()})
        self.recognizer = fresh.expand_input(wanted)
        return self.recognizer

    def enroll(self, enrollment: SignalLike) -> torch.Tensor:
        return self.embedder.embed_waveform(as_tensor(enrollment).to(self.dtype))

    def front_end(self, mixture: SignalLike, e_target: torch.Tensor) -> FrontEndOutput:
        """Mixture embedding, pooling and extraction."""
        samples = as_tensor(mixture).to(self.dtype)
        e_mix, log_posteriors = self.mixture_embedder(samples)
        pooled = e_mix.mean(dim=0) if self.config.extractor.use_mixture_embedding else None
        estimate = self.extractor(samples, e_target, pooled)
        return FrontEndOutput(
            e_target=e_target, estimate=estimate, e_mix=e_mix, log_posteriors=log_posteriors
        )

    def uncertainty(
        self,
        estimate: torch.Tensor,
        mixture: SignalLike,
        log_posteriors: torch.Tensor,
        mode: Optional[UncertaintyMode] = None,
    ) -> UncertaintyOutput:
        """CNU prediction and recognizer-aligned uncertainty columns (u_spk first)."""
        mode = mode or self.config.rnnt.uncertainty
        rnnt = self.config.rnnt
        y_hat = compute_mfcc(estimate, self.config.features)
        y_mix = compute_mfcc(as_tensor(mixture).to(estimate.dtype), self.config.features)
        ou_hat, hidden = cnu_forward(y_hat, (y_mix - y_hat).pow(2), self.cnu)
        u_spk = speaker_entropy(log_posteriors.exp().double()).to(estimate.dtype)
        extra = None
        if mode != "none":
            source = hidden if self.config.cnu.feature_source == "hidden" else ou_hat
            features = UncertaintyFeatures(
                u_spk=(
                    align_to_recognizer_frames(u_spk, rnnt.wrapper_stride, rnnt.wrapper_kernel)
                    if mode in ("spk", "both")
                    else None
                ),
                u_speech=(
                    align_to_recognizer_frames(source, rnnt.wrapper_stride, rnnt.wrapper_kernel)
                    if mode in ("speech", "both")
                    else None
                ),
            )
            extra = features.as_matrix()
        return UncertaintyOutput(y_hat=y_hat, ou_hat=ou_hat, u_spk=u_spk, extra=extra)

    def recognizer_input(
        self,
        mixture: SignalLike,
        enrollment: Optional[SignalLike],
        use_front_end: bool = True,
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor], Optional[torch.Tensor]]:
        """Wrapper features plus the estimate and u_spk trace (None without front end)."""
        samples = as_tensor(mixture).to(self.dtype)
        if not use_front_end:
            return wrapper_features(samples, self.recognizer), None, None
        if enrollment is None:
            raise ConfigError("the extraction front end needs an enrollment utterance")
        out = self.front_end(samples, self.enroll(enrollment))
        unc = self.uncertainty(out.estimate, samples, out.log_posteriors)
        features = wrapper_features(out.estimate, self.recognizer, unc.extra)
        return features, out.estimate, unc.u_spk

    def transcribe(
        self,
        mixture: SignalLike,
        enrollment: Optional[SignalLike],
        mode: DecodeMode = "greedy",
        beam_size: Optional[int] = None,
        use_front_end: bool = True,
    ) -> Tuple[TokenSequence, Optional[torch.Tensor], Optional[torch.Tensor]]:
        """Decode one utterance; returns (transcript, estimate, u_spk trace).

        Raises:
            DecodeError: If the estimate or the recognizer features are not finite
        """
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                features, estimate, u_spk = self.recognizer_input(
                    mixture, enrollment, use_front_end
                )
            if estimate is not None and not bool(torch.isfinite(estimate).all()):
                raise DecodeError("extracted estimate is not finite", code="non_finite")
            if not bool(torch.isfinite(features).all()):
                raise DecodeError("recognizer features are not finite", code="non_finite")
            return recognize(features, self.recognizer, mode, beam_size), estimate, u_spk
        finally:
            self.train(was_training)


def with_uncertainty(config: ExperimentConfig, mode: UncertaintyMode) -> ExperimentConfig:
    """Copy of ``config`` whose recognizer takes the given uncertainty columns."""
    if config.rnnt.uncertainty == mode:
        return config
    rnnt = config.rnnt.model_copy(update={"uncertainty": mode})
    return config.model_copy(update={"rnnt": rnnt})


def _dtype_of(module: nn.Module, value: torch.Tensor) -> torch.dtype:
    for p in module.parameters():
        return p.dtype
    return value.dtype


def save_system(
    system: TargetSpeakerSystem,
    path: Union[str, Path],
    metadata: Optional[Mapping[str, Any]] = None,
    groups: Sequence[str] = GROUPS,
) -> Path:
    """Write the given groups with provenance and the full config."""
    state: Dict[str, torch.Tensor] = {}
    for name in groups:
        state.update(system.group_state(name))
    meta = {
        "config": system.config.model_dump(mode="json"),
        "config_digest": config_digest(system.config),
        "groups": list(groups),
        "package_version": __version__,
        "recognizer_extra_dim": system.recognizer.extra_dim,
        "seed": system.config.seed,
    }
    meta.update(metadata or {})
    return save_checkpoint(path, state, meta)


def load_system(
    path: Union[str, Path],
    config: Optional[ExperimentConfig] = None,
    dtype: torch.dtype = torch.float32,
) -> Tuple[TargetSpeakerSystem, CheckpointHeader]:
    """Rebuild a system from a checkpoint; the stored config is used unless one is given."""
    state, header = load_checkpoint(path)
    if config is None:
        try:
            config = ExperimentConfig.model_validate(header.metadata["config"])
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path} does not carry a usable config: {e}") from e
    system = TargetSpeakerSystem(
        config, recognizer_extra_dim=header.metadata.get("recognizer_extra_dim")
    ).to(dtype)
    for name in header.metadata.get("groups", GROUPS):
        system.load_group(name, state)
    return system, header


def compose_system(
    config: ExperimentConfig,
    sources: Sequence[Tuple[Union[str, Path], Sequence[str]]],
    dtype: torch.dtype = torch.float32,
) -> TargetSpeakerSystem:
    """Fresh system with groups copied from existing checkpoints.

    Args:
        config: Config of the composed system
        sources: (checkpoint path, groups to take from it) pairs, applied in order
    """
    system = TargetSpeakerSystem(config).to(dtype)
    for path, groups in sources:
        state, header = load_checkpoint(path)
        for name in groups:
            if name not in header.metadata.get("groups", GROUPS):
                raise CheckpointError(f"{path} does not contain the {name} group")
            system.load_group(name, state)
        logger.info("Loaded %s from %s", ", ".join(groups), path)
    return system
