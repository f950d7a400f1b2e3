"""Time-domain target speech extractor and frame-wise mixture embedder.

The extractor is a small Conv-TasNet: a learned analysis encoder, a
temporal convolution separator conditioned on speaker embeddings, a sigmoid
mask and an overlap-add decoder. The mixture embedder is a CNN over STFT
magnitudes that yields one speaker embedding and one speaker posterior per
frame; its mean-pooled output joins the extractor's fusion input.
"""

from typing import Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .config import ExtractorConfig, MixtureEmbedderConfig, StftConfig
from .dsp import SignalLike, as_tensor, si_snr, stft
from .errors import ShapeMismatchError, SignalError
from .models import SpeakerEmbedding
from .nn import init_parameters

EmbeddingLike = Union[SpeakerEmbedding, torch.Tensor]


def _vector(embedding: Optional[EmbeddingLike]) -> Optional[torch.Tensor]:
    if isinstance(embedding, SpeakerEmbedding):
        return embedding.vector
    return embedding


class ConvBlock(nn.Module):
    """1x1 conv, depthwise dilated conv, 1x1 conv with a residual connection."""

    def __init__(self, bottleneck: int, hidden: int, kernel: int, dilation: int):
        super().__init__()
        self.expand = nn.Conv1d(bottleneck, hidden, 1)
        self.act1 = nn.PReLU()
        self.norm1 = nn.GroupNorm(1, hidden, eps=1e-8)
        self.depthwise = nn.Conv1d(
            hidden,
            hidden,
            kernel,
            dilation=dilation,
            padding=dilation * (kernel - 1) // 2,
            groups=hidden,
        )
        self.act2 = nn.PReLU()
        self.norm2 = nn.GroupNorm(1, hidden, eps=1e-8)
        self.project = nn.Conv1d(hidden, bottleneck, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(self.act1(self.expand(x)))
        y = self.norm2(self.act2(self.depthwise(y)))
        return x + self.project(y)


class SpeakerExtractor(nn.Module):
    """Encoder, embedding fusion, masking separator and decoder."""

    def __init__(
        self, config: ExtractorConfig, embedding_dim: int, seed: Optional[int] = None
    ):
        super().__init__()
        if config.kernel % 2 == 0:
            raise ShapeMismatchError("extractor", "odd separator kernel", [config.kernel])
        self.config = config
        self.embedding_dim = embedding_dim
        n, b = config.encoder_filters, config.bottleneck
        self.encoder = nn.Conv1d(
            1, n, config.encoder_kernel, stride=config.encoder_stride, bias=False
        )
        self.norm = nn.GroupNorm(1, n, eps=1e-8)
        self.bottleneck = nn.Conv1d(n, b, 1)
        fused = b + embedding_dim * (2 if config.use_mixture_embedding else 1)
        self.fusion = nn.Conv1d(fused, b, 1)
        self.separator = nn.Sequential(
            *[
                ConvBlock(b, config.hidden, config.kernel, 2**i)
                for _ in range(config.repeats)
                for i in range(config.blocks)
            ]
        )
        self.mask = nn.Conv1d(b, n, 1)
        self.decoder = nn.ConvTranspose1d(
            n, 1, config.encoder_kernel, stride=config.encoder_stride, bias=False
        )
        init_parameters(self, seed)

    def _pad(self, x: torch.Tensor) -> Tuple[torch.Tensor, int]:
        kernel, stride = self.config.encoder_kernel, self.config.encoder_stride
        length = x.shape[-1]
        padded = length + 2 * stride
        remainder = (padded - kernel) % stride
        extra = (stride - remainder) % stride
        return F.pad(x, (stride, stride + extra)), stride

    def forward(
        self,
        mixture: torch.Tensor,
        e_target: torch.Tensor,
        e_mix: Optional[torch.Tensor] = None,
        return_mask: bool = False,
    ) -> Union[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
        """Estimate the target waveform.

        Args:
            mixture: (n,) or (B, n) waveform
            e_target: (D_e,) or (B, D_e) enrolled embedding
            e_mix: Mean-pooled mixture embedding; zeros when absent
            return_mask: Also return the (B, N, K) mask

        Returns:
            Estimate with the mixture's shape (and the mask)

        Raises:
            SignalError: If the mixture is shorter than one encoder window
        """
        unbatched = mixture.dim() == 1
        x = mixture.unsqueeze(0) if unbatched else mixture
        if x.shape[-1] < self.config.encoder_kernel:
            raise SignalError(
                f"mixture of {x.shape[-1]} samples is shorter than the encoder window "
                f"({self.config.encoder_kernel})",
                code="signal_too_short",
            )
        e_target = e_target.unsqueeze(0) if e_target.dim() == 1 else e_target
        if e_target.shape[-1] != self.embedding_dim:
            raise ShapeMismatchError("extractor fusion", (self.embedding_dim,), e_target.shape)
        length = x.shape[-1]
        padded, offset = self._pad(x)
        features = F.relu(self.encoder(padded.unsqueeze(1)))
        frames = features.shape[-1]
        condition = [e_target]
        if self.config.use_mixture_embedding:
            if e_mix is None:
                e_mix = torch.zeros_like(e_target)
            e_mix = e_mix.unsqueeze(0) if e_mix.dim() == 1 else e_mix
            if e_mix.shape[-1] != self.embedding_dim:
                raise ShapeMismatchError("extractor fusion", (self.embedding_dim,), e_mix.shape)
            condition.append(e_mix)
        speaker = torch.cat(condition, dim=-1).unsqueeze(-1).expand(-1, -1, frames)
        hidden = self.bottleneck(self.norm(features))
        hidden = self.fusion(torch.cat([hidden, speaker], dim=1))
        mask = torch.sigmoid(self.mask(self.separator(hidden)))
        estimate = self.decoder(features * mask).squeeze(1)[..., offset : offset + length]
        if unbatched:
            estimate, mask = estimate.squeeze(0), mask.squeeze(0)
        return (estimate, mask) if return_mask else estimate


class MixtureEmbedder(nn.Module):
    """Frame-wise CNN speaker embedder with a softmax head over training speakers."""

    def __init__(
        self,
        config: MixtureEmbedderConfig,
        stft_config: StftConfig,
        embedding_dim: int,
        num_speakers: int,
        seed: Optional[int] = None,
    ):
        super().__init__()
        self.config = config
        self.stft_config = stft_config
        pad = config.kernel // 2
        self.conv1 = nn.Conv1d(stft_config.num_bins, config.channels, config.kernel, padding=pad)
        self.conv2 = nn.Conv1d(config.channels, config.channels, config.kernel, padding=pad)
        self.projection = nn.Linear(config.channels, embedding_dim)
        self.head = nn.Linear(embedding_dim, num_speakers)
        init_parameters(self, seed)

    def forward(self, samples: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(T, D_e) frame embeddings and (T, |S|) log posteriors of a 1-D waveform."""
        magnitude = torch.log1p(stft(samples, self.stft_config).abs())
        x = magnitude.to(self.projection.weight.dtype).t().unsqueeze(0)
        x = F.relu(self.conv2(F.relu(self.conv1(x))))
        e_mix = self.projection(x.squeeze(0).t())
        return e_mix, F.log_softmax(self.head(e_mix), dim=-1)


def extract(
    s_mix: SignalLike,
    e_target: EmbeddingLike,
    e_mix_pooled: Optional[EmbeddingLike],
    model: SpeakerExtractor,
) -> torch.Tensor:
    """Extract the target speaker's waveform; output length equals input length."""
    samples = as_tensor(s_mix).to(model.encoder.weight.dtype)
    target = _vector(e_target)
    assert target is not None
    return model(samples, target.to(samples.dtype), _optional(e_mix_pooled, samples.dtype))


def _optional(embedding: Optional[EmbeddingLike], dtype: torch.dtype) -> Optional[torch.Tensor]:
    vector = _vector(embedding)
    return None if vector is None else vector.to(dtype)


def mixture_embed(
    s_mix: SignalLike, model: MixtureEmbedder
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Frame embeddings and speaker posteriors; each posterior row sums to one."""
    e_mix, log_posteriors = model(as_tensor(s_mix).to(model.projection.weight.dtype))
    return e_mix, log_posteriors.exp()


def pooled_embedding(e_mix: torch.Tensor) -> SpeakerEmbedding:
    """Mean-pooled mixture embedding."""
    return SpeakerEmbedding(vector=e_mix.mean(dim=0), source="mixture_pooled")


def frame_cross_entropy(posteriors: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean frame-level cross-entropy; frames labelled -1 are ignored."""
    if posteriors.shape[0] != labels.shape[0]:
        raise ShapeMismatchError("frame labels", (posteriors.shape[0],), labels.shape)
    keep = labels >= 0
    if not bool(keep.any()):
        return posteriors.sum() * 0.0
    log_p = torch.log(posteriors[keep].clamp_min(1e-12))
    return F.nll_loss(log_p, labels[keep])


def extraction_loss(
    estimate: torch.Tensor,
    target: torch.Tensor,
    speaker_loss: torch.Tensor,
    posteriors: Optional[torch.Tensor],
    labels: Optional[torch.Tensor],
    phi: float = 1.0,
    ce_weight: float = 0.1,
) -> torch.Tensor:
    """-SI-SNR(estimate, target) + phi * L_spk + ce_weight * CE(posteriors, labels).

    The cross-entropy term is dropped entirely when ``ce_weight`` is zero or
    no posteriors are given.
    """
    if estimate.shape != target.shape:
        raise ShapeMismatchError("extraction_loss", tuple(target.shape), estimate.shape)
    loss = -si_snr(estimate, target) + phi * speaker_loss
    if ce_weight > 0 and posteriors is not None and labels is not None:
        loss = loss + ce_weight * frame_cross_entropy(posteriors, labels)
    return loss
