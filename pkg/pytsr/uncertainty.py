"""Speaker-identity entropy and the convolutional neural uncertainty estimator."""

import math
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import CnuConfig
from .errors import ProbabilityError, ShapeMismatchError
from .models import FeatureSequence
from .nn import InstanceNorm, init_parameters

FeatureLike = Union[FeatureSequence, torch.Tensor]

STOCHASTIC_TOLERANCE = 1e-4


def _frames(features: FeatureLike) -> torch.Tensor:
    return features.frames if isinstance(features, FeatureSequence) else features


def speaker_entropy(posteriors: torch.Tensor) -> torch.Tensor:
    """Per-frame entropy in nats of a (T, |S|) posterior matrix; 0 ln 0 is 0.

    Raises:
        ProbabilityError: If a row has negative entries or does not sum to one
    """
    if posteriors.dim() != 2:
        raise ShapeMismatchError("speaker_entropy", "(T, |S|)", posteriors.shape)
    sums = posteriors.sum(dim=-1)
    if bool((posteriors < 0).any()) or bool(
        ((sums - 1.0).abs() > STOCHASTIC_TOLERANCE).any()
    ):
        raise ProbabilityError("posterior rows must be non-negative and sum to 1")
    entropy = -torch.special.xlogy(posteriors, posteriors).sum(dim=-1)
    return entropy.clamp(0.0, math.log(posteriors.shape[-1]))


def oracle_uncertainty(y: FeatureLike, y_hat: FeatureLike) -> torch.Tensor:
    """Elementwise squared difference of clean and enhanced features."""
    clean, enhanced = _frames(y), _frames(y_hat)
    if clean.shape != enhanced.shape:
        raise ShapeMismatchError("oracle_uncertainty", tuple(clean.shape), enhanced.shape)
    return (clean - enhanced).pow(2)


def instance_normalize(frames: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Normalise every feature dimension of a (T, D) matrix over time."""
    return InstanceNorm(eps)(frames.t()).t()


def normalized_oracle_uncertainty(y: FeatureLike, y_hat: FeatureLike) -> torch.Tensor:
    """CNU training target; an all-zero OU stays all zero."""
    return instance_normalize(oracle_uncertainty(y, y_hat))


class ConvUncertaintyEstimator(nn.Module):
    """Instance norm, conv, hidden linear with Leaky-ReLU, prediction linear."""

    def __init__(self, config: CnuConfig, feature_dim: int, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        self.feature_dim = feature_dim
        self.norm = InstanceNorm()
        self.conv = nn.Conv1d(
            2 * feature_dim, config.channels, config.kernel, padding=config.kernel // 2
        )
        self.hidden = nn.Linear(config.channels, config.hidden)
        self.act = nn.LeakyReLU(config.negative_slope)
        self.predict = nn.Linear(config.hidden, feature_dim)
        init_parameters(self, seed)

    def forward(
        self, y_hat: torch.Tensor, mix_dist: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """(T, D) enhanced features and mixture distance -> (T, D) OU estimate, (T, H) hidden."""
        x = self.norm(torch.cat([y_hat, mix_dist], dim=-1).t())
        conv = self.conv(x.unsqueeze(0)).squeeze(0).t()
        u_speech = self.act(self.hidden(conv))
        return self.predict(u_speech), u_speech


def cnu_forward(
    y_hat: FeatureLike, mix_dist: FeatureLike, model: ConvUncertaintyEstimator
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run the estimator on enhanced features and (y_mix - y_hat)^2.

    Returns:
        (normalised OU estimate (T, D), u_speech (T, hidden))

    Raises:
        ShapeMismatchError: If the inputs differ in shape or feature dimension
    """
    enhanced, distance = _frames(y_hat), _frames(mix_dist)
    if enhanced.shape != distance.shape:
        raise ShapeMismatchError("cnu_forward", tuple(enhanced.shape), distance.shape)
    if enhanced.dim() != 2 or enhanced.shape[-1] != model.feature_dim:
        raise ShapeMismatchError("cnu_forward", f"(T, {model.feature_dim})", enhanced.shape)
    dtype = model.conv.weight.dtype
    return model(enhanced.to(dtype), distance.to(dtype))


def cnu_loss(ou_hat_norm: torch.Tensor, ou_norm: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between predicted and target normalised OU."""
    if ou_hat_norm.shape != ou_norm.shape:
        raise ShapeMismatchError("cnu_loss", tuple(ou_norm.shape), ou_hat_norm.shape)
    return F.l1_loss(ou_hat_norm, ou_norm)


def align_to_recognizer_frames(
    u: torch.Tensor, stride: int, kernel_size: Optional[int] = None
) -> torch.Tensor:
    """Mean-pool a per-STFT-frame sequence with the wrapper conv geometry.

    Args:
        u: (T,) or (T, H) sequence
        stride: Wrapper stride
        kernel_size: Wrapper kernel; defaults to ``stride``

    Returns:
        (T',) or (T', H) with T' = 1 + (T - kernel) // stride

    Raises:
        ShapeMismatchError: If the sequence is empty or shorter than the kernel
    """
    kernel_size = kernel_size or stride
    if stride < 1:
        raise ShapeMismatchError("align_to_recognizer_frames", "stride >= 1", [stride])
    if u.dim() not in (1, 2) or u.shape[0] == 0:
        raise ShapeMismatchError("align_to_recognizer_frames", "non-empty (T[, H])", u.shape)
    if u.shape[0] < kernel_size:
        raise ShapeMismatchError(
            "align_to_recognizer_frames", f"at least {kernel_size} frames", u.shape
        )
    x = u.unsqueeze(-1) if u.dim() == 1 else u
    pooled = F.avg_pool1d(x.t().unsqueeze(0), kernel_size, stride).squeeze(0).t()
    return pooled.squeeze(-1) if u.dim() == 1 else pooled


def entropy_by_overlap(u_spk: torch.Tensor, overlap: np.ndarray) -> Tuple[float, float]:
    """Mean entropy on overlapped and on non-overlapped frames (NaN when a set is empty)."""
    values = u_spk.detach().double().cpu().numpy()
    mask = np.asarray(overlap, dtype=bool)
    if values.shape[0] != mask.shape[0]:
        raise ShapeMismatchError("entropy_by_overlap", (values.shape[0],), mask.shape)
    on = float(values[mask].mean()) if mask.any() else float("nan")
    off = float(values[~mask].mean()) if (~mask).any() else float("nan")
    return on, off
