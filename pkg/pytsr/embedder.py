"""Enrollment embedder and the multi-task speaker objective.

The embedder maps an enrollment waveform to a D_e-dimensional vector:
MFCC frames, three dilated TDNN blocks, mean and standard deviation pooling,
and a linear projection. It trains on triplet loss, large margin cosine loss
and an L2 penalty on the embedding.
"""

from typing import Dict, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .config import EmbedderConfig, MfccConfig, SpeakerLossWeights
from .dsp import SignalLike, as_tensor, compute_mfcc
from .errors import SignalError, SpeakerLabelError
from .models import AudioSignal, SpeakerEmbedding
from .nn import TdnnBlock, init_parameters

EmbeddingLike = Union[SpeakerEmbedding, torch.Tensor]


class StatsPool(nn.Module):
    """Mean and standard deviation over time; (B, C, T) -> (B, 2C)."""

    def __init__(self, floor: float = 1e-10):
        super().__init__()
        self.floor = floor

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        means = x.mean(dim=-1)
        residuals = x - means.unsqueeze(-1)
        stds = torch.sqrt(torch.clamp(residuals.pow(2).mean(dim=-1), min=self.floor))
        return torch.cat([means, stds], dim=-1)


class EnrollEmbedder(nn.Module):
    """TDNN speaker embedder over MFCC frames."""

    def __init__(self, config: EmbedderConfig, features: MfccConfig, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        self.features = features
        blocks = []
        in_channels = features.mfcc_dim
        for kernel, dilation in zip(config.kernel_sizes, config.dilations):
            blocks.append(TdnnBlock(in_channels, config.channels, kernel, dilation))
            in_channels = config.channels
        self.blocks = nn.Sequential(*blocks)
        self.pool = StatsPool()
        self.projection = nn.Linear(2 * config.channels, config.embedding_dim)
        init_parameters(self, seed)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def forward(self, mfcc: torch.Tensor) -> torch.Tensor:
        """Embed MFCC frames shaped (T, D) or (B, T, D); returns (D_e,) or (B, D_e)."""
        unbatched = mfcc.dim() == 2
        x = (mfcc.unsqueeze(0) if unbatched else mfcc).transpose(1, 2)
        out = self.projection(self.pool(self.blocks(x)))
        return out.squeeze(0) if unbatched else out

    def embed_waveform(self, samples: torch.Tensor) -> torch.Tensor:
        """Differentiable embedding of a 1-D waveform."""
        return self(compute_mfcc(samples, self.features).to(self.projection.weight.dtype))


def embed_enrollment(s_enroll: SignalLike, model: EnrollEmbedder) -> SpeakerEmbedding:
    """Eval-mode embedding of an enrollment utterance.

    Raises:
        SignalError: If the enrollment is shorter than the configured minimum
    """
    samples = as_tensor(s_enroll)
    rate = s_enroll.sample_rate if isinstance(s_enroll, AudioSignal) else model.features.sample_rate
    duration = samples.shape[-1] / rate
    if duration < model.config.min_enrollment_s:
        raise SignalError(
            f"enrollment of {duration:.3f}s is shorter than {model.config.min_enrollment_s}s",
            code="enrollment_too_short",
        )
    was_training = model.training
    model.eval()
    with torch.no_grad():
        vector = model.embed_waveform(samples)
    model.train(was_training)
    return SpeakerEmbedding(vector=vector, source="enrollment")


def _vector(embedding: EmbeddingLike) -> torch.Tensor:
    return embedding.vector if isinstance(embedding, SpeakerEmbedding) else embedding


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return 1.0 - F.cosine_similarity(a, b, dim=-1, eps=1e-12)


def triplet_loss(
    anchor: EmbeddingLike,
    positive: EmbeddingLike,
    negative: EmbeddingLike,
    margin: float = 0.2,
) -> torch.Tensor:
    """Mean of max(0, d(a, p) - d(a, n) + margin) with cosine distance d.

    Accepts single embeddings or (B, D_e) batches; vectors are unit-normalised
    implicitly by the cosine.
    """
    a, p, n = _vector(anchor), _vector(positive), _vector(negative)
    return F.relu(cosine_distance(a, p) - cosine_distance(a, n) + margin).mean()


def lmc_loss(
    embedding: EmbeddingLike,
    speaker_id: Union[int, torch.Tensor, Sequence[int]],
    class_weights: torch.Tensor,
    margin: float = 0.35,
    scale: float = 30.0,
) -> torch.Tensor:
    """Large margin cosine loss.

    Cross-entropy over ``scale * (cos(theta_k) - margin * [k == target])``
    where theta_k is the angle between the embedding and row k of
    ``class_weights``.

    Args:
        embedding: (D_e,) or (B, D_e)
        speaker_id: Class index, or one per batch row
        class_weights: (K, D_e); rows are normalised here
        margin: Cosine margin m
        scale: Logit scale s

    Raises:
        SpeakerLabelError: If a speaker id is outside ``[0, K)``
    """
    vectors = _vector(embedding)
    if vectors.dim() == 1:
        vectors = vectors.unsqueeze(0)
    labels = torch.as_tensor(speaker_id, dtype=torch.long).reshape(-1)
    num_classes = class_weights.shape[0]
    if labels.shape[0] != vectors.shape[0]:
        raise SpeakerLabelError(f"{labels.shape[0]} labels for {vectors.shape[0]} embeddings")
    if bool(((labels < 0) | (labels >= num_classes)).any()):
        raise SpeakerLabelError(
            f"speaker ids {labels.tolist()} outside the {num_classes} training speakers"
        )
    cos = F.normalize(vectors, dim=-1, eps=1e-12) @ F.normalize(class_weights, dim=-1).t()
    margins = torch.zeros_like(cos).scatter(1, labels.unsqueeze(1), margin)
    return F.cross_entropy(scale * (cos - margins), labels)


class LmcHead(nn.Module):
    """Class weight matrix of the large margin cosine loss."""

    def __init__(self, embedding_dim: int, num_speakers: int, seed: Optional[int] = None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_speakers, embedding_dim))
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            nn.init.xavier_normal_(self.weight)

    def forward(
        self, embedding: torch.Tensor, labels: torch.Tensor, weights: SpeakerLossWeights
    ) -> torch.Tensor:
        return lmc_loss(embedding, labels, self.weight, weights.lmc_margin, weights.lmc_scale)

    def logits(self, embedding: torch.Tensor) -> torch.Tensor:
        """Cosine scores against every training speaker."""
        return F.normalize(embedding, dim=-1, eps=1e-12) @ F.normalize(self.weight, dim=-1).t()


def embedding_regularizer(embedding: torch.Tensor) -> torch.Tensor:
    """Mean squared L2 norm of the embeddings."""
    return embedding.pow(2).sum(dim=-1).mean()


def combine_speaker_losses(
    triplet: torch.Tensor, lmc: torch.Tensor, reg: torch.Tensor, weights: SpeakerLossWeights
) -> torch.Tensor:
    """L_triplet + alpha * L_lmc + beta * L_r."""
    return triplet + weights.alpha * lmc + weights.beta * reg


def sample_negatives(labels: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Random in-batch negative per row; -1 where every row shares the label."""
    negatives = torch.full_like(labels, -1)
    for i in range(labels.shape[0]):
        candidates = torch.nonzero(labels != labels[i]).flatten()
        if candidates.numel() > 0:
            pick = torch.randint(candidates.numel(), (1,), generator=generator)
            negatives[i] = candidates[pick]
    return negatives


def speaker_objective(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    labels: torch.Tensor,
    head: Optional[LmcHead],
    weights: SpeakerLossWeights,
    generator: torch.Generator,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Multi-task speaker loss over a batch.

    Each row pairs an anchor with a positive of the same speaker; the
    negative is a random other-speaker anchor of the batch. Without a head
    (speakers outside the training set) the cosine term is zero.

    Returns:
        (total, component losses keyed ``triplet``, ``lmc`` and ``reg``)
    """
    negatives = sample_negatives(labels, generator)
    valid = negatives >= 0
    zero = anchors.sum() * 0.0
    triplet = (
        triplet_loss(
            anchors[valid], positives[valid], anchors[negatives[valid]], weights.triplet_margin
        )
        if bool(valid.any())
        else zero
    )
    lmc = head(anchors, labels, weights) if head is not None else zero
    reg = embedding_regularizer(anchors)
    parts = {"triplet": triplet, "lmc": lmc, "reg": reg}
    return combine_speaker_losses(triplet, lmc, reg, weights), parts


def joint_speaker_term(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    head: LmcHead,
    weights: SpeakerLossWeights,
    generator: torch.Generator,
) -> torch.Tensor:
    """Single-term speaker loss used inside the joint objectives.

    ``joint_term = "lmc"`` uses the large margin cosine loss. ``"triplet"``
    pairs each enrollment with another same-speaker enrollment of the batch;
    rows without one are skipped.
    """
    if weights.joint_term == "lmc":
        return head(embeddings, labels, weights)
    anchors, positives, negatives = [], [], []
    picks = sample_negatives(labels, generator)
    for i in range(labels.shape[0]):
        same = torch.nonzero((labels == labels[i]) & (torch.arange(labels.shape[0]) != i)).flatten()
        if same.numel() == 0 or picks[i] < 0:
            continue
        anchors.append(embeddings[i])
        positives.append(embeddings[same[0]])
        negatives.append(embeddings[picks[i]])
    if not anchors:
        return embeddings.sum() * 0.0
    return triplet_loss(
        torch.stack(anchors), torch.stack(positives), torch.stack(negatives), weights.triplet_margin
    )
