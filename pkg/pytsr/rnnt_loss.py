"""Transducer loss: log-space forward-backward over the (T, U+1) lattice.

The lattice holds log-probabilities ``log_probs[t, u, k]`` of emitting symbol
``k`` (0 is blank) after consuming ``t + 1`` frames and ``u`` labels. Blank
moves one frame forward, a label moves one label forward on the same frame,
and every alignment ends with a blank on the last frame.
"""

from typing import Sequence, Tuple, Union

import numpy as np
import torch
from torch.autograd import Function

from .errors import LatticeError

BLANK = 0

# Stands in for log(0); finite so that sums and differences never produce NaN.
NEG_INF_SENTINEL = -1e30

NORMALIZATION_TOLERANCE = 1e-5

Labels = Union[Sequence[int], np.ndarray, torch.Tensor]


def _as_labels(labels: Labels) -> np.ndarray:
    if isinstance(labels, torch.Tensor):
        labels = labels.detach().cpu().numpy()
    return np.asarray(labels, dtype=np.int64).reshape(-1)


def validate_lattice(log_probs: np.ndarray, labels: np.ndarray) -> None:
    """Check lattice shape, label range and per-cell normalisation.

    Raises:
        LatticeError: On any violation
    """
    if log_probs.ndim != 3:
        raise LatticeError(
            f"lattice must be (T, U+1, K), got {log_probs.shape}", code="lattice_shape"
        )
    frames, states, symbols = log_probs.shape
    if frames < 1:
        raise LatticeError("lattice needs at least one frame", code="lattice_shape")
    if states != labels.shape[0] + 1:
        raise LatticeError(
            f"lattice has {states} label states for {labels.shape[0]} labels",
            code="lattice_shape",
        )
    if labels.size and (labels.min() < 1 or labels.max() >= symbols):
        raise LatticeError(
            f"labels must lie in [1, {symbols - 1}], got {labels.tolist()}",
            code="label_out_of_range",
        )
    if not np.all(np.isfinite(log_probs)):
        raise LatticeError(
            "lattice contains non-finite log-probabilities", code="lattice_not_finite"
        )
    totals = np.logaddexp.reduce(log_probs, axis=-1)
    worst = float(np.max(np.abs(totals)))
    if worst > NORMALIZATION_TOLERANCE:
        raise LatticeError(
            f"lattice rows are not log-normalised (max |logsumexp| {worst:.3g})",
            code="lattice_not_normalized",
        )


def forward_variables(log_probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """alpha[t, u]: log-probability of reaching (t, u)."""
    frames, states, _ = log_probs.shape
    alpha = np.full((frames, states), NEG_INF_SENTINEL)
    alpha[0, 0] = 0.0
    for t in range(frames):
        for u in range(states):
            if t == 0 and u == 0:
                continue
            stay = alpha[t - 1, u] + log_probs[t - 1, u, BLANK] if t > 0 else NEG_INF_SENTINEL
            emit = (
                alpha[t, u - 1] + log_probs[t, u - 1, labels[u - 1]]
                if u > 0
                else NEG_INF_SENTINEL
            )
            alpha[t, u] = np.logaddexp(stay, emit)
    return alpha


def backward_variables(log_probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """beta[t, u]: log-probability of finishing from (t, u)."""
    frames, states, _ = log_probs.shape
    beta = np.full((frames, states), NEG_INF_SENTINEL)
    beta[-1, -1] = log_probs[-1, -1, BLANK]
    for t in range(frames - 1, -1, -1):
        for u in range(states - 1, -1, -1):
            if t == frames - 1 and u == states - 1:
                continue
            stay = (
                beta[t + 1, u] + log_probs[t, u, BLANK] if t < frames - 1 else NEG_INF_SENTINEL
            )
            emit = (
                beta[t, u + 1] + log_probs[t, u, labels[u]]
                if u < states - 1
                else NEG_INF_SENTINEL
            )
            beta[t, u] = np.logaddexp(stay, emit)
    return beta


def rnnt_loss_with_grad(
    log_probs: Union[np.ndarray, torch.Tensor], labels: Labels, validate: bool = True
) -> Tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. the lattice.

    Args:
        log_probs: (T, U+1, K) log-softmax lattice
        labels: U label ids in [1, K-1]
        validate: Check shape, label range and normalisation first

    Returns:
        (loss, gradient of the loss with respect to every lattice entry)

    Raises:
        LatticeError: If validation fails
    """
    if isinstance(log_probs, torch.Tensor):
        log_probs = log_probs.detach().cpu().double().numpy()
    lattice = np.asarray(log_probs, dtype=np.float64)
    label_ids = _as_labels(labels)
    if validate:
        validate_lattice(lattice, label_ids)
    alpha = forward_variables(lattice, label_ids)
    beta = backward_variables(lattice, label_ids)
    log_likelihood = beta[0, 0]

    frames, states, _ = lattice.shape
    grad = np.zeros_like(lattice)
    # Blank transitions (t, u) -> (t + 1, u), plus the terminal blank.
    blank_next = np.full((frames, states), NEG_INF_SENTINEL)
    blank_next[:-1, :] = beta[1:, :]
    blank_next[-1, -1] = 0.0
    grad[:, :, BLANK] = -np.exp(alpha + lattice[:, :, BLANK] + blank_next - log_likelihood)
    # Label transitions (t, u) -> (t, u + 1).
    for u, label in enumerate(label_ids):
        grad[:, u, label] -= np.exp(
            alpha[:, u] + lattice[:, u, label] + beta[:, u + 1] - log_likelihood
        )
    return float(-log_likelihood), grad


class _RnntLoss(Function):
    @staticmethod
    def forward(  # type: ignore[override]
        ctx, log_probs: torch.Tensor, labels: torch.Tensor, validate: bool
    ) -> torch.Tensor:
        loss, grad = rnnt_loss_with_grad(log_probs, labels, validate)
        ctx.save_for_backward(torch.from_numpy(grad).to(log_probs.dtype))
        return log_probs.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):  # type: ignore[override]
        (grad,) = ctx.saved_tensors
        return grad_output * grad, None, None


def rnnt_loss(log_probs: torch.Tensor, labels: Labels, validate: bool = True) -> torch.Tensor:
    """Differentiable transducer loss of one utterance.

    Args:
        log_probs: (T, U+1, K) lattice from the joint network
        labels: U label ids in [1, K-1]
        validate: Check the lattice before the forward-backward pass

    Returns:
        Scalar negative log-likelihood; backward uses the occupancy gradient
    """
    label_tensor = torch.as_tensor(_as_labels(labels))
    return _RnntLoss.apply(log_probs, label_tensor, validate)
