"""Differentiable building blocks and the gradient verification harness.

Layers are plain ``torch.nn`` modules described by a :class:`LayerSpec`.
Initialisation is seeded: Glorot-uniform weights for linear and convolutional
layers, orthogonal recurrent matrices for LSTMs, zero biases.
"""

import hashlib
from typing import Callable, Dict, Iterable, List, Literal, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator
from torch import nn

from .errors import GradientCheckError, ShapeMismatchError

LayerKind = Literal[
    "conv1d",
    "bilstm",
    "tdnn_block",
    "linear",
    "instance_norm",
    "leaky_relu",
    "softmax",
    "log_softmax",
    "dropout",
]

Parameters = Dict[str, torch.Tensor]

_NEEDS_IN = {"conv1d", "bilstm", "tdnn_block", "linear"}
_NEEDS_OUT = {"conv1d", "tdnn_block", "linear"}


class LayerSpec(BaseModel):
    """Kind and hyperparameters of one layer."""

    kind: LayerKind = Field(..., description="Layer kind")
    in_channels: Optional[int] = Field(None, ge=1, description="Input channels / features")
    out_channels: Optional[int] = Field(None, ge=1, description="Output channels / features")
    kernel_size: int = Field(1, ge=1, description="Convolution kernel")
    stride: int = Field(1, ge=1, description="Convolution stride")
    dilation: int = Field(1, ge=1, description="Convolution dilation")
    padding: int = Field(0, ge=0, description="Symmetric zero padding")
    hidden_size: Optional[int] = Field(None, ge=1, description="LSTM hidden size per direction")
    num_layers: int = Field(1, ge=1, description="Stacked LSTM layers")
    dropout: float = Field(0.0, ge=0.0, lt=1.0, description="Dropout rate")
    negative_slope: float = Field(0.01, ge=0.0, description="Leaky-ReLU slope")
    eps: float = Field(1e-8, gt=0.0, description="Instance norm variance floor")

    @model_validator(mode="after")
    def _check_required(self) -> "LayerSpec":
        if self.kind in _NEEDS_IN and self.in_channels is None:
            raise ValueError(f"{self.kind} needs in_channels")
        if self.kind in _NEEDS_OUT and self.out_channels is None:
            raise ValueError(f"{self.kind} needs out_channels")
        if self.kind == "bilstm" and self.hidden_size is None:
            raise ValueError("bilstm needs hidden_size")
        return self

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.kernel_size - 1) + 1


class InstanceNorm(nn.Module):
    """Per-channel normalisation over time; input (C, L) or (B, C, L)."""

    def __init__(self, eps: float = 1e-8):
        super().__init__()
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps)


class TdnnBlock(nn.Module):
    """Dilated conv1d, ReLU and batch-free instance normalisation."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, dilation: int):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size, dilation=dilation)
        self.norm = InstanceNorm()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(F.relu(self.conv(x)))


class BiLstm(nn.Module):
    """Bidirectional LSTM returning only the output sequence; input (T, D) or (B, T, D)."""

    def __init__(
        self, input_size: int, hidden_size: int, num_layers: int = 1, dropout: float = 0.0
    ):
        super().__init__()
        self.lstm = nn.LSTM(
            input_size,
            hidden_size,
            num_layers=num_layers,
            dropout=dropout if num_layers > 1 else 0.0,
            bidirectional=True,
            batch_first=True,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        unbatched = x.dim() == 2
        out, _ = self.lstm(x.unsqueeze(0) if unbatched else x)
        return out.squeeze(0) if unbatched else out


def init_parameters(module: nn.Module, seed: Optional[int] = None) -> nn.Module:
    """Glorot-uniform weights, orthogonal recurrent matrices and zero biases.

    Embedding tables keep a seeded normal initialisation. Runs under a forked
    RNG so the global torch stream is untouched.
    """
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        for sub in module.modules():
            if isinstance(sub, (nn.Linear, nn.Conv1d, nn.ConvTranspose1d)):
                nn.init.xavier_uniform_(sub.weight)
                if sub.bias is not None:
                    nn.init.zeros_(sub.bias)
            elif isinstance(sub, nn.LSTM):
                for name, weight in sub.named_parameters():
                    if name.startswith("weight_ih"):
                        nn.init.xavier_uniform_(weight)
                    elif name.startswith("weight_hh"):
                        for gate in weight.data.chunk(4, dim=0):
                            nn.init.orthogonal_(gate)
                    else:
                        nn.init.zeros_(weight)
            elif isinstance(sub, nn.Embedding):
                nn.init.normal_(sub.weight, std=0.1)
    return module


def build_layer(
    spec: LayerSpec, seed: Optional[int] = None, dtype: torch.dtype = torch.float32
) -> nn.Module:
    """Instantiate and initialise the module a :class:`LayerSpec` describes."""
    module: nn.Module
    if spec.kind == "conv1d":
        assert spec.in_channels is not None and spec.out_channels is not None
        module = nn.Conv1d(
            spec.in_channels,
            spec.out_channels,
            spec.kernel_size,
            stride=spec.stride,
            dilation=spec.dilation,
            padding=spec.padding,
        )
    elif spec.kind == "tdnn_block":
        assert spec.in_channels is not None and spec.out_channels is not None
        module = TdnnBlock(spec.in_channels, spec.out_channels, spec.kernel_size, spec.dilation)
    elif spec.kind == "bilstm":
        assert spec.in_channels is not None and spec.hidden_size is not None
        module = BiLstm(spec.in_channels, spec.hidden_size, spec.num_layers, spec.dropout)
    elif spec.kind == "linear":
        assert spec.in_channels is not None and spec.out_channels is not None
        module = nn.Linear(spec.in_channels, spec.out_channels)
    elif spec.kind == "instance_norm":
        module = InstanceNorm(spec.eps)
    elif spec.kind == "leaky_relu":
        module = nn.LeakyReLU(spec.negative_slope)
    elif spec.kind == "softmax":
        module = nn.Softmax(dim=-1)
    elif spec.kind == "log_softmax":
        module = nn.LogSoftmax(dim=-1)
    else:
        module = nn.Dropout(spec.dropout)
    return init_parameters(module, seed).to(dtype)


def check_input_shape(spec: LayerSpec, x: torch.Tensor) -> None:
    """Raise :class:`ShapeMismatchError` when ``x`` cannot feed the layer."""
    where = f"{spec.kind} layer"
    if spec.kind in ("conv1d", "tdnn_block"):
        if x.dim() not in (2, 3) or x.shape[-2] != spec.in_channels:
            raise ShapeMismatchError(where, f"([B,] {spec.in_channels}, L)", x.shape)
        if x.shape[-1] + 2 * spec.padding < spec.receptive_field:
            raise ShapeMismatchError(
                where, f"length >= {spec.receptive_field - 2 * spec.padding}", x.shape
            )
    elif spec.kind == "bilstm":
        if x.dim() not in (2, 3) or x.shape[-1] != spec.in_channels:
            raise ShapeMismatchError(where, f"([B,] T, {spec.in_channels})", x.shape)
    elif spec.kind == "linear":
        if x.dim() < 1 or x.shape[-1] != spec.in_channels:
            raise ShapeMismatchError(where, f"(..., {spec.in_channels})", x.shape)
    elif spec.kind == "instance_norm":
        if x.dim() not in (2, 3):
            raise ShapeMismatchError(where, "([B,] C, L)", x.shape)
        if spec.in_channels is not None and x.shape[-2] != spec.in_channels:
            raise ShapeMismatchError(where, f"([B,] {spec.in_channels}, L)", x.shape)


def load_parameters(module: nn.Module, params: Parameters, where: str) -> None:
    """Load a state dict after checking its keys and shapes match the module."""
    expected = dict(module.state_dict())
    if set(expected) != set(params):
        raise ShapeMismatchError(where, sorted(expected), [len(params)])
    for name, value in params.items():
        if tuple(value.shape) != tuple(expected[name].shape):
            raise ShapeMismatchError(
                f"{where} parameter {name}", tuple(expected[name].shape), value.shape
            )
    module.load_state_dict(params)


def forward(
    spec: LayerSpec,
    params: Parameters,
    x: torch.Tensor,
    mode: Literal["train", "eval"] = "eval",
) -> torch.Tensor:
    """Apply one layer functionally.

    Args:
        spec: Layer description
        params: Named parameter tensors (empty for parameter-free layers)
        x: Input tensor
        mode: ``"train"`` enables dropout; ``"eval"`` is deterministic

    Returns:
        The layer output

    Raises:
        ShapeMismatchError: If the input or a parameter has the wrong shape
    """
    check_input_shape(spec, x)
    module = build_layer(spec, dtype=x.dtype)
    load_parameters(module, params, f"{spec.kind} layer")
    module.train(mode == "train")
    return module(x)


def gradient_error(
    loss: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    eps: float = 1e-4,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    The error of each tensor is ``max|g_analytic - g_fd| / max|g_fd|``
    over the sampled elements; the worst tensor is returned.

    Args:
        loss: Closure recomputing the scalar loss from ``tensors``
        tensors: Leaf tensors with ``requires_grad=True`` (use float64)
        eps: Finite-difference step
        max_elements: Probe at most this many seeded elements per tensor
        seed: Seed of the element sampler

    Raises:
        GradientCheckError: If the loss is not finite
    """
    value = loss()
    if not bool(torch.isfinite(value)):
        raise GradientCheckError(f"loss is not finite: {float(value)}")
    analytic = torch.autograd.grad(value, list(tensors), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        grad = torch.zeros_like(tensor) if grad is None else grad
        flat = tensor.data.view(-1)
        if flat.numel() == 0:
            continue
        indices = np.arange(flat.numel())
        if max_elements is not None and flat.numel() > max_elements:
            indices = np.sort(rng.choice(flat.numel(), size=max_elements, replace=False))
        numeric = np.empty(len(indices))
        with torch.no_grad():
            for j, i in enumerate(indices):
                original = float(flat[i])
                flat[i] = original + eps
                plus = float(loss())
                flat[i] = original - eps
                minus = float(loss())
                flat[i] = original
                numeric[j] = (plus - minus) / (2.0 * eps)
        if not np.all(np.isfinite(numeric)):
            raise GradientCheckError("finite-difference loss is not finite")
        exact = grad.detach().reshape(-1)[torch.as_tensor(indices)].double().numpy()
        scale = max(float(np.max(np.abs(numeric))), 1e-12)
        worst = max(worst, float(np.max(np.abs(exact - numeric))) / scale)
    return worst


def grad_check(
    spec_chain: Sequence[LayerSpec],
    params: Sequence[Parameters],
    x: torch.Tensor,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    eps: float = 1e-4,
    max_elements: Optional[int] = None,
) -> float:
    """Verify the gradients of a layer chain against finite differences.

    The chain runs in eval mode and float64; the input and every parameter
    are checked.

    Returns:
        Max relative gradient error
    """
    if len(spec_chain) != len(params):
        raise ShapeMismatchError("grad_check", f"{len(spec_chain)} parameter sets", [len(params)])
    x = x.detach().double().requires_grad_(True)
    modules: List[nn.Module] = []
    leaves: List[torch.Tensor] = [x]
    for spec, layer_params in zip(spec_chain, params):
        module = build_layer(spec, dtype=torch.float64)
        load_parameters(
            module, {k: v.detach().double() for k, v in layer_params.items()}, spec.kind
        )
        module.eval()
        modules.append(module)
        leaves.extend(module.parameters())

    def loss() -> torch.Tensor:
        out = x
        for spec, module in zip(spec_chain, modules):
            check_input_shape(spec, out)
            out = module(out)
        return loss_fn(out)

    return gradient_error(loss, leaves, eps=eps, max_elements=max_elements)


def parameters_of(module: nn.Module) -> Parameters:
    """Detached copy of a module's named parameters and buffers."""
    return {name: value.detach().clone() for name, value in module.state_dict().items()}


def parameter_checksum(source: Union[nn.Module, Parameters, Iterable[nn.Module]]) -> str:
    """Sha256 over the names and raw bytes of every parameter."""
    if isinstance(source, nn.Module):
        items = sorted(source.state_dict().items())
    elif isinstance(source, dict):
        items = sorted(source.items())
    else:
        items = []
        for i, module in enumerate(source):
            items.extend((f"{i}.{k}", v) for k, v in sorted(module.state_dict().items()))
    digest = hashlib.sha256()
    for name, value in items:
        digest.update(name.encode("utf-8"))
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def set_trainable(module: nn.Module, trainable: bool) -> None:
    """Switch gradient tracking on or off for every parameter of a module."""
    for p in module.parameters():
        p.requires_grad_(trainable)
