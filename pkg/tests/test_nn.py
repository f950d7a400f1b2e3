"""Tests for layer specs, functional forward and the gradient harness."""

import pytest
import torch
from pydantic import ValidationError

from pytsr.errors import GradientCheckError, ShapeMismatchError
from pytsr.nn import (
    LayerSpec,
    build_layer,
    forward,
    grad_check,
    gradient_error,
    parameter_checksum,
    parameters_of,
    set_trainable,
)


def _params(spec, seed=0):
    return parameters_of(build_layer(spec, seed=seed, dtype=torch.float64))


@pytest.mark.unit
class TestLayerSpec:
    """Test layer descriptions."""

    def test_conv_requires_channels(self):
        """Test a conv layer without channels is invalid."""
        with pytest.raises(ValidationError):
            LayerSpec(kind="conv1d", out_channels=4)

    def test_bilstm_requires_hidden(self):
        """Test a bilstm without a hidden size is invalid."""
        with pytest.raises(ValidationError):
            LayerSpec(kind="bilstm", in_channels=4)

    def test_receptive_field(self):
        """Test the dilated receptive field."""
        spec = LayerSpec(kind="conv1d", in_channels=1, out_channels=1, kernel_size=3, dilation=2)

        assert spec.receptive_field == 5


@pytest.mark.unit
class TestForward:
    """Test the functional layer forward."""

    def test_wrapper_conv_length(self):
        """Test kernel 7 stride 3 on 100 frames gives 32 outputs."""
        spec = LayerSpec(
            kind="conv1d", in_channels=40, out_channels=8, kernel_size=7, stride=3
        )
        x = torch.randn(40, 100, dtype=torch.float64)

        out = forward(spec, _params(spec), x)

        assert out.shape == (8, 32)

    def test_leaky_relu(self):
        """Test the Leaky-ReLU slope."""
        spec = LayerSpec(kind="leaky_relu", negative_slope=0.01)

        out = forward(spec, {}, torch.tensor([-1.0, 2.0], dtype=torch.float64))

        assert out.tolist() == pytest.approx([-0.01, 2.0])

    def test_instance_norm_statistics(self):
        """Test instance norm gives zero mean and unit variance per channel."""
        spec = LayerSpec(kind="instance_norm")
        x = 5.0 + 3.0 * torch.randn(4, 50, dtype=torch.float64)

        out = forward(spec, {}, x)

        assert torch.allclose(out.mean(dim=-1), torch.zeros(4, dtype=torch.float64), atol=1e-5)
        assert torch.allclose(
            out.var(dim=-1, unbiased=False), torch.ones(4, dtype=torch.float64), atol=1e-5
        )

    def test_channel_mismatch(self):
        """Test a wrong channel count names the layer and shapes."""
        spec = LayerSpec(kind="conv1d", in_channels=3, out_channels=2, kernel_size=3)

        with pytest.raises(ShapeMismatchError) as exc_info:
            forward(spec, _params(spec), torch.zeros(4, 10, dtype=torch.float64))

        assert "conv1d" in str(exc_info.value)
        assert exc_info.value.actual == (4, 10)

    def test_too_short_input(self):
        """Test an input shorter than the receptive field is rejected."""
        spec = LayerSpec(kind="conv1d", in_channels=2, out_channels=2, kernel_size=5)

        with pytest.raises(ShapeMismatchError):
            forward(spec, _params(spec), torch.zeros(2, 4, dtype=torch.float64))

    def test_parameter_shape_mismatch(self):
        """Test parameters of the wrong shape are rejected."""
        spec = LayerSpec(kind="linear", in_channels=3, out_channels=2)
        params = _params(LayerSpec(kind="linear", in_channels=4, out_channels=2))

        with pytest.raises(ShapeMismatchError):
            forward(spec, params, torch.zeros(5, 3, dtype=torch.float64))

    def test_dropout_is_identity_in_eval(self):
        """Test eval mode disables dropout."""
        spec = LayerSpec(kind="dropout", dropout=0.5)
        x = torch.randn(10, dtype=torch.float64)

        assert torch.equal(forward(spec, {}, x, mode="eval"), x)


@pytest.mark.unit
class TestInitialisation:
    """Test seeded initialisation."""

    def test_seeded_build_is_reproducible(self):
        """Test the same seed gives the same parameters."""
        spec = LayerSpec(kind="bilstm", in_channels=3, hidden_size=4)

        assert parameter_checksum(_params(spec, seed=5)) == parameter_checksum(
            _params(spec, seed=5)
        )
        assert parameter_checksum(_params(spec, seed=5)) != parameter_checksum(
            _params(spec, seed=6)
        )

    def test_biases_start_at_zero(self):
        """Test biases are zero-initialised."""
        params = _params(LayerSpec(kind="linear", in_channels=3, out_channels=2), seed=1)

        assert torch.all(params["bias"] == 0)

    def test_checksum_tracks_changes(self):
        """Test the checksum changes with any parameter."""
        params = _params(LayerSpec(kind="linear", in_channels=3, out_channels=2))
        before = parameter_checksum(params)
        params["weight"][0, 0] += 1.0

        assert parameter_checksum(params) != before

    def test_set_trainable(self):
        """Test gradient tracking is switched off and back on."""
        layer = build_layer(LayerSpec(kind="linear", in_channels=3, out_channels=2), seed=0)

        set_trainable(layer, False)
        assert not any(p.requires_grad for p in layer.parameters())

        set_trainable(layer, True)
        assert all(p.requires_grad for p in layer.parameters())


@pytest.mark.unit
class TestGradCheck:
    """Test the finite-difference gradient harness."""

    def test_linear_squared_loss(self):
        """Test a linear layer with a squared loss."""
        spec = LayerSpec(kind="linear", in_channels=3, out_channels=2)
        x = torch.randn(4, 3, dtype=torch.float64)

        error = grad_check([spec], [_params(spec, seed=2)], x, lambda out: out.pow(2).sum())

        assert error < 1e-6

    def test_bilstm_sum_loss(self):
        """Test a one-layer bilstm with a sum loss."""
        spec = LayerSpec(kind="bilstm", in_channels=3, hidden_size=8)
        x = torch.randn(5, 3, dtype=torch.float64)

        error = grad_check([spec], [_params(spec, seed=3)], x, lambda out: out.sum())

        assert error < 1e-4

    def test_conv_leaky_relu_mean_loss(self):
        """Test conv and Leaky-ReLU away from the kink."""
        conv = LayerSpec(kind="conv1d", in_channels=2, out_channels=3, kernel_size=3)
        act = LayerSpec(kind="leaky_relu")
        params = _params(conv, seed=4)
        # Small weights and large biases keep every pre-activation off zero.
        params["weight"] = 0.1 * params["weight"]
        params["bias"] = torch.tensor([5.0, -5.0, 5.0], dtype=torch.float64)
        x = torch.randn(2, 12, dtype=torch.float64).clamp(-3.0, 3.0)

        error = grad_check([conv, act], [params, {}], x, lambda out: out.mean())

        assert error < 1e-4

    def test_non_finite_loss(self):
        """Test a non-finite loss is reported."""
        x = torch.ones(2, dtype=torch.float64, requires_grad=True)

        with pytest.raises(GradientCheckError) as exc_info:
            gradient_error(lambda: x.sum() * float("inf"), [x])

        assert exc_info.value.code == "non_finite_loss"

    def test_chain_length_mismatch(self):
        """Test one parameter set per layer is required."""
        spec = LayerSpec(kind="linear", in_channels=3, out_channels=2)

        with pytest.raises(ShapeMismatchError):
            grad_check([spec], [], torch.zeros(1, 3), lambda out: out.sum())
