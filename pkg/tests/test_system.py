"""Tests for the composed system, its checkpoints and model variants."""

import pytest
import torch

from pytsr.checkpoint import read_header
from pytsr.errors import CheckpointError, ConfigError
from pytsr.system import (
    GROUPS,
    MODEL_VARIANTS,
    TargetSpeakerSystem,
    compose_system,
    load_system,
    save_system,
    with_uncertainty,
)


@pytest.mark.unit
class TestGroups:
    """Test module groups."""

    def test_group_members(self, tiny_system):
        """Test each group holds its networks."""
        assert tiny_system.group("embedder") == [tiny_system.embedder, tiny_system.speaker_head]
        assert tiny_system.group("extractor") == [
            tiny_system.extractor,
            tiny_system.mixture_embedder,
        ]
        assert tiny_system.group("recognizer") == [tiny_system.recognizer]

    def test_unknown_group(self, tiny_system):
        """Test an unknown group name is a config error."""
        with pytest.raises(ConfigError):
            tiny_system.group("decoder")

    def test_groups_cover_every_parameter(self, tiny_system):
        """Test no parameter lies outside the four groups."""
        grouped = sum(len(tiny_system.group_parameters(name)) for name in GROUPS)

        assert grouped == len(list(tiny_system.parameters()))

    def test_seeded_construction(self, tiny_config):
        """Test the experiment seed fixes every group."""
        first = TargetSpeakerSystem(tiny_config)
        second = TargetSpeakerSystem(tiny_config)

        for name in GROUPS:
            assert first.group_checksum(name) == second.group_checksum(name)

    def test_recognizer_width_follows_config(self, tiny_config):
        """Test the uncertainty mode sets the recognizer input width."""
        system = TargetSpeakerSystem(with_uncertainty(tiny_config, "both"))

        assert system.speech_dim == 4
        assert system.recognizer.extra_dim == 5


@pytest.mark.unit
class TestSystemCheckpoint:
    """Test saving, loading and composing systems."""

    def test_save_and_load(self, tmp_path, tiny_system):
        """Test every group survives a save and load."""
        path = save_system(tiny_system, tmp_path / "system.ckpt", {"stage": "model_iv"})

        loaded, header = load_system(path, dtype=torch.float64)

        for name in GROUPS:
            assert loaded.group_checksum(name) == tiny_system.group_checksum(name)
        assert header.metadata["stage"] == "model_iv"
        assert header.metadata["groups"] == list(GROUPS)
        assert loaded.config == tiny_system.config

    def test_compose_copies_groups(self, tmp_path, tiny_config, tiny_system):
        """Test composition takes the named group from a checkpoint."""
        with torch.no_grad():
            tiny_system.recognizer.joint_output.bias.add_(1.0)
        path = save_system(tiny_system, tmp_path / "rnnt.ckpt", groups=["recognizer"])

        composed = compose_system(tiny_config, [(path, ["recognizer"])], dtype=torch.float64)
        fresh = TargetSpeakerSystem(tiny_config).double()

        assert composed.group_checksum("recognizer") == tiny_system.group_checksum("recognizer")
        assert fresh.group_checksum("recognizer") != tiny_system.group_checksum("recognizer")
        assert read_header(path).metadata["groups"] == ["recognizer"]

    def test_recognizer_widened_on_load(self, tmp_path, tiny_config, tiny_system):
        """Test a plain recognizer loads into an uncertainty-aware system."""
        path = save_system(tiny_system, tmp_path / "rnnt.ckpt", groups=["recognizer"])

        composed = compose_system(
            with_uncertainty(tiny_config, "spk"), [(path, ["recognizer"])], dtype=torch.float64
        )

        weight = composed.recognizer.encoder.lstm.weight_ih_l0
        original = tiny_system.recognizer.encoder.lstm.weight_ih_l0
        assert composed.recognizer.extra_dim == 1
        assert torch.equal(weight[:, :6], original)
        assert torch.count_nonzero(weight[:, 6:]) == 0

    def test_wider_checkpoint_is_refused(self, tmp_path, tiny_config):
        """Test a recognizer with more inputs than the system cannot load."""
        wide = TargetSpeakerSystem(with_uncertainty(tiny_config, "both"))
        path = save_system(wide, tmp_path / "wide.ckpt", groups=["recognizer"])

        with pytest.raises(CheckpointError):
            compose_system(tiny_config, [(path, ["recognizer"])])

    def test_missing_group(self, tmp_path, tiny_config, tiny_system):
        """Test asking for a group the checkpoint lacks."""
        path = save_system(tiny_system, tmp_path / "emb.ckpt", groups=["embedder"])

        with pytest.raises(CheckpointError):
            compose_system(tiny_config, [(path, ["extractor"])])

    def test_missing_checkpoint(self, tmp_path):
        """Test loading a missing file."""
        with pytest.raises(CheckpointError) as exc_info:
            load_system(tmp_path / "none.ckpt")

        assert exc_info.value.code == "missing_checkpoint"


@pytest.mark.unit
class TestTranscribe:
    """Test single-utterance inference."""

    def test_with_front_end(self, tiny_system, rendered):
        """Test the extracted estimate keeps the mixture length."""
        transcript, estimate, u_spk = tiny_system.transcribe(rendered.mixture, rendered.enrollment)

        assert set(transcript.tokens) <= set("abcd")
        assert estimate.shape == rendered.mixture.samples.shape
        assert torch.isfinite(u_spk).all()
        assert float(u_spk.max()) <= float(torch.log(torch.tensor(4.0))) + 1e-9

    def test_without_front_end(self, tiny_system, rendered):
        """Test decoding the raw mixture needs no enrollment."""
        transcript, estimate, u_spk = tiny_system.transcribe(
            rendered.mixture, None, use_front_end=False
        )

        assert estimate is None
        assert u_spk is None
        assert set(transcript.tokens) <= set("abcd")

    @pytest.mark.parametrize("mode", ["spk", "speech", "both"])
    def test_uncertainty_modes(self, tiny_config, rendered, mode):
        """Test every uncertainty mode feeds the recognizer."""
        system = TargetSpeakerSystem(with_uncertainty(tiny_config, mode)).double()

        features, _, _ = system.recognizer_input(rendered.mixture, rendered.enrollment)

        assert features.shape[-1] == system.recognizer.input_dim

    def test_beam_decoding(self, tiny_system, rendered):
        """Test beam search through the whole system."""
        transcript, _, _ = tiny_system.transcribe(
            rendered.mixture, rendered.enrollment, mode="beam", beam_size=2
        )

        assert set(transcript.tokens) <= set("abcd")

    def test_enrollment_required(self, tiny_system, rendered):
        """Test the front end without an enrollment."""
        with pytest.raises(ConfigError):
            tiny_system.transcribe(rendered.mixture, None)

    def test_mode_restored(self, tiny_system, rendered):
        """Test transcription leaves the training flag as it was."""
        tiny_system.train()

        tiny_system.transcribe(rendered.mixture, rendered.enrollment)

        assert tiny_system.training


@pytest.mark.unit
class TestModelVariants:
    """Test the variant ladder."""

    def test_seven_variants(self):
        """Test the roman numeral labels."""
        assert list(MODEL_VARIANTS) == ["I", "II", "III", "IV", "V", "VI", "VII"]

    def test_variant_settings(self):
        """Test front-end use and uncertainty streams."""
        assert not MODEL_VARIANTS["I"].use_front_end
        assert all(MODEL_VARIANTS[name].use_front_end for name in ["II", "III", "IV"])
        assert [MODEL_VARIANTS[name].uncertainty for name in ["V", "VI", "VII"]] == [
            "spk",
            "speech",
            "both",
        ]
        assert MODEL_VARIANTS["IV"].checkpoint == "model_iv"
