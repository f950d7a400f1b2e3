"""Tests for the tsr command line."""

import logging

import pytest

from pytsr import __version__
from pytsr.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, build_parser, main
from pytsr.config import save_config
from pytsr.corpus import read_manifest
from pytsr.errors import DecodeError, InferenceError
from pytsr.evaluation import write_report
from pytsr.log import setup_logging
from pytsr.models import ErrorBreakdown, EvaluationReport
from pytsr.pipeline import InferenceResult


@pytest.fixture(autouse=True)
def reset_logging():
    """Drop the handlers main() installs on captured streams."""
    yield
    setup_logging(logging.WARNING)


@pytest.fixture
def config_file(tmp_path, tiny_config):
    """Tiny config written as JSON."""
    path = tmp_path / "config.json"
    save_config(tiny_config, path)
    return path


def _report(model, deletions):
    return EvaluationReport(
        model=model,
        manifest_digest="d1",
        overall=ErrorBreakdown(deletions=deletions, reference_length=100),
    )


@pytest.mark.unit
class TestParser:
    """Test argument parsing."""

    def test_version(self, capsys):
        """Test --version prints the package version."""
        with pytest.raises(SystemExit) as exc_info:
            main(["--version"])

        assert exc_info.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_command_required(self):
        """Test a command must be given."""
        with pytest.raises(SystemExit) as exc_info:
            main([])

        assert exc_info.value.code == 2

    def test_decoding_defaults(self):
        """Test greedy decoding through the front end by default."""
        args = build_parser().parse_args(["decode", "--model", "m.ckpt", "--mixture", "x.wav"])

        assert args.mode == "greedy"
        assert args.beam is None
        assert not args.no_front_end

    def test_stage_shortcuts(self):
        """Test the stage-specific training commands."""
        parser = build_parser()
        common = ["--train", "t.json", "--dev", "d.json", "--checkpoints", "ckpt"]

        assert parser.parse_args(["train-embedder"] + common).command == "train-embedder"
        with pytest.raises(SystemExit):
            parser.parse_args(["train"] + common)


@pytest.mark.unit
class TestCommands:
    """Test commands and their exit codes."""

    def test_sim(self, tmp_path, config_file, capsys):
        """Test a manifest is simulated from the config."""
        out = tmp_path / "data"

        code = main(["sim", "--config", str(config_file), "--size", "3", "--out", str(out)])

        assert code == EXIT_OK
        records = read_manifest(out / "train.json")
        assert len(records) == 3
        assert all(r.mixture_path is None for r in records)
        assert str(out / "train.json") in capsys.readouterr().out

    def test_sim_seed_override(self, tmp_path, config_file):
        """Test --seed changes the simulated corpus."""
        args = ["sim", "--config", str(config_file), "--size", "4", "--split", "dev"]
        main(args + ["--out", str(tmp_path / "a")])
        main(args + ["--out", str(tmp_path / "b"), "--seed", "11"])

        first = read_manifest(tmp_path / "a" / "dev.json")
        second = read_manifest(tmp_path / "b" / "dev.json")

        assert first != second

    def test_missing_config(self, tmp_path):
        """Test a missing config file is invalid input."""
        code = main(
            ["sim", "--config", str(tmp_path / "none.json"), "--size", "1", "--out", str(tmp_path)]
        )

        assert code == EXIT_INVALID

    def test_bad_override(self, tmp_path, config_file):
        """Test an unknown override key is invalid input."""
        code = main(
            [
                "sim",
                "--config",
                str(config_file),
                "--set",
                "rnnt.no_such_key=1",
                "--size",
                "1",
                "--out",
                str(tmp_path),
            ]
        )

        assert code == EXIT_INVALID

    def test_unknown_stage(self, tmp_path):
        """Test training an unknown stage."""
        code = main(
            [
                "train",
                "--stage",
                "model_ix",
                "--train",
                "t.json",
                "--dev",
                "d.json",
                "--checkpoints",
                str(tmp_path),
            ]
        )

        assert code == EXIT_INVALID

    def test_decode(self, capsys, mocker):
        """Test the transcript is printed."""
        result = InferenceResult(transcript="abca")
        infer = mocker.patch("pytsr.cli.run_single_inference", return_value=result)

        code = main(["decode", "--model", "m.ckpt", "--mixture", "x.wav", "--no-front-end"])

        assert code == EXIT_OK
        assert capsys.readouterr().out.strip() == "abca"
        assert infer.call_args.kwargs["use_front_end"] is False
        assert infer.call_args.kwargs["mode"] == "greedy"

    def test_infer_failure(self, tmp_path, mocker):
        """Test a failed inference step exits with the failure code."""
        error = InferenceError("transcribe", DecodeError("no frames"))
        mocker.patch("pytsr.cli.run_single_inference", side_effect=error)

        code = main(
            [
                "infer",
                "--model",
                "m.ckpt",
                "--mixture",
                "x.wav",
                "--enrollment",
                "e.wav",
                "--out",
                str(tmp_path),
                "--mode",
                "beam",
                "--beam",
                "3",
            ]
        )

        assert code == EXIT_FAILED

    def test_eval_missing_manifest(self, tmp_path):
        """Test a missing manifest is logged with the command as step."""
        log_file = tmp_path / "logs" / "tsr.log"

        code = main(
            [
                "--log-file",
                str(log_file),
                "eval",
                "--model",
                "m.ckpt",
                "--manifest",
                str(tmp_path / "none.json"),
                "--report",
                str(tmp_path / "r.json"),
            ]
        )

        assert code == EXIT_INVALID
        text = log_file.read_text(encoding="utf-8")
        assert "[eval]" in text
        assert "manifest not found" in text

    def test_compare(self, tmp_path, capsys):
        """Test reports are compared against the first one."""
        first = write_report(_report("III", 20), tmp_path / "iii.json")
        second = write_report(_report("VII", 15), tmp_path / "vii.json")
        table = tmp_path / "table.json"

        code = main(["compare", str(first), str(second), "--json", str(table)])

        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "VII rel" in out
        assert "-25.0%" in out
        assert table.exists()

    def test_unknown_recipe(self, tmp_path):
        """Test an unknown recipe name is invalid input."""
        code = main(["run-recipe", "--recipe", "no-such-recipe", "--run-dir", str(tmp_path)])

        assert code == EXIT_INVALID
