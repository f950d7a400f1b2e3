"""Integration tests for pytsr."""

import json

import pytest

from pytsr.corpus import read_manifest, render_record
from pytsr.dsp import write_wav
from pytsr.evaluation import read_report
from pytsr.pipeline import RUN_MANIFEST, paper_ladder_recipe, run_recipe, run_single_inference
from pytsr.system import load_system


@pytest.fixture
def integration_config(tiny_config, test_config):
    """Tiny config, skipped unless integration runs are enabled."""
    if not test_config["enable_integration"]:
        pytest.skip("set PYTSR_ENABLE_INTEGRATION=true to train the tiny ladder")
    training = tiny_config.training.model_copy(
        update={"max_epochs": test_config["integration_epochs"]}
    )
    return tiny_config.model_copy(update={"training": training})


@pytest.mark.integration
@pytest.mark.slow
class TestLadderIntegration:
    """Train, evaluate and compare the whole tiny ladder."""

    def test_full_recipe(self, tmp_path, integration_config):
        """Test every model is trained, scored and compared, then reused."""
        recipe = paper_ladder_recipe(integration_config, train_size=4, dev_size=2, test_size=3)

        summary = run_recipe(recipe, tmp_path, integration_config)

        assert all(step.executed for step in summary.steps)
        for numeral in ["i", "ii", "iii", "iv", "v", "vi", "vii"]:
            report = read_report(tmp_path / "reports" / f"eval_{numeral}.json")
            assert report.model == f"Model {numeral.upper()}"
            assert len(report.utterances) == 3
        table = json.loads((tmp_path / "reports" / "compare.json").read_text(encoding="utf-8"))
        assert table["models"][0] == "Model I"
        assert (tmp_path / "reports" / "compare.txt").exists()
        assert json.loads((tmp_path / RUN_MANIFEST).read_text())["seed"] == integration_config.seed

        again = run_recipe(recipe, tmp_path, integration_config)

        assert not any(step.executed for step in again.steps)

    def test_multi_condition_recipe(self, tmp_path, integration_config):
        """Test multi-condition training also reports clean-speech results."""
        config = integration_config.model_copy(
            update={
                "training": integration_config.training.model_copy(
                    update={"condition": "multi_condition"}
                )
            }
        )
        recipe = paper_ladder_recipe(config, train_size=4, dev_size=2, test_size=2)

        run_recipe(recipe, tmp_path, config)

        clean = read_report(tmp_path / "reports" / "eval_vii_clean.json")
        assert clean.condition == "clean"
        assert (tmp_path / "reports" / "compare_clean.txt").exists()

    def test_inference_with_trained_model(self, tmp_path, integration_config):
        """Test single-utterance inference on the final model of a run."""
        recipe = paper_ladder_recipe(integration_config, train_size=4, dev_size=2, test_size=1)
        run_recipe(recipe, tmp_path / "run", integration_config)
        checkpoint = tmp_path / "run" / "checkpoints" / "model_vii.ckpt"
        system, _ = load_system(checkpoint)
        record = read_manifest(tmp_path / "run" / "corpus" / "test.json")[0]
        corpus, stft = integration_config.corpus, integration_config.stft
        rendered = render_record(record, corpus, stft, system.label_index)
        write_wav(tmp_path / "mix.wav", rendered.mixture)
        write_wav(tmp_path / "enroll.wav", rendered.enrollment)

        result = run_single_inference(
            tmp_path / "mix.wav", tmp_path / "enroll.wav", checkpoint, out_dir=tmp_path / "out"
        )

        assert set(result.transcript) <= set(corpus.vocabulary)
        assert result.u_spk_path.exists()
