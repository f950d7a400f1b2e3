"""Tests for the stage ladder, joint objectives, loader and stage runner."""

import pandas as pd
import pytest
import torch

from pytsr.config import JointLossWeights, TrainingConfig
from pytsr.corpus import build_manifest
from pytsr.errors import ConfigError, ManifestError, StageError
from pytsr.system import TargetSpeakerSystem, load_system
from pytsr.trainer import (
    InitSource,
    StageId,
    StageSpec,
    _set_modes,
    compose_stage,
    default_ladder,
    joint_loss,
    joint_loss2,
    multi_condition_loader,
    run_stage,
    validate_ladder,
)


def _draws(loader, batches):
    return [item for _ in range(batches) for item in next(loader)]


@pytest.mark.unit
class TestJointLosses:
    """Test the joint objectives."""

    def test_joint_loss(self):
        """Test 2.0 + 0.01 * (10.0 + 1.0 * 0.5)."""
        assert joint_loss(2.0, 10.0, 0.5, JointLossWeights()) == pytest.approx(2.105)

    def test_zero_gamma(self):
        """Test gamma = 0 leaves the recognizer loss alone."""
        weights = JointLossWeights(gamma=0.0)

        assert joint_loss(2.0, 10.0, 0.5, weights) == 2.0

    def test_joint_loss_tensors(self):
        """Test the objective is differentiable in every term."""
        terms = [torch.tensor(v, requires_grad=True) for v in (2.0, 10.0, 0.5)]

        joint_loss(*terms, JointLossWeights(gamma=0.1, phi=2.0)).backward()

        assert [float(t.grad) for t in terms] == pytest.approx([1.0, 0.1, 0.2])

    def test_joint_loss2(self):
        """Test L_rnnt + L_cnu."""
        assert joint_loss2(1.5, 0.25) == 1.75


@pytest.mark.unit
class TestMultiConditionLoader:
    """Test the clean/noisy batch stream."""

    def test_noisy_only(self, train_manifest):
        """Test ratio 0 never yields clean items."""
        loader = multi_condition_loader([], train_manifest, 0.0, seed=1, batch_size=4)

        assert not any(item.clean for item in _draws(loader, 10))

    def test_clean_only(self, train_manifest):
        """Test ratio 1 always yields clean items."""
        loader = multi_condition_loader(train_manifest, [], 1.0, seed=1, batch_size=4)

        assert all(item.clean for item in _draws(loader, 10))

    def test_clean_fraction(self, train_manifest):
        """Test the clean fraction converges to the ratio."""
        loader = multi_condition_loader(
            train_manifest, train_manifest, 0.2, seed=7, batch_size=100
        )

        items = _draws(loader, 100)

        assert sum(item.clean for item in items) / len(items) == pytest.approx(0.2, abs=0.02)

    def test_seeded_stream(self, train_manifest):
        """Test the same seed replays the same batches."""
        first = multi_condition_loader(train_manifest, train_manifest, 0.5, seed=3, batch_size=4)
        second = multi_condition_loader(train_manifest, train_manifest, 0.5, seed=3, batch_size=4)

        assert _draws(first, 5) == _draws(second, 5)

    def test_items_come_from_the_right_manifest(self, train_manifest, test_manifest):
        """Test clean items draw from the clean manifest."""
        loader = multi_condition_loader(test_manifest, train_manifest, 0.5, seed=2, batch_size=8)

        for item in _draws(loader, 5):
            assert item.record in (test_manifest if item.clean else train_manifest)

    @pytest.mark.parametrize("ratio", [-0.1, 1.5])
    def test_ratio_range(self, train_manifest, ratio):
        """Test ratios outside [0, 1] are refused."""
        with pytest.raises(ConfigError):
            next(multi_condition_loader(train_manifest, train_manifest, ratio, seed=0))

    def test_empty_manifest(self, train_manifest):
        """Test a manifest the ratio needs may not be empty."""
        with pytest.raises(ManifestError):
            next(multi_condition_loader([], train_manifest, 0.2, seed=0))

    def test_batch_size(self, train_manifest):
        """Test a batch size below one is refused."""
        with pytest.raises(ConfigError):
            next(multi_condition_loader(train_manifest, train_manifest, 0.5, 0, batch_size=0))


@pytest.mark.unit
class TestLadder:
    """Test the default stage ladder."""

    def test_stage_order(self, tiny_config):
        """Test the stages and their kinds."""
        ladder = default_ladder(tiny_config)

        assert [s.name for s in ladder] == [
            "embedder",
            "extractor",
            "rnnt_clean",
            "model_iii",
            "model_iv",
            "model_v",
            "model_vi",
            "model_vii",
        ]
        assert ladder[2].stage_id == StageId.RNNT_CLEAN_PRETRAIN
        assert ladder[2].clean_ratio == 1.0
        validate_ladder(ladder)

    def test_freezing(self, tiny_config):
        """Test trainable and frozen groups per stage."""
        stages = {s.name: s for s in default_ladder(tiny_config)}

        assert stages["model_iii"].frozen == ["embedder", "extractor", "cnu"]
        assert stages["model_iv"].frozen == ["cnu"]
        assert stages["model_vii"].trainable == ["recognizer", "cnu"]
        assert stages["model_vii"].uncertainty == "both"
        assert not stages["rnnt_clean"].uses_front_end

    def test_frozen_groups_stop_tracking_gradients(self, tiny_config):
        """Test a stage freezes its frozen groups and trains the rest."""
        stage = {s.name: s for s in default_ladder(tiny_config)}["model_iii"]
        system = TargetSpeakerSystem(tiny_config)

        _set_modes(system, stage, training=True)

        assert all(p.requires_grad for p in system.group_parameters("recognizer"))
        assert not any(p.requires_grad for p in system.group_parameters("extractor"))
        assert not any(m.training for m in system.group("embedder"))

    def test_joint_learning_rates(self, tiny_config):
        """Test full joint training uses per-group rates."""
        model_iv = {s.name: s for s in default_ladder(tiny_config)}["model_iv"]
        opt = tiny_config.optimizer

        assert model_iv.learning_rates == {
            "recognizer": opt.joint_rnnt_lr,
            "extractor": opt.joint_extractor_lr,
            "embedder": opt.joint_embedder_lr,
        }

    def test_multi_condition_ratios(self, tiny_config):
        """Test multi-condition training sets the clean ratios."""
        config = tiny_config.model_copy(
            update={"training": TrainingConfig(condition="multi_condition")}
        )
        stages = {s.name: s for s in default_ladder(config)}

        assert stages["model_iii"].clean_ratio == 0.5
        assert stages["model_vi"].clean_ratio == 0.2
        assert {s.name: s for s in default_ladder(tiny_config)}["model_iii"].clean_ratio == 0.0

    def test_duplicate_stage(self, tiny_config):
        """Test duplicate names are refused."""
        ladder = default_ladder(tiny_config)

        with pytest.raises(StageError) as exc_info:
            validate_ladder(ladder + [ladder[0]])

        assert exc_info.value.code == "invalid_ladder"

    def test_prerequisite_order(self, tiny_config):
        """Test a stage may not run before its prerequisites."""
        ladder = default_ladder(tiny_config)

        with pytest.raises(StageError):
            validate_ladder([ladder[1], ladder[0]])


@pytest.mark.unit
class TestRunStageErrors:
    """Test stage preconditions."""

    def test_missing_prerequisite(self, tmp_path, tiny_config, train_manifest):
        """Test a stage refuses to start without its input checkpoints."""
        spec = default_ladder(tiny_config)[1]

        with pytest.raises(StageError) as exc_info:
            run_stage(spec, train_manifest, train_manifest, {}, tmp_path, tiny_config)

        assert exc_info.value.code == "missing_prerequisite"
        assert not (tmp_path / "extractor.ckpt").exists()

    def test_empty_dev_manifest(self, tmp_path, tiny_config, train_manifest):
        """Test a stage needs dev data."""
        spec = default_ladder(tiny_config)[0]

        with pytest.raises(ManifestError):
            run_stage(spec, train_manifest, [], {}, tmp_path, tiny_config)

    def test_compose_missing_source(self, tmp_path, tiny_config):
        """Test composition needs every source checkpoint."""
        with pytest.raises(StageError):
            compose_stage("model_ii", [("extractor", ["extractor"])], {}, tmp_path, tiny_config)

    def test_custom_stage_spec(self):
        """Test frozen groups complement the trainable ones."""
        spec = StageSpec(
            name="custom",
            stage_id=StageId.FULL_JOINT,
            trainable=["recognizer"],
            learning_rates={"recognizer": 1e-3},
            init_from=[InitSource(stage="model_iii", groups=["recognizer"])],
        )

        assert spec.prerequisites == ["model_iii"]
        assert spec.frozen == ["embedder", "extractor", "cnu"]


@pytest.mark.slow
@pytest.mark.integration
class TestRunStage:
    """Test tiny end-to-end stage runs."""

    @pytest.fixture
    def dev_manifest(self, tiny_config):
        """Two dev records."""
        return build_manifest("dev", 2, tiny_config.seed, tiny_config.corpus)

    def test_embedder_stage(self, tmp_path, tiny_config, train_manifest, dev_manifest):
        """Test only the embedder group moves and metrics are written."""
        spec = default_ladder(tiny_config)[0]

        result = run_stage(spec, train_manifest, dev_manifest, {}, tmp_path, tiny_config)

        trained, header = load_system(result.checkpoint)
        fresh = TargetSpeakerSystem(tiny_config)
        for name in ["extractor", "recognizer", "cnu"]:
            assert trained.group_checksum(name) == fresh.group_checksum(name)
        assert trained.group_checksum("embedder") != fresh.group_checksum("embedder")
        assert header.metadata["stage"] == "embedder"

        metrics = pd.read_csv(result.metrics)
        assert list(metrics.columns) == ["epoch", "train_loss", "dev_loss", "lr_embedder"]
        assert metrics["epoch"].tolist() == [1]
        assert result.best_dev_loss == pytest.approx(metrics["dev_loss"].iloc[0])

    def test_ladder_through_uncertainty(self, tmp_path, tiny_config, train_manifest, dev_manifest):
        """Test the front end stays frozen while the uncertainty recognizer trains."""
        stages = {s.name: s for s in default_ladder(tiny_config)}
        checkpoints = {}
        for name in ["embedder", "extractor", "rnnt_clean"]:
            result = run_stage(
                stages[name], train_manifest, dev_manifest, checkpoints, tmp_path, tiny_config
            )
            checkpoints[name] = result.checkpoint

        composed = compose_stage(
            "model_ii",
            [("extractor", ["embedder", "extractor"]), ("rnnt_clean", ["recognizer"])],
            checkpoints,
            tmp_path,
            tiny_config,
        )
        result = run_stage(
            stages["model_vii"], train_manifest, dev_manifest, checkpoints, tmp_path, tiny_config
        )

        front_end, _ = load_system(checkpoints["extractor"])
        model_ii, _ = load_system(composed.checkpoint)
        model_vii, header = load_system(result.checkpoint)
        for name in ["embedder", "extractor"]:
            assert model_vii.group_checksum(name) == front_end.group_checksum(name)
            assert model_ii.group_checksum(name) == front_end.group_checksum(name)
        assert model_vii.recognizer.extra_dim == 5
        assert header.metadata["parents"]["rnnt_clean"] == str(checkpoints["rnnt_clean"])
