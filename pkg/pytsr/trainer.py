"""Multi-stage training: stage ladder, freezing, joint objectives and the data loader."""

import copy
import logging
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch.optim import Adam
from torch.optim.lr_scheduler import ReduceLROnPlateau
from tqdm import tqdm

from . import __version__
from .config import (
    ExperimentConfig,
    JointLossWeights,
    UncertaintyMode,
    config_digest,
    derive_seed,
)
from .corpus import NoiseBank, RenderedMixture, render_record
from .dsp import compute_mfcc, si_snr
from .embedder import joint_speaker_term, speaker_objective
from .errors import ConfigError, ManifestError, StageError
from .extractor import extraction_loss
from .models import MixtureRecord, TokenSequence
from .nn import set_trainable
from .system import GROUPS, TargetSpeakerSystem, compose_system, save_system, with_uncertainty
from .transducer import wrapper_features
from .uncertainty import cnu_loss, normalized_oracle_uncertainty

logger = logging.getLogger(__name__)

LossValue = Union[float, torch.Tensor]


class StageId(str, Enum):
    """Kinds of training stage."""

    EMBEDDER_PRETRAIN = "embedder_pretrain"
    EXTRACTOR_JOINT = "extractor_joint"
    RNNT_CLEAN_PRETRAIN = "rnnt_clean_pretrain"
    RNNT_FINETUNE_FROZEN_FE = "rnnt_finetune_frozen_fe"
    FULL_JOINT = "full_joint"
    UNCERTAINTY_FINETUNE = "uncertainty_finetune"


class InitSource(BaseModel):
    """Groups a stage copies from an earlier stage's checkpoint."""

    stage: str = Field(..., description="Name of the producing stage")
    groups: List[str] = Field(..., description="Module groups taken from it")


class StageSpec(BaseModel):
    """One training stage of the ladder."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(..., description="Stage name; also the checkpoint file stem")
    stage_id: StageId = Field(..., description="Stage kind, selects the loss recipe")
    trainable: List[str] = Field(..., description="Module groups updated by this stage")
    learning_rates: Dict[str, float] = Field(..., description="Initial LR per trainable group")
    init_from: List[InitSource] = Field(
        default_factory=list, description="Checkpoints the stage starts from"
    )
    uncertainty: UncertaintyMode = Field("none", description="Recognizer uncertainty columns")
    clean_ratio: float = Field(0.0, ge=0, le=1, description="Probability of a clean item")

    @property
    def prerequisites(self) -> List[str]:
        return [source.stage for source in self.init_from]

    @property
    def frozen(self) -> List[str]:
        return [g for g in GROUPS if g not in self.trainable]

    @property
    def uses_front_end(self) -> bool:
        return self.stage_id not in (StageId.EMBEDDER_PRETRAIN, StageId.RNNT_CLEAN_PRETRAIN)


class StageResult(BaseModel):
    """Artifacts and summary of a finished stage."""

    name: str = Field(..., description="Stage name")
    checkpoint: Path = Field(..., description="Written checkpoint")
    metrics: Optional[Path] = Field(None, description="Per-epoch metrics CSV")
    epochs: int = Field(0, ge=0, description="Epochs run")
    best_dev_loss: Optional[float] = Field(None, description="Best dev loss reached")


class BatchItem(BaseModel):
    """One loader draw: a record and whether it is fed clean."""

    record: MixtureRecord = Field(..., description="Source record")
    clean: bool = Field(False, description="Render as an identity mixture")


def default_ladder(config: ExperimentConfig) -> List[StageSpec]:
    """The stage ladder producing Models I and III-VII; Model II is a composition."""
    opt, training = config.optimizer, config.training
    lr = opt.learning_rate
    multi = training.condition == "multi_condition"
    plain_ratio = training.clean_ratio_default if multi else 0.0
    uncertainty_ratio = training.clean_ratio_uncertainty if multi else 0.0
    front_end = [
        InitSource(stage="extractor", groups=["embedder", "extractor"]),
        InitSource(stage="rnnt_clean", groups=["recognizer"]),
    ]
    ladder = [
        StageSpec(
            name="embedder",
            stage_id=StageId.EMBEDDER_PRETRAIN,
            trainable=["embedder"],
            learning_rates={"embedder": lr},
        ),
        StageSpec(
            name="extractor",
            stage_id=StageId.EXTRACTOR_JOINT,
            trainable=["embedder", "extractor"],
            learning_rates={"embedder": lr, "extractor": lr},
            init_from=[InitSource(stage="embedder", groups=["embedder"])],
        ),
        StageSpec(
            name="rnnt_clean",
            stage_id=StageId.RNNT_CLEAN_PRETRAIN,
            trainable=["recognizer"],
            learning_rates={"recognizer": lr},
            clean_ratio=1.0,
        ),
        StageSpec(
            name="model_iii",
            stage_id=StageId.RNNT_FINETUNE_FROZEN_FE,
            trainable=["recognizer"],
            learning_rates={"recognizer": lr},
            init_from=front_end,
            clean_ratio=plain_ratio,
        ),
        StageSpec(
            name="model_iv",
            stage_id=StageId.FULL_JOINT,
            trainable=["embedder", "extractor", "recognizer"],
            learning_rates={
                "recognizer": opt.joint_rnnt_lr,
                "extractor": opt.joint_extractor_lr,
                "embedder": opt.joint_embedder_lr,
            },
            init_from=[
                InitSource(stage="model_iii", groups=["embedder", "extractor", "recognizer"])
            ],
            clean_ratio=plain_ratio,
        ),
    ]
    for name, mode in (("model_v", "spk"), ("model_vi", "speech"), ("model_vii", "both")):
        ladder.append(
            StageSpec(
                name=name,
                stage_id=StageId.UNCERTAINTY_FINETUNE,
                trainable=["recognizer", "cnu"],
                learning_rates={"recognizer": lr, "cnu": lr},
                init_from=front_end,
                uncertainty=mode,
                clean_ratio=uncertainty_ratio,
            )
        )
    return ladder


def validate_ladder(specs: Sequence[StageSpec]) -> None:
    """Check names are unique and every prerequisite precedes its stage.

    Raises:
        StageError: On a duplicate name or an out-of-order prerequisite
    """
    seen: set = set()
    for spec in specs:
        if spec.name in seen:
            raise StageError(f"duplicate stage name {spec.name!r}", code="invalid_ladder")
        for stage in spec.prerequisites:
            if stage not in seen:
                raise StageError(
                    f"stage {spec.name} needs {stage}, which does not run before it",
                    code="invalid_ladder",
                )
        seen.add(spec.name)


def joint_loss(
    rnnt: LossValue, si_snr_loss: LossValue, speaker: LossValue, weights: JointLossWeights
) -> LossValue:
    """L_rnnt + gamma * (L_si-snr + phi * L_spk); ``si_snr_loss`` is the negated SI-SNR."""
    return rnnt + weights.gamma * (si_snr_loss + weights.phi * speaker)


def joint_loss2(rnnt: LossValue, cnu: LossValue) -> LossValue:
    """L_rnnt + L_cnu."""
    return rnnt + cnu


def multi_condition_loader(
    manifests_clean: Sequence[MixtureRecord],
    manifests_noisy: Sequence[MixtureRecord],
    clean_ratio: float,
    seed: int,
    batch_size: int = 8,
) -> Iterator[List[BatchItem]]:
    """Endless seeded stream of batches mixing clean and noisy items.

    Every item is clean with probability ``clean_ratio``; clean items draw
    from ``manifests_clean`` and are rendered as identity mixtures, noisy
    items draw from ``manifests_noisy``.

    Raises:
        ConfigError: If ``clean_ratio`` is outside [0, 1]
        ManifestError: If a manifest the ratio draws from is empty
    """
    if not 0.0 <= clean_ratio <= 1.0:
        raise ConfigError(f"clean_ratio must lie in [0, 1], got {clean_ratio}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    if clean_ratio > 0 and not manifests_clean:
        raise ManifestError("the clean manifest is empty")
    if clean_ratio < 1 and not manifests_noisy:
        raise ManifestError("the noisy manifest is empty")
    rng = np.random.default_rng(seed)
    while True:
        batch = []
        for _ in range(batch_size):
            clean = bool(rng.random() < clean_ratio)
            source = manifests_clean if clean else manifests_noisy
            batch.append(BatchItem(record=source[int(rng.integers(len(source)))], clean=clean))
        yield batch


class _Context:
    """Per-stage state the loss recipes share."""

    def __init__(self, system: TargetSpeakerSystem, spec: StageSpec, seed: int):
        self.system = system
        self.spec = spec
        self.config = system.config
        self.generator = torch.Generator().manual_seed(derive_seed(seed, spec.name, "negatives"))

    def labels(self, items: Sequence[RenderedMixture]) -> torch.Tensor:
        index = self.system.label_index
        return torch.tensor(
            [index.get(item.record.target_speaker_id, -1) for item in items], dtype=torch.long
        )

    def tensor(self, signal) -> torch.Tensor:
        return signal.tensor(self.system.dtype)

    def label_ids(self, item: RenderedMixture) -> List[int]:
        return self.system.vocabulary.encode(TokenSequence.from_text(item.record.transcript))


def _embedder_loss(ctx: _Context, items: Sequence[RenderedMixture], train: bool) -> torch.Tensor:
    embedder = ctx.system.embedder
    anchors = torch.stack([embedder.embed_waveform(ctx.tensor(i.enrollment)) for i in items])
    positives = torch.stack([embedder.embed_waveform(ctx.tensor(i.clean)) for i in items])
    if train:
        labels = ctx.labels(items)
        head = ctx.system.speaker_head
    else:
        # Dev speakers are outside the training set: no cosine head.
        labels = torch.tensor([i.record.target_speaker_id for i in items], dtype=torch.long)
        head = None
    total, _ = speaker_objective(
        anchors, positives, labels, head, ctx.config.speaker_loss, ctx.generator
    )
    return total


def _speaker_term(ctx: _Context, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return joint_speaker_term(
        embeddings, labels, ctx.system.speaker_head, ctx.config.speaker_loss, ctx.generator
    )


def _extractor_loss(ctx: _Context, items: Sequence[RenderedMixture], train: bool) -> torch.Tensor:
    system = ctx.system
    losses, embeddings = [], []
    for item in items:
        e_target = system.enroll(ctx.tensor(item.enrollment))
        out = system.front_end(ctx.tensor(item.mixture), e_target)
        if not train:
            losses.append(-si_snr(out.estimate, ctx.tensor(item.clean)))
            continue
        embeddings.append(e_target)
        losses.append(
            extraction_loss(
                out.estimate,
                ctx.tensor(item.clean),
                out.estimate.new_zeros(()),
                out.log_posteriors.exp(),
                torch.from_numpy(item.labels),
                ce_weight=ctx.config.extractor.ce_weight,
            )
        )
    loss = torch.stack(losses).mean()
    if train:
        speaker = _speaker_term(ctx, torch.stack(embeddings), ctx.labels(items))
        loss = loss + ctx.config.joint.phi * speaker
    return loss


def _clean_rnnt_loss(ctx: _Context, items: Sequence[RenderedMixture], train: bool) -> torch.Tensor:
    recognizer = ctx.system.recognizer
    losses = [
        recognizer.loss(wrapper_features(ctx.tensor(i.mixture), recognizer), ctx.label_ids(i))
        for i in items
    ]
    return torch.stack(losses).mean()


def _frozen_front_end_loss(
    ctx: _Context, items: Sequence[RenderedMixture], train: bool
) -> torch.Tensor:
    system = ctx.system
    losses = []
    for item in items:
        with torch.no_grad():
            e_target = system.enroll(ctx.tensor(item.enrollment))
            out = system.front_end(ctx.tensor(item.mixture), e_target)
        features = wrapper_features(out.estimate, system.recognizer)
        losses.append(system.recognizer.loss(features, ctx.label_ids(item)))
    return torch.stack(losses).mean()


def _full_joint_loss(ctx: _Context, items: Sequence[RenderedMixture], train: bool) -> torch.Tensor:
    system = ctx.system
    rnnt, extraction, embeddings = [], [], []
    for item in items:
        e_target = system.enroll(ctx.tensor(item.enrollment))
        out = system.front_end(ctx.tensor(item.mixture), e_target)
        features = wrapper_features(out.estimate, system.recognizer)
        rnnt.append(system.recognizer.loss(features, ctx.label_ids(item)))
        extraction.append(-si_snr(out.estimate, ctx.tensor(item.clean)))
        embeddings.append(e_target)
    rnnt_mean = torch.stack(rnnt).mean()
    if not train:
        return rnnt_mean
    speaker = _speaker_term(ctx, torch.stack(embeddings), ctx.labels(items))
    return joint_loss(rnnt_mean, torch.stack(extraction).mean(), speaker, ctx.config.joint)


def _uncertainty_loss(ctx: _Context, items: Sequence[RenderedMixture], train: bool) -> torch.Tensor:
    system = ctx.system
    features_config = ctx.config.features
    rnnt, cnu = [], []
    for item in items:
        mixture = ctx.tensor(item.mixture)
        with torch.no_grad():
            out = system.front_end(mixture, system.enroll(ctx.tensor(item.enrollment)))
        unc = system.uncertainty(out.estimate, mixture, out.log_posteriors, ctx.spec.uncertainty)
        features = wrapper_features(out.estimate, system.recognizer, unc.extra)
        rnnt.append(system.recognizer.loss(features, ctx.label_ids(item)))
        if item.is_clean:
            # Clean utterances carry an all-zero oracle uncertainty.
            target = torch.zeros_like(unc.ou_hat)
        else:
            y = compute_mfcc(ctx.tensor(item.clean), features_config)
            target = normalized_oracle_uncertainty(y, unc.y_hat).to(unc.ou_hat.dtype)
        cnu.append(cnu_loss(unc.ou_hat, target))
    rnnt_mean = torch.stack(rnnt).mean()
    if not train:
        return rnnt_mean
    return joint_loss2(rnnt_mean, torch.stack(cnu).mean())


_LOSSES: Dict[StageId, Callable[[_Context, Sequence[RenderedMixture], bool], torch.Tensor]] = {
    StageId.EMBEDDER_PRETRAIN: _embedder_loss,
    StageId.EXTRACTOR_JOINT: _extractor_loss,
    StageId.RNNT_CLEAN_PRETRAIN: _clean_rnnt_loss,
    StageId.RNNT_FINETUNE_FROZEN_FE: _frozen_front_end_loss,
    StageId.FULL_JOINT: _full_joint_loss,
    StageId.UNCERTAINTY_FINETUNE: _uncertainty_loss,
}


def _check_prerequisites(spec: StageSpec, checkpoints_in: Mapping[str, Path]) -> None:
    for stage in spec.prerequisites:
        path = checkpoints_in.get(stage)
        if path is None or not Path(path).exists():
            raise StageError(
                f"stage {spec.name} requires the {stage} checkpoint, which is missing",
                code="missing_prerequisite",
            )


def configure_determinism(config: ExperimentConfig, *names: object) -> None:
    """Seed torch for one named substream and pin the CPU kernels."""
    torch.manual_seed(derive_seed(config.seed, *names))
    torch.set_num_threads(config.training.num_threads)
    if config.training.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def _build_system(
    spec: StageSpec,
    config: ExperimentConfig,
    checkpoints_in: Mapping[str, Path],
    dtype: torch.dtype,
) -> TargetSpeakerSystem:
    config = with_uncertainty(config, spec.uncertainty)
    sources = [(checkpoints_in[s.stage], s.groups) for s in spec.init_from]
    return compose_system(config, sources, dtype=dtype)


def _set_modes(system: TargetSpeakerSystem, spec: StageSpec, training: bool) -> None:
    for name in GROUPS:
        trainable = name in spec.trainable
        for module in system.group(name):
            module.train(training and trainable)
            set_trainable(module, trainable)


def _assert_frozen(system: TargetSpeakerSystem, checksums: Mapping[str, str], where: str) -> None:
    for name, expected in checksums.items():
        if system.group_checksum(name) != expected:
            raise StageError(f"frozen {name} parameters changed {where}", code="freeze_violated")


def _assert_no_gradient(system: TargetSpeakerSystem, group: str) -> None:
    for p in system.group_parameters(group):
        if p.grad is not None and bool(p.grad.abs().sum() > 0):
            raise StageError(
                f"frozen {group} parameters received a gradient", code="freeze_violated"
            )


def _render(
    items: Sequence[BatchItem],
    system: TargetSpeakerSystem,
    noise_bank: NoiseBank,
) -> List[RenderedMixture]:
    config = system.config
    return [
        render_record(
            item.record, config.corpus, config.stft, system.label_index, noise_bank, item.clean
        )
        for item in items
    ]


def _chunks(items: Sequence, size: int) -> Iterator[Sequence]:
    for start in range(0, len(items), size):
        yield items[start : start + size]


def run_stage(
    spec: StageSpec,
    train_manifest: Sequence[MixtureRecord],
    dev_manifest: Sequence[MixtureRecord],
    checkpoints_in: Mapping[str, Union[str, Path]],
    out_dir: Union[str, Path],
    config: ExperimentConfig,
    dtype: torch.dtype = torch.float32,
    progress: bool = False,
) -> StageResult:
    """Train one stage and write its checkpoint and metrics CSV.

    Frozen groups are checked bit-for-bit against their starting checksum
    after every epoch. Adam runs with one parameter group per trainable
    module group; the LR is halved when the dev loss fails to improve, and
    training stops after ``early_stop_patience`` flat epochs. The best dev
    state is the one written.

    Args:
        spec: Stage to run
        train_manifest: Training records
        dev_manifest: Dev records; the first ``dev_size`` are scored per epoch
        checkpoints_in: Checkpoint path of each finished stage, by stage name
        out_dir: Directory receiving ``<name>.ckpt`` and ``<name>_metrics.csv``
        config: Experiment config
        dtype: Parameter dtype
        progress: Show a tqdm bar over epochs

    Raises:
        StageError: If a prerequisite checkpoint is missing or a frozen group changed
        ManifestError: If a manifest is empty
    """
    checkpoints_in = {k: Path(v) for k, v in checkpoints_in.items()}
    _check_prerequisites(spec, checkpoints_in)
    if not dev_manifest:
        raise ManifestError(f"stage {spec.name} has an empty dev manifest")
    training = config.training
    configure_determinism(config, "stage", spec.name)
    system = _build_system(spec, config, checkpoints_in, dtype)
    ctx = _Context(system, spec, config.seed)
    loss_fn = _LOSSES[spec.stage_id]
    noise_bank = NoiseBank(config.corpus.noise_kinds, config.stft.sample_rate)

    _set_modes(system, spec, training=True)
    frozen = {name: system.group_checksum(name) for name in spec.frozen}
    optimizer = Adam(
        [
            {"params": system.group_parameters(g), "lr": spec.learning_rates[g], "name": g}
            for g in spec.trainable
        ]
    )
    scheduler = ReduceLROnPlateau(
        optimizer,
        mode="min",
        factor=config.optimizer.plateau_factor,
        patience=config.optimizer.plateau_patience,
    )
    trainable_params = [p for g in spec.trainable for p in system.group_parameters(g)]
    loader = multi_condition_loader(
        train_manifest,
        train_manifest,
        spec.clean_ratio,
        derive_seed(config.seed, "loader", spec.name),
        training.batch_size,
    )
    dev_items = [
        BatchItem(record=r, clean=spec.clean_ratio >= 1.0)
        for r in dev_manifest[: training.dev_size]
    ]
    dev_rendered = _render(dev_items, system, noise_bank)

    rows = []
    best_loss = float("inf")
    best_state: Dict[str, Dict[str, torch.Tensor]] = {}
    flat_epochs = 0
    epoch = 0
    for epoch in tqdm(range(1, training.max_epochs + 1), desc=spec.name, disable=not progress):
        _set_modes(system, spec, training=True)
        train_losses = []
        for _ in range(training.steps_per_epoch):
            items = _render(next(loader), system, noise_bank)
            optimizer.zero_grad()
            loss = loss_fn(ctx, items, True)
            loss.backward()
            if spec.stage_id == StageId.UNCERTAINTY_FINETUNE:
                _assert_no_gradient(system, "extractor")
            torch.nn.utils.clip_grad_norm_(trainable_params, config.optimizer.grad_clip)
            optimizer.step()
            train_losses.append(float(loss.detach()))
        _assert_frozen(system, frozen, f"during epoch {epoch} of {spec.name}")

        _set_modes(system, spec, training=False)
        with torch.no_grad():
            dev_losses = [
                float(loss_fn(ctx, chunk, False)) * len(chunk)
                for chunk in _chunks(dev_rendered, training.batch_size)
            ]
        dev_loss = sum(dev_losses) / len(dev_rendered)
        train_loss = float(np.mean(train_losses))
        row = {"epoch": epoch, "train_loss": train_loss, "dev_loss": dev_loss}
        row.update({f"lr_{group['name']}": group["lr"] for group in optimizer.param_groups})
        rows.append(row)
        logger.info(
            "%s epoch %d: train %.4f dev %.4f", spec.name, epoch, train_loss, dev_loss
        )
        scheduler.step(dev_loss)
        if dev_loss < best_loss:
            best_loss = dev_loss
            best_state = {g: copy.deepcopy(system.group_state(g)) for g in spec.trainable}
            flat_epochs = 0
        else:
            flat_epochs += 1
            if flat_epochs >= training.early_stop_patience:
                logger.info("%s: early stop after %d flat epochs", spec.name, flat_epochs)
                break

    for group, state in best_state.items():
        system.load_group(group, state)
    _assert_frozen(system, frozen, f"after {spec.name}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / f"{spec.name}_metrics.csv"
    pd.DataFrame(rows).to_csv(metrics_path, index=False)
    checkpoint = save_system(
        system,
        out_dir / f"{spec.name}.ckpt",
        metadata=_provenance(spec.name, spec.stage_id.value, checkpoints_in, spec, config),
    )
    logger.info("%s: wrote %s (best dev %.4f)", spec.name, checkpoint, best_loss)
    return StageResult(
        name=spec.name,
        checkpoint=checkpoint,
        metrics=metrics_path,
        epochs=epoch,
        best_dev_loss=best_loss,
    )


def _provenance(
    name: str,
    stage_id: str,
    checkpoints_in: Mapping[str, Path],
    spec: Optional[StageSpec],
    config: ExperimentConfig,
) -> Dict[str, object]:
    parents = spec.prerequisites if spec is not None else sorted(checkpoints_in)
    return {
        "stage": name,
        "stage_id": stage_id,
        "parents": {stage: str(checkpoints_in[stage]) for stage in parents},
        "seed": config.seed,
        "config_digest": config_digest(config),
        "package_version": __version__,
        "use_front_end": spec.uses_front_end if spec is not None else True,
    }


def compose_stage(
    name: str,
    sources: Sequence[Tuple[str, Sequence[str]]],
    checkpoints_in: Mapping[str, Union[str, Path]],
    out_dir: Union[str, Path],
    config: ExperimentConfig,
    dtype: torch.dtype = torch.float32,
) -> StageResult:
    """Write a checkpoint assembled from finished stages without training (Model II).

    Args:
        name: Output stage name
        sources: (stage name, groups) pairs
        checkpoints_in: Checkpoint path of each finished stage
        out_dir: Output directory
        config: Experiment config

    Raises:
        StageError: If a source checkpoint is missing
    """
    checkpoints_in = {k: Path(v) for k, v in checkpoints_in.items()}
    spec_like = [InitSource(stage=stage, groups=list(groups)) for stage, groups in sources]
    for source in spec_like:
        path = checkpoints_in.get(source.stage)
        if path is None or not path.exists():
            raise StageError(
                f"stage {name} requires the {source.stage} checkpoint, which is missing",
                code="missing_prerequisite",
            )
    configure_determinism(config, "stage", name)
    system = compose_system(
        config, [(checkpoints_in[s.stage], s.groups) for s in spec_like], dtype=dtype
    )
    used = {s.stage: checkpoints_in[s.stage] for s in spec_like}
    checkpoint = save_system(
        system,
        Path(out_dir) / f"{name}.ckpt",
        metadata=_provenance(name, "composition", used, None, config),
    )
    logger.info("%s: composed %s", name, ", ".join(used))
    return StageResult(name=name, checkpoint=checkpoint)
