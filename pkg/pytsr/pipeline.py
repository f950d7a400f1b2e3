"""Experiment recipes, resumable run directories and single-utterance inference.

A recipe is a graph of steps: corpus simulation, training stages, checkpoint
composition, evaluation and comparison. :func:`run_recipe` executes it in
dependency order under one run directory. Every finished step leaves a marker
holding a hash of its definition, the config and its inputs; a rerun skips a
step whose marker matches and whose outputs still exist, and re-executes
everything downstream of a step that ran.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from . import __version__
from .config import ExperimentConfig, apply_overrides, config_digest, derive_seed
from .corpus import build_manifest, read_manifest, write_manifest
from .dsp import read_wav, write_wav
from .errors import InferenceError, PyTSRError, RecipeError
from .evaluation import compare_models, evaluate, read_report, render_comparison, write_report
from .log import step_logger
from .models import AudioSignal
from .system import MODEL_VARIANTS, load_system
from .trainer import compose_stage, default_ladder, run_stage
from .transducer import DecodeMode

logger = logging.getLogger(__name__)

StepKind = Literal["simulate", "stage", "compose", "evaluate", "compare"]

RUN_MANIFEST = "run.json"


class RecipeStep(BaseModel):
    """One node of a recipe graph."""

    name: str = Field(..., description="Unique step name")
    kind: StepKind = Field(..., description="What the step does")
    inputs: List[str] = Field(default_factory=list, description="Steps whose outputs it reads")
    overrides: List[str] = Field(default_factory=list, description="Dotted config overrides")
    params: Dict[str, Any] = Field(default_factory=dict, description="Kind-specific parameters")


class ExperimentRecipe(BaseModel):
    """Named step graph with its corpus sizes."""

    name: str = Field(..., description="Recipe name")
    train_size: int = Field(2000, ge=1, description="Training mixtures")
    dev_size: int = Field(200, ge=1, description="Dev mixtures")
    test_size: int = Field(300, ge=1, description="Test mixtures")
    steps: List[RecipeStep] = Field(..., description="Steps in any dependency-respecting order")


class StepStatus(BaseModel):
    """Outcome of one step in a run."""

    name: str = Field(..., description="Step name")
    hash: str = Field(..., description="Content hash of the step")
    executed: bool = Field(..., description="False when reused from an earlier run")
    outputs: List[str] = Field(default_factory=list, description="Artifacts, run-relative")


class RunSummary(BaseModel):
    """Self-description written to ``run.json``."""

    recipe: ExperimentRecipe = Field(..., description="Recipe that was run")
    config: Dict[str, Any] = Field(..., description="Base experiment config")
    config_digest: str = Field(..., description="Digest of the base config")
    seed: int = Field(..., description="Root seed")
    package_version: str = Field(__version__, description="pytsr version")
    steps: List[StepStatus] = Field(default_factory=list, description="Per-step outcome")


class InferenceResult(BaseModel):
    """Artifacts of one inference call."""

    transcript: str = Field(..., description="Decoded transcript")
    enhanced_path: Optional[Path] = Field(None, description="Extracted target WAV")
    u_spk_path: Optional[Path] = Field(None, description="Per-frame speaker entropy CSV")


def step_order(recipe: ExperimentRecipe) -> List[RecipeStep]:
    """Topological order of the recipe steps, stable w.r.t. declaration order.

    Raises:
        RecipeError: On duplicate names, unknown inputs or a cycle
    """
    by_name: Dict[str, RecipeStep] = {}
    for step in recipe.steps:
        if step.name in by_name:
            raise RecipeError(f"duplicate step name {step.name!r}")
        by_name[step.name] = step
    for step in recipe.steps:
        for name in step.inputs:
            if name not in by_name:
                raise RecipeError(f"step {step.name} reads {name!r}, which no step produces")
    order: List[RecipeStep] = []
    state: Dict[str, str] = {}

    def visit(step: RecipeStep, path: List[str]) -> None:
        if state.get(step.name) == "done":
            return
        if state.get(step.name) == "active":
            raise RecipeError("recipe has a cycle: " + " -> ".join(path + [step.name]))
        state[step.name] = "active"
        for name in step.inputs:
            visit(by_name[name], path + [step.name])
        state[step.name] = "done"
        order.append(step)

    for step in recipe.steps:
        visit(step, [])
    return order


def paper_ladder_recipe(
    config: ExperimentConfig,
    train_size: int = 2000,
    dev_size: int = 200,
    test_size: int = 300,
) -> ExperimentRecipe:
    """Simulate, train Models I-VII, evaluate each one and compare them."""
    steps = [RecipeStep(name="simulate", kind="simulate")]
    for spec in default_ladder(config):
        steps.append(
            RecipeStep(
                name=spec.name,
                kind="stage",
                inputs=["simulate"] + spec.prerequisites,
                params={"stage": spec.name},
            )
        )
    steps.append(
        RecipeStep(
            name="model_ii",
            kind="compose",
            inputs=["extractor", "rnnt_clean"],
            params={
                "sources": [
                    ["extractor", ["embedder", "extractor"]],
                    ["rnnt_clean", ["recognizer"]],
                ]
            },
        )
    )
    conditions = ["noisy"]
    if config.training.condition == "multi_condition":
        conditions.append("clean")
    evaluations = []
    for variant in MODEL_VARIANTS.values():
        for condition in conditions:
            name = f"eval_{variant.name.lower()}" + ("" if condition == "noisy" else "_clean")
            evaluations.append(name)
            steps.append(
                RecipeStep(
                    name=name,
                    kind="evaluate",
                    inputs=["simulate", variant.checkpoint],
                    params={"variant": variant.name, "condition": condition},
                )
            )
    for condition in conditions:
        suffix = "" if condition == "noisy" else "_clean"
        steps.append(
            RecipeStep(
                name=f"compare{suffix}",
                kind="compare",
                inputs=[e for e in evaluations if e.endswith("_clean") == (condition == "clean")],
            )
        )
    return ExperimentRecipe(
        name="paper-ladder",
        train_size=train_size,
        dev_size=dev_size,
        test_size=test_size,
        steps=steps,
    )


BUILTIN_RECIPES = {"paper-ladder": paper_ladder_recipe}


def _step_hash(
    step: RecipeStep,
    config: ExperimentConfig,
    recipe: ExperimentRecipe,
    inputs: Dict[str, str],
) -> str:
    payload = {
        "step": step.model_dump(mode="json"),
        "config": config_digest(config),
        "sizes": [recipe.train_size, recipe.dev_size, recipe.test_size],
        "inputs": inputs,
        "version": __version__,
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class _Run:
    """Artifact layout of one run directory."""

    def __init__(self, run_dir: Path):
        self.root = run_dir
        self.corpus = run_dir / "corpus"
        self.checkpoints = run_dir / "checkpoints"
        self.reports = run_dir / "reports"
        self.markers = run_dir / "steps"

    def marker(self, name: str) -> Path:
        return self.markers / f"{name}.json"

    def manifest(self, split: str) -> Path:
        return self.corpus / f"{split}.json"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}.ckpt"

    def report(self, name: str) -> Path:
        return self.reports / f"{name}.json"

    def relative(self, path: Path) -> str:
        return str(path.relative_to(self.root))


def _reusable(run: _Run, name: str, digest: str) -> Optional[List[str]]:
    marker = run.marker(name)
    if not marker.exists():
        return None
    try:
        saved = StepStatus.model_validate_json(marker.read_text(encoding="utf-8"))
    except ValueError:
        return None
    if saved.hash != digest or not all((run.root / o).exists() for o in saved.outputs):
        return None
    return saved.outputs


def _execute(
    step: RecipeStep,
    run: _Run,
    recipe: ExperimentRecipe,
    config: ExperimentConfig,
    progress: bool,
) -> List[Path]:
    log = step_logger(__name__, step.name)
    if step.kind == "simulate":
        outputs = []
        for split, size in (
            ("train", recipe.train_size),
            ("dev", recipe.dev_size),
            ("test", recipe.test_size),
        ):
            records = build_manifest(split, size, derive_seed(config.seed, "corpus"), config.corpus)
            outputs.append(write_manifest(records, run.manifest(split)))
        log.info("simulated %d/%d/%d records", recipe.train_size, recipe.dev_size, recipe.test_size)
        return outputs

    if step.kind == "stage":
        specs = {spec.name: spec for spec in default_ladder(config)}
        name = step.params.get("stage", step.name)
        if name not in specs:
            raise RecipeError(f"step {step.name} names unknown stage {name!r}")
        result = run_stage(
            specs[name],
            read_manifest(run.manifest("train")),
            read_manifest(run.manifest("dev")),
            {s: run.checkpoint(s) for s in specs[name].prerequisites},
            run.checkpoints,
            config,
            progress=progress,
        )
        log.info("best dev loss %.4f after %d epochs", result.best_dev_loss, result.epochs)
        return [p for p in (result.checkpoint, result.metrics) if p is not None]

    if step.kind == "compose":
        sources = [(stage, groups) for stage, groups in step.params["sources"]]
        result = compose_stage(
            step.name,
            sources,
            {stage: run.checkpoint(stage) for stage, _ in sources},
            run.checkpoints,
            config,
        )
        return [result.checkpoint]

    if step.kind == "evaluate":
        variant = MODEL_VARIANTS[step.params["variant"]]
        report = evaluate(
            run.checkpoint(variant.checkpoint),
            read_manifest(run.manifest("test")),
            mode=step.params.get("mode", "greedy"),
            condition=step.params.get("condition", "noisy"),
            label=f"Model {variant.name}",
            use_front_end=variant.use_front_end,
            progress=progress,
        )
        log.info("CER %.4f", report.overall.cer)
        return [write_report(report, run.report(step.name))]

    reports = [read_report(run.report(name)) for name in step.inputs]
    table = compare_models(reports)
    json_path = run.report(step.name)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(table.model_dump_json(indent=2), encoding="utf-8")
    text_path = run.reports / f"{step.name}.txt"
    text_path.write_text(render_comparison(table) + "\n", encoding="utf-8")
    return [json_path, text_path]


def run_recipe(
    recipe: ExperimentRecipe,
    run_dir: Union[str, Path],
    config: ExperimentConfig,
    progress: bool = False,
) -> RunSummary:
    """Execute a recipe, reusing steps finished by an earlier run.

    Args:
        recipe: Step graph
        run_dir: Directory holding every artifact of the run
        config: Base experiment config; steps may override keys
        progress: Show tqdm bars inside steps

    Returns:
        The run summary, also written to ``run_dir/run.json``

    Raises:
        RecipeError: If the recipe is not a valid graph
    """
    order = step_order(recipe)
    run = _Run(Path(run_dir))
    run.markers.mkdir(parents=True, exist_ok=True)
    summary = RunSummary(
        recipe=recipe,
        config=config.model_dump(mode="json"),
        config_digest=config_digest(config),
        seed=config.seed,
    )
    hashes: Dict[str, str] = {}
    executed: set = set()
    for step in order:
        step_config = apply_overrides(config, step.overrides) if step.overrides else config
        digest = _step_hash(step, step_config, recipe, {n: hashes[n] for n in step.inputs})
        hashes[step.name] = digest
        upstream_ran = any(name in executed for name in step.inputs)
        outputs = None if upstream_ran else _reusable(run, step.name, digest)
        log = step_logger(__name__, step.name)
        if outputs is not None:
            log.info("up to date, skipping")
            summary.steps.append(
                StepStatus(name=step.name, hash=digest, executed=False, outputs=outputs)
            )
            continue
        log.info("running %s step", step.kind)
        run.marker(step.name).unlink(missing_ok=True)
        paths = _execute(step, run, recipe, step_config, progress)
        status = StepStatus(
            name=step.name,
            hash=digest,
            executed=True,
            outputs=[run.relative(Path(p)) for p in paths],
        )
        run.marker(step.name).write_text(status.model_dump_json(indent=2), encoding="utf-8")
        executed.add(step.name)
        summary.steps.append(status)
    (run.root / RUN_MANIFEST).write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    logger.info("recipe %s finished: %d steps executed", recipe.name, len(executed))
    return summary


def run_single_inference(
    mixture_wav: Union[str, Path],
    enrollment_wav: Optional[Union[str, Path]],
    model_ckpt: Union[str, Path],
    out_dir: Optional[Union[str, Path]] = None,
    mode: DecodeMode = "greedy",
    beam_size: Optional[int] = None,
    use_front_end: Optional[bool] = None,
) -> InferenceResult:
    """Transcribe one mixture for an enrolled speaker.

    Writes ``transcript.txt``, ``enhanced.wav`` and ``u_spk.csv`` under
    ``out_dir`` when it is given (the last two only when the front end runs).

    Raises:
        InferenceError: Wrapping any failure, labelled with the step that raised it
    """
    step = "load_model"
    try:
        system, header = load_system(model_ckpt)
        if use_front_end is None:
            use_front_end = bool(header.metadata.get("use_front_end", True))
        rate = system.config.stft.sample_rate
        step = "read_audio"
        mixture = read_wav(mixture_wav, rate)
        enrollment = read_wav(enrollment_wav, rate) if enrollment_wav is not None else None
        step = "transcribe"
        dtype = system.dtype
        tokens, estimate, u_spk = system.transcribe(
            mixture.tensor(dtype),
            enrollment.tensor(dtype) if enrollment is not None else None,
            mode=mode,
            beam_size=beam_size,
            use_front_end=use_front_end,
        )
        result = InferenceResult(transcript=tokens.text)
        if out_dir is None:
            return result
        step = "write_outputs"
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "transcript.txt").write_text(tokens.text + "\n", encoding="utf-8")
        if estimate is not None:
            result.enhanced_path = out / "enhanced.wav"
            write_wav(result.enhanced_path, AudioSignal.from_tensor(estimate, rate))
        if u_spk is not None:
            result.u_spk_path = out / "u_spk.csv"
            shift = system.config.stft.shift_s
            values = u_spk.detach().double().numpy()
            frames = np.arange(len(values))
            trace = pd.DataFrame({"frame": frames, "time_s": frames * shift, "u_spk": values})
            trace.to_csv(result.u_spk_path, index=False)
        return result
    except PyTSRError as e:
        raise InferenceError(step, e) from e
    except (OSError, ValueError) as e:
        raise InferenceError(step, e) from e


def load_recipe(
    name_or_path: Union[str, Path], config: ExperimentConfig, **sizes: int
) -> ExperimentRecipe:
    """A builtin recipe by name, or a recipe JSON file.

    Raises:
        RecipeError: If the name is unknown or the file does not validate
    """
    if str(name_or_path) in BUILTIN_RECIPES:
        return BUILTIN_RECIPES[str(name_or_path)](config, **sizes)
    path = Path(name_or_path)
    try:
        return ExperimentRecipe.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise RecipeError(f"unknown recipe {name_or_path!r}") from e
    except ValueError as e:
        raise RecipeError(f"invalid recipe {path}: {e}") from e


def recipe_names() -> Sequence[str]:
    return sorted(BUILTIN_RECIPES)
