"""Character error rate scoring, model evaluation and report comparison."""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from pydantic import ValidationError
from tqdm import tqdm

from .corpus import NoiseBank, manifest_digest, render_record
from .errors import ManifestError, PyTSRError
from .models import (
    ComparisonRow,
    ComparisonTable,
    ErrorBreakdown,
    EvaluationReport,
    MixtureRecord,
    TokenSequence,
    UtteranceResult,
)
from .system import load_system
from .transducer import DecodeMode
from .uncertainty import entropy_by_overlap

logger = logging.getLogger(__name__)

Tokens = Union[TokenSequence, str, Sequence[str]]

SLICES = ("1", "2", "3")


def _tokens(value: Tokens) -> List[str]:
    if isinstance(value, TokenSequence):
        return value.tokens
    return list(value)


def edit_distance_table(hyp: Sequence[str], ref: Sequence[str]) -> np.ndarray:
    """(|ref|+1, |hyp|+1) Levenshtein table with unit costs."""
    table = np.zeros((len(ref) + 1, len(hyp) + 1), dtype=np.int64)
    table[:, 0] = np.arange(len(ref) + 1)
    table[0, :] = np.arange(len(hyp) + 1)
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            diagonal = table[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            table[i, j] = min(diagonal, table[i - 1, j] + 1, table[i, j - 1] + 1)
    return table


def edit_align(hyp: Tokens, ref: Tokens) -> ErrorBreakdown:
    """Minimal-cost alignment counts of a hypothesis against a reference.

    The backtrace prefers a match, then substitution, then deletion, then
    insertion, so the counts are reproducible.

    Args:
        hyp: Decoded tokens
        ref: Reference tokens

    Returns:
        Insertion, deletion and substitution counts with the reference length
    """
    h, r = _tokens(hyp), _tokens(ref)
    table = edit_distance_table(h, r)
    i, j = len(r), len(h)
    insertions = deletions = substitutions = 0
    while i > 0 or j > 0:
        cost = table[i, j]
        if i > 0 and j > 0 and r[i - 1] == h[j - 1] and table[i - 1, j - 1] == cost:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and table[i - 1, j - 1] + 1 == cost:
            substitutions += 1
            i, j = i - 1, j - 1
        elif i > 0 and table[i - 1, j] + 1 == cost:
            deletions += 1
            i -= 1
        else:
            insertions += 1
            j -= 1
    return ErrorBreakdown(
        insertions=insertions,
        deletions=deletions,
        substitutions=substitutions,
        reference_length=len(r),
    )


def summarize(results: Sequence[UtteranceResult]) -> Dict[str, ErrorBreakdown]:
    """Length-weighted totals per speaker-count slice."""
    slices = {key: ErrorBreakdown() for key in SLICES}
    for result in results:
        key = str(result.num_speakers)
        slices[key] = slices[key] + result.breakdown
    return slices


def overall(slices: Dict[str, ErrorBreakdown]) -> ErrorBreakdown:
    total = ErrorBreakdown()
    for breakdown in slices.values():
        total = total + breakdown
    return total


def evaluate(
    model_ckpt: Union[str, Path],
    manifest: Sequence[MixtureRecord],
    mode: DecodeMode = "greedy",
    condition: str = "noisy",
    beam_size: Optional[int] = None,
    label: Optional[str] = None,
    use_front_end: Optional[bool] = None,
    progress: bool = False,
) -> EvaluationReport:
    """Decode every record of a manifest and score it.

    Slices are keyed by the total number of speakers present. A record whose
    decode raises (a pytsr error, or a torch runtime or value error) is scored
    as all deletions and listed in ``failures``.

    Args:
        model_ckpt: System checkpoint
        manifest: Test records
        mode: ``"greedy"`` or ``"beam"``
        condition: ``"noisy"`` decodes the mixtures, ``"clean"`` the clean targets
        beam_size: Beam width (config default when unset)
        label: Report label; defaults to the checkpoint's stage name
        use_front_end: Override the checkpoint's front-end setting
        progress: Show a tqdm bar

    Raises:
        ManifestError: If the manifest is empty
    """
    if not manifest:
        raise ManifestError("cannot evaluate an empty manifest")
    system, header = load_system(model_ckpt)
    config = system.config
    if use_front_end is None:
        use_front_end = bool(header.metadata.get("use_front_end", True))
    label = label or str(header.metadata.get("stage", Path(model_ckpt).stem))
    noise_bank = NoiseBank(config.corpus.noise_kinds, config.stft.sample_rate)
    results: List[UtteranceResult] = []
    entropies: List[np.ndarray] = []
    overlaps: List[np.ndarray] = []
    dtype = system.dtype
    for record in tqdm(manifest, desc=f"eval {label}", disable=not progress):
        reference = TokenSequence.from_text(record.transcript)
        try:
            item = render_record(
                record,
                config.corpus,
                config.stft,
                system.label_index,
                noise_bank,
                clean=condition == "clean",
            )
            hypothesis, _, u_spk = system.transcribe(
                item.mixture.tensor(dtype),
                item.enrollment.tensor(dtype),
                mode=mode,
                beam_size=beam_size,
                use_front_end=use_front_end,
            )
        except (PyTSRError, RuntimeError, ValueError) as e:
            logger.warning("decode failed on %s: %s", record.mixture_id, e)
            results.append(
                UtteranceResult(
                    mixture_id=record.mixture_id,
                    num_speakers=record.num_speakers,
                    reference=reference.text,
                    breakdown=edit_align([], reference),
                    failed=True,
                    error=str(e),
                )
            )
            continue
        if u_spk is not None:
            entropies.append(u_spk.detach().double().numpy())
            overlaps.append(item.overlap)
        results.append(
            UtteranceResult(
                mixture_id=record.mixture_id,
                num_speakers=record.num_speakers,
                reference=reference.text,
                hypothesis=hypothesis.text,
                breakdown=edit_align(hypothesis, reference),
            )
        )
    slices = summarize(results)
    report = EvaluationReport(
        model=label,
        manifest_digest=manifest_digest(manifest),
        condition=condition,
        mode=mode,
        overall=overall(slices),
        slices=slices,
        failures=[r.mixture_id for r in results if r.failed],
        utterances=results,
    )
    if entropies:
        on, off = entropy_by_overlap(
            torch.from_numpy(np.concatenate(entropies)), np.concatenate(overlaps)
        )
        report.entropy_overlap = None if np.isnan(on) else on
        report.entropy_non_overlap = None if np.isnan(off) else off
    logger.info(
        "%s on %d records (%s, %s): CER %.4f",
        label,
        len(results),
        condition,
        mode,
        report.overall.cer,
    )
    return report


def write_report(report: EvaluationReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path


def read_report(path: Union[str, Path]) -> EvaluationReport:
    """Load a report JSON file.

    Raises:
        ManifestError: If the file is missing or does not validate
    """
    path = Path(path)
    try:
        return EvaluationReport.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ManifestError(f"report not found: {path}") from e
    except ValidationError as e:
        raise ManifestError(f"invalid report {path}: {e}") from e


def relative_change(value: float, baseline: float) -> Optional[float]:
    """(value - baseline) / baseline; 0 when both are zero, None when only the baseline is."""
    if baseline == 0:
        return 0.0 if value == 0 else None
    return (value - baseline) / baseline


def _metrics(report: EvaluationReport) -> Dict[str, float]:
    metrics = {
        "cer": report.overall.cer,
        "insertions": float(report.overall.insertions),
        "deletions": float(report.overall.deletions),
        "substitutions": float(report.overall.substitutions),
    }
    for key in SLICES:
        breakdown = report.slices.get(key, ErrorBreakdown())
        metrics[f"cer_{key}spk"] = breakdown.cer
        metrics[f"insertions_{key}spk"] = float(breakdown.insertions)
    return metrics


def compare_models(reports: Sequence[EvaluationReport]) -> ComparisonTable:
    """Metrics of several reports side by side, relative to the first.

    Raises:
        ManifestError: If no reports are given or they cover different manifests
    """
    if not reports:
        raise ManifestError("nothing to compare")
    digests = {r.manifest_digest for r in reports}
    if len(digests) > 1:
        raise ManifestError(
            "reports cover different manifests: " + ", ".join(r.model for r in reports),
            code="manifest_mismatch",
        )
    values = [_metrics(r) for r in reports]
    rows = []
    for metric in values[0]:
        column = [v[metric] for v in values]
        rows.append(
            ComparisonRow(
                metric=metric,
                values=column,
                relative_change=[relative_change(v, column[0]) for v in column],
            )
        )
    return ComparisonTable(
        models=[r.model for r in reports], manifest_digest=reports[0].manifest_digest, rows=rows
    )


def render_comparison(table: ComparisonTable) -> str:
    """Aligned text table: one value and one relative-change column per model."""
    data: Dict[str, List[str]] = {}
    for i, model in enumerate(table.models):
        data[model] = [f"{row.values[i]:.4g}" for row in table.rows]
        if i > 0:
            data[f"{model} rel"] = [_percent(row.relative_change[i]) for row in table.rows]
    frame = pd.DataFrame(data, index=[row.metric for row in table.rows])
    return frame.to_string()


def _percent(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:+.1f}%"
