"""Synthetic speakers, utterances, noise, rooms and mixture manifests.

Every voice is a harmonic source shaped by per-token formants and a fixed
speaker resonance. Mixtures follow the simulation recipe: 0-2 interfering
speakers at a per-interferer SIR, ambient noise at an SNR measured against
the total speech power, and a short synthetic room response on every source.
"""

import hashlib
import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.signal
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from tqdm import tqdm

from .config import CorpusConfig, StftConfig
from .dsp import encode_wav, frame_signal, gain_for_sir, signal_power
from .errors import ManifestError, SignalError
from .models import (
    MANIFEST_SCHEMA_VERSION,
    AudioSignal,
    MixtureRecord,
    SpeakerProfile,
    TokenSequence,
    UtteranceRef,
)

logger = logging.getLogger(__name__)

Split = Literal["train", "dev", "test"]

SPLIT_OFFSETS: Dict[str, int] = {"train": 0, "dev": 1000, "test": 2000}
_SPLIT_STREAM = {"train": 11, "dev": 13, "test": 17}

# Golden-ratio style low-discrepancy steps keep speakers and tokens spread out.
_PHI = 0.6180339887498949
_SQRT2_FRAC = 0.4142135623730951

SILENCE_LABEL = -1


def speaker_pool(split: Split, config: CorpusConfig) -> List[int]:
    """Speaker ids of a split; pools of different splits never intersect."""
    size = {
        "train": config.num_train_speakers,
        "dev": config.num_dev_speakers,
        "test": config.num_test_speakers,
    }[split]
    return [SPLIT_OFFSETS[split] + i for i in range(size)]


def speaker_profile(speaker_id: int) -> SpeakerProfile:
    """Deterministic voice parameters of a speaker id."""
    u1 = (speaker_id * _PHI + 0.11) % 1.0
    u2 = (speaker_id * _SQRT2_FRAC + 0.37) % 1.0
    u3 = (speaker_id * 0.7548776662 + 0.53) % 1.0
    return SpeakerProfile(
        speaker_id=speaker_id,
        base_pitch_hz=90.0 + 170.0 * u1,
        formant_scale=0.85 + 0.35 * u3,
        speaking_rate=0.85 + 0.3 * ((u1 + u2) % 1.0),
        timbre_hz=1700.0 + 2000.0 * u2,
        breathiness=0.02 + 0.1 * u3,
    )


def _token_formants(index: int) -> Tuple[float, float]:
    f1 = 280.0 + 520.0 * ((index * _PHI + 0.2) % 1.0)
    f2 = 900.0 + 1400.0 * ((index * _SQRT2_FRAC + 0.65) % 1.0)
    return f1, f2


def _resonance(freqs: np.ndarray, centre: float, bandwidth: float) -> np.ndarray:
    return 1.0 / (1.0 + ((freqs - centre) / bandwidth) ** 2)


def synth_utterance(
    profile: SpeakerProfile,
    transcript: TokenSequence,
    seed: int,
    config: Optional[CorpusConfig] = None,
    sample_rate: int = 16000,
) -> AudioSignal:
    """Render one utterance of a synthetic voice.

    Each token occupies ``token_duration_s / speaking_rate`` seconds, so the
    duration is exactly proportional to the transcript length.

    Args:
        profile: Voice parameters
        transcript: Tokens over the configured vocabulary
        seed: Seed of the jitter, phase and aspiration streams
        config: Corpus config (vocabulary, token duration)
        sample_rate: Output sample rate

    Raises:
        SignalError: On an empty transcript or an out-of-vocabulary token
    """
    config = config or CorpusConfig()
    if len(transcript) == 0:
        raise SignalError("cannot synthesise an empty transcript", code="empty_transcript")
    try:
        indices = [config.vocabulary.index(token) for token in transcript.tokens]
    except ValueError as e:
        raise SignalError(f"token outside the vocabulary: {e}", code="unknown_token") from e

    rng = np.random.default_rng([profile.speaker_id, seed])
    token_samples = int(round(config.token_duration_s / profile.speaking_rate * sample_rate))
    total = token_samples * len(indices)
    nyquist = sample_rate / 2.0
    num_harmonics = int(min(4000.0, nyquist * 0.9) // profile.base_pitch_hz)
    harmonics = np.arange(1, num_harmonics + 1, dtype=np.float64)

    # Piecewise pitch contour: per-token offset plus a slow seeded vibrato.
    t = np.arange(total) / sample_rate
    token_of_sample = np.repeat(np.arange(len(indices)), token_samples)
    token_pitch = np.array([1.0 + 0.04 * ((i % 3) - 1) for i in indices])
    jitter = 1.0 + 0.015 * rng.standard_normal()
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * (4.0 + rng.uniform(0, 2)) * t)
    f0 = profile.base_pitch_hz * jitter * token_pitch[token_of_sample] * vibrato
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    initial = rng.uniform(0, 2 * np.pi, size=num_harmonics)

    voiced = np.zeros(total)
    fade = max(1, int(0.01 * sample_rate))
    envelope = np.ones(token_samples)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, fade))
    envelope[:fade] = ramp
    envelope[-fade:] = ramp[::-1]
    for k, index in enumerate(indices):
        span = slice(k * token_samples, (k + 1) * token_samples)
        f1, f2 = _token_formants(index)
        mean_f0 = float(f0[span].mean())
        freqs = harmonics * mean_f0
        gains = (
            _resonance(freqs, f1 * profile.formant_scale, 80.0)
            + 0.7 * _resonance(freqs, f2 * profile.formant_scale, 120.0)
            + 1.2 * _resonance(freqs, profile.timbre_hz, 200.0)
        ) / harmonics**0.5
        gains[freqs >= nyquist] = 0.0
        waves = np.sin(np.outer(phase[span], harmonics) + initial)
        voiced[span] = (waves @ gains) * envelope

    sos = scipy.signal.butter(
        2,
        [0.6 * profile.timbre_hz, min(1.4 * profile.timbre_hz, nyquist * 0.95)],
        btype="bandpass",
        fs=sample_rate,
        output="sos",
    )
    aspiration = scipy.signal.sosfilt(sos, rng.standard_normal(total))
    aspiration *= np.sqrt(signal_power(voiced) / max(signal_power(aspiration), 1e-12))
    samples = voiced + profile.breathiness * aspiration
    samples = 0.5 * samples / max(float(np.max(np.abs(samples))), 1e-12)
    return AudioSignal(samples=samples, sample_rate=sample_rate)


@lru_cache(maxsize=4096)
def _cached_utterance(
    speaker_id: int, transcript: str, seed: int, vocabulary: str, token_duration_s: float
) -> np.ndarray:
    config = CorpusConfig(vocabulary=vocabulary, token_duration_s=token_duration_s)
    signal = synth_utterance(
        speaker_profile(speaker_id), TokenSequence.from_text(transcript), seed, config
    )
    samples = signal.samples
    samples.setflags(write=False)
    return samples


def render_utterance(ref: UtteranceRef, config: CorpusConfig) -> np.ndarray:
    """Samples of an utterance reference (memoised, read-only)."""
    return _cached_utterance(
        ref.speaker_id, ref.transcript, ref.seed, config.vocabulary, config.token_duration_s
    )


class NoiseBank:
    """Procedural ambient noises: pink, brown and babble-like modulated noise."""

    KINDS = ("pink", "brown", "babble")

    def __init__(self, kinds: Sequence[str] = KINDS, sample_rate: int = 16000):
        unknown = set(kinds) - set(self.KINDS)
        if unknown:
            raise ManifestError(f"unknown noise kinds: {sorted(unknown)}")
        self.kinds = tuple(kinds)
        self.sample_rate = sample_rate

    def render(
        self,
        kind: str,
        num_samples: int,
        seed: int = 0,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        """Unit-power noise of ``num_samples`` samples."""
        if kind not in self.kinds:
            raise ManifestError(f"noise kind {kind!r} is not in the bank {self.kinds}")
        rng = rng if rng is not None else np.random.default_rng(seed)
        white = rng.standard_normal(num_samples)
        if kind == "pink":
            spectrum = np.fft.rfft(white)
            freqs = np.fft.rfftfreq(num_samples, d=1.0 / self.sample_rate)
            spectrum /= np.sqrt(np.maximum(freqs, 20.0))
            noise = np.fft.irfft(spectrum, n=num_samples)
        elif kind == "brown":
            noise = np.cumsum(white)
            noise = scipy.signal.detrend(noise)
            sos = scipy.signal.butter(1, 20.0, btype="highpass", fs=self.sample_rate, output="sos")
            noise = scipy.signal.sosfilt(sos, noise)
        else:
            sos = scipy.signal.butter(
                4, [200.0, 3500.0], btype="bandpass", fs=self.sample_rate, output="sos"
            )
            noise = scipy.signal.sosfilt(sos, white)
            t = np.arange(num_samples) / self.sample_rate
            rates = rng.uniform(2.0, 6.0, size=4)
            offsets = rng.uniform(0, 2 * np.pi, size=4)
            modulation = 1.0 + 0.5 * np.mean(
                np.sin(2 * np.pi * np.outer(t, rates) + offsets), axis=1
            )
            noise = noise * modulation
        power = signal_power(noise)
        return noise / np.sqrt(power) if power > 0 else noise


def make_rir(rir_id: int, config: CorpusConfig, sample_rate: int = 16000) -> np.ndarray:
    """Synthetic room response: a direct path and an exponentially decaying echo tail.

    Returns ``[1.0]`` (identity) when the corpus is not reverberant.
    """
    if not config.reverberant:
        return np.ones(1)
    rng = np.random.default_rng([rir_id, 0x52])
    length = max(2, int(config.max_rir_s * sample_rate))
    tau = rng.uniform(0.004, 0.012) * sample_rate
    t = np.arange(length)
    rir = 0.3 * rng.standard_normal(length) * np.exp(-t / tau)
    rir[0] = 1.0
    return rir


def apply_rir(samples: np.ndarray, rir: np.ndarray) -> np.ndarray:
    """Convolve with a room response, keeping the input length."""
    if rir.shape[0] == 1:
        return samples * rir[0]
    return scipy.signal.fftconvolve(samples, rir)[: samples.shape[0]]


class MixtureComponents(BaseModel):
    """Scaled, placed sources that sum to a mixture."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    target: np.ndarray = Field(..., description="Reverberant target")
    interferers: List[np.ndarray] = Field(default_factory=list, description="Scaled interferers")
    noise: np.ndarray = Field(..., description="Scaled ambient noise (zeros when absent)")
    speaker_ids: List[int] = Field(..., description="Target id, then interferer ids")

    @property
    def speech(self) -> np.ndarray:
        return self.target + sum(self.interferers, np.zeros_like(self.target))

    @property
    def mixture(self) -> np.ndarray:
        return self.speech + self.noise


def _place(samples: np.ndarray, length: int, offset: float) -> np.ndarray:
    placed = np.zeros(length)
    start = min(int(round(offset * length)), length - 1)
    segment = samples[: length - start]
    placed[start : start + segment.shape[0]] = segment
    return placed


def mixture_components(
    record: MixtureRecord,
    sources: Sequence[np.ndarray],
    noise_bank: NoiseBank,
    config: CorpusConfig,
    rng: Optional[np.random.Generator] = None,
) -> MixtureComponents:
    """Reverberate, place and scale every source of a record.

    Args:
        record: Manifest record
        sources: Dry target followed by the dry interferers
        noise_bank: Ambient noise generator
        config: Corpus config
        rng: Noise stream; defaults to one seeded with ``record.noise_seed``
    """
    if len(sources) != 1 + record.interferer_count:
        raise ManifestError(
            f"{record.mixture_id}: expected {1 + record.interferer_count} sources, "
            f"got {len(sources)}"
        )
    target = apply_rir(np.asarray(sources[0], dtype=np.float64), make_rir(record.rir_id, config))
    length = target.shape[0]
    interferers = []
    for k, (source, offset) in enumerate(zip(sources[1:], record.interferer_offsets)):
        rir = make_rir((record.rir_id + k + 1) % config.num_rirs, config)
        placed = _place(apply_rir(np.asarray(source, dtype=np.float64), rir), length, offset)
        interferers.append(placed * gain_for_sir(target, placed, record.sir_db))
    components = MixtureComponents(
        target=target,
        interferers=interferers,
        noise=np.zeros(length),
        speaker_ids=[record.target_speaker_id] + [i.speaker_id for i in record.interferers],
    )
    if record.snr_db is not None:
        noise = noise_bank.render(record.noise_kind, length, record.noise_seed, rng=rng)
        components.noise = noise * gain_for_sir(components.speech, noise, record.snr_db)
    return components


def simulate_mixture(
    record: MixtureRecord,
    sources: Sequence[np.ndarray],
    noise_bank: NoiseBank,
    rng: Optional[np.random.Generator] = None,
    config: Optional[CorpusConfig] = None,
    sample_rate: int = 16000,
) -> Tuple[AudioSignal, AudioSignal]:
    """Mix a record's sources.

    Returns:
        (mixture, clean target); the clean target is the reverberant target alone
    """
    components = mixture_components(record, sources, noise_bank, config or CorpusConfig(), rng)
    return (
        AudioSignal(samples=components.mixture, sample_rate=sample_rate),
        AudioSignal(samples=components.target, sample_rate=sample_rate),
    )


def frame_labels(
    components: MixtureComponents,
    stft: StftConfig,
    label_index: Dict[int, int],
    active_ratio: float = 0.05,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-STFT-frame dominant speaker labels and overlap mask.

    A frame is labelled with the index (in ``label_index``) of the speaker
    with the largest frame energy; silent frames and speakers outside the
    label set get ``-1``. A speaker is active in a frame when its frame
    energy exceeds ``active_ratio`` times its own peak frame energy; a frame
    overlaps when at least two speakers are active.
    """
    signals = [components.target] + list(components.interferers)
    energies = np.stack(
        [
            frame_signal(torch.from_numpy(s), stft.window_samples, stft.shift_samples)
            .pow(2)
            .sum(-1)
            .numpy()
            for s in signals
        ]
    )
    dominant = np.argmax(energies, axis=0)
    labels = np.array(
        [label_index.get(components.speaker_ids[d], SILENCE_LABEL) for d in dominant],
        dtype=np.int64,
    )
    labels[energies.max(axis=0) <= 1e-10] = SILENCE_LABEL
    peaks = np.maximum(energies.max(axis=1, keepdims=True), 1e-12)
    active = energies > active_ratio * peaks
    return labels, active.sum(axis=0) >= 2


class RenderedMixture(BaseModel):
    """In-memory rendering of one record with its training side information."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    record: MixtureRecord = Field(..., description="Source record")
    mixture: AudioSignal = Field(..., description="Mixture (or the clean target when clean)")
    clean: AudioSignal = Field(..., description="Reverberant clean target")
    enrollment: AudioSignal = Field(..., description="Dry enrollment utterance")
    labels: np.ndarray = Field(..., description="Per-STFT-frame dominant speaker labels")
    overlap: np.ndarray = Field(..., description="Per-STFT-frame overlap mask")
    is_clean: bool = Field(False, description="Identity mixture (mixture = target)")


def render_record(
    record: MixtureRecord,
    config: CorpusConfig,
    stft: StftConfig,
    label_index: Dict[int, int],
    noise_bank: Optional[NoiseBank] = None,
    clean: bool = False,
) -> RenderedMixture:
    """Synthesise and mix one record in memory.

    With ``clean=True`` the record is rendered as an identity mixture:
    the target alone, no interferers and no noise.
    """
    noise_bank = noise_bank or NoiseBank(config.noise_kinds, stft.sample_rate)
    sources = [render_utterance(record.target, config)]
    sources += [render_utterance(ref, config) for ref in record.interferers]
    if clean:
        record = record.model_copy(
            update={"interferers": [], "interferer_offsets": [], "snr_db": None}
        )
        sources = sources[:1]
    components = mixture_components(record, sources, noise_bank, config)
    labels, overlap = frame_labels(components, stft, label_index)
    clean_target = AudioSignal(samples=components.target, sample_rate=stft.sample_rate)
    return RenderedMixture(
        record=record,
        mixture=AudioSignal(samples=components.mixture, sample_rate=stft.sample_rate),
        clean=clean_target,
        enrollment=AudioSignal(
            samples=render_utterance(record.enrollment, config), sample_rate=stft.sample_rate
        ),
        labels=labels,
        overlap=overlap,
        is_clean=clean,
    )


def _random_transcript(rng: np.random.Generator, vocabulary: str, length: int) -> str:
    return "".join(vocabulary[i] for i in rng.integers(0, len(vocabulary), size=length))


def build_manifest(
    split: Split, size: int, seed: int, config: Optional[CorpusConfig] = None
) -> List[MixtureRecord]:
    """Sample ``size`` mixture records for a split.

    Every categorical field is drawn uniformly from its configured set.
    The result is a pure function of (split, size, seed, config).

    Raises:
        ManifestError: If ``size < 1`` or the speaker pool is too small
    """
    config = config or CorpusConfig()
    if size < 1:
        raise ManifestError(f"manifest size must be at least 1, got {size}")
    pool = speaker_pool(split, config)
    if len(pool) < max(config.interferer_counts) + 1:
        raise ManifestError(
            f"{split} pool of {len(pool)} speakers cannot host "
            f"{max(config.interferer_counts)} interferers"
        )
    rng = np.random.default_rng([seed, _SPLIT_STREAM[split]])

    def utterance(speaker_id: int, length: int) -> UtteranceRef:
        return UtteranceRef(
            speaker_id=speaker_id,
            transcript=_random_transcript(rng, config.vocabulary, length),
            seed=int(rng.integers(0, 2**31 - 1)),
        )

    records = []
    for i in range(size):
        target_id = int(rng.choice(pool))
        count = int(rng.choice(config.interferer_counts))
        others = [s for s in pool if s != target_id]
        interferer_ids = [int(s) for s in rng.choice(others, size=count, replace=False)]
        target = utterance(
            target_id, int(rng.integers(config.min_tokens, config.max_tokens + 1))
        )
        enrollment = utterance(target_id, config.enrollment_tokens)
        interferers = [
            utterance(s, int(rng.integers(config.min_tokens, config.max_tokens + 1)))
            for s in interferer_ids
        ]
        records.append(
            MixtureRecord(
                mixture_id=f"{split}-{seed}-{i:06d}",
                split=split,
                target=target,
                enrollment=enrollment,
                interferers=interferers,
                interferer_offsets=[
                    float(rng.uniform(0.0, config.max_interferer_offset)) for _ in interferers
                ],
                sir_db=float(rng.choice(config.sir_choices_db)),
                snr_db=float(rng.choice(config.snr_choices_db)),
                noise_kind=str(rng.choice(config.noise_kinds)),
                noise_seed=int(rng.integers(0, 2**31 - 1)),
                rir_id=int(rng.integers(0, config.num_rirs)),
            )
        )
    logger.info("Built %s manifest: %d records (seed %d)", split, size, seed)
    return records


def manifest_digest(records: Iterable[MixtureRecord]) -> str:
    """Sha256 over the ordered record ids."""
    digest = hashlib.sha256()
    for record in records:
        digest.update(record.mixture_id.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def write_manifest(records: Sequence[MixtureRecord], path: Union[str, Path]) -> Path:
    """Write records as JSON lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.model_dump_json() + "\n")
    return path


def read_manifest(path: Union[str, Path]) -> List[MixtureRecord]:
    """Read a JSON-lines manifest.

    Raises:
        ManifestError: If the file is missing, empty, malformed or of another schema version
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as e:
        raise ManifestError(f"manifest not found: {path}") from e
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{number}: not JSON: {e}") from e
        if data.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise ManifestError(
                f"{path}:{number}: schema version {data.get('schema_version')} "
                f"is not {MANIFEST_SCHEMA_VERSION}"
            )
        try:
            records.append(MixtureRecord.model_validate(data))
        except ValidationError as e:
            raise ManifestError(f"{path}:{number}: invalid record: {e}") from e
    if not records:
        raise ManifestError(f"manifest is empty: {path}")
    return records


def _store(signal: AudioSignal, wav_dir: Path) -> str:
    payload = encode_wav(signal)
    name = hashlib.sha256(payload).hexdigest()
    path = wav_dir / name[:2] / f"{name}.wav"
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    return str(path)


def render_corpus(
    records: Sequence[MixtureRecord],
    out_dir: Union[str, Path],
    config: CorpusConfig,
    stft: Optional[StftConfig] = None,
    progress: bool = True,
) -> List[MixtureRecord]:
    """Render mixtures, clean targets and enrollments to content-addressed WAVs.

    Mixture and clean target share one peak normalisation so their relation
    survives quantisation. Files live under ``out_dir/wav/<hh>/<sha256>.wav``.

    Returns:
        Copies of the records with their WAV paths filled in
    """
    stft = stft or StftConfig()
    wav_dir = Path(out_dir) / "wav"
    noise_bank = NoiseBank(config.noise_kinds, stft.sample_rate)
    rendered = []
    for record in tqdm(records, desc="render", disable=not progress):
        item = render_record(record, config, stft, {}, noise_bank)
        peak = max(
            float(np.max(np.abs(item.mixture.samples))), float(np.max(np.abs(item.clean.samples)))
        )
        scale = config.peak_level / max(peak, 1e-12)
        enroll_peak = float(np.max(np.abs(item.enrollment.samples)))
        enroll_scale = config.peak_level / max(enroll_peak, 1e-12)
        rendered.append(
            record.model_copy(
                update={
                    "mixture_path": _store(
                        AudioSignal(samples=item.mixture.samples * scale), wav_dir
                    ),
                    "clean_path": _store(AudioSignal(samples=item.clean.samples * scale), wav_dir),
                    "enrollment_path": _store(
                        AudioSignal(samples=item.enrollment.samples * enroll_scale), wav_dir
                    ),
                }
            )
        )
    logger.info("Rendered %d records under %s", len(rendered), wav_dir)
    return rendered
