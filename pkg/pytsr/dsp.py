"""Signal-processing kernels shared by every learning module.

All kernels take torch tensors (or :class:`AudioSignal`) and stay
differentiable, so the recognizer's MFCC front end can back-propagate into
the extractor's waveform output.
"""

import io
from functools import lru_cache
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np
import soundfile as sf
import torch
import torchaudio.functional as AF

from .config import MfccConfig, StftConfig
from .errors import SignalError
from .models import AudioSignal, FeatureSequence

SignalLike = Union[AudioSignal, torch.Tensor, np.ndarray]

# SI-SNR is clamped to +/- this many dB so losses stay finite.
SI_SNR_CLAMP_DB = 60.0


def as_tensor(signal: SignalLike, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """View any signal-like input as a 1-D tensor; tensors pass through untouched."""
    if isinstance(signal, AudioSignal):
        return signal.tensor(dtype)
    if isinstance(signal, np.ndarray):
        return torch.tensor(signal, dtype=dtype)
    return signal


def frame_signal(samples: torch.Tensor, window: int, shift: int) -> torch.Tensor:
    """Cut a 1-D signal into overlapping frames, shape (T, window).

    Raises:
        SignalError: If the signal is shorter than one window
    """
    if samples.dim() != 1:
        raise SignalError(f"expected a 1-D signal, got shape {tuple(samples.shape)}")
    if samples.shape[0] < window:
        raise SignalError(
            f"signal of {samples.shape[0]} samples is shorter than one window ({window})",
            code="signal_too_short",
        )
    return samples.unfold(0, window, shift)


def analysis_window(cfg: StftConfig, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Periodic Hann window of one analysis frame."""
    return torch.hann_window(cfg.window_samples, periodic=True, dtype=dtype)


def stft(signal: SignalLike, cfg: StftConfig) -> torch.Tensor:
    """Short-time Fourier transform without centre padding.

    Args:
        signal: Mono signal
        cfg: Framing parameters

    Returns:
        Complex tensor of shape (T, fft_size/2 + 1) with
        T = 1 + floor((len - win) / shift)
    """
    samples = as_tensor(signal)
    frames = frame_signal(samples, cfg.window_samples, cfg.shift_samples)
    frames = frames * analysis_window(cfg, samples.dtype)
    return torch.fft.rfft(frames, n=cfg.fft_size, dim=-1)


@lru_cache(maxsize=8)
def _mel_matrices(cfg: MfccConfig) -> "tuple[torch.Tensor, torch.Tensor]":
    fbank = AF.melscale_fbanks(
        n_freqs=cfg.num_bins,
        f_min=cfg.f_min,
        f_max=cfg.f_max if cfg.f_max is not None else cfg.sample_rate / 2,
        n_mels=cfg.mel_bins,
        sample_rate=cfg.sample_rate,
        norm=None,
        mel_scale="htk",
    ).double()
    dct = AF.create_dct(cfg.mfcc_dim, cfg.mel_bins, norm="ortho").double()
    return fbank, dct


def compute_mfcc(signal: SignalLike, cfg: MfccConfig) -> torch.Tensor:
    """MFCC matrix (T, mfcc_dim): power spectrum, mel filterbank, floored log, DCT-II."""
    spectrum = stft(signal, cfg.stft)
    power = spectrum.real.pow(2) + spectrum.imag.pow(2)
    fbank, dct = _mel_matrices(cfg)
    mel = power @ fbank.to(power.dtype)
    log_mel = torch.log(torch.clamp(mel, min=cfg.log_floor))
    return log_mel @ dct.to(power.dtype)


def mfcc(signal: SignalLike, cfg: MfccConfig) -> FeatureSequence:
    """MFCC features as a :class:`FeatureSequence`; gradients flow to the samples."""
    return FeatureSequence(
        frames=compute_mfcc(signal, cfg),
        frame_shift_s=cfg.shift_s,
        frame_length_s=cfg.window_length_s,
    )


def signal_power(signal: SignalLike) -> float:
    """Mean squared sample over the whole utterance."""
    samples = as_tensor(signal).detach().double()
    return float(samples.pow(2).mean())


def power_ratio_db(numerator: SignalLike, denominator: SignalLike) -> float:
    """10 log10 of the power ratio of two signals."""
    num, den = signal_power(numerator), signal_power(denominator)
    if num <= 0 or den <= 0:
        raise SignalError("power ratio of a zero-energy signal", code="zero_energy")
    return 10.0 * float(np.log10(num / den))


def si_snr(estimate: SignalLike, reference: SignalLike) -> torch.Tensor:
    """Scale-invariant SNR in dB of ``estimate`` against ``reference``.

    Both signals are mean-centred. The result is clamped to
    [-60, +60] dB, so a zero residual scores exactly +60.

    Raises:
        SignalError: On length mismatch or a zero-energy reference
    """
    est = as_tensor(estimate)
    ref = as_tensor(reference)
    if est.shape != ref.shape:
        raise SignalError(
            f"si_snr needs equal lengths, got {tuple(est.shape)} and {tuple(ref.shape)}",
            code="length_mismatch",
        )
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = ref.pow(2).sum()
    if float(ref_energy.detach()) <= 0.0:
        raise SignalError("si_snr reference has zero energy", code="zero_energy")
    projection = (est * ref).sum() / ref_energy * ref
    residual = est - projection
    tiny = torch.finfo(est.dtype).tiny
    ratio = 10.0 * (
        torch.log10(projection.pow(2).sum().clamp_min(tiny))
        - torch.log10(residual.pow(2).sum().clamp_min(tiny))
    )
    return ratio.clamp(-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB)


def gain_for_sir(target: SignalLike, interferer: SignalLike, sir_db: float) -> float:
    """Gain g such that target + g * interferer has the requested SIR.

    g = sqrt(P_t / (P_i * 10^(sir_db / 10))) with P the mean squared sample.

    Raises:
        SignalError: If either signal has zero energy
    """
    p_target = signal_power(target)
    p_interferer = signal_power(interferer)
    if p_target <= 0.0 or p_interferer <= 0.0:
        raise SignalError("gain_for_sir needs non-zero energy on both inputs", code="zero_energy")
    return float(np.sqrt(p_target / (p_interferer * 10.0 ** (sir_db / 10.0))))


def read_wav(path: Union[str, Path], expected_rate: int = 16000) -> AudioSignal:
    """Read a mono WAV file; a sample-rate mismatch is an error (no resampling)."""
    try:
        samples, rate = sf.read(str(path), dtype="float64", always_2d=False)
    except (RuntimeError, sf.LibsndfileError) as e:
        raise SignalError(f"cannot read WAV {path}: {e}", code="wav_unreadable") from e
    if samples.ndim != 1:
        raise SignalError(f"{path} is not mono", code="wav_not_mono")
    if rate != expected_rate:
        raise SignalError(
            f"{path} has sample rate {rate}, expected {expected_rate}", code="rate_mismatch"
        )
    return AudioSignal(samples=samples, sample_rate=rate)


def encode_wav(signal: AudioSignal) -> bytes:
    """Encode a signal as 16-bit PCM mono little-endian WAV bytes."""
    buffer = io.BytesIO()
    _write(buffer, signal)
    return buffer.getvalue()


def write_wav(path: Union[str, Path], signal: AudioSignal) -> None:
    """Write a signal as 16-bit PCM mono little-endian WAV."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        _write(handle, signal)


def _write(target: Union[io.BytesIO, BinaryIO], signal: AudioSignal) -> None:
    sf.write(
        target,
        np.clip(signal.samples, -1.0, 1.0),
        signal.sample_rate,
        subtype="PCM_16",
        format="WAV",
        endian="LITTLE",
    )
