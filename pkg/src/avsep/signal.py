"""STFT/iSTFT transforms and waveform arithmetic.

All audio in this package is mono, nominally in [-1, 1], carried by
:class:`Waveform`. Time-frequency analysis uses a Hann window with
window-square (NOLA) normalization on the inverse, so ``istft(stft(x))``
reconstructs ``x`` to floating-point precision for any hop < window.

The tensor-level entry points (:func:`stft_tensor`, :func:`istft_tensor`)
are differentiable and shared with the separation network; the dataclass
wrappers (:func:`stft`, :func:`istft`) are the plain numpy-facing API.
"""

from __future__ import annotations

import wave as _wave
from dataclasses import dataclass, field

import numpy as np
import torch

DEFAULT_SAMPLE_RATE = 16_000


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis geometry for the short-time Fourier transform."""

    nfft: int = 512
    hop: int = 160
    window_size: int = 512
    center: bool = True

    def __post_init__(self):
        if not (0 < self.hop <= self.window_size <= self.nfft):
            raise ValueError(
                f"need 0 < hop <= window_size <= nfft, got "
                f"hop={self.hop}, window_size={self.window_size}, nfft={self.nfft}"
            )

    @property
    def freq_bins(self) -> int:
        return self.nfft // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        if self.center:
            return num_samples // self.hop + 1
        return (num_samples - self.window_size) // self.hop + 1

    def window(self, dtype=torch.float64) -> torch.Tensor:
        return torch.hann_window(self.window_size, periodic=True, dtype=dtype)


@dataclass
class Waveform:
    """Mono time-domain signal."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass
class Spectrogram:
    """Complex STFT grid of shape (frames, freq_bins)."""

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise ValueError(f"expected (frames, bins) grid, got shape {self.values.shape}")
        if self.values.shape[1] != self.config.freq_bins:
            raise ValueError(
                f"freq axis {self.values.shape[1]} != nfft/2+1 = {self.config.freq_bins}"
            )

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


def stft_tensor(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Differentiable STFT on a (L,) or (batch, L) tensor.

    Returns a complex tensor with time as the leading signal axis:
    (frames, bins) or (batch, frames, bins).
    """
    if x.shape[-1] < cfg.window_size and not cfg.center:
        raise ValueError(
            f"signal length {x.shape[-1]} < window_size {cfg.window_size} with center=False"
        )
    spec = torch.stft(
        x,
        n_fft=cfg.nfft,
        hop_length=cfg.hop,
        win_length=cfg.window_size,
        window=cfg.window(dtype=x.dtype),
        center=cfg.center,
        pad_mode="reflect",
        return_complex=True,
    )
    return spec.transpose(-1, -2)


def istft_tensor(spec: torch.Tensor, cfg: StftConfig, length: int | None = None) -> torch.Tensor:
    """Inverse of :func:`stft_tensor` with window-square normalization."""
    real_dtype = torch.empty(0, dtype=spec.dtype).real.dtype
    try:
        return torch.istft(
            spec.transpose(-1, -2),
            n_fft=cfg.nfft,
            hop_length=cfg.hop,
            win_length=cfg.window_size,
            window=cfg.window(dtype=real_dtype),
            center=cfg.center,
            length=length,
        )
    except RuntimeError as exc:
        # torch reports a near-zero overlap-add envelope; the config cannot
        # be inverted (NOLA violated).
        raise ValueError(f"config violates overlap-add invertibility: {exc}") from exc


def stft(wave: Waveform, cfg: StftConfig | None = None) -> Spectrogram:
    """Short-time Fourier transform of a waveform.

    The output grid has ``num_samples // hop + 1`` frames under center
    padding (reflect padding of nfft/2 samples on each side) and
    ``nfft/2 + 1`` frequency bins.
    """
    cfg = cfg or StftConfig()
    if not np.all(np.isfinite(wave.samples)):
        raise ValueError("waveform contains non-finite samples")
    spec = stft_tensor(torch.from_numpy(wave.samples), cfg)
    return Spectrogram(spec.numpy(), cfg)


def istft(spec: Spectrogram, cfg: StftConfig | None = None,
          length: int | None = None,
          sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Overlap-add reconstruction of a spectrogram back to a waveform."""
    cfg = cfg or spec.config
    x = istft_tensor(torch.from_numpy(spec.values), cfg, length=length)
    return Waveform(x.numpy(), sample_rate)


def mix(a1: Waveform, a2: Waveform) -> Waveform:
    """Sum two equal-length waveforms sample by sample."""
    if a1.sample_rate != a2.sample_rate:
        raise ValueError(f"sample rate mismatch: {a1.sample_rate} vs {a2.sample_rate}")
    if len(a1) != len(a2):
        raise ValueError(f"length mismatch: {len(a1)} vs {len(a2)}")
    return Waveform(a1.samples + a2.samples, a1.sample_rate)


def write_wav(path, wave: Waveform) -> None:
    """Write a mono 16-bit PCM RIFF file.

    Samples are clipped to [-1, 1] before quantization.
    """
    pcm = np.clip(wave.samples, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wave.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM RIFF file into a float waveform in [-1, 1]."""
    with _wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"expected mono WAV, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, rate)
