"""Mask-based audio-visual separation network.

The mixture spectrogram is encoded framewise, the two visual streams
are encoded per video frame and repeated up to the audio frame rate,
and the concatenated audio-visual embedding drives a small two-level
encoder-decoder over the time axis that predicts a real mask in (0, 1)
per time-frequency bin. The estimate is the mixture spectrogram scaled
elementwise by the mask (mixture phase preserved) and inverted back to
a waveform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ._torch_utils import as_tensor, load_module_arrays, module_arrays, with_torch_seed
from .signal import Spectrogram, StftConfig, Waveform, istft_tensor, stft_tensor
from .toyworld import VisualStreams


@dataclass(frozen=True)
class SeparatorConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    dim_face: int = 32
    dim_lip: int = 12
    audio_channels: int = 48
    face_channels: int = 16
    lip_channels: int = 16
    widths: tuple[int, int] = (64, 128)
    kernel: int = 5

    @property
    def av_channels(self) -> int:
        return self.audio_channels + self.face_channels + self.lip_channels


@dataclass
class AVEmbedding:
    """Time-aligned concatenation of audio and visual features, (T, C)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected (frames, channels), got {self.values.shape}")


@dataclass
class Mask:
    """Real separation mask on the mixture spectrogram grid, entries in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected (frames, bins), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mask has non-finite entries")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("mask entries outside [0, 1]")


def video_to_audio_index(num_audio_frames: int, num_video_frames: int) -> np.ndarray:
    """Nearest-frame upsampling map: audio frame t -> video frame index."""
    idx = (np.arange(num_audio_frames) * num_video_frames) // num_audio_frames
    return np.minimum(idx, num_video_frames - 1)


def _check_finite(x: torch.Tensor, stage: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations after stage {stage!r}")
    return x


class _FrameMlp(nn.Module):
    """Two biased linear layers with a ReLU, applied per frame."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim_in, dim_out), nn.ReLU(), nn.Linear(dim_out, dim_out)
        ).double()

    def forward(self, x):
        return self.net(x)


class SeparatorNet(nn.Module):
    """Encoders plus the two-level temporal encoder-decoder backbone."""

    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        self.cfg = cfg
        bins = cfg.stft.freq_bins
        w0, w1 = cfg.widths
        k, pad = cfg.kernel, cfg.kernel // 2
        self.audio_encoder = _FrameMlp(bins, cfg.audio_channels)
        self.face_encoder = _FrameMlp(cfg.dim_face, cfg.face_channels)
        self.lip_encoder = _FrameMlp(cfg.dim_lip, cfg.lip_channels)
        self.backbone = nn.ModuleDict({
            "in": nn.Conv1d(cfg.av_channels, w0, k, padding=pad),
            "down": nn.Conv1d(w0, w1, k, stride=2, padding=pad),
            "mid": nn.Conv1d(w1, w1, k, padding=pad),
            "up": nn.Conv1d(w1 + w0, w0, k, padding=pad),
            "out": nn.Conv1d(w0, bins, 1),
        }).double()

    def encode(self, mix_spec: torch.Tensor, face: torch.Tensor,
               lip: torch.Tensor) -> torch.Tensor:
        """(B, T, F) complex + (B, Tv, *) streams -> (B, T, C) embedding."""
        if face.shape[-1] != self.cfg.dim_face or lip.shape[-1] != self.cfg.dim_lip:
            raise ValueError(
                f"visual dims ({face.shape[-1]}, {lip.shape[-1]}) != config "
                f"({self.cfg.dim_face}, {self.cfg.dim_lip})"
            )
        audio_feat = self.audio_encoder(torch.log1p(torch.abs(mix_spec)))
        face_feat = self.face_encoder(face)
        lip_feat = self.lip_encoder(lip)
        idx = torch.from_numpy(
            video_to_audio_index(mix_spec.shape[-2], face.shape[-2]))
        face_up = face_feat.index_select(-2, idx)
        lip_up = lip_feat.index_select(-2, idx)
        return _check_finite(torch.cat([audio_feat, face_up, lip_up], dim=-1), "encode")

    def mask_logits(self, av: torch.Tensor) -> torch.Tensor:
        """(B, T, C) -> (B, T, F) mask logits."""
        if av.shape[-1] != self.cfg.av_channels:
            raise ValueError(f"embedding channels {av.shape[-1]} != {self.cfg.av_channels}")
        if av.dim() == 2:
            return self.mask_logits(av[None])[0]
        bb = self.backbone
        x = av.transpose(-1, -2)                       # (B, C, T)
        skip = _check_finite(torch.relu(bb["in"](x)), "backbone.in")
        deep = _check_finite(torch.relu(bb["down"](skip)), "backbone.down")
        deep = _check_finite(torch.relu(bb["mid"](deep)), "backbone.mid")
        deep_up = nn.functional.interpolate(deep, size=skip.shape[-1], mode="nearest")
        merged = _check_finite(
            torch.relu(bb["up"](torch.cat([deep_up, skip], dim=-2))), "backbone.up")
        return _check_finite(bb["out"](merged), "backbone.out").transpose(-1, -2)

    def forward(self, mixture: torch.Tensor, face: torch.Tensor,
                lip: torch.Tensor) -> torch.Tensor:
        """Waveform(s) in, separated waveform(s) out; fully differentiable."""
        single = mixture.dim() == 1
        if single:
            mixture, face, lip = mixture[None], face[None], lip[None]
        spec = stft_tensor(mixture, self.cfg.stft)
        av = self.encode(spec, face, lip)
        mask = torch.sigmoid(self.mask_logits(av))
        est = istft_tensor(mask * spec, self.cfg.stft, length=mixture.shape[-1])
        return est[0] if single else est


class SeparatorParams:
    """Parameter bundle for the separation network."""

    def __init__(self, cfg: SeparatorConfig | None = None, seed: int = 0):
        self.config = cfg or SeparatorConfig()
        self.seed = seed
        self.net = with_torch_seed(seed, lambda: SeparatorNet(self.config))

    def parameter_groups(self) -> dict[str, list[torch.Tensor]]:
        return {
            "audio_encoder": list(self.net.audio_encoder.parameters()),
            "face_encoder": list(self.net.face_encoder.parameters()),
            "lip_encoder": list(self.net.lip_encoder.parameters()),
            "backbone": list(self.net.backbone.parameters()),
        }

    def zero_(self) -> "SeparatorParams":
        with torch.no_grad():
            for p in self.net.parameters():
                p.zero_()
        return self

    def to_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        cfg = self.config
        meta = {
            "config": {k: (vars(cfg.stft) if k == "stft" else getattr(cfg, k))
                       for k in cfg.__dataclass_fields__},
            "seed": self.seed,
        }
        return meta, module_arrays(self.net, "net")

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "SeparatorParams":
        cfg_dict = dict(meta["config"])
        cfg_dict["stft"] = StftConfig(**cfg_dict["stft"])
        cfg_dict["widths"] = tuple(cfg_dict["widths"])
        params = cls(SeparatorConfig(**cfg_dict), seed=int(meta["seed"]))
        load_module_arrays(params.net, "net", arrays)
        return params


def encode_inputs(params: SeparatorParams, spec: Spectrogram,
                  visuals: VisualStreams) -> AVEmbedding:
    """Concatenated audio-visual embedding, time-aligned to the spectrogram."""
    with torch.no_grad():
        av = params.net.encode(
            torch.from_numpy(spec.values),
            as_tensor(visuals.face_stream),
            as_tensor(visuals.lip_stream),
        )
    return AVEmbedding(av.numpy())


def predict_mask(params: SeparatorParams, av: AVEmbedding) -> Mask:
    """Separation mask from an audio-visual embedding; entries in (0, 1)."""
    with torch.no_grad():
        logits = params.net.mask_logits(torch.from_numpy(av.values))
    return Mask(torch.sigmoid(logits).numpy())


def apply_mask(mask: Mask, x_spec: Spectrogram) -> Spectrogram:
    """Elementwise mask on the mixture spectrogram; mixture phase kept."""
    if mask.values.shape != x_spec.values.shape:
        raise ValueError(
            f"mask shape {mask.values.shape} != spectrogram {x_spec.values.shape}"
        )
    return Spectrogram(mask.values * x_spec.values, x_spec.config)


def ideal_ratio_mask(target: Spectrogram, interferer: Spectrogram,
                     eps: float = 1e-12) -> Mask:
    """Oracle mask |A1| / (|A1| + |A2| + eps) from ground-truth sources."""
    if target.values.shape != interferer.values.shape:
        raise ValueError("source spectrograms differ in shape")
    mag1, mag2 = np.abs(target.values), np.abs(interferer.values)
    return Mask(mag1 / (mag1 + mag2 + eps))


def separate(params: SeparatorParams, mixture: Waveform,
             visuals: VisualStreams) -> Waveform:
    """End-to-end separation of the speaker whose visual streams are given."""
    if not np.all(np.isfinite(mixture.samples)):
        raise ValueError("mixture contains non-finite samples")
    with torch.no_grad():
        est = params.net(
            as_tensor(mixture.samples),
            as_tensor(visuals.face_stream),
            as_tensor(visuals.lip_stream),
        )
    return Waveform(est.numpy(), mixture.sample_rate)
