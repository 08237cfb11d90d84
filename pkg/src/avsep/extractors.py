"""Frozen proxy embedding models.

Four small feed-forward nets stand in for the external pretrained
models a full-scale system would use: an audio speaker-identity net, a
visual (face) identity net, an audio phonetic net, and a visual (lip)
phonetic net. Identity nets are trained as speaker classifiers, the
phonetic pair as framewise phoneme classifiers; each modality pair
shares its classifier head and gets a cross-modal alignment term, so
audio- and visual-side embeddings of the same speaker/content land near
each other on the unit sphere. After pretraining the nets are frozen:
their parameters never change again, but they stay differentiable with
respect to their audio input so separator gradients can flow through
them.

Audio enters as compressed-magnitude STFT frames, ``log1p(|stft|)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ._torch_utils import as_tensor, l2_normalize, load_module_arrays, mlp, \
    module_arrays, with_torch_seed
from .signal import StftConfig, Waveform, stft_tensor
from .toyworld import UtterancePool, Utterance, VisualStreams

# Test instrumentation: bumped on every embedding forward so the
# inference-parity contract (separation never touches extractors) can be
# asserted from outside.
EXTRACTOR_FORWARDS = 0


def _count_forward() -> None:
    global EXTRACTOR_FORWARDS
    EXTRACTOR_FORWARDS += 1


class PretrainAccuracyError(RuntimeError):
    """A proxy net missed its held-out accuracy floor within max_epochs."""


@dataclass(frozen=True)
class ExtractorConfig:
    dim_id: int = 64
    dim_ph: int = 64
    hidden: int = 128
    dim_face: int = 32
    dim_lip: int = 12
    num_phonemes: int = 8
    cosine_scale: float = 10.0
    align_weight: float = 4.0
    # Domain-confusion term: a small discriminator tries to tell audio-
    # from visual-side embeddings apart while the extractors are trained
    # to fool it, so the two modalities end up sharing one embedding
    # distribution (the toy analogue of cross-modal matching pretraining).
    domain_weight: float = 8.0
    domain_d_steps: int = 3
    # The confusion weight ramps linearly from 0 to domain_weight over
    # this many epochs, so the classifiers establish themselves first.
    domain_ramp_epochs: int = 20
    learning_rate: float = 2e-3
    batch_size: int = 32
    min_epochs: int = 40
    max_epochs: int = 90
    stft: StftConfig = field(default_factory=StftConfig)
    floor_speaker: float = 0.90
    floor_audio_phoneme: float = 0.80
    floor_visual_phoneme: float = 0.75
    # Train until the floors are cleared by this much (or max_epochs), so
    # reported accuracies do not sit exactly on the acceptance line.
    stop_margin: float = 0.02


@dataclass
class EmbeddingSet:
    """The four unit-norm correlation embeddings of one utterance."""

    i_a: np.ndarray  # audio identity
    i_v: np.ndarray  # visual identity
    p_a: np.ndarray  # audio phonetic (time-pooled)
    p_v: np.ndarray  # visual phonetic (time-pooled)

    def __post_init__(self):
        for name in ("i_a", "i_v", "p_a", "p_v"):
            vec = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"embedding {name} has non-finite entries")
            setattr(self, name, vec)


def audio_frames_tensor(audio: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Compressed-magnitude STFT frames, (frames, bins) or (batch, frames, bins)."""
    return torch.log1p(torch.abs(stft_tensor(audio, cfg)))


class _EmbeddingNet(nn.Module):
    """MLP trunk whose normalized output is the embedding."""

    def __init__(self, dim_in: int, hidden: int, dim_out: int):
        super().__init__()
        self.trunk = mlp((dim_in, hidden, dim_out))
        self.dim_in = dim_in

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim_in:
            raise ValueError(f"input dim {x.shape[-1]} != expected {self.dim_in}")
        return l2_normalize(self.trunk(x))


class FrozenExtractors:
    """Bundle of the four pretrained nets plus their shared heads."""

    def __init__(self, cfg: ExtractorConfig, num_speakers: int, seed: int = 0):
        self.config = cfg
        self.num_speakers = num_speakers
        self.seed = seed
        self.frozen = False
        self.accuracy_report: dict[str, float] = {}
        freq_bins = cfg.stft.freq_bins

        def build():
            return (
                _EmbeddingNet(freq_bins, cfg.hidden, cfg.dim_id),
                _EmbeddingNet(cfg.dim_face, cfg.hidden, cfg.dim_id),
                _EmbeddingNet(freq_bins, cfg.hidden, cfg.dim_ph),
                _EmbeddingNet(cfg.dim_lip, cfg.hidden, cfg.dim_ph),
                nn.Linear(cfg.dim_id, num_speakers, bias=False).double(),
                nn.Linear(cfg.dim_ph, cfg.num_phonemes, bias=False).double(),
            )

        (self.audio_id_net, self.visual_id_net, self.audio_ph_net,
         self.visual_ph_net, self.id_head, self.ph_head) = with_torch_seed(seed, build)

    # -- embedding paths (differentiable w.r.t. their tensor inputs) --------

    def embed_audio_id(self, audio: torch.Tensor) -> torch.Tensor:
        _count_forward()
        frames = audio_frames_tensor(audio, self.config.stft)
        return self.audio_id_net(frames.mean(dim=-2))

    def embed_visual_id(self, face_stream: torch.Tensor) -> torch.Tensor:
        _count_forward()
        return self.visual_id_net(face_stream.mean(dim=-2))

    def embed_audio_ph(self, audio: torch.Tensor) -> torch.Tensor:
        _count_forward()
        frames = audio_frames_tensor(audio, self.config.stft)
        return l2_normalize(self.audio_ph_net(frames).mean(dim=-2))

    def embed_visual_ph(self, lip_stream: torch.Tensor) -> torch.Tensor:
        _count_forward()
        return l2_normalize(self.visual_ph_net(lip_stream).mean(dim=-2))

    # -- bookkeeping ---------------------------------------------------------

    def modules(self) -> dict[str, nn.Module]:
        return {
            "audio_id_net": self.audio_id_net,
            "visual_id_net": self.visual_id_net,
            "audio_ph_net": self.audio_ph_net,
            "visual_ph_net": self.visual_ph_net,
            "id_head": self.id_head,
            "ph_head": self.ph_head,
        }

    def freeze(self) -> None:
        for module in self.modules().values():
            module.requires_grad_(False)
        self.frozen = True

    def parameter_bytes(self) -> bytes:
        return b"".join(
            arr.tobytes() for name in sorted(self.modules())
            for arr in (module_arrays(self.modules()[name], name)).values()
        )

    def to_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays: dict[str, np.ndarray] = {}
        for name, module in self.modules().items():
            arrays.update(module_arrays(module, name))
        meta = {
            "config": {k: (getattr(self.config, k) if k != "stft"
                           else vars(self.config.stft))
                       for k in self.config.__dataclass_fields__},
            "num_speakers": self.num_speakers,
            "seed": self.seed,
            "frozen": self.frozen,
            "accuracy_report": self.accuracy_report,
        }
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "FrozenExtractors":
        cfg_dict = dict(meta["config"])
        cfg_dict["stft"] = StftConfig(**cfg_dict["stft"])
        cfg_dict["hidden"] = int(cfg_dict["hidden"])
        ex = cls(ExtractorConfig(**cfg_dict), int(meta["num_speakers"]), int(meta["seed"]))
        for name, module in ex.modules().items():
            load_module_arrays(module, name, arrays)
        ex.accuracy_report = dict(meta["accuracy_report"])
        if meta["frozen"]:
            ex.freeze()
        return ex


def extract_embeddings(ex: FrozenExtractors, audio: Waveform,
                       visuals: VisualStreams) -> EmbeddingSet:
    """All four embeddings for one (audio, visuals) pair."""
    if not ex.frozen:
        raise ValueError("extractors must be frozen before extraction")
    with torch.no_grad():
        audio_t = as_tensor(audio.samples)
        face_t = as_tensor(visuals.face_stream)
        lip_t = as_tensor(visuals.lip_stream)
        return EmbeddingSet(
            i_a=ex.embed_audio_id(audio_t).numpy(),
            i_v=ex.embed_visual_id(face_t).numpy(),
            p_a=ex.embed_audio_ph(audio_t).numpy(),
            p_v=ex.embed_visual_ph(lip_t).numpy(),
        )


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

def _utterance_features(utt: Utterance, cfg: ExtractorConfig):
    audio_t = as_tensor(utt.audio.samples)
    frames = audio_frames_tensor(audio_t, cfg.stft)
    num_frames = frames.shape[0]
    hop_s = cfg.stft.hop / utt.audio.sample_rate
    frame_labels = np.array([utt.phoneme_at(i * hop_s) for i in range(num_frames)],
                            dtype=np.int64)
    return {
        "audio_frames": frames,
        "audio_pooled": frames.mean(dim=0),
        "face_pooled": as_tensor(utt.visuals.face_stream).mean(dim=0),
        "lip_frames": as_tensor(utt.visuals.lip_stream),
        "audio_frame_labels": torch.from_numpy(frame_labels),
        "video_frame_labels": torch.from_numpy(utt.framewise_phonemes()),
    }


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=-1) == labels).double().mean())


def pretrain_extractors(dataset: UtterancePool, cfg: ExtractorConfig | None = None,
                        seed: int = 0) -> FrozenExtractors:
    """Train the four proxy nets on a pool and freeze them.

    Identity nets minimize speaker cross-entropy through a shared cosine
    head plus an audio/visual alignment term; phonetic nets do the same
    framewise over phoneme labels. Training stops once every held-out
    floor is met (speaker 0.90, audio phoneme 0.80, visual phoneme 0.75
    by default) and raises :class:`PretrainAccuracyError` naming the
    worst net if any floor is still unmet at ``max_epochs``.
    """
    cfg = cfg or ExtractorConfig()
    if dataset.num_speakers < 8:
        raise ValueError(f"need >= 8 speakers, got {dataset.num_speakers}")
    if len(dataset.utterances) < 200:
        raise ValueError(f"need >= 200 utterances, got {len(dataset.utterances)}")

    speaker_index = {s.speaker_id: i for i, s in enumerate(dataset.speakers)}
    ex = FrozenExtractors(cfg, num_speakers=len(speaker_index), seed=seed)
    train_utts, val_utts = dataset.split()
    train_feats = [_utterance_features(u, cfg) for u in train_utts]
    val_feats = [_utterance_features(u, cfg) for u in val_utts]
    train_spk = torch.tensor([speaker_index[u.speaker_id] for u in train_utts])
    val_spk = torch.tensor([speaker_index[u.speaker_id] for u in val_utts])

    params = [p for m in ex.modules().values() for p in m.parameters()]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    ce = nn.CrossEntropyLoss()
    rng = np.random.default_rng(seed)

    domain_disc = None
    if cfg.domain_weight > 0:
        from .correlation import Discriminator, adversarial_value

        domain_disc = with_torch_seed(seed + 1, lambda: Discriminator(cfg.dim_id))
        opt_domain = torch.optim.Adam(domain_disc.parameters(), lr=cfg.learning_rate)
        chance_value = 2.0 * float(np.log(0.5))

    def gather(feats, idx):
        return {key: torch.stack([feats[i][key] for i in idx])
                for key in ("audio_pooled", "face_pooled", "audio_frames",
                            "lip_frames", "audio_frame_labels", "video_frame_labels")}

    def batch_embeddings(batch):
        i_a = ex.audio_id_net(batch["audio_pooled"])
        i_v = ex.visual_id_net(batch["face_pooled"])
        p_a_frames = ex.audio_ph_net(batch["audio_frames"])   # (B, T, dim_ph)
        p_v_frames = ex.visual_ph_net(batch["lip_frames"])    # (B, Tv, dim_ph)
        p_a_utt = l2_normalize(p_a_frames.mean(dim=1))
        p_v_utt = l2_normalize(p_v_frames.mean(dim=1))
        return i_a, i_v, p_a_frames, p_v_frames, p_a_utt, p_v_utt

    def batch_losses(batch, spk, domain_scale):
        i_a, i_v, p_a_frames, p_v_frames, p_a_utt, p_v_utt = batch_embeddings(batch)
        scale = cfg.cosine_scale
        num_ph = cfg.num_phonemes
        loss = (
            ce(scale * ex.id_head(i_a), spk)
            + ce(scale * ex.id_head(i_v), spk)
            + ce(scale * ex.ph_head(p_a_frames).reshape(-1, num_ph),
                 batch["audio_frame_labels"].reshape(-1))
            + ce(scale * ex.ph_head(p_v_frames).reshape(-1, num_ph),
                 batch["video_frame_labels"].reshape(-1))
        )
        if cfg.align_weight > 0:
            align = (1 - (i_a * i_v).sum(dim=-1)).mean() \
                + (1 - (p_a_utt * p_v_utt).sum(dim=-1)).mean()
            loss = loss + cfg.align_weight * align
        if domain_disc is not None and domain_scale > 0:
            # Clamped at the chance value: once the domain discriminator is
            # confused the term goes flat, which keeps the confusion
            # pressure from scrambling class structure.
            value = adversarial_value(domain_disc, i_v, i_a)
            loss = loss + domain_scale * torch.clamp(value, min=chance_value)
        return loss

    def domain_disc_step(batch):
        with torch.no_grad():
            i_a, i_v, _, _, _, _ = batch_embeddings(batch)
        for _ in range(cfg.domain_d_steps):
            opt_domain.zero_grad()
            value = adversarial_value(domain_disc, i_v, i_a)
            (-value).backward()
            opt_domain.step()

    def held_out_accuracies() -> dict[str, float]:
        with torch.no_grad():
            batch = gather(val_feats, range(len(val_feats)))
            flat_audio = ex.audio_ph_net(batch["audio_frames"]).reshape(-1, cfg.dim_ph)
            flat_video = ex.visual_ph_net(batch["lip_frames"]).reshape(-1, cfg.dim_ph)
            return {
                "speaker_audio": _accuracy(
                    ex.id_head(ex.audio_id_net(batch["audio_pooled"])), val_spk),
                "speaker_visual": _accuracy(
                    ex.id_head(ex.visual_id_net(batch["face_pooled"])), val_spk),
                "phoneme_audio": _accuracy(
                    ex.ph_head(flat_audio), batch["audio_frame_labels"].reshape(-1)),
                "phoneme_visual": _accuracy(
                    ex.ph_head(flat_video), batch["video_frame_labels"].reshape(-1)),
            }

    floors = {
        "speaker_audio": cfg.floor_speaker,
        "speaker_visual": cfg.floor_speaker,
        "phoneme_audio": cfg.floor_audio_phoneme,
        "phoneme_visual": cfg.floor_visual_phoneme,
    }
    report: dict[str, float] = {}
    for epoch in range(cfg.max_epochs):
        domain_scale = cfg.domain_weight * min(1.0, (epoch + 1) / cfg.domain_ramp_epochs)
        order = rng.permutation(len(train_feats))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = gather(train_feats, idx)
            if domain_disc is not None:
                domain_disc_step(batch)
            optimizer.zero_grad()
            loss = batch_losses(batch, train_spk[idx], domain_scale)
            loss.backward()
            optimizer.step()
        report = held_out_accuracies()
        if epoch + 1 >= cfg.min_epochs and \
                all(report[k] >= min(floors[k] + cfg.stop_margin, 1.0) for k in floors):
            break
    else:
        failing = min(floors, key=lambda k: report[k] - floors[k])
        if report[failing] < floors[failing]:
            raise PretrainAccuracyError(
                f"net {failing!r} reached {report[failing]:.3f} < floor "
                f"{floors[failing]:.2f} after {cfg.max_epochs} epochs"
            )
    ex.accuracy_report = {k: float(v) for k, v in report.items()}
    ex.accuracy_report["epochs"] = epoch + 1
    ex.freeze()
    return ex
