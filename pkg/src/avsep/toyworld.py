"""Procedural synthetic bimodal speech world.

Speakers are parametric harmonic voices (fundamental, three formants,
spectral rolloff); utterances are sequences of phoneme symbols rendered
as formant-shaped harmonic audio plus two parallel visual proxy streams:
a per-frame face identity vector and a per-frame noisy phoneme
indicator standing in for lip motion. Mixtures are exact sums of two
utterances. Samplers provide the mixture and triplet draws used for
training, including the hard cases (same timbre cluster, same sentence).

Everything is deterministic under a seed; per-utterance seeds are
derived with ``numpy.random.SeedSequence`` counters so generation can be
parallelized without changing results.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal import Waveform, write_wav

# Per-phoneme articulation table: multiplicative warps of the speaker's
# three formant centers, an overall loudness, and a mouth-openness proxy.
# Chosen to keep the eight symbols spectrally well separated.
PHONEME_FORMANT_SCALE = np.array([
    [1.00, 1.00, 1.00],
    [0.70, 1.30, 1.10],
    [1.35, 0.75, 0.95],
    [0.80, 0.85, 1.35],
    [1.25, 1.20, 0.70],
    [0.65, 1.00, 0.75],
    [1.40, 1.40, 1.25],
    [0.95, 0.65, 1.40],
])
PHONEME_AMPLITUDE = np.array([1.00, 0.80, 0.90, 0.70, 0.95, 0.75, 1.00, 0.65])
PHONEME_OPENNESS = np.array([0.90, 0.35, 0.60, 0.25, 0.80, 0.15, 1.00, 0.45])
# Four extra lip-stream channels per phoneme (jaw, spread, rounding, velocity
# proxies); fixed values so the channels carry redundant phoneme information.
PHONEME_LIP_EXTRA = np.array([
    [0.90, 0.10, 0.20, 0.55],
    [0.35, 0.80, 0.10, 0.25],
    [0.60, 0.20, 0.70, 0.40],
    [0.25, 0.55, 0.45, 0.85],
    [0.80, 0.65, 0.15, 0.10],
    [0.15, 0.30, 0.85, 0.60],
    [1.00, 0.45, 0.55, 0.30],
    [0.45, 0.95, 0.35, 0.75],
])

F0_CLUSTER_BANDS = [(85.0, 135.0), (135.0, 190.0), (190.0, 245.0), (245.0, 295.0)]

# Session factor -> face appearance projection. Each utterance carries a
# low-dimensional "session state" (vocal effort / recording condition)
# that shifts both the voice (pitch, spectral tilt, resonance sharpness)
# and the face appearance, so per-utterance identity variation is shared
# across the modalities rather than independent noise.
SESSION_DIM = 4
SESSION_FACE_PROJECTION = np.random.default_rng(2024).normal(
    size=(32, SESSION_DIM)) / np.sqrt(SESSION_DIM)
# Faces move while talking: each video frame's face vector is shifted by a
# small phoneme-dependent offset (mouth-region articulation leaking into
# the identity proxy), so the pooled face embedding carries an
# audio-observable content signature as real face tracks do.
FACE_CONTENT_PROJECTION = np.random.default_rng(2025).normal(size=(8, 32))


@dataclass(frozen=True)
class ToyWorldConfig:
    sample_rate: int = 16_000
    duration: float = 2.56
    fps: float = 25.0
    num_phonemes: int = 8
    phonemes_per_utterance: int = 8
    dim_face: int = 32
    num_lip_extra: int = 4
    visual_noise: float = 0.1
    # Scale of the session-driven per-utterance face offset (appearance
    # variation tied to the audible session state) and of the residual
    # audio-independent part. Unlike the per-frame noise these survive
    # time pooling, so visual identity clusters have genuine width.
    face_session_jitter: float = 0.5
    face_independent_jitter: float = 0.05
    face_content_coupling: float = 0.3
    num_timbre_clusters: int = 4
    peak_amplitude: float = 0.9
    f0_jitter: float = 0.012

    def __post_init__(self):
        if self.num_phonemes > PHONEME_FORMANT_SCALE.shape[0]:
            raise ValueError(
                f"at most {PHONEME_FORMANT_SCALE.shape[0]} phoneme symbols supported"
            )
        if self.num_timbre_clusters > len(F0_CLUSTER_BANDS):
            raise ValueError(f"at most {len(F0_CLUSTER_BANDS)} timbre clusters supported")

    @property
    def num_samples(self) -> int:
        return round(self.duration * self.sample_rate)

    @property
    def num_frames(self) -> int:
        return round(self.duration * self.fps)

    @property
    def dim_lip(self) -> int:
        return self.num_phonemes + self.num_lip_extra


@dataclass(frozen=True)
class SpeakerProfile:
    """Parametric voice and face of one synthetic speaker."""

    speaker_id: int
    f0: float
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    harmonic_decay: float
    timbre_cluster: int
    face_vector: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not 80.0 <= self.f0 <= 300.0:
            raise ValueError(f"f0 {self.f0} outside [80, 300] Hz")
        if not all(a < b for a, b in zip(self.formants, self.formants[1:])):
            raise ValueError(f"formants not strictly increasing: {self.formants}")
        if not (300.0 <= self.formants[0] and self.formants[-1] <= 3500.0):
            raise ValueError(f"formants outside [300, 3500] Hz: {self.formants}")


@dataclass
class VisualStreams:
    """Per-frame identity and lip/phoneme proxy sequences."""

    face_stream: np.ndarray   # (frames, dim_face)
    lip_stream: np.ndarray    # (frames, dim_lip)
    fps: float

    def __post_init__(self):
        self.face_stream = np.asarray(self.face_stream, dtype=np.float64)
        self.lip_stream = np.asarray(self.lip_stream, dtype=np.float64)
        if self.face_stream.shape[0] != self.lip_stream.shape[0]:
            raise ValueError("face and lip streams disagree on frame count")
        if not (np.all(np.isfinite(self.face_stream)) and np.all(np.isfinite(self.lip_stream))):
            raise ValueError("visual streams contain non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.face_stream.shape[0]


@dataclass
class Utterance:
    uid: str
    speaker_id: int
    phonemes: tuple[int, ...]
    durations: tuple[float, ...]
    audio: Waveform
    visuals: VisualStreams

    def phoneme_at(self, t: float) -> int:
        """Active phoneme symbol at time t (seconds)."""
        edges = np.cumsum(self.durations)
        idx = int(np.searchsorted(edges, t, side="right"))
        return self.phonemes[min(idx, len(self.phonemes) - 1)]

    def framewise_phonemes(self) -> np.ndarray:
        """Active phoneme at each video frame center."""
        centers = (np.arange(self.visuals.num_frames) + 0.5) / self.visuals.fps
        return np.array([self.phoneme_at(t) for t in centers], dtype=np.int64)


@dataclass
class MixtureSample:
    uid: str
    mixture: Waveform
    sources: tuple[Utterance, Utterance]
    target_index: int = 0

    @property
    def target(self) -> Utterance:
        return self.sources[self.target_index]

    @property
    def interferer(self) -> Utterance:
        return self.sources[1 - self.target_index]


@dataclass
class TripletSample:
    anchor: Utterance
    positive: Utterance
    negative: Utterance
    kind: str  # "identity" or "phonetic"


def _child_seed(*entropy) -> int:
    """Stable counter-based child seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def make_speaker(seed: int, cfg: ToyWorldConfig | None = None,
                 speaker_id: int | None = None) -> SpeakerProfile:
    """Draw a deterministic speaker profile from a seed."""
    cfg = cfg or ToyWorldConfig()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cluster = int(rng.integers(cfg.num_timbre_clusters))
    lo, hi = F0_CLUSTER_BANDS[cluster]
    f0 = float(rng.uniform(lo, hi))
    f1 = float(rng.uniform(320.0, 780.0))
    f2 = float(rng.uniform(900.0, 1750.0))
    f3 = float(rng.uniform(2000.0, 3200.0))
    bandwidths = tuple(float(b) for b in rng.uniform(90.0, 180.0, size=3))
    decay = float(rng.uniform(0.78, 0.94))
    face = rng.normal(0.0, 1.0, size=cfg.dim_face)
    return SpeakerProfile(
        speaker_id=seed if speaker_id is None else speaker_id,
        f0=f0,
        formants=(f1, f2, f3),
        bandwidths=bandwidths,
        harmonic_decay=decay,
        timbre_cluster=cluster,
        face_vector=face,
    )


def _formant_gain(freqs: np.ndarray, centers: np.ndarray, bandwidths: np.ndarray,
                  floor: float = 0.02) -> np.ndarray:
    """Sum of Lorentzian resonance peaks, plus a small spectral floor."""
    gain = np.full_like(freqs, floor)
    for c, b in zip(centers, bandwidths):
        gain += 1.0 / (1.0 + ((freqs - c) / b) ** 2)
    return gain


def synth_utterance(speaker: SpeakerProfile, phonemes, cfg: ToyWorldConfig | None = None,
                    seed: int = 0, uid: str | None = None) -> Utterance:
    """Render one utterance: harmonic audio plus visual proxy streams.

    The audio is a sum of f0 harmonics with the speaker's rolloff, each
    harmonic weighted by the resonance gain of the speaker's formants
    warped by the active phoneme; amplitudes crossfade linearly over
    8 ms at phoneme boundaries. Audio is peak-normalized. The face
    stream repeats the speaker's identity vector with additive noise;
    the lip stream carries a one-hot phoneme indicator plus articulation
    channels, with the same noise level.
    """
    cfg = cfg or ToyWorldConfig()
    phonemes = tuple(int(p) for p in phonemes)
    if len(phonemes) == 0:
        raise ValueError("empty phoneme sequence")
    if any(not 0 <= p < cfg.num_phonemes for p in phonemes):
        raise ValueError(f"phoneme symbols must be in [0, {cfg.num_phonemes})")

    rng = np.random.default_rng(np.random.SeedSequence([seed, speaker.speaker_id]))
    n = cfg.num_samples
    sr = cfg.sample_rate
    seg_len = n / len(phonemes)
    durations = tuple(seg_len / sr for _ in phonemes)

    # Session state: audible voice perturbations (pitch, spectral tilt,
    # resonance sharpness, floor brightness) shared with the face offset.
    session = np.clip(rng.normal(size=SESSION_DIM), -2.5, 2.5)
    f0 = speaker.f0 * (1.0 + cfg.f0_jitter * session[0])
    decay = float(np.clip(speaker.harmonic_decay * (1.0 + 0.04 * session[1]),
                          0.55, 0.97))
    bw_scale = 1.0 + 0.18 * session[2]
    floor_gain = 0.02 * (1.0 + 0.3 * session[3])
    formant_session = 1.0 + 0.01 * session[2]

    num_harmonics = min(int(0.45 * sr / f0), 60)
    k = np.arange(1, num_harmonics + 1)
    harmonic_freqs = k * f0
    rolloff = decay ** (k - 1)

    # Per-segment harmonic amplitudes from the phoneme-warped formants.
    centers = np.asarray(speaker.formants) * formant_session
    bands = np.asarray(speaker.bandwidths) * bw_scale
    seg_amps = np.empty((len(phonemes), num_harmonics))
    for s, p in enumerate(phonemes):
        warped = np.clip(centers * PHONEME_FORMANT_SCALE[p], 100.0, 0.48 * sr)
        seg_amps[s] = rolloff * _formant_gain(harmonic_freqs, warped, bands, floor_gain) \
            * PHONEME_AMPLITUDE[p]

    # Linear crossfades (8 ms) between segment amplitude vectors.
    ramp = int(0.008 * sr)
    xp, fp = [0.0], [seg_amps[0]]
    for s in range(1, len(phonemes)):
        boundary = s * seg_len
        xp += [boundary - ramp, boundary + ramp]
        fp += [seg_amps[s - 1], seg_amps[s]]
    xp.append(float(n))
    fp.append(seg_amps[-1])
    xp = np.asarray(xp)
    fp = np.vstack(fp)
    t_idx = np.arange(n, dtype=np.float64)
    amps = np.empty((num_harmonics, n))
    for h in range(num_harmonics):
        amps[h] = np.interp(t_idx, xp, fp[:, h])

    t = t_idx / sr
    phases = rng.uniform(0.0, 2.0 * np.pi, size=num_harmonics)
    audio = np.einsum("hn,hn->n", amps,
                      np.sin(2.0 * np.pi * harmonic_freqs[:, None] * t[None, :]
                             + phases[:, None]))
    audio *= cfg.peak_amplitude / (np.max(np.abs(audio)) + 1e-12)

    frames = cfg.num_frames
    frame_phonemes = np.array(
        [phonemes[min(int((j + 0.5) / cfg.fps / (seg_len / sr)), len(phonemes) - 1)]
         for j in range(frames)]
    )
    appearance = cfg.face_session_jitter * (SESSION_FACE_PROJECTION[: cfg.dim_face] @ session) \
        + cfg.face_independent_jitter * rng.normal(size=cfg.dim_face)
    face = (speaker.face_vector + appearance)[None, :] \
        + cfg.visual_noise * rng.normal(size=(frames, cfg.dim_face))
    lip_clean = np.zeros((frames, cfg.dim_lip))
    lip_clean[np.arange(frames), frame_phonemes] = 1.0
    lip_clean[:, cfg.num_phonemes:] = PHONEME_LIP_EXTRA[frame_phonemes, : cfg.num_lip_extra]
    lip = lip_clean + cfg.visual_noise * rng.normal(size=lip_clean.shape)

    return Utterance(
        uid=uid or f"spk{speaker.speaker_id}_seed{seed}",
        speaker_id=speaker.speaker_id,
        phonemes=phonemes,
        durations=durations,
        audio=Waveform(audio, sr),
        visuals=VisualStreams(face, lip, cfg.fps),
    )


@dataclass
class UtterancePool:
    """A generated dataset: speakers, their utterances, and a 4:1 split."""

    config: ToyWorldConfig
    speakers: list[SpeakerProfile]
    utterances: list[Utterance]
    seed: int

    def __post_init__(self):
        self._by_speaker: dict[int, list[Utterance]] = {}
        for utt in self.utterances:
            self._by_speaker.setdefault(utt.speaker_id, []).append(utt)

    @property
    def num_speakers(self) -> int:
        return len(self.speakers)

    def speaker(self, speaker_id: int) -> SpeakerProfile:
        for spk in self.speakers:
            if spk.speaker_id == speaker_id:
                return spk
        raise KeyError(f"no speaker {speaker_id} in pool")

    def utterances_of(self, speaker_id: int) -> list[Utterance]:
        return self._by_speaker.get(speaker_id, [])

    def split(self) -> tuple[list[Utterance], list[Utterance]]:
        """Train/validation utterances, 4:1 within each speaker."""
        train, val = [], []
        for sid in sorted(self._by_speaker):
            for i, utt in enumerate(self._by_speaker[sid]):
                (val if i % 5 == 4 else train).append(utt)
        return train, val


def build_pool(num_speakers: int, utterances_per_speaker: int,
               cfg: ToyWorldConfig | None = None, seed: int = 0) -> UtterancePool:
    """Generate a deterministic pool of speakers and utterances."""
    cfg = cfg or ToyWorldConfig()
    speakers = [make_speaker(_child_seed(seed, 1, i), cfg, speaker_id=i)
                for i in range(num_speakers)]
    utterances = []
    for si, spk in enumerate(speakers):
        for ui in range(utterances_per_speaker):
            utt_seed = _child_seed(seed, 2, si, ui)
            rng = np.random.default_rng(np.random.SeedSequence([seed, 3, si, ui]))
            phonemes = tuple(int(p) for p in
                             rng.integers(cfg.num_phonemes, size=cfg.phonemes_per_utterance))
            utterances.append(
                synth_utterance(spk, phonemes, cfg, seed=utt_seed,
                                uid=f"spk{spk.speaker_id}_utt{ui}")
            )
    return UtterancePool(cfg, speakers, utterances, seed)


HARD_CASES = ("none", "same_cluster", "same_sentence")


def sample_mixture(pool: UtterancePool, rng: np.random.Generator,
                   hard_case: str = "none",
                   utterances: list[Utterance] | None = None) -> MixtureSample:
    """Draw a two-speaker mixture, optionally constrained to a hard case.

    ``same_cluster`` forces both speakers into one timbre cluster;
    ``same_sentence`` forces identical phoneme sequences spoken by two
    distinct speakers (the second rendition is synthesized on demand).
    ``utterances`` restricts the draw, e.g. to a train split.
    """
    if hard_case not in HARD_CASES:
        raise ValueError(f"hard_case must be one of {HARD_CASES}, got {hard_case!r}")
    utts = utterances if utterances is not None else pool.utterances
    by_speaker: dict[int, list[Utterance]] = {}
    for u in utts:
        by_speaker.setdefault(u.speaker_id, []).append(u)
    sids = sorted(by_speaker)
    if len(sids) < 2:
        raise ValueError("pool needs at least 2 speakers with utterances")

    if hard_case == "same_cluster":
        clusters: dict[int, list[int]] = {}
        for sid in sids:
            clusters.setdefault(pool.speaker(sid).timbre_cluster, []).append(sid)
        eligible = [c for c in sorted(clusters) if len(clusters[c]) >= 2]
        if not eligible:
            raise ValueError("no timbre cluster has 2 speakers; cannot draw same_cluster")
        cluster = eligible[rng.integers(len(eligible))]
        sid_a, sid_b = rng.choice(clusters[cluster], size=2, replace=False)
    else:
        sid_a, sid_b = rng.choice(sids, size=2, replace=False)

    utt_a = by_speaker[int(sid_a)][rng.integers(len(by_speaker[int(sid_a)]))]
    if hard_case == "same_sentence":
        dyn_seed = int(rng.integers(2**31))
        utt_b = synth_utterance(pool.speaker(int(sid_b)), utt_a.phonemes, pool.config,
                                seed=dyn_seed, uid=f"spk{int(sid_b)}_dyn{dyn_seed}")
    else:
        utt_b = by_speaker[int(sid_b)][rng.integers(len(by_speaker[int(sid_b)]))]

    mixture = Waveform(utt_a.audio.samples + utt_b.audio.samples, utt_a.audio.sample_rate)
    return MixtureSample(
        uid=f"{utt_a.uid}+{utt_b.uid}",
        mixture=mixture,
        sources=(utt_a, utt_b),
        target_index=0,
    )


def sample_triplet(pool: UtterancePool, rng: np.random.Generator,
                   kind: str = "identity",
                   utterances: list[Utterance] | None = None) -> TripletSample:
    """Draw a training triplet.

    identity: anchor and positive are two utterances of one speaker, the
    negative comes from a different speaker. phonetic: the positive is
    the anchor utterance itself (audio and visuals of the same
    rendition), the negative is an utterance with a different phoneme
    sequence.
    """
    utts = utterances if utterances is not None else pool.utterances
    by_speaker: dict[int, list[Utterance]] = {}
    for u in utts:
        by_speaker.setdefault(u.speaker_id, []).append(u)
    sids = sorted(by_speaker)

    if kind == "identity":
        rich = [s for s in sids if len(by_speaker[s]) >= 2]
        if not rich or len(sids) < 2:
            raise ValueError("identity triplets need 2+ speakers and a speaker with 2+ utterances")
        sid_a = rich[rng.integers(len(rich))]
        anchor, positive = (by_speaker[sid_a][i]
                            for i in rng.choice(len(by_speaker[sid_a]), size=2, replace=False))
        others = [s for s in sids if s != sid_a]
        sid_b = others[rng.integers(len(others))]
        negative = by_speaker[sid_b][rng.integers(len(by_speaker[sid_b]))]
        return TripletSample(anchor, positive, negative, "identity")

    if kind == "phonetic":
        flat = [u for s in sids for u in by_speaker[s]]
        anchor = flat[rng.integers(len(flat))]
        candidates = [u for u in flat if u.phonemes != anchor.phonemes]
        if not candidates:
            raise ValueError("no utterance with a different phoneme sequence in pool")
        negative = candidates[rng.integers(len(candidates))]
        return TripletSample(anchor, anchor, negative, "phonetic")

    raise ValueError(f"kind must be 'identity' or 'phonetic', got {kind!r}")


# ---------------------------------------------------------------------------
# On-disk dataset format: manifest.csv + WAV audio + raw float32 streams with
# JSON sidecars + pool.json (config and speaker table).
# ---------------------------------------------------------------------------

def _write_stream(path: Path, array: np.ndarray, fps: float) -> None:
    data = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(data.tobytes())
    sidecar = {"dtype": "<f4", "shape": list(array.shape), "fps": fps}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def _read_stream(path: Path) -> tuple[np.ndarray, float]:
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype=sidecar["dtype"])
    return data.reshape(sidecar["shape"]).astype(np.float64), float(sidecar["fps"])


def save_dataset(pool: UtterancePool, outdir) -> Path:
    """Write the pool to disk; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = pool.config
    pool_meta = {
        "seed": pool.seed,
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "speakers": [
            {
                "speaker_id": s.speaker_id,
                "f0": s.f0,
                "formants": list(s.formants),
                "bandwidths": list(s.bandwidths),
                "harmonic_decay": s.harmonic_decay,
                "timbre_cluster": s.timbre_cluster,
                "face_vector": [float(v) for v in s.face_vector],
            }
            for s in pool.speakers
        ],
    }
    (outdir / "pool.json").write_text(json.dumps(pool_meta, indent=1))

    manifest = outdir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utterance_id", "speaker_id", "phonemes", "durations",
                         "audio_path", "face_path", "lip_path"])
        for utt in pool.utterances:
            audio_path = f"{utt.uid}.wav"
            face_path = f"{utt.uid}.face.f32"
            lip_path = f"{utt.uid}.lip.f32"
            write_wav(outdir / audio_path, utt.audio)
            _write_stream(outdir / face_path, utt.visuals.face_stream, utt.visuals.fps)
            _write_stream(outdir / lip_path, utt.visuals.lip_stream, utt.visuals.fps)
            writer.writerow([
                utt.uid, utt.speaker_id,
                "-".join(str(p) for p in utt.phonemes),
                "-".join(f"{d:.6f}" for d in utt.durations),
                audio_path, face_path, lip_path,
            ])
    return manifest


def load_dataset(outdir) -> UtterancePool:
    """Reload a pool written by :func:`save_dataset`.

    Audio comes back 16-bit quantized; downstream consumers treat the
    on-disk dataset as the ground truth.
    """
    from .signal import read_wav

    outdir = Path(outdir)
    pool_meta = json.loads((outdir / "pool.json").read_text())
    cfg = ToyWorldConfig(**pool_meta["config"])
    speakers = [
        SpeakerProfile(
            speaker_id=s["speaker_id"],
            f0=s["f0"],
            formants=tuple(s["formants"]),
            bandwidths=tuple(s["bandwidths"]),
            harmonic_decay=s["harmonic_decay"],
            timbre_cluster=s["timbre_cluster"],
            face_vector=np.array(s["face_vector"]),
        )
        for s in pool_meta["speakers"]
    ]
    utterances = []
    with open(outdir / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            face, fps = _read_stream(outdir / row["face_path"])
            lip, _ = _read_stream(outdir / row["lip_path"])
            utterances.append(Utterance(
                uid=row["utterance_id"],
                speaker_id=int(row["speaker_id"]),
                phonemes=tuple(int(p) for p in row["phonemes"].split("-")),
                durations=tuple(float(d) for d in row["durations"].split("-")),
                audio=read_wav(outdir / row["audio_path"]),
                visuals=VisualStreams(face, lip, fps),
            ))
    return UtterancePool(cfg, speakers, utterances, pool_meta["seed"])
