"""Training regimes for the separation network.

Three modes share one loop skeleton:

* ``baseline``    -- minimize -SI-SNR of the separated waveform only;
* ``triplet``     -- add the weighted identity + phonetic triplet losses
                     computed through the frozen extractors on the
                     predicted audio;
* ``adversarial`` -- alternate discriminator ascent steps on the shared
                     min-max value with generator steps on
                     -SI-SNR + lambda_adv * value.

The module also provides finite-difference gradient verification for
every differentiable objective in the package and the shared checkpoint
entry points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from ._torch_utils import as_tensor
from .correlation import DiscriminatorParams, TrainWeights, adversarial_value, \
    identity_triplet_loss, phonetic_triplet_loss
from .extractors import FrozenExtractors
from .metrics import si_snr, si_snr_tensor
from .separator import SeparatorConfig, SeparatorNet, SeparatorParams
from .toyworld import HARD_CASES, MixtureSample, UtterancePool, sample_mixture

MODES = ("baseline", "triplet", "adversarial")


class NumericalError(RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, last_good_checkpoint: str | None = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    steps: int = 500
    batch_size: int = 6
    step_size: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    weights: TrainWeights = field(default_factory=TrainWeights)
    d_steps_per_g_step: int = 1
    # Discriminator learning rate; defaults to step_size.
    d_step_size: float | None = None
    # Discriminator updates draw this many embeddings per side from a
    # rolling buffer of recent batches, so the discriminator stays well
    # fit without extra separator forwards.
    d_batch_size: int = 64
    d_buffer_size: int = 512
    # Generator steps before the correlation/adversarial term switches on
    # (0 = joint from scratch).
    warmup_steps: int = 0
    eval_every: int = 100
    arch: SeparatorConfig = field(default_factory=SeparatorConfig)
    # Proportions of (none, same_cluster, same_sentence) mixture draws.
    hard_case_probs: tuple[float, float, float] = (0.5, 0.25, 0.25)
    hard_bank_size: int = 32
    val_mixtures: int = 64
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps <= 0 or self.step_size <= 0:
            raise ValueError("steps and step_size must be positive")
        if self.d_steps_per_g_step < 1:
            raise ValueError("d_steps_per_g_step must be >= 1")
        if abs(sum(self.hard_case_probs) - 1.0) > 1e-9:
            raise ValueError("hard_case_probs must sum to 1")


@dataclass
class TrainLogEntry:
    step: int
    sep_loss: float
    corr_loss: float
    adv_value: float
    val_si_snr: float | None = None


@dataclass
class TrainLog:
    """Append-only per-step records plus the D/G update event sequence."""

    entries: list[TrainLogEntry] = field(default_factory=list)
    update_events: list[str] = field(default_factory=list)

    def append(self, entry: TrainLogEntry) -> None:
        if self.entries and entry.step <= self.entries[-1].step:
            raise ValueError("step index must increase monotonically")
        self.entries.append(entry)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,sep_loss,corr_loss,adv_value,val_si_snr\n")
            for e in self.entries:
                val = "" if e.val_si_snr is None else f"{e.val_si_snr:.6f}"
                fh.write(f"{e.step},{e.sep_loss:.10f},{e.corr_loss:.10f},"
                         f"{e.adv_value:.10f},{val}\n")

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as fh:
            next(fh)
            for line in fh:
                step, sep, corr, adv, val = line.rstrip("\n").split(",")
                log.append(TrainLogEntry(int(step), float(sep), float(corr), float(adv),
                                         float(val) if val else None))
        return log


def generator_loss(sep_loss, corr_loss, adv_value, weights: TrainWeights, mode: str):
    """Total objective minimized by the separation network in each mode."""
    if mode == "baseline":
        return sep_loss
    if mode == "triplet":
        return sep_loss + weights.lambda_corr * corr_loss
    if mode == "adversarial":
        return sep_loss + weights.lambda_adv * adv_value
    raise ValueError(f"unknown mode {mode!r}")


class _BatchSampler:
    """Draws training batches: mixtures plus the extra same-speaker
    utterance used as the identity-positive."""

    def __init__(self, pool: UtterancePool, utterances, cfg: TrainConfig,
                 rng: np.random.Generator):
        self.pool = pool
        self.utterances = utterances
        self.cfg = cfg
        self.rng = rng
        self.by_speaker: dict[int, list] = {}
        for u in utterances:
            self.by_speaker.setdefault(u.speaker_id, []).append(u)
        # Same-sentence pairs are synthesized once up front; drawing them
        # live would dominate the step time.
        self.sentence_bank: list[MixtureSample] = []
        if cfg.hard_case_probs[2] > 0:
            for _ in range(cfg.hard_bank_size):
                self.sentence_bank.append(
                    sample_mixture(pool, rng, "same_sentence", utterances))

    def draw_mixture(self) -> MixtureSample:
        case = HARD_CASES[self.rng.choice(3, p=self.cfg.hard_case_probs)]
        if case == "same_sentence":
            return self.sentence_bank[self.rng.integers(len(self.sentence_bank))]
        return sample_mixture(self.pool, self.rng, case, self.utterances)

    def second_of_speaker(self, utterance):
        candidates = [u for u in self.by_speaker[utterance.speaker_id]
                      if u.uid != utterance.uid]
        if not candidates:
            return utterance
        return candidates[self.rng.integers(len(candidates))]

    def draw_batch(self, size: int) -> dict[str, torch.Tensor]:
        mixtures = [self.draw_mixture() for _ in range(size)]
        seconds = [self.second_of_speaker(m.target) for m in mixtures]
        stack = lambda arrays: torch.stack([as_tensor(a) for a in arrays])
        return {
            "mix": stack([m.mixture.samples for m in mixtures]),
            "ref": stack([m.target.audio.samples for m in mixtures]),
            "face": stack([m.target.visuals.face_stream for m in mixtures]),
            "lip": stack([m.target.visuals.lip_stream for m in mixtures]),
            "face_pos": stack([s.visuals.face_stream for s in seconds]),
            "face_neg": stack([m.interferer.visuals.face_stream for m in mixtures]),
            "lip_neg": stack([m.interferer.visuals.lip_stream for m in mixtures]),
        }


def _correlation_terms(ex: FrozenExtractors, est: torch.Tensor,
                       batch: dict[str, torch.Tensor], weights: TrainWeights):
    """Batched triplet losses on the predicted audio (means over the batch)."""
    i_a = ex.embed_audio_id(est)
    i_v_pos = ex.embed_visual_id(batch["face_pos"])
    i_v_neg = ex.embed_visual_id(batch["face_neg"])
    l1 = identity_triplet_loss(i_a, i_v_pos, i_v_neg, weights.margin).mean()
    p_a = ex.embed_audio_ph(est)
    p_v_pos = ex.embed_visual_ph(batch["lip"])
    p_v_neg = ex.embed_visual_ph(batch["lip_neg"])
    l2 = phonetic_triplet_loss(p_a, p_v_pos, p_v_neg, weights.margin).mean()
    return l1 + l2


def _adversarial_terms(ex: FrozenExtractors, disc: DiscriminatorParams,
                       est: torch.Tensor, batch: dict[str, torch.Tensor]):
    """Shared min-max value summed over the identity and phonetic pairs."""
    i_a = ex.embed_audio_id(est)
    i_v = ex.embed_visual_id(batch["face"])
    p_a = ex.embed_audio_ph(est)
    p_v = ex.embed_visual_ph(batch["lip"])
    return adversarial_value(disc.identity, i_v, i_a) \
        + adversarial_value(disc.phonetic, p_v, p_a)


class _EmbeddingBuffer:
    """Rolling buffer of detached embeddings for discriminator updates."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.rows: dict[str, list[torch.Tensor]] = {
            "i_v": [], "i_a": [], "p_v": [], "p_a": []}

    def push(self, **batches: torch.Tensor) -> None:
        for key, batch in batches.items():
            rows = self.rows[key]
            rows.extend(batch.detach())
            del rows[: max(0, len(rows) - self.capacity)]

    def sample(self, key: str, size: int, rng: np.random.Generator) -> torch.Tensor:
        rows = self.rows[key]
        idx = rng.integers(len(rows), size=min(size, len(rows)))
        return torch.stack([rows[i] for i in idx])


def train(dataset: UtterancePool, extractors: FrozenExtractors | None,
          cfg: TrainConfig) -> tuple[SeparatorParams, DiscriminatorParams | None, TrainLog]:
    """Run one training regime; deterministic under ``cfg.seed``.

    Returns the trained separator, the discriminators (adversarial mode
    only, else None), and the per-step log. Aborts with
    :class:`NumericalError` on a non-finite loss.
    """
    if cfg.mode != "baseline":
        if extractors is None:
            raise ValueError(f"mode {cfg.mode!r} requires pretrained extractors")
        if not extractors.frozen:
            raise ValueError("extractors must be frozen before separator training")

    rng = np.random.default_rng(cfg.seed)
    params = SeparatorParams(cfg.arch, seed=cfg.seed)
    opt_g = torch.optim.Adam(params.net.parameters(), lr=cfg.step_size,
                             betas=cfg.adam_betas)
    disc = None
    opt_d = None
    if cfg.mode == "adversarial":
        ex_cfg = extractors.config
        disc = DiscriminatorParams(ex_cfg.dim_id, ex_cfg.dim_ph, seed=cfg.seed + 1)
        opt_d = torch.optim.Adam(disc.parameters(),
                                 lr=cfg.d_step_size or cfg.step_size,
                                 betas=cfg.adam_betas)

    train_utts, val_utts = dataset.split()
    if not train_utts or not val_utts:
        raise ValueError("dataset split is empty")
    sampler = _BatchSampler(dataset, train_utts, cfg, rng)
    val_rng = np.random.default_rng(cfg.seed + 7)
    val_sampler = _BatchSampler(dataset, val_utts, cfg, val_rng)
    val_batch = val_sampler.draw_batch(cfg.val_mixtures)

    log = TrainLog()
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_good: str | None = None

    def validation_si_snr() -> float:
        with torch.no_grad():
            est = params.net(val_batch["mix"], val_batch["face"], val_batch["lip"])
        return float(np.mean([si_snr(val_batch["ref"][i].numpy(), est[i].numpy())
                              for i in range(est.shape[0])]))

    buffer = _EmbeddingBuffer(cfg.d_buffer_size)
    for step in range(1, cfg.steps + 1):
        adv_logged = 0.0
        correlating = step > cfg.warmup_steps
        if cfg.mode == "adversarial" and correlating:
            d_batch = sampler.draw_batch(cfg.batch_size)
            with torch.no_grad():
                d_est = params.net(d_batch["mix"], d_batch["face"], d_batch["lip"])
                buffer.push(
                    i_a=extractors.embed_audio_id(d_est),
                    i_v=extractors.embed_visual_id(d_batch["face"]),
                    p_a=extractors.embed_audio_ph(d_est),
                    p_v=extractors.embed_visual_ph(d_batch["lip"]),
                )
            for _ in range(cfg.d_steps_per_g_step):
                opt_d.zero_grad()
                value = adversarial_value(
                    disc.identity,
                    buffer.sample("i_v", cfg.d_batch_size, rng),
                    buffer.sample("i_a", cfg.d_batch_size, rng),
                ) + adversarial_value(
                    disc.phonetic,
                    buffer.sample("p_v", cfg.d_batch_size, rng),
                    buffer.sample("p_a", cfg.d_batch_size, rng),
                )
                (-value).backward()   # discriminator ascends the shared value
                opt_d.step()
                log.update_events.append("D")

        batch = sampler.draw_batch(cfg.batch_size)
        opt_g.zero_grad()
        est = params.net(batch["mix"], batch["face"], batch["lip"])
        sep_loss = (-si_snr_tensor(batch["ref"], est)).mean()
        corr_loss = torch.zeros((), dtype=torch.float64)
        adv_val = torch.zeros((), dtype=torch.float64)
        if cfg.mode == "triplet" and correlating:
            corr_loss = _correlation_terms(extractors, est, batch, cfg.weights)
        elif cfg.mode == "adversarial" and correlating:
            for p in disc.parameters():
                p.requires_grad_(False)
            adv_val = _adversarial_terms(extractors, disc, est, batch)
        total = generator_loss(sep_loss, corr_loss, adv_val, cfg.weights, cfg.mode)
        if not torch.isfinite(total):
            raise NumericalError(
                f"non-finite loss at step {step}"
                + (f"; last good checkpoint: {last_good}" if last_good else ""),
                last_good_checkpoint=last_good,
            )
        total.backward()
        if cfg.mode == "adversarial":
            for p in disc.parameters():
                p.requires_grad_(True)
        opt_g.step()
        log.update_events.append("G")
        adv_logged = float(adv_val.detach())

        val = None
        if step % cfg.eval_every == 0 or step == cfg.steps:
            val = validation_si_snr()
            if ckpt_dir:
                path = str(ckpt_dir / f"separator_step{step:06d}.ckpt")
                save_checkpoint(params, path)
                last_good = path
        log.append(TrainLogEntry(step, float(sep_loss.detach()),
                                 float(corr_loss.detach()), adv_logged, val))

    return params, disc, log


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

GRADIENT_CHECK_LOSSES = ("quadratic", "si_snr_pipeline", "identity_triplet",
                         "phonetic_triplet", "adversarial_value")


def _max_fd_error(loss_fn, groups: dict[str, torch.Tensor], eps: float,
                  rng: np.random.Generator, coords_per_group: int = 50) -> float:
    """Max |analytic - central difference| over sampled coordinates,
    normalized by the largest analytic gradient magnitude in each group."""
    tensors = list(groups.values())
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    worst = 0.0
    for tensor, grad in zip(tensors, grads):
        flat = tensor.view(-1)   # view, not copy: FD must hit live storage
        gflat = grad.reshape(-1)
        scale = max(float(gflat.abs().max()), 1e-8)
        n = flat.numel()
        picks = range(n) if n <= coords_per_group else \
            rng.choice(n, size=coords_per_group, replace=False)
        for i in picks:
            with torch.no_grad():
                original = float(flat[i])
                flat[i] = original + eps
                hi = float(loss_fn())
                flat[i] = original - eps
                lo = float(loss_fn())
                flat[i] = original
            fd = (hi - lo) / (2 * eps)
            worst = max(worst, abs(float(gflat[i]) - fd) / scale)
    return worst


def _tiny_pipeline(seed: int = 0):
    from .signal import StftConfig

    stft_cfg = StftConfig(nfft=64, hop=16, window_size=64)
    arch = SeparatorConfig(stft=stft_cfg, dim_face=6, dim_lip=5,
                           audio_channels=8, face_channels=4, lip_channels=4,
                           widths=(8, 12), kernel=3)
    torch.manual_seed(seed)
    net = SeparatorNet(arch)
    gen = np.random.default_rng(seed)
    length, frames = 800, 2
    mix = torch.from_numpy(gen.normal(size=length))
    ref = torch.from_numpy(gen.normal(size=length))
    face = torch.from_numpy(gen.normal(size=(frames, arch.dim_face)))
    lip = torch.from_numpy(gen.normal(size=(frames, arch.dim_lip)))
    return net, mix, ref, face, lip


def gradient_check(loss_id: str, params=None, eps: float = 1e-6,
                   seed: int = 0, coords_per_group: int = 50) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_id`` selects a self-contained scenario (tiny architectures,
    seeded inputs); ``params`` optionally overrides the parameter bundle
    under test where that makes sense. Returns the max relative error.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must be in [1e-6, 1e-4], got {eps}")
    rng = np.random.default_rng(seed)

    if loss_id == "quadratic":
        gen = np.random.default_rng(seed)
        p = torch.from_numpy(gen.normal(size=20)).requires_grad_(True) \
            if params is None else params
        c = torch.from_numpy(gen.uniform(0.5, 2.0, size=20))
        b = torch.from_numpy(gen.normal(size=20))
        return _max_fd_error(lambda: (c * p * p).sum() + (b * p).sum(),
                             {"p": p}, eps, rng, coords_per_group)

    if loss_id == "si_snr_pipeline":
        if params is not None:
            raise ValueError("si_snr_pipeline builds its own tiny architecture")
        net, mix, ref, face, lip = _tiny_pipeline(seed)
        # Finite differences must see the same storage autograd uses, so
        # check each parameter tensor in place, grouped for reporting.
        flat_groups = {}
        for name, plist in (("audio_encoder", net.audio_encoder.parameters()),
                            ("face_encoder", net.face_encoder.parameters()),
                            ("lip_encoder", net.lip_encoder.parameters()),
                            ("backbone", net.backbone.parameters())):
            for j, p in enumerate(plist):
                flat_groups[f"{name}.{j}"] = p
        loss_fn = lambda: (-si_snr_tensor(ref, net(mix, face, lip))).mean()
        return _max_fd_error(loss_fn, flat_groups, eps, rng, coords_per_group)

    if loss_id in ("identity_triplet", "phonetic_triplet"):
        gen = np.random.default_rng(seed)
        anchor = torch.from_numpy(gen.normal(size=8)).requires_grad_(True)
        # Positive far from / negative close to the anchor keeps the hinge
        # active and away from its kink.
        with torch.no_grad():
            pos = (-anchor + 0.1 * torch.from_numpy(gen.normal(size=8)))
            neg = (anchor + 0.1 * torch.from_numpy(gen.normal(size=8)))
        pos, neg = pos.requires_grad_(True), neg.requires_grad_(True)
        fn = identity_triplet_loss if loss_id == "identity_triplet" \
            else phonetic_triplet_loss
        return _max_fd_error(lambda: fn(anchor, pos, neg, 0.5),
                             {"anchor": anchor, "pos": pos, "neg": neg},
                             eps, rng, coords_per_group)

    if loss_id == "adversarial_value":
        from .correlation import Discriminator

        torch.manual_seed(seed)
        disc = Discriminator(8, hidden=8) if params is None else params
        gen = np.random.default_rng(seed)
        v = torch.from_numpy(gen.normal(size=(4, 8))).requires_grad_(True)
        a = torch.from_numpy(gen.normal(size=(4, 8))).requires_grad_(True)
        groups = {"visual_embeddings": v, "audio_embeddings": a}
        for j, p in enumerate(disc.parameters()):
            groups[f"d_params.{j}"] = p
        return _max_fd_error(lambda: adversarial_value(disc, v, a),
                             groups, eps, rng, coords_per_group)

    raise ValueError(f"unknown loss_id {loss_id!r}; options: {GRADIENT_CHECK_LOSSES}")


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

_KINDS = {
    "separator": SeparatorParams,
    "extractors": FrozenExtractors,
    "discriminators": DiscriminatorParams,
}


def save_checkpoint(params, path) -> None:
    """Write any parameter bundle to the shared container format."""
    for kind, cls in _KINDS.items():
        if isinstance(params, cls):
            meta, arrays = params.to_arrays()
            ckpt.save_arrays(path, kind, meta, arrays)
            return
    raise TypeError(f"cannot checkpoint object of type {type(params).__name__}")


def load_checkpoint(path, expected_kind: str | None = None):
    """Load a bundle written by :func:`save_checkpoint`; byte-exact."""
    kind, meta, arrays = ckpt.load_arrays(path, expected_kind)
    if kind not in _KINDS:
        raise ckpt.CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    return _KINDS[kind].from_arrays(meta, arrays)
