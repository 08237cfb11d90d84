"""Cross-modal correlation objectives.

Two mechanisms pull the audio-side and visual-side embeddings of the
same speaker/content together while pushing mismatched pairs apart:

* hinge (triplet) losses under cosine distance, one over identity
  embeddings and one over phonetic embeddings;
* an adversarial value: a small MLP discriminator scores embeddings as
  visual-origin vs audio-origin, the discriminator maximizes the value
  while the separation network minimizes it, so at equilibrium the two
  modalities' embedding distributions are indistinguishable.

All functions accept numpy arrays or torch tensors; with plain-array
inputs they return floats, with tensor inputs they stay differentiable.
A leading batch axis is broadcast through the triplet ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ._torch_utils import as_tensor, load_module_arrays, mlp, module_arrays, \
    with_torch_seed

LOG_FLOOR = 1e-12

# Test instrumentation: bumped on every discriminator forward (see the
# inference-parity contract).
DISCRIMINATOR_FORWARDS = 0


@dataclass(frozen=True)
class TrainWeights:
    """Loss weighting: triplet margin and the correlation/adversarial terms."""

    margin: float = 0.5
    lambda_corr: float = 0.1
    lambda_adv: float = 0.05

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.lambda_corr < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be >= 0")


def _wants_float(*xs) -> bool:
    return not any(isinstance(x, torch.Tensor) for x in xs)


def _finish(value: torch.Tensor, wants_float: bool):
    if wants_float:
        value = value.detach()
        return float(value) if value.dim() == 0 else value.numpy()
    return value


def cosine_distance(u, v):
    """1 - cos(u, v) over the last axis; in [0, 2]. Zero-norm inputs error."""
    wants_float = _wants_float(u, v)
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"dim mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    nu, nv = u.norm(dim=-1), v.norm(dim=-1)
    if (nu.detach() < 1e-300).any() or (nv.detach() < 1e-300).any():
        raise ValueError("cosine distance undefined for zero-norm input")
    return _finish(1.0 - (u * v).sum(dim=-1) / (nu * nv), wants_float)


def _triplet_hinge(anchor, positive, negative, margin: float):
    wants_float = _wants_float(anchor, positive, negative)
    d_pos = cosine_distance(as_tensor(anchor), as_tensor(positive))
    d_neg = cosine_distance(as_tensor(anchor), as_tensor(negative))
    return _finish(torch.clamp(d_pos - d_neg + margin, min=0.0), wants_float)


def identity_triplet_loss(i_a_anchor, i_v_pos, i_v_neg, margin: float = 0.5):
    """Hinge pulling the audio identity embedding toward the matching
    speaker's visual identity embedding and away from another speaker's:
    max{d(anchor, pos) - d(anchor, neg) + margin, 0}."""
    return _triplet_hinge(i_a_anchor, i_v_pos, i_v_neg, margin)


def phonetic_triplet_loss(p_a, p_v_pos, p_v_neg, margin: float = 0.5):
    """Same hinge over phonetic embeddings: the positive is the visual
    phonetic embedding of the content actually spoken, the negative comes
    from different content."""
    return _triplet_hinge(p_a, p_v_pos, p_v_neg, margin)


def combined_correlation_loss(l1, l2):
    """Sum of the two correlation losses."""
    wants_float = _wants_float(l1, l2)
    l1, l2 = as_tensor(l1), as_tensor(l2)
    for name, val in (("l1", l1), ("l2", l2)):
        if not torch.isfinite(val.detach()).all() or (val.detach() < 0).any():
            raise ValueError(f"{name} must be finite and >= 0")
    return _finish(l1 + l2, wants_float)


class Discriminator(nn.Module):
    """MLP scoring one embedding vector: 1 = visual-origin, 0 = audio-origin."""

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.dim = dim
        self.net = mlp((dim, hidden, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        global DISCRIMINATOR_FORWARDS
        DISCRIMINATOR_FORWARDS += 1
        if x.shape[-1] != self.dim:
            raise ValueError(f"embedding dim {x.shape[-1]} != discriminator dim {self.dim}")
        return torch.sigmoid(self.net(x).squeeze(-1))


class DiscriminatorParams:
    """The two adversarial discriminators (identity and phonetic)."""

    def __init__(self, dim_id: int = 64, dim_ph: int = 64, hidden: int = 64,
                 seed: int = 0):
        self.dim_id, self.dim_ph, self.hidden, self.seed = dim_id, dim_ph, hidden, seed
        self.identity, self.phonetic = with_torch_seed(
            seed, lambda: (Discriminator(dim_id, hidden), Discriminator(dim_ph, hidden)))

    def parameters(self):
        return list(self.identity.parameters()) + list(self.phonetic.parameters())

    def to_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"dim_id": self.dim_id, "dim_ph": self.dim_ph,
                "hidden": self.hidden, "seed": self.seed}
        arrays = module_arrays(self.identity, "identity")
        arrays.update(module_arrays(self.phonetic, "phonetic"))
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "DiscriminatorParams":
        params = cls(int(meta["dim_id"]), int(meta["dim_ph"]),
                     int(meta["hidden"]), int(meta["seed"]))
        load_module_arrays(params.identity, "identity", arrays)
        load_module_arrays(params.phonetic, "phonetic", arrays)
        return params


def discriminator_forward(disc: Discriminator, embedding):
    """Probability that one embedding is visual-origin; strictly in (0, 1)."""
    wants_float = _wants_float(embedding)
    out = disc(as_tensor(embedding))
    return _finish(out, wants_float)


def adversarial_value(disc: Discriminator, visual_batch, audio_batch):
    """Shared min-max objective value:

        V = mean log D(visual) + mean log(1 - D(audio))

    with both logs floored at 1e-12. The discriminator is trained to
    maximize V, the separation network to minimize it; V <= 0 always and
    an uninformative D = 1/2 gives 2 log(1/2) ~= -1.386.
    """
    wants_float = _wants_float(visual_batch, audio_batch)
    visual_batch = torch.atleast_2d(as_tensor(visual_batch))
    audio_batch = torch.atleast_2d(as_tensor(audio_batch))
    if visual_batch.shape[0] == 0 or audio_batch.shape[0] == 0:
        raise ValueError("adversarial value needs nonempty batches")
    d_v = disc(visual_batch)
    d_a = disc(audio_batch)
    value = torch.log(torch.clamp(d_v, min=LOG_FLOOR)).mean() \
        + torch.log(torch.clamp(1.0 - d_a, min=LOG_FLOOR)).mean()
    return _finish(value, wants_float)


def train_origin_probe(visual_embs, audio_embs, seed: int = 0, hidden: int = 64,
                       epochs: int = 400, learning_rate: float = 1e-2,
                       holdout_fraction: float = 0.2) -> tuple[Discriminator, float]:
    """Fit a fresh discriminator on frozen embeddings; report held-out accuracy.

    This is the probe used to measure how separable the audio and visual
    embedding distributions are (highly separable before adversarial
    alignment, near chance after).
    """
    visual_embs = torch.atleast_2d(as_tensor(visual_embs)).detach()
    audio_embs = torch.atleast_2d(as_tensor(audio_embs)).detach()
    if visual_embs.shape[-1] != audio_embs.shape[-1]:
        raise ValueError("embedding dims differ between modalities")

    def split(x):
        cut = max(1, int(round(x.shape[0] * (1 - holdout_fraction))))
        return x[:cut], x[cut:]

    v_train, v_test = split(visual_embs)
    a_train, a_test = split(audio_embs)
    probe = with_torch_seed(seed, lambda: Discriminator(visual_embs.shape[-1], hidden))
    optimizer = torch.optim.Adam(probe.parameters(), lr=learning_rate)
    bce = nn.BCELoss()
    x_train = torch.cat([v_train, a_train])
    y_train = torch.cat([torch.ones(v_train.shape[0], dtype=torch.float64),
                         torch.zeros(a_train.shape[0], dtype=torch.float64)])
    for _ in range(epochs):
        optimizer.zero_grad()
        loss = bce(torch.clamp(probe(x_train), 1e-7, 1 - 1e-7), y_train)
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        correct = int((probe(v_test) >= 0.5).sum()) + int((probe(a_test) < 0.5).sum())
        accuracy = correct / (v_test.shape[0] + a_test.shape[0])
    return probe, float(accuracy)
