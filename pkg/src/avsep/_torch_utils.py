"""Small shared helpers for the torch-backed model code.

All models in this package run in float64 on CPU; gradient checks and
loss-composition identities rely on the extra precision.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


def mlp(sizes: tuple[int, ...], bias: bool = True) -> nn.Sequential:
    """Linear/ReLU stack in float64: sizes (in, h1, ..., out)."""
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(nn.Linear(a, b, bias=bias))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers).double()


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """State dict as prefixed numpy arrays, in a stable order."""
    return {f"{prefix}.{k}": v.detach().numpy().copy()
            for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, prefix: str, arrays: dict[str, np.ndarray]) -> None:
    state = {}
    skip = len(prefix) + 1
    for key, value in arrays.items():
        if key.startswith(prefix + "."):
            state[key[skip:]] = torch.from_numpy(np.ascontiguousarray(value))
    module.load_state_dict(state)


def with_torch_seed(seed: int, fn):
    """Run ``fn`` under a fixed torch RNG state (e.g. module init)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return fn()


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    return x / (x.norm(dim=dim, keepdim=True) + eps)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)
