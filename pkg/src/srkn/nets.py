"""Neural network building blocks: encoder, decoders, GRU cell, switch heads.

All parameters are float64. Initialization is driven by an explicit
``torch.Generator`` so that model construction is reproducible without
touching the global RNG state.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .gauss import VAR_FLOOR, DiagGaussian, positive_map


def _init_linear(layer: nn.Linear, generator: torch.Generator | None):
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


class MLP(nn.Module):
    """Dense stack with tanh hidden activations and a linear output layer."""

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        dims = [in_dim, *hidden, out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=torch.float64)
            for i in range(len(dims) - 1)
        )
        for layer in self.layers:
            _init_linear(layer, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


class GRUCell(nn.Module):
    """Single gated recurrent unit cell (update/reset/candidate gates)."""

    def __init__(self, input_dim: int, hidden_dim: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.x2h = nn.Linear(input_dim, 3 * hidden_dim, dtype=torch.float64)
        self.h2h = nn.Linear(hidden_dim, 3 * hidden_dim, dtype=torch.float64)
        bound = 1.0 / math.sqrt(hidden_dim)
        with torch.no_grad():
            for p in self.parameters():
                p.uniform_(-bound, bound, generator=generator)

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        gx = self.x2h(x)
        gh = self.h2h(h)
        x_r, x_u, x_c = gx.chunk(3, dim=-1)
        h_r, h_u, h_c = gh.chunk(3, dim=-1)
        reset = torch.sigmoid(x_r + h_r)
        update = torch.sigmoid(x_u + h_u)
        cand = torch.tanh(x_c + reset * h_c)
        return update * h + (1.0 - update) * cand


class GaussianHead(nn.Module):
    """MLP whose output parameterizes a diagonal Gaussian (mean + variance).

    The variance half of the output passes through the smooth positive
    activation, so it is always above the variance floor.
    """

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int,
                 var_floor: float = VAR_FLOOR,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.out_dim = out_dim
        self.var_floor = var_floor
        self.net = MLP(in_dim, hidden, 2 * out_dim, generator=generator)

    def forward(self, x: torch.Tensor) -> DiagGaussian:
        raw = self.net(x)
        mean, raw_var = raw[..., : self.out_dim], raw[..., self.out_dim :]
        return DiagGaussian(mean, positive_map(raw_var, self.var_floor))


class Encoder(nn.Module):
    """Maps an observation to a latent observation with uncertainty.

    Image inputs are flattened before the dense stack; the output is an
    m-dimensional diagonal Gaussian.
    """

    def __init__(self, obs_dim: int, hidden: Sequence[int], m: int,
                 flatten_image: bool = False, var_floor: float = VAR_FLOOR,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.obs_dim = obs_dim
        self.flatten_image = flatten_image
        self.head = GaussianHead(obs_dim, hidden, m, var_floor, generator)

    def forward(self, x: torch.Tensor) -> DiagGaussian:
        if self.flatten_image:
            x = x.reshape(x.shape[: x.ndim - 2] + (-1,))
        if x.shape[-1] != self.obs_dim:
            raise ValueError(f"observation dim {x.shape[-1]} != expected {self.obs_dim}")
        return self.head(x)


class GaussianDecoder(nn.Module):
    """Decodes a latent state sample into a diagonal Gaussian over x."""

    kind = "real"

    def __init__(self, z_dim: int, hidden: Sequence[int], obs_dim: int,
                 var_floor: float = VAR_FLOOR,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.head = GaussianHead(z_dim, hidden, obs_dim, var_floor, generator)

    def forward(self, z: torch.Tensor) -> DiagGaussian:
        return self.head(z)


class BernoulliDecoder(nn.Module):
    """Decodes a latent state sample into per-pixel Bernoulli probabilities."""

    kind = "image"

    def __init__(self, z_dim: int, hidden: Sequence[int], image_hw: tuple[int, int],
                 generator: torch.Generator | None = None):
        super().__init__()
        self.image_hw = tuple(image_hw)
        self.net = MLP(z_dim, hidden, image_hw[0] * image_hw[1], generator=generator)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(z))
