"""Bank of locally linear transition systems and the factorized filter math.

Each base matrix is a 2m x 2m matrix made of four m x m sub-blocks. With
``bandwidth`` 0 (the default) every sub-block is diagonal, which propagates
the three-vector covariance of :class:`~srkn.gauss.FactoredGaussianState`
exactly and reduces prediction and update to element-wise operations. With
``bandwidth`` b > 0 the sub-blocks are banded; the covariance is then
propagated densely and projected back onto the three-vector structure
(block-diagonal projection).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .gauss import (
    VAR_FLOOR,
    DiagGaussian,
    FactoredGaussianState,
    dense_cov,
    factored_from_dense,
    positive_map,
    positive_map_inverse,
)


@dataclass
class BlendedTransition:
    """Convex combination of base matrices for one batch of steps.

    ``a11 .. a22`` are the four sub-blocks: vectors of shape [..., m] for
    bandwidth 0, matrices of shape [..., m, m] otherwise.
    """

    a11: torch.Tensor
    a12: torch.Tensor
    a21: torch.Tensor
    a22: torch.Tensor
    bandwidth: int = 0

    def dense(self) -> torch.Tensor:
        """Full 2m x 2m matrix (mainly for the banded path and tests)."""
        if self.bandwidth == 0:
            a11, a12, a21, a22 = (
                torch.diag_embed(a) for a in (self.a11, self.a12, self.a21, self.a22)
            )
        else:
            a11, a12, a21, a22 = self.a11, self.a12, self.a21, self.a22
        top = torch.cat([a11, a12], dim=-1)
        bottom = torch.cat([a21, a22], dim=-1)
        return torch.cat([top, bottom], dim=-2)


def band_mask(m: int, bandwidth: int, dtype=torch.float64) -> torch.Tensor:
    """m x m mask that keeps diagonals within ``bandwidth`` of the main one."""
    idx = torch.arange(m)
    return ((idx[:, None] - idx[None, :]).abs() <= bandwidth).to(dtype)


class TransitionBank(nn.Module):
    """K base transition matrices plus learnable transition noise.

    Bandwidth 0 stores each sub-block as one m-vector of diagonal entries;
    bandwidth b stores dense m x m parameters multiplied by a fixed band
    mask at use. The transition noise is a positive 2m-vector obtained from
    a raw parameter through the smooth positive activation.
    """

    def __init__(self, m: int, k: int, bandwidth: int = 0,
                 init_noise_scale: float = 0.05, trans_noise_init: float = 0.1,
                 var_floor: float = VAR_FLOOR,
                 generator: torch.Generator | None = None):
        super().__init__()
        if m < 1 or k < 1:
            raise ValueError("m and K must be >= 1")
        if bandwidth < 0 or bandwidth > m - 1:
            raise ValueError(f"bandwidth must be in [0, m-1], got {bandwidth}")
        self.m = m
        self.k = k
        self.bandwidth = bandwidth
        self.var_floor = var_floor
        shape = (k, m) if bandwidth == 0 else (k, m, m)
        eye = torch.ones(shape[:2], dtype=torch.float64) if bandwidth == 0 else \
            torch.eye(m, dtype=torch.float64).expand(k, m, m).clone()
        noise = lambda: init_noise_scale * torch.randn(shape, dtype=torch.float64, generator=generator)
        # Identity on the diagonal blocks, small noise on the off-diagonal ones.
        self.a11 = nn.Parameter(eye.clone())
        self.a12 = nn.Parameter(noise())
        self.a21 = nn.Parameter(noise())
        self.a22 = nn.Parameter(eye.clone())
        raw = positive_map_inverse(trans_noise_init, var_floor)
        self.trans_noise_raw = nn.Parameter(torch.full((2 * m,), raw, dtype=torch.float64))
        if bandwidth > 0:
            self.register_buffer("mask", band_mask(m, bandwidth))
        else:
            self.mask = None

    def trans_noise(self) -> torch.Tensor:
        """Positive per-dimension transition noise variance (length 2m)."""
        return positive_map(self.trans_noise_raw, self.var_floor)

    def blocks(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """The four sub-block parameter stacks, band mask applied."""
        if self.bandwidth == 0:
            return self.a11, self.a12, self.a21, self.a22
        return (self.a11 * self.mask, self.a12 * self.mask,
                self.a21 * self.mask, self.a22 * self.mask)

    def base_matrix(self, k: int) -> BlendedTransition:
        """The k-th base matrix as a (non-blended) transition."""
        a11, a12, a21, a22 = self.blocks()
        return BlendedTransition(a11[k], a12[k], a21[k], a22[k], self.bandwidth)


def blend_transition(alpha: torch.Tensor, bank: TransitionBank) -> BlendedTransition:
    """Weighted sum of the base matrices; ``alpha`` lies on the K-simplex.

    ``alpha`` has shape [..., K]; the blended sub-blocks keep the bank's
    storage layout with the batch dimensions of ``alpha`` in front.
    """
    if alpha.shape[-1] != bank.k:
        raise ValueError(f"alpha dim {alpha.shape[-1]} != K {bank.k}")
    a11, a12, a21, a22 = bank.blocks()
    if bank.bandwidth == 0:
        eq = "...k,km->...m"
    else:
        eq = "...k,kmn->...mn"
    return BlendedTransition(
        torch.einsum(eq, alpha, a11),
        torch.einsum(eq, alpha, a12),
        torch.einsum(eq, alpha, a21),
        torch.einsum(eq, alpha, a22),
        bank.bandwidth,
    )


def predict_state(z_post_prev: FactoredGaussianState, a: BlendedTransition,
                  trans_noise: torch.Tensor) -> FactoredGaussianState:
    """One transition step: mean A*mu, covariance A*Sigma*A^T + diag(noise).

    ``trans_noise`` is the positive 2m-vector added to the upper/lower
    variances. For bandwidth 0 the three-vector covariance propagates
    exactly; otherwise the dense result is projected back onto the
    factorized structure.
    """
    m = z_post_prev.m
    q_u = trans_noise[..., :m]
    q_l = trans_noise[..., m:]
    mu_u = z_post_prev.upper_mean()
    mu_l = z_post_prev.lower_mean()
    u, l, s = z_post_prev.cov_upper, z_post_prev.cov_lower, z_post_prev.cov_side
    if a.bandwidth == 0:
        new_mu_u = a.a11 * mu_u + a.a12 * mu_l
        new_mu_l = a.a21 * mu_u + a.a22 * mu_l
        new_u = a.a11**2 * u + 2.0 * a.a11 * a.a12 * s + a.a12**2 * l + q_u
        new_s = a.a11 * a.a21 * u + (a.a11 * a.a22 + a.a12 * a.a21) * s + a.a12 * a.a22 * l
        new_l = a.a21**2 * u + 2.0 * a.a21 * a.a22 * s + a.a22**2 * l + q_l
        return FactoredGaussianState(
            torch.cat([new_mu_u, new_mu_l], dim=-1), new_u, new_l, new_s
        )
    dense_a = a.dense()
    mean = torch.einsum("...ij,...j->...i", dense_a, z_post_prev.mean)
    cov = dense_a @ dense_cov(z_post_prev) @ dense_a.transpose(-1, -2)
    cov = cov + torch.diag_embed(trans_noise.expand(cov.shape[:-2] + (2 * m,)))
    state = factored_from_dense(mean, cov)
    return _repair(state)


def _repair(state: FactoredGaussianState,
            floor: float = VAR_FLOOR) -> FactoredGaussianState:
    """Force every 2x2 block positive definite (banded projection fallback).

    Clamps the marginal variances to the floor and shrinks the cross term
    to just inside the PD boundary where needed.
    """
    u = state.cov_upper.clamp_min(floor)
    l = state.cov_lower.clamp_min(floor)
    bound = (1.0 - 1e-9) * torch.sqrt(u * l)
    s = state.cov_side.clamp(-bound, bound)
    return FactoredGaussianState(state.mean, u, l, s)


def kalman_update(z_prior: FactoredGaussianState, w: DiagGaussian) -> FactoredGaussianState:
    """Condition the prior on a latent observation of the upper state half.

    The observation model is w = [I 0] z + noise with diagonal noise
    ``w.var``, so the update reduces to one scalar gain pair per
    coordinate: gain_u = u / (u + r) for the observed half and
    gain_l = s / (u + r) for the memory half.
    """
    m = z_prior.m
    if w.dim != m:
        raise ValueError(f"observation dim {w.dim} != m {m}")
    u, l, s = z_prior.cov_upper, z_prior.cov_lower, z_prior.cov_side
    denom = u + w.var
    gain_u = u / denom
    gain_l = s / denom
    residual = w.mean - z_prior.upper_mean()
    new_mu_u = z_prior.upper_mean() + gain_u * residual
    new_mu_l = z_prior.lower_mean() + gain_l * residual
    new_u = (1.0 - gain_u) * u
    new_s = (1.0 - gain_u) * s
    new_l = l - gain_l * s
    return FactoredGaussianState(
        torch.cat([new_mu_u, new_mu_l], dim=-1), new_u, new_l, new_s
    )
