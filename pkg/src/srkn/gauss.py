"""Distribution primitives shared by the model, training and metrics code.

Two distribution containers are used throughout:

* :class:`DiagGaussian` -- a diagonal-covariance Gaussian, used for the
  switching variable, the latent observations and real-valued emissions.
* :class:`FactoredGaussianState` -- a Gaussian over the 2m-dimensional
  latent state whose covariance is stored as three m-vectors (upper
  variances, lower variances and the upper/lower cross terms), i.e. one
  independent 2x2 covariance block per latent coordinate.

All operations are pure functions of their inputs and broadcast over
arbitrary leading batch dimensions; the distribution dimension is always
the last axis.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import torch

# Minimum value every produced variance is floored to (smooth map, see
# positive_map). Keeps Kalman gains and log-densities well conditioned.
VAR_FLOOR = 1e-4

# Probabilities are clipped into [BERNOULLI_EPS, 1 - BERNOULLI_EPS] before
# taking logs.
BERNOULLI_EPS = 1e-6

_LOG_2PI = math.log(2.0 * math.pi)

# When True, FactoredGaussianState invariants are checked on construction.
# Enabled by the test suite; off by default to keep the hot path cheap.
_VALIDATE = False


def set_validation(enabled: bool) -> bool:
    """Toggle invariant checking of factored states; returns previous value."""
    global _VALIDATE
    previous = _VALIDATE
    _VALIDATE = bool(enabled)
    return previous


@contextlib.contextmanager
def validation(enabled: bool = True):
    """Scope within which factored-state invariant checking is forced on/off."""
    previous = set_validation(enabled)
    try:
        yield
    finally:
        set_validation(previous)


def positive_map(raw: torch.Tensor, floor: float = VAR_FLOOR) -> torch.Tensor:
    """Smooth positive activation with infimum ``floor`` (shifted ELU)."""
    return torch.nn.functional.elu(raw) + 1.0 + floor


def positive_map_inverse(value: float, floor: float = VAR_FLOOR) -> float:
    """Raw pre-activation that positive_map sends to ``value``."""
    shifted = value - floor
    if shifted <= 0.0:
        raise ValueError(f"target {value} not reachable above floor {floor}")
    if shifted >= 1.0:
        return shifted - 1.0
    return math.log(shifted)


@dataclass
class DiagGaussian:
    """Diagonal Gaussian with element-wise variances (not log-variances)."""

    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != var shape {tuple(self.var.shape)}"
            )
        if _VALIDATE and not bool((self.var > 0).all()):
            raise ValueError("DiagGaussian requires strictly positive variances")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.var.detach())


@dataclass
class FactoredGaussianState:
    """Gaussian over a 2m latent state with per-coordinate 2x2 covariance blocks.

    ``mean`` has length 2m; ``cov_upper``, ``cov_lower`` and ``cov_side``
    have length m. Coordinate i of the upper half and coordinate i of the
    lower half are jointly Gaussian with covariance
    ``[[cov_upper_i, cov_side_i], [cov_side_i, cov_lower_i]]``; distinct
    coordinates are independent.
    """

    mean: torch.Tensor
    cov_upper: torch.Tensor
    cov_lower: torch.Tensor
    cov_side: torch.Tensor

    def __post_init__(self):
        m = self.cov_upper.shape[-1]
        if self.mean.shape[-1] != 2 * m:
            raise ValueError(
                f"mean dim {self.mean.shape[-1]} != 2 * cov dim {m}"
            )
        if self.cov_lower.shape != self.cov_upper.shape or self.cov_side.shape != self.cov_upper.shape:
            raise ValueError("covariance vectors must share one shape")
        if _VALIDATE:
            self.validate()

    @property
    def m(self) -> int:
        return self.cov_upper.shape[-1]

    def validate(self):
        if not bool((self.cov_upper > 0).all()):
            raise ValueError("cov_upper must be strictly positive")
        if not bool((self.cov_lower > 0).all()):
            raise ValueError("cov_lower must be strictly positive")
        det = self.cov_upper * self.cov_lower - self.cov_side**2
        if not bool((det > 0).all()):
            raise ValueError("2x2 covariance blocks must be positive definite")

    def detach(self) -> "FactoredGaussianState":
        return FactoredGaussianState(
            self.mean.detach(),
            self.cov_upper.detach(),
            self.cov_lower.detach(),
            self.cov_side.detach(),
        )

    def upper_mean(self) -> torch.Tensor:
        return self.mean[..., : self.m]

    def lower_mean(self) -> torch.Tensor:
        return self.mean[..., self.m :]


def diag_gauss_log_pdf(x: torch.Tensor, g: DiagGaussian) -> torch.Tensor:
    """Log density of ``x`` under ``g``, summed over the last axis."""
    if x.shape[-1] != g.dim:
        raise ValueError(f"x dim {x.shape[-1]} != distribution dim {g.dim}")
    return (-0.5 * (_LOG_2PI + torch.log(g.var)) - (x - g.mean) ** 2 / (2.0 * g.var)).sum(-1)


def bernoulli_log_pmf(x: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Bernoulli log likelihood of values ``x`` in [0, 1], summed over the last axis.

    Probabilities are clipped away from {0, 1} so the logs stay finite.
    """
    if x.shape[-1] != probs.shape[-1]:
        raise ValueError(f"x dim {x.shape[-1]} != probs dim {probs.shape[-1]}")
    p = probs.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
    return (x * torch.log(p) + (1.0 - x) * torch.log(1.0 - p)).sum(-1)


def kl_diag_gauss(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    if q.dim != p.dim:
        raise ValueError(f"q dim {q.dim} != p dim {p.dim}")
    return 0.5 * (
        torch.log(p.var / q.var) + (q.var + (q.mean - p.mean) ** 2) / p.var - 1.0
    ).sum(-1)


def reparam_sample(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    """mean + sqrt(var) * noise; differentiable in mean and var."""
    if noise.shape[-1] != g.dim:
        raise ValueError(f"noise dim {noise.shape[-1]} != distribution dim {g.dim}")
    return g.mean + torch.sqrt(g.var) * noise


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis (max-subtracted, overflow safe)."""
    return torch.softmax(logits, dim=-1)


def sample_factored(state: FactoredGaussianState, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized sample from a factored state.

    ``noise`` is a standard-normal 2m vector; the first m entries drive the
    upper coordinates, the last m the lower ones. Each coordinate pair is
    transformed by the Cholesky factor of its 2x2 block.
    """
    m = state.m
    if noise.shape[-1] != 2 * m:
        raise ValueError(f"noise dim {noise.shape[-1]} != state dim {2 * m}")
    eps_u = noise[..., :m]
    eps_l = noise[..., m:]
    l11 = torch.sqrt(state.cov_upper)
    l21 = state.cov_side / l11
    inner = (state.cov_lower - state.cov_side**2 / state.cov_upper).clamp_min(1e-12)
    l22 = torch.sqrt(inner)
    upper = state.upper_mean() + l11 * eps_u
    lower = state.lower_mean() + l21 * eps_u + l22 * eps_l
    return torch.cat([upper, lower], dim=-1)


def kl_factored(q: FactoredGaussianState, p: FactoredGaussianState) -> torch.Tensor:
    """KL(q || p) between factored states, summed over coordinates.

    Closed form of the bivariate Gaussian KL applied to each coordinate's
    2x2 block.
    """
    if q.m != p.m:
        raise ValueError(f"q dim {q.m} != p dim {p.m}")
    det_q = q.cov_upper * q.cov_lower - q.cov_side**2
    det_p = p.cov_upper * p.cov_lower - p.cov_side**2
    trace = (
        p.cov_lower * q.cov_upper
        - 2.0 * p.cov_side * q.cov_side
        + p.cov_upper * q.cov_lower
    ) / det_p
    du = p.upper_mean() - q.upper_mean()
    dl = p.lower_mean() - q.lower_mean()
    maha = (p.cov_lower * du**2 - 2.0 * p.cov_side * du * dl + p.cov_upper * dl**2) / det_p
    return 0.5 * (trace + maha - 2.0 + torch.log(det_p / det_q)).sum(-1)


def dense_cov(state: FactoredGaussianState) -> torch.Tensor:
    """Expand the three covariance vectors into the dense 2m x 2m matrix."""
    m = state.m
    batch = state.cov_upper.shape[:-1]
    cov = state.cov_upper.new_zeros(batch + (2 * m, 2 * m))
    idx = torch.arange(m)
    cov[..., idx, idx] = state.cov_upper
    cov[..., m + idx, m + idx] = state.cov_lower
    cov[..., idx, m + idx] = state.cov_side
    cov[..., m + idx, idx] = state.cov_side
    return cov


def factored_from_dense(mean: torch.Tensor, cov: torch.Tensor) -> FactoredGaussianState:
    """Project a dense-covariance Gaussian onto the three-vector structure.

    Keeps the diagonals of the four m x m blocks of ``cov`` (the side
    vector is the average of the two cross-block diagonals, which are equal
    for symmetric input).
    """
    m = mean.shape[-1] // 2
    idx = torch.arange(m)
    upper = cov[..., idx, idx]
    lower = cov[..., m + idx, m + idx]
    side = 0.5 * (cov[..., idx, m + idx] + cov[..., m + idx, idx])
    return FactoredGaussianState(mean, upper, lower, side)
