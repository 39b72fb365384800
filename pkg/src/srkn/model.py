"""The switching recurrent Kalman network model.

One filtering step chains: encode the observation into a latent
observation with uncertainty, advance the switch memory, infer the
switching variable, sample it, soft-blend the transition bank, predict
the latent state, condition it on the latent observation with the
factorized Kalman update, sample the posterior and decode.

Generation (rollout) runs the same chain but samples the switching
variable from its prior and the latent state from the predicted
distribution, ancestrally, without Kalman updates.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import torch
from torch import nn

from .gauss import (
    VAR_FLOOR,
    DiagGaussian,
    FactoredGaussianState,
    reparam_sample,
    sample_factored,
    softmax,
)
from .nets import BernoulliDecoder, Encoder, GaussianDecoder, GaussianHead, GRUCell
from .transition import TransitionBank, blend_transition, kalman_update, predict_state

# Variance assigned to a latent state collapsed onto an ancestral sample.
POINT_VAR = 1e-12

SWITCHING_MODES = ("learned", "fixed_uniform")
INPUT_KINDS = ("real", "image")


def derived_generator(*keys: int) -> torch.Generator:
    """Deterministic torch generator derived from a tuple of integer keys."""
    seq = np.random.SeedSequence([int(k) for k in keys])
    seed = int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


@dataclass
class ModelConfig:
    """Hyperparameters of the model.

    ``s_dim`` defaults to ``k`` so the softmax of the switching sample
    directly yields the K blend weights; with any other value a learned
    linear projection maps the sample to K logits. ``switching`` set to
    ``fixed_uniform`` freezes the blend weights at 1/K and bypasses the
    switching networks entirely (the single-filter ablation).
    """

    input_kind: str = "real"
    obs_dim: int = 2
    image_hw: Optional[tuple[int, int]] = None
    m: int = 8
    k: int = 4
    s_dim: Optional[int] = None
    gru_hidden: int = 32
    enc_hidden: tuple[int, ...] = (32,)
    dec_hidden: tuple[int, ...] = (32,)
    trans_hidden: tuple[int, ...] = (32,)
    inf_hidden: tuple[int, ...] = (32,)
    bandwidth: int = 0
    var_floor: float = VAR_FLOOR
    beta_rec: float = 1.0
    beta_z: float = 0.1
    beta_s: float = 0.1
    beta_pred: float = 1.0
    switching: str = "learned"
    bank_init_scale: float = 0.05
    trans_noise_init: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if self.s_dim is None:
            self.s_dim = self.k
        if isinstance(self.image_hw, list):
            self.image_hw = tuple(self.image_hw)
        for name in ("enc_hidden", "dec_hidden", "trans_hidden", "inf_hidden"):
            value = getattr(self, name)
            if isinstance(value, list):
                setattr(self, name, tuple(value))
        self.validate()

    def validate(self):
        if self.input_kind not in INPUT_KINDS:
            raise ValueError(f"input_kind must be one of {INPUT_KINDS}")
        if self.switching not in SWITCHING_MODES:
            raise ValueError(f"switching must be one of {SWITCHING_MODES}")
        if self.m < 1 or self.k < 1 or self.s_dim < 1:
            raise ValueError("m, K and s_dim must be >= 1")
        if self.gru_hidden < 1:
            raise ValueError("gru_hidden must be >= 1")
        for name in ("beta_rec", "beta_z", "beta_s", "beta_pred"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.input_kind == "image":
            if self.image_hw is None:
                raise ValueError("image input requires image_hw")
            if self.obs_dim != self.image_hw[0] * self.image_hw[1]:
                raise ValueError("obs_dim must equal image_hw[0] * image_hw[1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["image_hw"] is not None:
            d["image_hw"] = list(d["image_hw"])
        for name in ("enc_hidden", "dec_hidden", "trans_hidden", "inf_hidden"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class FilterState:
    """Carries the filter across steps: previous posterior, switch memory,
    previous switching sample and the step index."""

    z_post: FactoredGaussianState
    h: torch.Tensor
    s_prev: torch.Tensor
    t: int = 0

    def detach(self) -> "FilterState":
        return FilterState(self.z_post.detach(), self.h.detach(), self.s_prev.detach(), self.t)

    def repeat(self, n: int) -> "FilterState":
        """Tile the batch dimension n times (for parallel rollouts)."""
        rep = lambda x: x.repeat(n, *([1] * (x.ndim - 1)))
        z = FactoredGaussianState(
            rep(self.z_post.mean), rep(self.z_post.cov_upper),
            rep(self.z_post.cov_lower), rep(self.z_post.cov_side),
        )
        return FilterState(z, rep(self.h), rep(self.s_prev), self.t)


def merge_states(mask: torch.Tensor, new: FilterState, old: FilterState) -> FilterState:
    """Per-sequence select: entries with mask True advance, others keep ``old``."""
    mb = mask[:, None]
    pick = lambda a, b: torch.where(mb, a, b)
    z = FactoredGaussianState(
        pick(new.z_post.mean, old.z_post.mean),
        pick(new.z_post.cov_upper, old.z_post.cov_upper),
        pick(new.z_post.cov_lower, old.z_post.cov_lower),
        pick(new.z_post.cov_side, old.z_post.cov_side),
    )
    return FilterState(z, pick(new.h, old.h), pick(new.s_prev, old.s_prev), new.t)


@dataclass
class StepDiagnostics:
    """Every per-step distribution the training objective and metrics consume."""

    alpha: torch.Tensor
    s_prior: Optional[DiagGaussian]
    s_post: Optional[DiagGaussian]
    s_sample: torch.Tensor
    z_prior: FactoredGaussianState
    z_post: FactoredGaussianState
    z_sample: torch.Tensor
    w: DiagGaussian
    recon: object  # DiagGaussian (real) or probability tensor (image)
    repairs: int = 0


@dataclass
class RolloutResult:
    """Sampled futures: decoded observation parameters plus the mode traces.

    ``obs_mean`` has shape [n, horizon, B, D] (flattened pixels for image
    models); ``obs_var`` is None for image models. ``alphas`` is
    [n, horizon, B, K], ``modes`` the per-step argmax of alpha and
    ``z_samples`` the sampled latent states.
    """

    obs_mean: torch.Tensor
    obs_var: Optional[torch.Tensor]
    alphas: torch.Tensor
    modes: torch.Tensor
    z_samples: torch.Tensor


def emit(z: torch.Tensor, m: int) -> torch.Tensor:
    """Linear emission [I 0]: the first m entries of the latent state."""
    if z.shape[-1] != 2 * m:
        raise ValueError(f"latent dim {z.shape[-1]} != 2m = {2 * m}")
    return z[..., :m]


class SRKN(nn.Module):
    """Switching recurrent Kalman network."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        gen = torch.Generator()
        gen.manual_seed(config.init_seed)
        m, k, s_dim = config.m, config.k, config.s_dim
        self.encoder = Encoder(
            config.obs_dim, config.enc_hidden, m,
            flatten_image=config.input_kind == "image",
            var_floor=config.var_floor, generator=gen,
        )
        if config.input_kind == "image":
            self.decoder = BernoulliDecoder(2 * m, config.dec_hidden, config.image_hw, generator=gen)
        else:
            self.decoder = GaussianDecoder(2 * m, config.dec_hidden, config.obs_dim,
                                           var_floor=config.var_floor, generator=gen)
        self.gru = GRUCell(s_dim, config.gru_hidden, generator=gen)
        self.f_trans = GaussianHead(config.gru_hidden + 2 * m, config.trans_hidden,
                                    s_dim, config.var_floor, generator=gen)
        self.f_inf = GaussianHead(config.gru_hidden + 2 * m, config.inf_hidden,
                                  s_dim, config.var_floor, generator=gen)
        if s_dim != k:
            self.s_proj = nn.Linear(s_dim, k, bias=False, dtype=torch.float64)
            bound = 1.0 / s_dim**0.5
            with torch.no_grad():
                self.s_proj.weight.uniform_(-bound, bound, generator=gen)
        else:
            self.s_proj = None
        self.bank = TransitionBank(
            m, k, config.bandwidth,
            init_noise_scale=config.bank_init_scale,
            trans_noise_init=config.trans_noise_init,
            var_floor=config.var_floor, generator=gen,
        )

    # ---- pieces -----------------------------------------------------------

    def encode(self, x: torch.Tensor) -> DiagGaussian:
        return self.encoder(x)

    def decode(self, z: torch.Tensor):
        return self.decoder(z)

    def switch_prior(self, h_prev: torch.Tensor, s_prev: torch.Tensor,
                     z_prev_mean: torch.Tensor) -> tuple[DiagGaussian, torch.Tensor]:
        """Advance the switch memory and return the switching prior and new memory."""
        h = self.gru(h_prev, s_prev)
        return self.f_trans(torch.cat([h, z_prev_mean], dim=-1)), h

    def switch_posterior(self, h: torch.Tensor, w: DiagGaussian) -> DiagGaussian:
        """Switching posterior from the updated memory and the latent observation."""
        return self.f_inf(torch.cat([h, w.mean, w.var], dim=-1))

    def alpha_from_sample(self, s_sample: torch.Tensor) -> torch.Tensor:
        logits = s_sample if self.s_proj is None else self.s_proj(s_sample)
        return softmax(logits)

    def fixed_alpha(self, batch_shape: tuple[int, ...]) -> torch.Tensor:
        k = self.config.k
        return torch.full(batch_shape + (k,), 1.0 / k, dtype=torch.float64)

    def init_state(self, batch_size: int) -> FilterState:
        m = self.config.m
        z0 = FactoredGaussianState(
            torch.zeros(batch_size, 2 * m, dtype=torch.float64),
            torch.ones(batch_size, m, dtype=torch.float64),
            torch.ones(batch_size, m, dtype=torch.float64),
            torch.zeros(batch_size, m, dtype=torch.float64),
        )
        h0 = torch.zeros(batch_size, self.config.gru_hidden, dtype=torch.float64)
        s0 = torch.zeros(batch_size, self.config.s_dim, dtype=torch.float64)
        return FilterState(z0, h0, s0, 0)

    # ---- filtering --------------------------------------------------------

    def filter_step(self, state: FilterState, x: torch.Tensor,
                    noise_s: Optional[torch.Tensor] = None,
                    noise_z: Optional[torch.Tensor] = None
                    ) -> tuple[FilterState, StepDiagnostics]:
        """One observation update. With noise tensors the switching variable
        and the decoded latent state are reparameterized samples; without
        them the respective means are used (deterministic evaluation)."""
        w = self.encode(x)
        if self.config.switching == "learned":
            s_prior, h = self.switch_prior(state.h, state.s_prev, state.z_post.mean)
            s_post = self.switch_posterior(h, w)
            s_sample = s_post.mean if noise_s is None else reparam_sample(s_post, noise_s)
            alpha = self.alpha_from_sample(s_sample)
        else:
            h, s_prior, s_post = state.h, None, None
            s_sample = state.s_prev
            alpha = self.fixed_alpha(w.mean.shape[:-1])
        a = blend_transition(alpha, self.bank)
        z_prior = predict_state(state.z_post, a, self.bank.trans_noise())
        z_post = kalman_update(z_prior, w)
        z_sample = z_post.mean if noise_z is None else sample_factored(z_post, noise_z)
        recon = self.decode(z_sample)
        new_state = FilterState(z_post, h, s_sample, state.t + 1)
        diag = StepDiagnostics(alpha, s_prior, s_post, s_sample,
                               z_prior, z_post, z_sample, w, recon)
        return new_state, diag

    def filter_sequence(self, data: torch.Tensor, mask: Optional[torch.Tensor] = None,
                        generator: Optional[torch.Generator] = None,
                        sample: bool = False
                        ) -> tuple[list[FilterState], list[StepDiagnostics]]:
        """Filter a [T, B, ...] batch; returns per-step states and diagnostics.

        ``states[t]`` is the state *after* step t. With ``sample`` the
        switching variable and decoder input are reparameterized draws from
        ``generator``; otherwise posterior means are used.
        """
        t_len, batch = data.shape[0], data.shape[1]
        state = self.init_state(batch)
        states, diags = [], []
        for t in range(t_len):
            noise_s = noise_z = None
            if sample:
                noise_s = torch.randn(batch, self.config.s_dim, dtype=torch.float64,
                                      generator=generator)
                noise_z = torch.randn(batch, 2 * self.config.m, dtype=torch.float64,
                                      generator=generator)
            new_state, diag = self.filter_step(state, data[t], noise_s, noise_z)
            if mask is not None:
                new_state = merge_states(mask[t], new_state, state)
            state = new_state
            states.append(state)
            diags.append(diag)
        return states, diags

    # ---- generation -------------------------------------------------------

    def predictive_step(self, state: FilterState,
                        generator: torch.Generator
                        ) -> tuple[FilterState, StepDiagnostics]:
        """One generative step: switch sampled from its prior, latent state
        sampled from the predicted distribution, no Kalman update. The
        returned state is collapsed onto the latent sample (ancestral)."""
        batch = state.h.shape[0]
        noise_s = None
        if self.config.switching == "learned":
            noise_s = torch.randn(batch, self.config.s_dim, dtype=torch.float64,
                                  generator=generator)
        noise_z = torch.randn(batch, 2 * self.config.m, dtype=torch.float64,
                              generator=generator)
        return self._rollout_step(state, noise_s, noise_z)

    def rollout(self, state: FilterState, horizon: int, n_samples: int,
                seed: int, step_offset: int = 0) -> RolloutResult:
        """Sample ``n_samples`` futures of length ``horizon`` from ``state``.

        Each (sample, step) pair draws its noise from a generator derived
        from ``(seed, sample, step_offset + step)`` and shares it across the
        batch row, so a sequence's draws do not depend on batch composition
        or order.
        """
        cfg = self.config
        batch = state.h.shape[0]
        obs_dim = cfg.obs_dim
        if horizon == 0 or n_samples == 0:
            empty = torch.zeros(n_samples, horizon, batch, obs_dim, dtype=torch.float64)
            return RolloutResult(
                empty, None if cfg.input_kind == "image" else empty.clone(),
                torch.zeros(n_samples, horizon, batch, cfg.k, dtype=torch.float64),
                torch.zeros(n_samples, horizon, batch, dtype=torch.long),
                torch.zeros(n_samples, horizon, batch, 2 * cfg.m, dtype=torch.float64),
            )
        big = state.detach().repeat(n_samples)
        means, alphas, z_samples = [], [], []
        variances = None if cfg.input_kind == "image" else []
        def batch_noise(dim: int, t: int, *tail: int) -> torch.Tensor:
            rows = [torch.randn(1, dim, dtype=torch.float64,
                                generator=derived_generator(seed, i, step_offset + t, *tail))
                    for i in range(n_samples)]
            return torch.cat([row.expand(batch, dim) for row in rows])

        for t in range(horizon):
            noise_s = (batch_noise(cfg.s_dim, t)
                       if cfg.switching == "learned" else None)
            noise_z = batch_noise(2 * cfg.m, t, 1)
            big, diag = self._rollout_step(big, noise_s, noise_z)
            recon = diag.recon
            if cfg.input_kind == "image":
                means.append(recon)
            else:
                means.append(recon.mean)
                variances.append(recon.var)
            alphas.append(diag.alpha)
            z_samples.append(diag.z_sample)
        def stack(parts):  # [horizon] of [n*B, d] -> [n, horizon, B, d]
            stacked = torch.stack(parts)  # [H, n*B, d]
            h = stacked.shape[0]
            return stacked.reshape(h, n_samples, batch, -1).permute(1, 0, 2, 3)
        alpha_t = stack(alphas)
        return RolloutResult(
            stack(means),
            None if variances is None else stack(variances),
            alpha_t,
            alpha_t.argmax(-1),
            stack(z_samples),
        )

    def _rollout_step(self, state: FilterState, noise_s: Optional[torch.Tensor],
                      noise_z: torch.Tensor) -> tuple[FilterState, StepDiagnostics]:
        """predictive_step with externally supplied noise (batched rollouts)."""
        if self.config.switching == "learned":
            s_prior, h = self.switch_prior(state.h, state.s_prev, state.z_post.mean)
            s_sample = reparam_sample(s_prior, noise_s)
            alpha = self.alpha_from_sample(s_sample)
        else:
            h, s_prior = state.h, None
            s_sample = state.s_prev
            alpha = self.fixed_alpha(state.h.shape[:-1])
        a = blend_transition(alpha, self.bank)
        z_prior = predict_state(state.z_post, a, self.bank.trans_noise())
        z_sample = sample_factored(z_prior, noise_z)
        recon = self.decode(z_sample)
        point = FactoredGaussianState(
            z_sample,
            torch.full_like(z_prior.cov_upper, POINT_VAR),
            torch.full_like(z_prior.cov_lower, POINT_VAR),
            torch.zeros_like(z_prior.cov_side),
        )
        new_state = FilterState(point, h, s_sample, state.t + 1)
        diag = StepDiagnostics(alpha, s_prior, None, s_sample,
                               z_prior, z_prior, z_sample, None, recon)
        return new_state, diag


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
