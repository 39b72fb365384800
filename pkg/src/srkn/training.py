"""Training objective and optimization loop.

The objective per sequence is

    beta_rec * recon - beta_z * kl_z - beta_s * kl_s + beta_pred * pred

maximized by gradient ascent (the fit loop minimizes its negation). All
expectations are estimated with one ancestral sample per step: the
switching draw feeds the recurrent memory and the blend weights, the
latent-state draw feeds only the decoder. The prediction term scores the
next observation under each base system separately and mixes the K
log-likelihoods with the current blend weights via log-sum-exp.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .gauss import (
    bernoulli_log_pmf,
    diag_gauss_log_pdf,
    kl_diag_gauss,
    kl_factored,
    sample_factored,
)
from .model import SRKN, derived_generator, merge_states
from .transition import predict_state

# Key mixed into the seed for the per-epoch validation draws; fixed so the
# validation estimate uses identical noise in every epoch.
_VAL_KEY = 999983

HISTORY_COLUMNS = ("epoch", "recon", "kl_z", "kl_s", "pred", "objective",
                   "val_recon", "val_kl_z", "val_kl_s", "val_pred", "val_objective")


class DivergenceError(RuntimeError):
    """Raised when the objective stops being finite; carries the step index."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step
        self.detail = detail


@dataclass
class LossBreakdown:
    """The four objective terms plus their weighted combination.

    With ``reduce="mean"`` each field is a scalar tensor (batch mean of the
    per-sequence sums over time); with ``reduce="none"`` each is a
    per-sequence vector.
    """

    recon: torch.Tensor
    kl_z: torch.Tensor
    kl_s: torch.Tensor
    pred: torch.Tensor
    objective: torch.Tensor

    def to_floats(self) -> dict[str, float]:
        return {
            name: float(getattr(self, name).detach().mean())
            for name in ("recon", "kl_z", "kl_s", "pred", "objective")
        }


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    clip_norm: float = 5.0
    seed: int = 0
    optimizer: str = "adam"
    z_draws: int = 1
    pred_trans_noise: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr must be positive, batch_size >= 1, epochs >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.z_draws < 1:
            raise ValueError("z_draws must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    diverged: bool = False
    epochs_run: int = 0


def observation_log_prob(x: torch.Tensor, recon, input_kind: str) -> torch.Tensor:
    """Per-sequence log-likelihood of one observation under its decode."""
    if input_kind == "image":
        return bernoulli_log_pmf(x.reshape(x.shape[:-2] + (-1,)), recon)
    return diag_gauss_log_pdf(x, recon)


def sequence_loss(model: SRKN, data: torch.Tensor, mask: torch.Tensor | None = None,
                  generator: torch.Generator | None = None, reduce: str = "mean",
                  z_draws: int = 1, pred_trans_noise: bool = False) -> LossBreakdown:
    """Single-sample objective estimate for a [T, B, ...] batch.

    Draw order per step (fixed for reproducibility): switching noise,
    latent-state noise, extra latent draws (``z_draws`` - 1, reconstruction
    term only), then K prediction-term draws. Prediction draws are made only
    when beta_pred is nonzero, so disabling the term consumes no noise for it.
    The prediction term follows the literal per-base covariance
    A^(k) Sigma A^(k)^T; ``pred_trans_noise`` adds the transition noise.
    """
    cfg = model.config
    t_len, batch = data.shape[0], data.shape[1]
    state = model.init_state(batch)
    zero = data.new_zeros(batch)
    recon, kl_z, kl_s, pred = zero, zero.clone(), zero.clone(), zero.clone()
    use_pred = cfg.beta_pred != 0.0
    pred_noise = model.bank.trans_noise() if pred_trans_noise else \
        torch.zeros(2 * cfg.m, dtype=torch.float64)
    for t in range(t_len):
        x = data[t]
        noise_s = torch.randn(batch, cfg.s_dim, dtype=torch.float64, generator=generator)
        noise_z = torch.randn(batch, 2 * cfg.m, dtype=torch.float64, generator=generator)
        prev = state
        new_state, diag = model.filter_step(state, x, noise_s, noise_z)
        step_mask = mask[t].to(data.dtype) if mask is not None else None
        lp = observation_log_prob(x, diag.recon, cfg.input_kind)
        if z_draws > 1:
            extras = [lp]
            for _ in range(z_draws - 1):
                noise = torch.randn(batch, 2 * cfg.m, dtype=torch.float64, generator=generator)
                z = sample_factored(diag.z_post, noise)
                extras.append(observation_log_prob(x, model.decode(z), cfg.input_kind))
            lp = torch.stack(extras).mean(0)
        step_kl_z = kl_factored(diag.z_post, diag.z_prior)
        step_kl_s = kl_diag_gauss(diag.s_post, diag.s_prior) if diag.s_post is not None else zero
        if use_pred:
            parts = []
            for k in range(cfg.k):
                a_k = model.bank.base_matrix(k)
                z_pred = predict_state(prev.z_post, a_k, pred_noise)
                noise = torch.randn(batch, 2 * cfg.m, dtype=torch.float64, generator=generator)
                z = sample_factored(z_pred, noise)
                lp_k = observation_log_prob(x, model.decode(z), cfg.input_kind)
                parts.append(torch.log(diag.alpha[..., k]) + lp_k)
            step_pred = torch.logsumexp(torch.stack(parts, dim=-1), dim=-1)
        else:
            step_pred = zero
        if step_mask is not None:
            lp = lp * step_mask
            step_kl_z = step_kl_z * step_mask
            step_kl_s = step_kl_s * step_mask
            step_pred = step_pred * step_mask
            new_state = merge_states(mask[t], new_state, prev)
        recon = recon + lp
        kl_z = kl_z + step_kl_z
        kl_s = kl_s + step_kl_s
        pred = pred + step_pred
        state = new_state
        active = [recon]
        if cfg.beta_z != 0.0:
            active.append(kl_z)
        if cfg.beta_s != 0.0:
            active.append(kl_s)
        if use_pred:
            active.append(pred)
        if not all(bool(torch.isfinite(term).all()) for term in active):
            raise DivergenceError(
                t, f"recon={recon.detach()}, kl_z={kl_z.detach()}, "
                   f"kl_s={kl_s.detach()}, pred={pred.detach()}")
    # Zero-weighted terms are left out entirely so a non-finite value there
    # cannot poison the objective through 0 * inf.
    objective = cfg.beta_rec * recon
    if cfg.beta_z != 0.0:
        objective = objective - cfg.beta_z * kl_z
    if cfg.beta_s != 0.0:
        objective = objective - cfg.beta_s * kl_s
    if use_pred:
        objective = objective + cfg.beta_pred * pred
    if reduce == "mean":
        recon, kl_z, kl_s, pred, objective = (
            v.mean() for v in (recon, kl_z, kl_s, pred, objective))
    elif reduce != "none":
        raise ValueError(f"reduce must be 'mean' or 'none', got {reduce!r}")
    return LossBreakdown(recon, kl_z, kl_s, pred, objective)


def fit(model: SRKN, train, cfg: TrainConfig, val=None, start_epoch: int = 0,
        optimizer: torch.optim.Optimizer | None = None,
        log=None) -> TrainResult:
    """Minibatch gradient ascent on the objective.

    ``train``/``val`` are SequenceBatch-like objects with ``data`` and
    ``mask`` attributes. Epoch e draws its shuffle and noise from a
    generator derived from (seed, e), so a resumed run replays the exact
    stream an uninterrupted run would have used. On divergence the
    parameters revert to the end of the last finite epoch.
    """
    if optimizer is None:
        optimizer = make_optimizer(model, cfg)
    n_train = train.data.shape[1]
    result = TrainResult()
    snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        gen = derived_generator(cfg.seed, epoch)
        perm = torch.randperm(n_train, generator=gen)
        sums = np.zeros(5)
        t0 = time.time()
        try:
            for chunk in perm.split(cfg.batch_size):
                sub_mask = train.mask[:, chunk] if train.mask is not None else None
                breakdown = sequence_loss(
                    model, train.data[:, chunk], sub_mask, generator=gen,
                    z_draws=cfg.z_draws, pred_trans_noise=cfg.pred_trans_noise)
                optimizer.zero_grad()
                (-breakdown.objective).backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                optimizer.step()
                vals = breakdown.to_floats()
                sums += len(chunk) * np.array([vals[k] for k in
                                               ("recon", "kl_z", "kl_s", "pred", "objective")])
        except DivergenceError:
            model.load_state_dict(snapshot)
            result.diverged = True
            break
        row = dict(zip(("recon", "kl_z", "kl_s", "pred", "objective"), sums / n_train))
        row["epoch"] = epoch
        if val is not None:
            with torch.no_grad():
                val_breakdown = sequence_loss(
                    model, val.data, val.mask,
                    generator=derived_generator(cfg.seed, _VAL_KEY),
                    z_draws=cfg.z_draws, pred_trans_noise=cfg.pred_trans_noise)
            row.update({f"val_{k}": v for k, v in val_breakdown.to_floats().items()})
        result.history.append(row)
        result.epochs_run += 1
        snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if log is not None:
            log(f"epoch {epoch}: objective {row['objective']:.4f}"
                + (f" val {row['val_objective']:.4f}" if val is not None else "")
                + f" ({time.time() - t0:.1f}s)")
    return result


def make_optimizer(model: SRKN, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr)


def optimizer_arrays(optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    """Flatten optimizer slots into named arrays for checkpointing."""
    arrays = {}
    state = optimizer.state_dict()["state"]
    for idx, slots in state.items():
        for key, value in slots.items():
            arr = value.detach().cpu().numpy() if torch.is_tensor(value) \
                else np.asarray(value)
            arrays[f"opt.{idx}.{key}"] = arr
    return arrays


def load_optimizer_arrays(optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray]):
    """Restore slots produced by optimizer_arrays into a fresh optimizer."""
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if not name.startswith("opt."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)


@dataclass
class GradCheckReport:
    max_error: float
    worst_group: str
    by_group: dict[str, float]
    eps: float


def grad_check(model: SRKN, data: torch.Tensor, mask: torch.Tensor | None = None,
               eps: float = 1e-4, seed: int = 0,
               max_entries_per_param: int | None = None,
               pred_trans_noise: bool = False) -> GradCheckReport:
    """Compare backward-pass gradients of the objective with central
    finite differences at frozen noise; returns the worst relative error
    per parameter group.
    """

    def loss_value() -> torch.Tensor:
        gen = torch.Generator()
        gen.manual_seed(seed)
        return sequence_loss(model, data, mask, generator=gen,
                             pred_trans_noise=pred_trans_noise).objective

    params = dict(model.named_parameters())
    analytic = torch.autograd.grad(loss_value(), list(params.values()),
                                   allow_unused=True)
    analytic = {name: g for name, g in zip(params, analytic)}
    rng = np.random.default_rng(seed)
    by_group = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            if max_entries_per_param is not None and n > max_entries_per_param:
                idx = rng.choice(n, size=max_entries_per_param, replace=False)
            else:
                idx = range(n)
            grad = analytic[name]
            grad_flat = grad.view(-1) if grad is not None else None
            worst = 0.0
            for i in idx:
                original = flat[i].item()
                flat[i] = original + eps
                up = float(loss_value())
                flat[i] = original - eps
                down = float(loss_value())
                flat[i] = original
                fd = (up - down) / (2.0 * eps)
                an = float(grad_flat[i]) if grad_flat is not None else 0.0
                denom = max(abs(fd), abs(an))
                err = abs(fd - an) if denom < 1e-8 else abs(fd - an) / denom
                worst = max(worst, err)
            by_group[name] = worst
    worst_group = max(by_group, key=by_group.get)
    return GradCheckReport(by_group[worst_group], worst_group, by_group, eps)


def format_history(rows: list[dict]) -> str:
    """Render history rows as a tab-delimited table (nan for absent fields)."""
    lines = ["\t".join(HISTORY_COLUMNS)]
    for row in rows:
        cells = []
        for col in HISTORY_COLUMNS:
            value = row.get(col, float("nan"))
            cells.append(str(int(value)) if col == "epoch" else f"{value:.17g}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def write_history(path, rows: list[dict]):
    with open(path, "w") as f:
        f.write(format_history(rows))


def read_history(path) -> list[dict]:
    with open(path) as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        cells = line.split("\t")
        row = {}
        for col, cell in zip(header, cells):
            row[col] = int(cell) if col == "epoch" else float(cell)
        rows.append(row)
    return rows
