"""Evaluation metrics against a trained model.

Four quantities: reconstruction negative log-likelihood (per step), the
one-step prediction loss, the multi-step prediction loss over sampled
rollouts, and the empirical 2-Wasserstein distance between generated
continuations and ground-truth continuations with similar prefixes.

Prediction losses key every Monte-Carlo draw by (seed, sample index,
predicted step index), so the multi-step loss at prefix T-1 with one
sample reproduces the matching one-step term bit for bit.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .gauss import DiagGaussian, bernoulli_log_pmf, diag_gauss_log_pdf
from .model import SRKN, count_parameters
from .datasets import SequenceBatch

ALL_METRICS = ("recon_ll", "one_step", "multi_step", "w_dist")


@dataclass
class EvalReport:
    recon_ll: Optional[float] = None
    one_step: Optional[float] = None
    multi_step: Optional[float] = None
    w_dist: Optional[float] = None
    n_sequences: int = 0
    n_samples: int = 100
    s_samples: int = 32
    prefix_len: int = 0
    seed: int = 0
    param_count: Optional[int] = None

    def to_dict(self) -> dict:
        out = {}
        for key in ALL_METRICS:
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        out.update(n_sequences=self.n_sequences, n_samples=self.n_samples,
                   s_samples=self.s_samples, prefix_len=self.prefix_len,
                   seed=self.seed)
        if self.param_count is not None:
            out["param_count"] = self.param_count
        return out


def _flat_targets(data: torch.Tensor) -> torch.Tensor:
    """[T, B, ...] observations flattened to [T, B, D] for density evaluation."""
    return data.reshape(data.shape[0], data.shape[1], -1)


def _rollout_log_probs(model: SRKN, roll, targets: torch.Tensor) -> torch.Tensor:
    """Log-likelihood of targets [H, B, D] under each rollout's decodes.

    Returns [n, H, B]: sample i, rollout step t, sequence b.
    """
    x = targets.unsqueeze(0)  # [1, H, B, D]
    if model.config.input_kind == "image":
        return bernoulli_log_pmf(x, roll.obs_mean)
    return diag_gauss_log_pdf(x, DiagGaussian(roll.obs_mean, roll.obs_var))


@torch.no_grad()
def recon_ll(model: SRKN, batch: SequenceBatch, sample: bool = False,
             generator: torch.Generator | None = None) -> float:
    """Per-step average negative log-likelihood under the decoded posterior.

    Deterministic by default (posterior means); with ``sample`` the decode
    uses reparameterized draws, matching the training estimator's stream
    when the model carries no prediction term.
    """
    _, diags = model.filter_sequence(batch.data, batch.mask, generator=generator,
                                     sample=sample)
    targets = _flat_targets(batch.data)
    log_probs = []
    for t, diag in enumerate(diags):
        if model.config.input_kind == "image":
            lp = bernoulli_log_pmf(targets[t], diag.recon)
        else:
            lp = diag_gauss_log_pdf(targets[t], diag.recon)
        log_probs.append(lp)
    lp = torch.stack(log_probs)  # [T, B]
    if batch.mask is not None:
        lp = lp * batch.mask.to(lp.dtype)
    per_seq = -lp.sum(0) / batch.lengths().to(lp.dtype)
    return float(per_seq.mean())


@torch.no_grad()
def one_step_loss(model: SRKN, batch: SequenceBatch, s_samples: int = 32,
                  seed: int = 0) -> float:
    """Sum over t of -log p(x_{t+1} | x_{1:t}), sequence-averaged.

    Each predictive density is a mixture over ``s_samples`` generative
    draws from the filtered state (switch from its prior, latent state
    from the prediction), log-sum-exp averaged.
    """
    if batch.t_len < 2:
        raise ValueError("one-step loss needs T >= 2")
    states, _ = model.filter_sequence(batch.data, batch.mask)
    targets = _flat_targets(batch.data)
    total = torch.zeros(batch.batch_size, dtype=torch.float64)
    for j in range(1, batch.t_len):
        roll = model.rollout(states[j - 1], 1, s_samples, seed, step_offset=j)
        lp = _rollout_log_probs(model, roll, targets[j: j + 1])[:, 0]  # [S, B]
        mix = torch.logsumexp(lp, dim=0) - math.log(s_samples)
        if batch.mask is not None:
            mix = mix * batch.mask[j].to(mix.dtype)
        total -= mix
    return float(total.mean())


@torch.no_grad()
def multi_step_loss(model: SRKN, batch: SequenceBatch, tau: int,
                    n_samples: int = 100, seed: int = 0) -> float:
    """Rollout-averaged negative log-likelihood of the suffix given a
    tau-step prefix: mean over ``n_samples`` rollouts of the summed
    per-step loss, sequence-averaged."""
    if not 1 <= tau < batch.t_len:
        raise ValueError(f"tau must be in [1, T), got {tau}")
    prefix_mask = batch.mask[:tau] if batch.mask is not None else None
    states, _ = model.filter_sequence(batch.data[:tau], prefix_mask)
    horizon = batch.t_len - tau
    roll = model.rollout(states[tau - 1], horizon, n_samples, seed, step_offset=tau)
    lp = _rollout_log_probs(model, roll, _flat_targets(batch.data[tau:]))  # [n, H, B]
    if batch.mask is not None:
        lp = lp * batch.mask[tau:].to(lp.dtype).unsqueeze(0)
    per_seq = (-lp.sum(1)).mean(0)  # [B]
    return float(per_seq.mean())


def wasserstein(pred: torch.Tensor, truth: torch.Tensor) -> float:
    """Empirical 2-Wasserstein distance between two equal-size point sets.

    Flattens trailing dimensions, solves the exact assignment under
    squared-Euclidean cost and returns the root of the mean matched cost.
    """
    a = torch.as_tensor(pred, dtype=torch.float64).reshape(pred.shape[0], -1)
    b = torch.as_tensor(truth, dtype=torch.float64).reshape(truth.shape[0], -1)
    if a.shape != b.shape:
        raise ValueError(f"set shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    cost = torch.cdist(a, b, p=2.0) ** 2
    rows, cols = linear_sum_assignment(cost.numpy())
    return float(torch.sqrt(cost[rows, cols].mean()))


def similar_prefix_select(batch: SequenceBatch, anchor_prefix: torch.Tensor,
                          n: int) -> torch.Tensor:
    """Indices of the n sequences whose tau-step prefixes are closest (L2)
    to the anchor prefix."""
    tau = anchor_prefix.shape[0]
    if n > batch.batch_size:
        raise ValueError(f"n={n} exceeds batch size {batch.batch_size}")
    prefixes = batch.data[:tau].reshape(tau, batch.batch_size, -1)
    anchor = anchor_prefix.reshape(tau, 1, -1)
    dist = ((prefixes - anchor) ** 2).sum((0, 2))
    return torch.argsort(dist, stable=True)[:n]


@torch.no_grad()
def w_distance(model: SRKN, batch: SequenceBatch, tau: int, n_samples: int = 100,
               n_anchors: int = 5, seed: int = 0, endpoint: bool = False) -> float:
    """Wasserstein distance between generated and ground-truth continuations.

    For each anchor sequence: take the ``n_samples`` test sequences with
    the most similar prefixes as the truth set, generate ``n_samples``
    rollouts from the filtered anchor prefix, and compare the two clouds
    of flattened suffixes (or endpoints with ``endpoint``). Anchors are
    spread evenly through the lexicographic order of the prefixes, so the
    value does not depend on how the batch happens to be ordered.
    """
    if not 1 <= tau < batch.t_len:
        raise ValueError(f"tau must be in [1, T), got {tau}")
    horizon = batch.t_len - tau
    flat = _flat_targets(batch.data)
    prefix_rows = flat[:tau].permute(1, 0, 2).reshape(batch.batch_size, -1).numpy()
    order = np.lexsort(prefix_rows[:, ::-1].T)
    positions = np.unique(np.linspace(0, batch.batch_size - 1, n_anchors).round().astype(int))
    values = []
    for rank, pos in enumerate(positions):
        a = int(order[pos])
        idx = similar_prefix_select(batch, batch.data[:tau, a], n_samples)
        truth = flat[tau:, idx].permute(1, 0, 2)  # [n, H, D]
        states, _ = model.filter_sequence(batch.data[:tau, a: a + 1])
        anchor_seed = int(np.random.SeedSequence([seed, rank]).generate_state(1)[0])
        roll = model.rollout(states[tau - 1], horizon, n_samples, anchor_seed,
                             step_offset=tau)
        pred = roll.obs_mean[:, :, 0]  # [n, H, D]
        if endpoint:
            truth = truth[:, -1]
            pred = pred[:, -1]
        values.append(wasserstein(pred, truth))
    return float(np.mean(values))


@torch.no_grad()
def evaluate(model: SRKN, batch: SequenceBatch, tau: int, n_samples: int = 100,
             s_samples: int = 32, seed: int = 0, n_anchors: int = 5,
             metrics: tuple[str, ...] = ALL_METRICS,
             endpoint: bool = False) -> EvalReport:
    """Compute the requested metric subset into an EvalReport."""
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; valid: {ALL_METRICS}")
    report = EvalReport(n_sequences=batch.batch_size, n_samples=n_samples,
                        s_samples=s_samples, prefix_len=tau, seed=seed,
                        param_count=count_parameters(model))
    if "recon_ll" in metrics:
        report.recon_ll = recon_ll(model, batch)
    if "one_step" in metrics:
        report.one_step = one_step_loss(model, batch, s_samples=s_samples, seed=seed)
    if "multi_step" in metrics:
        report.multi_step = multi_step_loss(model, batch, tau, n_samples=n_samples,
                                            seed=seed)
    if "w_dist" in metrics:
        report.w_dist = w_distance(model, batch, tau, n_samples=n_samples,
                                   n_anchors=n_anchors, seed=seed,
                                   endpoint=endpoint)
    return report


def write_report(report: EvalReport, path):
    """Flat key = value text file, sorted keys."""
    items = report.to_dict()
    with open(path, "w") as f:
        for key in sorted(items):
            f.write(f"{key} = {items[key]}\n")


def read_report(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            if "=" not in line:
                continue
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                out[key] = int(value) if value.lstrip("-").isdigit() else float(value)
            except ValueError:
                out[key] = value
    return out


RESULTS_COLUMNS = ("name", "one_step", "multi_step", "w_dist", "recon_ll", "params")


def append_results_row(path, name: str, report: EvalReport):
    """Append one model's metrics to a delimited results table."""
    fresh = not os.path.exists(path)
    with open(path, "a") as f:
        if fresh:
            f.write("\t".join(RESULTS_COLUMNS) + "\n")
        cells = [name]
        for key in ("one_step", "multi_step", "w_dist", "recon_ll"):
            value = getattr(report, key)
            cells.append("-" if value is None else f"{value:.4f}")
        cells.append("-" if report.param_count is None else str(report.param_count))
        f.write("\t".join(cells) + "\n")
