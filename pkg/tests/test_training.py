"""Objective, gradient-check, and fit-loop tests.

The two heavyweight anchors live in module functions so the acceptance
suite can rerun them at larger sizes: run_elbo_monte_carlo compares the
single-sample objective against an independent nested Monte Carlo ELBO
estimate, and run_grad_check_criterion times a full finite-difference
sweep on a small model.
"""

import copy
import math
import time

import numpy as np
import pytest
import torch

import oracles
from conftest import gen, tiny_config
from srkn.datasets import gen_four_modes
from srkn.gauss import DiagGaussian
from srkn.io import read_arrays, write_arrays
from srkn.model import SRKN, ModelConfig
from srkn.training import (DivergenceError, TrainConfig, fit, format_history,
                           grad_check, load_optimizer_arrays, make_optimizer,
                           observation_log_prob, optimizer_arrays,
                           read_history, sequence_loss, write_history)
from srkn.transition import blend_transition, kalman_update, predict_state


def micro_elbo_model() -> SRKN:
    """Smallest model with every objective path except the prediction term."""
    return SRKN(ModelConfig(
        input_kind="real", obs_dim=1, m=1, k=1, gru_hidden=4,
        enc_hidden=(4,), dec_hidden=(4,), trans_hidden=(4,), inf_hidden=(4,),
        beta_rec=1.0, beta_z=1.0, beta_s=1.0, beta_pred=0.0, init_seed=3))


def run_elbo_monte_carlo(n_draws: int, seed: int) -> tuple[float, float, float, float]:
    """Estimate the expected objective two ways on a frozen two-step model.

    Package side: mean of per-sequence single-sample objectives over
    ``n_draws`` replicas of the same sequence. Oracle side: a nested Monte
    Carlo ELBO estimate that draws the switching variable and the latent
    state with numpy, scores every density with dense formulas, and uses
    log-ratio terms in place of the closed-form KLs. Both estimate the same
    expectation; returns (package mean, package SE, oracle mean, oracle SE).
    """
    model = micro_elbo_model()
    x_vals = [0.4, -0.3]
    data = torch.tensor(x_vals, dtype=torch.float64).reshape(2, 1, 1)
    replicated = data.expand(2, n_draws, 1)

    with torch.no_grad():
        breakdown = sequence_loss(model, replicated, generator=gen(seed), reduce="none")
    per_draw = breakdown.objective.numpy()
    pkg_mean = float(per_draw.mean())
    pkg_se = float(per_draw.std(ddof=1) / math.sqrt(n_draws))

    rng = np.random.default_rng(seed)
    with torch.no_grad():
        state = model.init_state(n_draws)
        h, s_prev, z_post = state.h, state.s_prev, state.z_post
        elbo = np.zeros(n_draws)
        for value in x_vals:
            x = torch.full((n_draws, 1), value, dtype=torch.float64)
            w = model.encode(x)
            s_prior, h = model.switch_prior(h, s_prev, z_post.mean)
            s_post = model.switch_posterior(h, w)
            xi_s = rng.standard_normal((n_draws, 1))
            s_np = s_post.mean.numpy() + np.sqrt(s_post.var.numpy()) * xi_s
            elbo += (oracles.normal_logpdf(s_np, s_prior.mean.numpy(), s_prior.var.numpy())
                     - oracles.normal_logpdf(s_np, s_post.mean.numpy(), s_post.var.numpy())
                     ).sum(-1)
            s_prev = torch.from_numpy(s_np)
            alpha = model.alpha_from_sample(s_prev)
            a = blend_transition(alpha, model.bank)
            z_prior = predict_state(z_post, a, model.bank.trans_noise())
            z_post = kalman_update(z_prior, w)
            cov_q = oracles.dense_cov(z_post.cov_upper.numpy(),
                                      z_post.cov_lower.numpy(), z_post.cov_side.numpy())
            cov_p = oracles.dense_cov(z_prior.cov_upper.numpy(),
                                      z_prior.cov_lower.numpy(), z_prior.cov_side.numpy())
            xi_z = rng.standard_normal((n_draws, 2, 1))
            z_np = z_post.mean.numpy() + (np.linalg.cholesky(cov_q) @ xi_z)[..., 0]
            elbo += (oracles.mvn2_logpdf_batched(z_np, z_prior.mean.numpy(), cov_p)
                     - oracles.mvn2_logpdf_batched(z_np, z_post.mean.numpy(), cov_q))
            recon = model.decode(torch.from_numpy(z_np))
            elbo += oracles.normal_logpdf(value, recon.mean.numpy(), recon.var.numpy()).sum(-1)
    orc_mean = float(elbo.mean())
    orc_se = float(elbo.std(ddof=1) / math.sqrt(n_draws))
    return pkg_mean, pkg_se, orc_mean, orc_se


def test_objective_matches_nested_monte_carlo_elbo():
    pkg_mean, pkg_se, orc_mean, orc_se = run_elbo_monte_carlo(20_000, seed=987)
    bound = 3.0 * math.hypot(pkg_se, orc_se)
    assert abs(pkg_mean - orc_mean) <= bound
    assert pkg_se < 0.05 and orc_se < 0.05


def grad_check_model() -> SRKN:
    return SRKN(tiny_config(m=2, k=2, gru_hidden=6, enc_hidden=(6,),
                            dec_hidden=(6,), trans_hidden=(6,), inf_hidden=(6,),
                            init_seed=5))


def run_grad_check_criterion():
    """Finite-difference sweep used by the acceptance gate; returns
    (report, elapsed seconds)."""
    model = grad_check_model()
    data = gen_four_modes(2, seed=9).data[:3]
    t0 = time.monotonic()
    report = grad_check(model, data, eps=1e-4, seed=0, max_entries_per_param=3)
    return report, time.monotonic() - t0


def test_grad_check_small_model_passes_quickly():
    report, elapsed = run_grad_check_criterion()
    assert report.max_error < 1e-3
    assert elapsed < 1.0
    names = {name for name, _ in grad_check_model().named_parameters()}
    assert set(report.by_group) == names
    assert report.worst_group in names
    assert report.by_group[report.worst_group] == report.max_error


def test_grad_check_error_shrinks_with_eps():
    model = grad_check_model()
    data = gen_four_modes(2, seed=9).data[:3]
    errs = {eps: grad_check(model, data, eps=eps, seed=0,
                            max_entries_per_param=2).max_error
            for eps in (1e-3, 1e-4, 1e-5)}
    # Truncation error dominates at these widths, so halving eps by a
    # decade shrinks the worst relative error.
    assert errs[1e-4] < errs[1e-3]
    assert errs[1e-5] < errs[1e-3]
    assert all(np.isfinite(v) for v in errs.values())


def replay_stream(seed: int, t_len: int, batch: int, s_dim: int, m: int,
                  z_draws: int = 1, pred_k: int = 0) -> torch.Generator:
    """Consume draws in the documented order and return the generator."""
    g = gen(seed)
    for _ in range(t_len):
        torch.randn(batch, s_dim, dtype=torch.float64, generator=g)
        torch.randn(batch, 2 * m, dtype=torch.float64, generator=g)
        for _ in range(z_draws - 1):
            torch.randn(batch, 2 * m, dtype=torch.float64, generator=g)
        for _ in range(pred_k):
            torch.randn(batch, 2 * m, dtype=torch.float64, generator=g)
    return g


@pytest.mark.parametrize("beta_pred,z_draws", [(0.0, 1), (0.0, 3), (1.0, 1), (0.5, 2)])
def test_draw_order_and_zero_beta_skipping(beta_pred, z_draws):
    cfg = tiny_config(m=2, k=3, beta_pred=beta_pred)
    model = SRKN(cfg)
    data = gen_four_modes(5, seed=1).data[:4]
    g = gen(77)
    sequence_loss(model, data, generator=g, z_draws=z_draws)
    pred_k = cfg.k if beta_pred != 0.0 else 0
    expected = replay_stream(77, t_len=4, batch=5, s_dim=cfg.s_dim, m=cfg.m,
                             z_draws=z_draws, pred_k=pred_k)
    assert torch.equal(torch.rand(8, generator=g), torch.rand(8, generator=expected))


def test_objective_combines_terms_with_stated_weights():
    model = SRKN(tiny_config(beta_rec=0.7, beta_z=0.3, beta_s=0.2, beta_pred=1.4))
    data = gen_four_modes(6, seed=2).data
    b = sequence_loss(model, data, generator=gen(0), reduce="none")
    want = 0.7 * b.recon - 0.3 * b.kl_z - 0.2 * b.kl_s + 1.4 * b.pred
    assert torch.allclose(b.objective, want, atol=1e-12)
    assert b.objective.shape == (6,)


def test_huge_encoder_variance_gives_tiny_latent_kl():
    model = SRKN(tiny_config(k=2))
    m = model.config.m
    model.encode = lambda x: DiagGaussian(
        torch.zeros(x.shape[:-1] + (m,), dtype=torch.float64),
        torch.full(x.shape[:-1] + (m,), 1e12, dtype=torch.float64))
    data = gen_four_modes(4, seed=6).data
    with torch.no_grad():
        b = sequence_loss(model, data, generator=gen(1))
    # an uninformative observation leaves the posterior at the prior
    assert float(b.kl_z) < 1e-8
    assert torch.isfinite(b.objective)


def test_fixed_switching_parameters_get_no_gradient():
    model = SRKN(tiny_config(switching="fixed_uniform"))
    data = gen_four_modes(4, seed=0).data
    sequence_loss(model, data, generator=gen(0)).objective.backward()
    frozen_prefixes = ("gru.", "f_trans.", "f_inf.")
    for name, p in model.named_parameters():
        if name.startswith(frozen_prefixes):
            assert p.grad is None, name
        else:
            assert p.grad is not None and torch.isfinite(p.grad).all(), name


def test_learned_switching_gradients_reach_every_parameter():
    model = SRKN(tiny_config())
    data = gen_four_modes(4, seed=0).data
    sequence_loss(model, data, generator=gen(0)).objective.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name


def state_dicts_equal(a: dict, b: dict) -> bool:
    return set(a) == set(b) and all(torch.equal(a[k], b[k]) for k in a)


def test_fit_is_deterministic_and_resume_replays_the_stream():
    train = gen_four_modes(32, seed=3)
    val = gen_four_modes(8, seed=4)
    kw = dict(lr=1e-3, batch_size=8, seed=11)

    model_a = SRKN(tiny_config())
    res_a = fit(model_a, train, TrainConfig(epochs=2, **kw), val=val)
    assert res_a.epochs_run == 2 and [r["epoch"] for r in res_a.history] == [0, 1]
    assert all(np.isfinite(r["val_objective"]) for r in res_a.history)

    model_b = SRKN(tiny_config())
    opt = make_optimizer(model_b, TrainConfig(epochs=1, **kw))
    res_1 = fit(model_b, train, TrainConfig(epochs=1, **kw), val=val, optimizer=opt)
    res_2 = fit(model_b, train, TrainConfig(epochs=1, **kw), val=val,
                start_epoch=1, optimizer=opt)
    assert [r["epoch"] for r in res_2.history] == [1]
    assert res_1.history + res_2.history == res_a.history
    assert state_dicts_equal(model_a.state_dict(), model_b.state_dict())

    model_c = SRKN(tiny_config())
    fit(model_c, train, TrainConfig(epochs=2, **kw), val=val)
    assert state_dicts_equal(model_a.state_dict(), model_c.state_dict())


def test_divergence_restores_last_finite_parameters():
    model = SRKN(tiny_config())
    init = copy.deepcopy(model.state_dict())
    train = gen_four_modes(16, seed=5)
    cfg = TrainConfig(lr=1e30, optimizer="sgd", epochs=3, batch_size=4,
                      clip_norm=1e9, seed=0)
    result = fit(model, train, cfg)
    assert result.diverged
    assert result.epochs_run == 0 and result.history == []
    assert state_dicts_equal(model.state_dict(), init)
    b = sequence_loss(model, train.data, generator=gen(0))
    assert torch.isfinite(b.objective)


def test_fit_epochs_zero_is_a_no_op():
    model = SRKN(tiny_config())
    init = copy.deepcopy(model.state_dict())
    result = fit(model, gen_four_modes(8, seed=1), TrainConfig(epochs=0))
    assert result.history == [] and result.epochs_run == 0 and not result.diverged
    assert state_dicts_equal(model.state_dict(), init)


def zero_noise(monkeypatch):
    def fake_randn(*size, generator=None, dtype=None, **kw):
        return torch.zeros(*size, dtype=dtype or torch.float64)
    monkeypatch.setattr(torch, "randn", fake_randn)


@pytest.mark.parametrize("with_noise", [False, True])
def test_prediction_term_matches_mixture_oracle_at_zero_noise(monkeypatch, with_noise):
    model = SRKN(tiny_config(m=2, k=2, init_seed=4))
    data = gen_four_modes(3, seed=8).data[:3]
    with torch.no_grad():
        states, diags = model.filter_sequence(data, sample=False)
    zero_noise(monkeypatch)
    with torch.no_grad():
        b = sequence_loss(model, data, generator=gen(0), reduce="none",
                          pred_trans_noise=with_noise)

    noise = model.bank.trans_noise() if with_noise else \
        torch.zeros(2 * model.config.m, dtype=torch.float64)
    want = np.zeros(3)
    with torch.no_grad():
        for t in range(3):
            prev = model.init_state(3) if t == 0 else states[t - 1]
            parts = []
            for k in range(model.config.k):
                z_pred = predict_state(prev.z_post, model.bank.base_matrix(k), noise)
                recon = model.decode(z_pred.mean)
                lp = oracles.normal_logpdf(data[t].numpy(), recon.mean.numpy(),
                                           recon.var.numpy()).sum(-1)
                parts.append(np.log(diags[t].alpha[..., k].numpy()) + lp)
            want += np.logaddexp(parts[0], parts[1])
    assert np.allclose(b.pred.numpy(), want, atol=1e-10)
    assert torch.allclose(b.objective,
                          b.recon - 0.1 * b.kl_z - 0.1 * b.kl_s + b.pred, atol=1e-12)


def test_trans_noise_widens_prediction_covariance():
    # Identical streams, so only the prediction covariance (and through it
    # the prediction samples) can differ between the two settings.
    model = SRKN(tiny_config(m=2, k=2, init_seed=4))
    data = gen_four_modes(3, seed=8).data[:3]
    with torch.no_grad():
        plain = sequence_loss(model, data, generator=gen(0), reduce="none")
        noisy = sequence_loss(model, data, generator=gen(0), reduce="none",
                              pred_trans_noise=True)
    assert not torch.allclose(plain.pred, noisy.pred)
    assert torch.equal(plain.recon, noisy.recon)
    assert torch.equal(plain.kl_z, noisy.kl_z)


def test_extra_latent_draws_collapse_at_zero_noise(monkeypatch):
    model = SRKN(tiny_config())
    data = gen_four_modes(4, seed=3).data
    zero_noise(monkeypatch)
    one = sequence_loss(model, data, generator=gen(0), z_draws=1)
    three = sequence_loss(model, data, generator=gen(0), z_draws=3)
    assert torch.equal(one.recon, three.recon)
    assert torch.equal(one.objective, three.objective)


def test_divergence_error_reports_the_failing_step():
    model = SRKN(tiny_config())
    data = gen_four_modes(4, seed=0).data.clone()
    data[2, 1, 0] = float("nan")
    with pytest.raises(DivergenceError) as err:
        sequence_loss(model, data, generator=gen(0))
    assert err.value.step == 2


@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(batch_size=0), dict(epochs=-1),
                                dict(clip_norm=0.0), dict(optimizer="lbfgs"),
                                dict(z_draws=0)])
def test_train_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_reduce_mode_validation(tiny_model, small_batch):
    with pytest.raises(ValueError, match="reduce"):
        sequence_loss(tiny_model, small_batch.data, reduce="sum")


def test_history_roundtrip_preserves_floats(tmp_path):
    rows = [
        {"epoch": 0, "recon": -1.2345678901234567, "kl_z": 0.5, "kl_s": 0.25,
         "pred": -3.0, "objective": -4.0, "val_recon": -1.5, "val_kl_z": 0.4,
         "val_kl_s": 0.3, "val_pred": -2.0, "val_objective": -3.5},
        {"epoch": 1, "recon": -1.0, "kl_z": 0.125, "kl_s": 0.0625,
         "pred": -2.5, "objective": -3.25},
    ]
    path = tmp_path / "history.tsv"
    write_history(path, rows)
    back = read_history(path)
    assert back[0] == rows[0]
    assert back[1]["epoch"] == 1 and back[1]["recon"] == -1.0
    for col in ("val_recon", "val_objective"):
        assert math.isnan(back[1][col])
    text = format_history(rows)
    assert text.splitlines()[0].startswith("epoch\trecon\t")


def test_optimizer_arrays_roundtrip_continues_identically(tmp_path):
    train = gen_four_modes(16, seed=7)
    cfg = TrainConfig(lr=1e-3, batch_size=8, epochs=1, seed=2)

    model_a = SRKN(tiny_config())
    opt_a = make_optimizer(model_a, cfg)
    fit(model_a, train, cfg, optimizer=opt_a)

    path = tmp_path / "opt.srkn"
    write_arrays(path, optimizer_arrays(opt_a), {"kind": "optimizer"})

    model_b = SRKN(tiny_config())
    opt_b = make_optimizer(model_b, cfg)
    fit(model_b, train, cfg, optimizer=opt_b)
    load_optimizer_arrays(opt_b, read_arrays(path)[0])
    model_b.load_state_dict(model_a.state_dict())

    next_cfg = TrainConfig(lr=1e-3, batch_size=8, epochs=1, seed=2)
    fit(model_a, train, next_cfg, start_epoch=1, optimizer=opt_a)
    fit(model_b, train, next_cfg, start_epoch=1, optimizer=opt_b)
    assert state_dicts_equal(model_a.state_dict(), model_b.state_dict())


def test_image_observation_log_prob_flattens_pixels(rng):
    x = torch.from_numpy(rng.integers(0, 2, size=(4, 3, 3)).astype(np.float64))
    probs = torch.from_numpy(rng.uniform(0.05, 0.95, size=(4, 9)))
    got = observation_log_prob(x, probs, "image")
    want = oracles.bernoulli_logpmf(x.numpy().reshape(4, 9), probs.numpy(), eps=0.0)
    assert np.allclose(got.numpy(), want.sum(-1), atol=1e-12)
