"""Switching recurrent Kalman network: a deep state-space model that blends
a bank of linear transition systems through a stochastic switching variable,
with factorized Kalman filtering in latent space."""

from .gauss import (DiagGaussian, FactoredGaussianState, bernoulli_log_pmf,
                    diag_gauss_log_pdf, kl_diag_gauss, kl_factored,
                    sample_factored)
from .transition import TransitionBank, blend_transition, kalman_update, predict_state
from .model import (SRKN, FilterState, ModelConfig, RolloutResult,
                    count_parameters, derived_generator)
from .training import (DivergenceError, GradCheckReport, TrainConfig,
                       TrainResult, fit, grad_check, sequence_loss)
from .datasets import (SequenceBatch, TaxiConfig, TaxiDataError,
                       gen_car_images, gen_four_modes, load_batch, load_taxi,
                       save_batch)
from .metrics import (EvalReport, evaluate, multi_step_loss, one_step_loss,
                      recon_ll, wasserstein)
from .io import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "DiagGaussian", "FactoredGaussianState", "bernoulli_log_pmf",
    "diag_gauss_log_pdf", "kl_diag_gauss", "kl_factored", "sample_factored",
    "TransitionBank", "blend_transition", "kalman_update", "predict_state",
    "SRKN", "FilterState", "ModelConfig", "RolloutResult", "count_parameters",
    "derived_generator",
    "DivergenceError", "GradCheckReport", "TrainConfig", "TrainResult", "fit",
    "grad_check", "sequence_loss",
    "SequenceBatch", "TaxiConfig", "TaxiDataError", "gen_car_images",
    "gen_four_modes", "load_batch", "load_taxi", "save_batch",
    "EvalReport", "evaluate", "multi_step_loss", "one_step_loss", "recon_ll",
    "wasserstein",
    "load_checkpoint", "save_checkpoint",
    "__version__",
]
