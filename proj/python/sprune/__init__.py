"""Training-time structured pruning with stochastic unit gates."""

from ._sprune import (
    Prior,
    TrainConfig,
    Trainer,
    beta_prior,
    flattening_prior,
    gate_thresholds,
    lyapunov_v,
    pi_star,
    pi_star_numeric,
    prior_pdf,
    reg_term,
    stability_check,
    synth_blobs,
)

__all__ = [
    "Prior",
    "TrainConfig",
    "Trainer",
    "beta_prior",
    "flattening_prior",
    "gate_thresholds",
    "lyapunov_v",
    "pi_star",
    "pi_star_numeric",
    "prior_pdf",
    "reg_term",
    "stability_check",
    "synth_blobs",
]
