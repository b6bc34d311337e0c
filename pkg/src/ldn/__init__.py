"""Variational depth search for residual networks.

Trains network weights jointly with an exact categorical posterior over
how many residual blocks to use, prunes to a cutoff depth, and predicts
by marginalising over the retained depths in a single forward pass.
"""

from .autodiff import BatchNormState, Tensor, finite_diff_check, no_grad
from .data import Dataset, gen_spirals, load_checkpoint, load_dataset, save_checkpoint, save_dataset, standardize
from .depth import (
    DepthPosterior,
    DepthPrior,
    PruneResult,
    elbo_minibatch,
    exact_posterior,
    kl_categorical,
    log_marginal_likelihood,
    make_prior,
    posterior_from_logits,
    predict_marginal,
    prune_95,
    prune_argmax,
    prune_expected,
    truncate_posterior,
)
from .metrics import EvalReport, ece, error_rate, evaluate_predictions, log_likelihood
from .network import (
    ForwardTrace,
    LdnNetwork,
    NetworkConfig,
    forward_all_depths,
    forward_truncated,
    init_network,
    per_depth_loglik,
)
from .training import (
    DivergenceError,
    SGD,
    TrainConfig,
    TrainedModel,
    TrainHistory,
    evaluate_elbo_full,
    refit_posterior,
    train_ddn,
    train_ldn,
)

__version__ = "0.1.0"
