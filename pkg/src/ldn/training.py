"""Joint gradient training of network weights and the depth posterior.

The training loss is the negative minibatch evidence lower bound, summed
over the dataset. Depth logits take gradient steps at that scale, so the
learned depth distribution tracks the exact posterior as the weights
move; weight steps are rescaled to the per-example scale (a positive
per-group rescaling that leaves the optimum unchanged but keeps the
documented learning rate stable).

Progress is tracked by the full-train bound evaluated with frozen
batch-norm statistics, and training stops once it fails to improve for a
fixed number of evaluations. The best-scoring parameter snapshot is what
gets returned. Fixed-depth baselines train the same way on the plain
label log-likelihood of their final depth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .depth import DepthPosterior, _logsumexp, elbo_minibatch
from .network import forward_all_depths, init_network, per_depth_loglik, run_blocks


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.5
    batch_size: int = 512  # clamped to the dataset size
    early_stop_patience: int = 500  # evaluations without improvement
    max_iterations: int = 20000
    lr_drop: Optional[tuple] = None  # (after_evaluations, factor)
    eval_every: int = 1
    seed: int = 0


@dataclass
class EvalPoint:
    iteration: int
    objective: float  # full-train ELBO (depth training) or mean log-lik (fixed depth)
    alpha: np.ndarray


@dataclass
class TrainHistory:
    evals: list = field(default_factory=list)
    best_iteration: int = 0
    best_objective: float = -np.inf
    seconds_total: float = 0.0
    seconds_eval: float = 0.0


@dataclass
class TrainedModel:
    network: object
    posterior: DepthPosterior
    history: TrainHistory
    net_config: object
    train_config: TrainConfig
    prior: object = None


class SGD:
    """Heavy-ball SGD: v <- mu*v + g; p <- p - lr*scale*v.

    ``scales`` rescales the step per parameter (default 1 everywhere),
    leaving the optimum and the momentum recursion untouched.
    """

    def __init__(self, params, lr, momentum=0.0, scales=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.scales = [1.0] * len(self.params) if scales is None else list(scales)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v, s in zip(self.params, self.velocity, self.scales):
            g = p.grad if p.grad is not None else 0.0
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise DivergenceError("non-finite gradient in SGD step")
            v *= self.momentum
            v += g
            p.data -= self.lr * s * v


def _batch_indices(n, batch_size, rng):
    """Cycle through shuffled epochs, yielding minibatches without replacement."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk) >= 2:  # batch norm needs at least two rows
                yield chunk


def _full_train_loglik(net, dataset):
    """Per-depth log-likelihood table on the whole train set, eval-mode."""
    with no_grad():
        trace = forward_all_depths(net, dataset.x, mode="eval", update_running=False)
        return per_depth_loglik(trace, dataset.y).data


def evaluate_elbo_full(net, posterior, dataset, prior):
    """The exact bound on the whole training set (eval-mode batch norm)."""
    loglik = _full_train_loglik(net, dataset)
    return elbo_minibatch(loglik, posterior, prior, loglik.shape[0])


def _elbo_graph(loglik, rho, log_prior, n_total):
    """Differentiable bound: data term (scaled to n_total) minus KL."""
    k = rho.data.shape[0]
    log_alpha = ad.log_softmax(rho.reshape((1, k)))
    alpha = log_alpha.exp()
    n_batch = loglik.data.shape[0]
    data_term = (loglik @ alpha.reshape((k, 1))).sum() * (n_total / n_batch)
    kl = (alpha * (log_alpha - log_prior)).sum()
    return data_term - kl


def train_ldn(dataset, net_config, prior, config, progress=None):
    """Jointly optimise weights and depth logits on the negative bound.

    ``progress(iteration, objective, d_argmax)`` is invoked after each
    full-train evaluation when given. Raises DivergenceError if the loss
    goes non-finite, reporting the iteration.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    net = init_network(net_config, rng)
    n_depths = net_config.max_depth + 1
    rho = Tensor(np.zeros(n_depths), requires_grad=True)  # uniform start
    log_prior = Tensor(prior.log_probs.reshape(1, n_depths))

    n = dataset.x.shape[0]
    batch_size = min(config.batch_size, n)
    full_batch = batch_size >= n
    batches = None if full_batch else _batch_indices(n, batch_size, rng)

    # The objective sums over the dataset, so its scale grows with n. The
    # depth logits take the documented step size directly (the posterior
    # then tracks the exact one during training); weight steps are rescaled
    # by 1/n, putting them on the per-example scale the learning rate is
    # sane for. A positive rescale per group leaves the optimum unchanged.
    theta = net.parameters()
    opt = SGD(
        theta + [rho],
        config.learning_rate,
        config.momentum,
        scales=[1.0 / n] * len(theta) + [1.0],
    )
    history = TrainHistory()
    best_snap = None
    since_best = 0
    eval_count = 0
    t_eval = 0.0

    for iteration in range(1, config.max_iterations + 1):
        if full_batch:
            xb, yb = dataset.x, dataset.y
        else:
            idx = next(batches)
            xb, yb = dataset.x[idx], dataset.y[idx]

        trace = forward_all_depths(net, xb, mode="train")
        loglik = per_depth_loglik(trace, yb)
        loss = _elbo_graph(loglik, rho, log_prior, n) * -1.0
        if not np.isfinite(loss.data):
            raise DivergenceError(
                f"non-finite training loss at iteration {iteration}", iteration
            )
        opt.zero_grad()
        loss.backward()
        opt.step()

        if iteration % config.eval_every != 0:
            continue
        te = time.perf_counter()
        posterior = DepthPosterior(rho.data.copy())
        objective = evaluate_elbo_full(net, posterior, dataset, prior)
        eval_count += 1
        history.evals.append(EvalPoint(iteration, objective, posterior.probs))
        if progress is not None:
            progress(iteration, objective, int(np.argmax(posterior.probs)))
        if objective > history.best_objective:
            history.best_objective = objective
            history.best_iteration = iteration
            best_snap = (net.snapshot(), rho.data.copy())
            since_best = 0
        else:
            since_best += 1
        t_eval += time.perf_counter() - te
        if since_best >= config.early_stop_patience:
            break
        if config.lr_drop is not None and eval_count == config.lr_drop[0]:
            opt.lr *= config.lr_drop[1]

    if best_snap is None:  # max_iterations below eval_every
        posterior = DepthPosterior(rho.data.copy())
        history.best_objective = evaluate_elbo_full(net, posterior, dataset, prior)
        history.best_iteration = 0
        history.evals.append(EvalPoint(0, history.best_objective, posterior.probs))
        best_snap = (net.snapshot(), rho.data.copy())

    net.restore(best_snap[0])
    rho.data = best_snap[1].copy()
    history.seconds_total = time.perf_counter() - t0
    history.seconds_eval = t_eval
    return TrainedModel(
        net, DepthPosterior(rho.data.copy()), history, net_config, config, prior
    )


def _final_depth_loglik(net, x, labels, mode, update_running=True):
    """Label log-probabilities at the deepest depth only (fixed-depth loss)."""
    a = run_blocks(net, x, mode, update_running)[-1]
    logits = ad.affine(a, net.output_weight, net.output_bias)
    return ad.gather_labels(ad.log_softmax(logits), labels)


def _mean_loglik_final_depth(net, dataset):
    with no_grad():
        picked = _final_depth_loglik(net, dataset.x, dataset.y, "eval", update_running=False)
    return float(picked.data.mean())


def train_ddn(dataset, depth, net_config, config, progress=None):
    """Fixed-depth baseline: same blocks, plain cross-entropy at one depth.

    Early stopping watches the full-train mean log-likelihood. Equivalent to
    the depth-posterior objective under a point mass at ``depth``, up to the
    constant KL term.
    """
    if not 0 <= depth <= net_config.max_depth:
        raise ValueError(f"depth must lie in [0, {net_config.max_depth}], got {depth}")
    from .network import NetworkConfig

    ddn_config = NetworkConfig(depth, net_config.width, net_config.input_dim, net_config.n_classes)
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    net = init_network(ddn_config, rng)

    n = dataset.x.shape[0]
    batch_size = min(config.batch_size, n)
    full_batch = batch_size >= n
    batches = None if full_batch else _batch_indices(n, batch_size, rng)

    theta = net.parameters()
    opt = SGD(
        theta,
        config.learning_rate,
        config.momentum,
        scales=[1.0 / n] * len(theta),  # weight steps on the per-example scale
    )
    history = TrainHistory()
    best_snap = None
    since_best = 0
    eval_count = 0
    t_eval = 0.0

    for iteration in range(1, config.max_iterations + 1):
        if full_batch:
            xb, yb = dataset.x, dataset.y
        else:
            idx = next(batches)
            xb, yb = dataset.x[idx], dataset.y[idx]

        picked = _final_depth_loglik(net, xb, yb, "train")
        loss = picked.sum() * (-n / len(yb))
        if not np.isfinite(loss.data):
            raise DivergenceError(
                f"non-finite training loss at iteration {iteration}", iteration
            )
        opt.zero_grad()
        loss.backward()
        opt.step()

        if iteration % config.eval_every != 0:
            continue
        te = time.perf_counter()
        objective = _mean_loglik_final_depth(net, dataset)
        eval_count += 1
        history.evals.append(EvalPoint(iteration, objective, np.array([])))
        if progress is not None:
            progress(iteration, objective, depth)
        if objective > history.best_objective:
            history.best_objective = objective
            history.best_iteration = iteration
            best_snap = net.snapshot()
            since_best = 0
        else:
            since_best += 1
        t_eval += time.perf_counter() - te
        if since_best >= config.early_stop_patience:
            break
        if config.lr_drop is not None and eval_count == config.lr_drop[0]:
            opt.lr *= config.lr_drop[1]

    if best_snap is None:
        history.best_objective = _mean_loglik_final_depth(net, dataset)
        history.best_iteration = 0
        history.evals.append(EvalPoint(0, history.best_objective, np.array([])))
        best_snap = net.snapshot()

    net.restore(best_snap)
    history.seconds_total = time.perf_counter() - t0
    history.seconds_eval = t_eval
    posterior = DepthPosterior.point_mass(depth, depth + 1)
    return TrainedModel(net, posterior, history, ddn_config, config, None)


def refit_posterior(net, dataset, prior, lr=0.1, momentum=0.9, max_iters=200000, tol=1e-14):
    """Gradient ascent on the depth logits alone, weights frozen.

    The per-depth log-likelihood table is computed once, after which the
    bound is concave in the depth distribution; ascent converges to the
    closed-form posterior. Stops when the gradient sup-norm drops below
    ``tol``. Returns the fitted posterior.
    """
    loglik = _full_train_loglik(net, dataset)
    w = loglik.sum(axis=0)  # total log-likelihood per depth
    log_beta = prior.log_probs
    rho = np.zeros_like(w)
    velocity = np.zeros_like(w)
    for _ in range(max_iters):
        log_alpha = rho - _logsumexp(rho)
        alpha = np.exp(log_alpha)
        u = w - (log_alpha - log_beta)  # d(bound)/d(alpha), up to a constant
        grad = alpha * (u - float(alpha @ u))
        if np.abs(grad).max() < tol:
            break
        velocity = momentum * velocity + grad
        rho = rho + lr * velocity
    return DepthPosterior(rho)
