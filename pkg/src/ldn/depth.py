"""Probabilistic machinery over network depth.

A categorical prior with exponentially decaying mass favours shallow
networks; a learnable categorical posterior over depths 0..D is
parameterised by unconstrained logits. This module holds the evidence
lower bound for the joint weight/depth objective, the exact posterior
given full-dataset per-depth log-likelihoods (the closed-form E step,
used as a test oracle), the pruning heuristics that map a posterior to a
cutoff depth, and depth-marginalised prediction.

All functions here are pure and operate on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError


def _softmax(logits):
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _logsumexp(v):
    m = v.max()
    return m + np.log(np.exp(v - m).sum())


def _as_probs(dist):
    """Accept a DepthPosterior/DepthPrior or a bare probability vector."""
    if isinstance(dist, (DepthPosterior, DepthPrior)):
        return dist.probs
    return np.asarray(dist, dtype=np.float64)


@dataclass(frozen=True)
class DepthPrior:
    """Fixed categorical over depths 0..D with geometric decay rate gamma."""

    max_depth: int
    gamma: float
    probs: np.ndarray

    @property
    def log_probs(self):
        return np.log(self.probs)


def make_prior(max_depth, gamma):
    """Prior mass proportional to gamma^(1+i) for depth i, normalised."""
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    raw = gamma ** (1.0 + np.arange(max_depth + 1))
    return DepthPrior(max_depth, gamma, raw / raw.sum())


@dataclass
class DepthPosterior:
    """Learnable categorical over depths, stored as unconstrained logits."""

    logits: np.ndarray

    @property
    def max_depth(self):
        return len(self.logits) - 1

    @property
    def probs(self):
        return _softmax(self.logits)

    @classmethod
    def point_mass(cls, depth, n_depths):
        # exp(-800) underflows to exactly 0.0, so probs is an exact one-hot
        logits = np.full(n_depths, -800.0)
        logits[depth] = 0.0
        return cls(logits)


def posterior_from_logits(logits):
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise NumericError("posterior logits must be finite")
    return DepthPosterior(logits.copy())


def kl_categorical(q, p):
    """KL(q || p) in nats, with the convention 0*log(0) = 0."""
    q = _as_probs(q)
    p = _as_probs(p)
    if q.shape != p.shape:
        raise ValueError(f"distributions differ in length: {q.shape} vs {p.shape}")
    support = q > 0.0
    if np.any(p[support] == 0.0):
        raise ValueError("KL is infinite: q puts mass where p has none")
    val = float(np.sum(q[support] * (np.log(q[support]) - np.log(p[support]))))
    if -1e-12 < val < 0.0:  # rounding noise on q ~= p
        val = 0.0
    return val


def elbo_minibatch(loglik, posterior, prior, n_total):
    """Stochastic lower-bound estimate from a minibatch of per-depth log-likelihoods.

    ``loglik`` is [n_batch, D+1] with entry (n, i) the log-probability of
    example n's label when using i residual blocks. The data term is scaled
    by n_total / n_batch; with a full batch this is the exact bound.
    """
    loglik = np.asarray(loglik, dtype=np.float64)
    alpha = _as_probs(posterior)
    n_batch = loglik.shape[0]
    if not n_total >= n_batch >= 1:
        raise ValueError(f"need n_total >= n_batch >= 1, got {n_total}, {n_batch}")
    if loglik.shape[1] != len(alpha):
        raise ValueError("loglik depth axis does not match posterior length")
    if not np.isfinite(loglik).all():
        raise NumericError("non-finite per-depth log-likelihoods")
    data_term = (n_total / n_batch) * float((loglik @ alpha).sum())
    return data_term - kl_categorical(alpha, prior.probs)


def exact_posterior(loglik_full, prior):
    """Closed-form posterior over depth given full-dataset log-likelihoods.

    Computed entirely in log space: logit_j = log(prior_j) + sum_n loglik[n, j],
    normalised by log-sum-exp, so extreme likelihood ratios cannot overflow.
    """
    loglik_full = np.asarray(loglik_full, dtype=np.float64)
    logw = prior.log_probs + loglik_full.sum(axis=0)
    return DepthPosterior(logw - _logsumexp(logw))


def log_marginal_likelihood(loglik_full, prior):
    """Exact log p(labels | inputs) with depth summed out."""
    loglik_full = np.asarray(loglik_full, dtype=np.float64)
    return float(_logsumexp(prior.log_probs + loglik_full.sum(axis=0)))


@dataclass(frozen=True)
class PruneResult:
    d_opt: int
    heuristic: str
    truncated: np.ndarray  # posterior over depths 0..d_opt, sums to 1


def truncate_posterior(posterior, d_opt):
    """Reassign all mass above d_opt onto d_opt."""
    alpha = _as_probs(posterior)
    if not 0 <= d_opt < len(alpha):
        raise ValueError(f"d_opt must lie in [0, {len(alpha) - 1}], got {d_opt}")
    out = alpha[: d_opt + 1].copy()
    out[d_opt] = alpha[d_opt:].sum()
    return out


def prune_argmax(posterior):
    """Most probable depth; ties break toward the shallower index."""
    alpha = _as_probs(posterior)
    d = int(np.argmax(alpha))
    return PruneResult(d, "argmax", truncate_posterior(alpha, d))


def prune_95(posterior):
    """Shallowest depth whose mass is >= 95% of the maximum."""
    alpha = _as_probs(posterior)
    d = int(np.flatnonzero(alpha >= 0.95 * alpha.max())[0])
    return PruneResult(d, "p95", truncate_posterior(alpha, d))


def prune_expected(posterior):
    """Expected depth under the posterior, rounded half away from zero."""
    alpha = _as_probs(posterior)
    expected = float(np.arange(len(alpha)) @ alpha)
    d = int(np.floor(expected + 0.5))
    d = min(d, len(alpha) - 1)
    return PruneResult(d, "expected", truncate_posterior(alpha, d))


PRUNE_HEURISTICS = {
    "argmax": prune_argmax,
    "p95": prune_95,
    "expected": prune_expected,
}


def predict_marginal(per_depth_probs, truncated):
    """Posterior-weighted mixture of per-depth class probabilities.

    ``per_depth_probs`` is [n, k, C] covering depths 0..k-1 and ``truncated``
    a length-k posterior; rows of the result sum to 1.
    """
    per_depth_probs = np.asarray(per_depth_probs, dtype=np.float64)
    truncated = np.asarray(truncated, dtype=np.float64)
    if per_depth_probs.ndim != 3 or per_depth_probs.shape[1] != len(truncated):
        raise ValueError(
            f"expected probs [n, {len(truncated)}, C], got {per_depth_probs.shape}"
        )
    return np.einsum("nkc,k->nc", per_depth_probs, truncated)
