"""Depth-gated residual classifier evaluated at every depth in one pass.

The network is an input affine layer, a stack of residual blocks
(affine -> ReLU -> batch norm, added back onto the running activation),
and a single output affine layer shared by every depth. One forward pass
executes each block exactly once and yields class log-probabilities for
all depths 0..D, so a depth of 0 is a plain linear model.

The shared output head is applied to all depths at once by row-stacking
their activations; per-row arithmetic is unchanged, so traces are
identical to applying the head depth by depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    BatchNormState,
    NumericError,
    Tensor,
    affine,
    concat_rows,
    gather_labels,
    log_softmax,
    residual_block,
)


@dataclass(frozen=True)
class NetworkConfig:
    max_depth: int
    width: int
    input_dim: int
    n_classes: int

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


@dataclass
class ResidualBlock:
    weight: Tensor
    bias: Tensor
    bn_scale: Tensor
    bn_shift: Tensor
    bn_state: BatchNormState
    calls: int = 0  # forward executions, for the once-per-pass check


class ForwardTrace:
    """Per-depth activations and class log-probabilities from one pass."""

    def __init__(self, activations, log_probs_stacked, n):
        self.activations = activations  # Tensor [n, w] per depth
        self.log_probs_stacked = log_probs_stacked  # Tensor [(depths*n), C], depth-major
        self.n = n

    @property
    def depth_count(self):
        return len(self.activations)

    def log_prob(self, depth):
        """Class log-probabilities at one depth, [n, C] (values only)."""
        return self.log_probs_stacked.data[depth * self.n : (depth + 1) * self.n]

    def log_prob_array(self):
        """Values as an [n, depths, C] array."""
        k = self.depth_count
        c = self.log_probs_stacked.data.shape[1]
        return self.log_probs_stacked.data.reshape(k, self.n, c).transpose(1, 0, 2)

    def prob_array(self):
        return np.exp(self.log_prob_array())


class LdnNetwork:
    """Parameter container; all learnable tensors require gradients."""

    def __init__(self, config, input_weight, input_bias, blocks, output_weight, output_bias):
        self.config = config
        self.input_weight = input_weight
        self.input_bias = input_bias
        self.blocks = list(blocks)
        self.output_weight = output_weight
        self.output_bias = output_bias

    def parameters(self):
        params = [self.input_weight, self.input_bias]
        for blk in self.blocks:
            params += [blk.weight, blk.bias, blk.bn_scale, blk.bn_shift]
        params += [self.output_weight, self.output_bias]
        return params

    def snapshot(self):
        return {
            "params": [p.data.copy() for p in self.parameters()],
            "bn": [blk.bn_state.copy() for blk in self.blocks],
        }

    def restore(self, snap):
        for p, saved in zip(self.parameters(), snap["params"]):
            p.data = saved.copy()
        for blk, state in zip(self.blocks, snap["bn"]):
            blk.bn_state = state.copy()

    def reset_call_counts(self):
        for blk in self.blocks:
            blk.calls = 0


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_network(config, rng):
    """Fresh network; affine weights and biases ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    w, d_in, c = config.width, config.input_dim, config.n_classes
    input_weight = _uniform_init(rng, d_in, (d_in, w))
    input_bias = _uniform_init(rng, d_in, (w,))
    blocks = []
    for _ in range(config.max_depth):
        blocks.append(
            ResidualBlock(
                weight=_uniform_init(rng, w, (w, w)),
                bias=_uniform_init(rng, w, (w,)),
                bn_scale=Tensor(np.ones(w), requires_grad=True),
                bn_shift=Tensor(np.zeros(w), requires_grad=True),
                bn_state=BatchNormState.initial(w),
            )
        )
    output_weight = _uniform_init(rng, w, (w, c))
    output_bias = _uniform_init(rng, w, (c,))
    return LdnNetwork(config, input_weight, input_bias, blocks, output_weight, output_bias)


def run_blocks(net, x, mode="train", update_running=True, max_depth=None):
    """Input block plus residual blocks 1..max_depth; activations per depth."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericError("non-finite network input")
    limit = net.config.max_depth if max_depth is None else max_depth
    a = affine(Tensor(x), net.input_weight, net.input_bias)
    activations = [a]
    for i, blk in enumerate(net.blocks[:limit], start=1):
        a = residual_block(
            a, blk.weight, blk.bias, blk.bn_scale, blk.bn_shift, blk.bn_state,
            mode, update_running,
        )
        blk.calls += 1
        if not np.isfinite(a.data).all():
            raise NumericError(f"non-finite activations leaving residual block {i}")
        activations.append(a)
    return activations


def forward_all_depths(net, x, mode="train", update_running=True, max_depth=None):
    """Run every residual block once, reading off predictions at all depths.

    Returns a ForwardTrace whose depth-i entries correspond to using exactly
    i residual blocks. ``max_depth`` limits execution to the first blocks;
    blocks beyond it are never run.
    """
    activations = run_blocks(net, x, mode, update_running, max_depth)
    stacked = concat_rows(activations)
    logits = affine(stacked, net.output_weight, net.output_bias)
    return ForwardTrace(activations, log_softmax(logits), np.asarray(x).shape[0])


def forward_truncated(net, x, d_opt, mode="eval", update_running=False):
    """Forward using only blocks 1..d_opt; a bitwise prefix of the full trace."""
    if not 0 <= d_opt <= net.config.max_depth:
        raise ValueError(
            f"d_opt must lie in [0, {net.config.max_depth}], got {d_opt}"
        )
    return forward_all_depths(net, x, mode, update_running, max_depth=d_opt)


def per_depth_loglik(trace, labels):
    """Log-probability of the true class per example and depth, [n, depths]."""
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integers")
    k = trace.depth_count
    picked = gather_labels(trace.log_probs_stacked, np.tile(labels, k))
    return picked.reshape((k, trace.n)).transpose()
