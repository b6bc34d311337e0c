"""Reverse-mode automatic differentiation over dense float64 arrays.

Implements exactly the primitives a depth-gated residual classifier needs:
affine layers, ReLU, batch normalisation and log-softmax, plus the
elementwise glue (add, mul, exp, sum, matmul, stack, gather, reshape) used
to assemble mixture objectives. Ops record the graph eagerly as they run;
``Tensor.backward()`` walks it once in reverse topological order and
accumulates gradients into the participating leaves.

Everything is 64-bit. There is no broadcasting beyond bias addition and
per-channel batch-norm parameters, and no convolutions or GPU support.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class DegenerateBatchError(ValueError):
    """Batch statistics were requested for a batch that is too small."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block; forward values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _add_grad(t, g):
    if t.grad is None:
        t.grad = np.array(g)  # copy: g may be a view into another buffer
    else:
        t.grad += g


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray.

    Leaves are built directly (``Tensor(data, requires_grad=True)`` for
    parameters); interior nodes are produced by the ops below and carry a
    closure that pushes the output gradient onto their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # -- graph walk ----------------------------------------------------

    def backward(self):
        """Reverse-topological gradient accumulation from a scalar root.

        Each node is visited exactly once; leaves that do not feed the root
        simply keep ``grad`` untouched (treated as zero by the optimiser).
        Accumulation order is fixed by construction order, so repeated
        calls on the same graph are bitwise reproducible.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if id(node) in seen:
                    continue
                seen.add(id(node))
            if i < len(node._parents):
                stack.append((node, i + 1))
                child = node._parents[i]
                if id(child) not in seen:
                    stack.append((child, 0))
            else:
                topo.append(node)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # -- elementwise / structural ops ----------------------------------

    def __add__(self, other):
        if not isinstance(other, Tensor):
            raise TypeError("add expects a Tensor; use * for scalars")
        if self.data.shape != other.data.shape:
            raise ShapeError(f"add shapes differ: {self.data.shape} vs {other.data.shape}")
        a, b = self, other

        def vjp(g):
            if a.requires_grad:
                _add_grad(a, g)
            if b.requires_grad:
                _add_grad(b, g)

        return _make(a.data + b.data, (a, b), vjp, "add")

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if self.data.shape != other.data.shape:
                raise ShapeError(f"mul shapes differ: {self.data.shape} vs {other.data.shape}")
            a, b = self, other

            def vjp(g):
                if a.requires_grad:
                    _add_grad(a, g * b.data)
                if b.requires_grad:
                    _add_grad(b, g * a.data)

            return _make(a.data * b.data, (a, b), vjp, "mul")
        c = float(other)
        a = self

        def vjp(g):
            if a.requires_grad:
                _add_grad(a, g * c)

        return _make(a.data * c, (a,), vjp, "scale")

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            raise TypeError("matmul expects a Tensor")
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul expects 2-D operands")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(f"matmul shapes do not conform: {self.data.shape} @ {other.data.shape}")
        a, b = self, other

        def vjp(g):
            if a.requires_grad:
                _add_grad(a, g @ b.data.T)
            if b.requires_grad:
                _add_grad(b, a.data.T @ g)

        return _make(a.data @ b.data, (a, b), vjp, "matmul")

    def sum(self):
        """Sum of all entries, as a scalar tensor."""
        a = self

        def vjp(g):
            if a.requires_grad:
                _add_grad(a, np.full_like(a.data, float(g)))

        return _make(a.data.sum(), (a,), vjp, "sum")

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def vjp(g):
            if a.requires_grad:
                _add_grad(a, g * out_data)

        return _make(out_data, (a,), vjp, "exp")

    def reshape(self, shape):
        a = self
        old = a.data.shape

        def vjp(g):
            if a.requires_grad:
                _add_grad(a, g.reshape(old))

        return _make(a.data.reshape(shape), (a,), vjp, "reshape")

    def transpose(self):
        if self.data.ndim != 2:
            raise ShapeError("transpose expects a 2-D tensor")
        a = self

        def vjp(g):
            if a.requires_grad:
                _add_grad(a, g.T)

        return _make(a.data.T.copy(), (a,), vjp, "transpose")


def _make(data, parents, vjp, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, vjp=vjp)
    return Tensor(data, op=op)


# -- neural-network primitives -----------------------------------------


def affine(x, weight, bias):
    """``x @ weight + bias`` for x:[n,p], weight:[p,q], bias:[q]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError("affine expects x:[n,p], weight:[p,q], bias:[q]")
    if x.data.shape[1] != weight.data.shape[0] or weight.data.shape[1] != bias.data.shape[0]:
        raise ShapeError(
            f"affine shapes do not conform: x {x.data.shape}, weight {weight.data.shape}, "
            f"bias {bias.data.shape}"
        )

    def vjp(g):
        if x.requires_grad:
            _add_grad(x, g @ weight.data.T)
        if weight.requires_grad:
            _add_grad(weight, x.data.T @ g)
        if bias.requires_grad:
            _add_grad(bias, g.sum(axis=0))

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), vjp, "affine")


def relu(x):
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    mask = x.data > 0.0

    def vjp(g):
        if x.requires_grad:
            _add_grad(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), vjp, "relu")


@dataclass
class BatchNormState:
    """Running statistics owned by exactly one training run."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def initial(cls, width, momentum=0.1, eps=1e-5):
        return cls(np.zeros(width), np.ones(width), momentum, eps)

    def copy(self):
        return BatchNormState(
            self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps
        )


def batch_norm(x, scale, shift, state, mode="train", update_running=True):
    """Per-column batch normalisation followed by scale/shift.

    Train mode normalises by the batch mean and biased (1/n) variance and,
    unless ``update_running`` is off, folds the unbiased variance into the
    running statistics with ``state.momentum``. Eval mode normalises by the
    running statistics. Gradients never flow through the running buffers.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 2:
        raise ShapeError("batch_norm expects x:[n,q]")
    n, q = x.data.shape
    if scale.data.shape != (q,) or shift.data.shape != (q,):
        raise ShapeError("batch_norm scale/shift must be per-column vectors")

    if mode == "train":
        if n < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs n >= 2, got n={n}")
        mean = x.data.mean(axis=0)
        centered = x.data - mean
        var = (centered * centered).mean(axis=0)  # biased, 1/n
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv
        if update_running:
            m = state.momentum
            state.running_mean = (1.0 - m) * state.running_mean + m * mean
            state.running_var = (1.0 - m) * state.running_var + m * var * n / (n - 1)

        def vjp(g):
            if x.requires_grad:
                gh = g * scale.data
                _add_grad(
                    x,
                    inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0)),
                )
            if scale.requires_grad:
                _add_grad(scale, (g * xhat).sum(axis=0))
            if shift.requires_grad:
                _add_grad(shift, g.sum(axis=0))

    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv

        def vjp(g):
            if x.requires_grad:
                _add_grad(x, g * scale.data * inv)
            if scale.requires_grad:
                _add_grad(scale, (g * xhat).sum(axis=0))
            if shift.requires_grad:
                _add_grad(shift, g.sum(axis=0))

    return _make(scale.data * xhat + shift.data, (x, scale, shift), vjp, "batch_norm")


def log_softmax(z):
    """Row-wise ``z - log(sum(exp(z)))`` with max subtraction for stability."""
    if z.data.ndim != 2:
        raise ShapeError("log_softmax expects a 2-D input")
    if not np.isfinite(z.data).all():
        raise NumericError("log_softmax input contains non-finite values")
    zmax = z.data.max(axis=1, keepdims=True)
    shifted = z.data - zmax
    out_data = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def vjp(g):
        if z.requires_grad:
            _add_grad(z, g - np.exp(out_data) * g.sum(axis=1, keepdims=True))

    return _make(out_data, (z,), vjp, "log_softmax")


def gather_labels(logp, labels):
    """Pick ``logp[i, labels[i]]`` per row; the nll-gather primitive."""
    labels = np.asarray(labels)
    if logp.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logp.data.shape[0]:
        raise ShapeError("gather_labels expects logp:[n,C] and labels:[n]")
    n, c = logp.data.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    rows = np.arange(n)

    def vjp(g):
        if logp.requires_grad:
            full = np.zeros_like(logp.data)
            full[rows, labels] = g
            _add_grad(logp, full)

    return _make(logp.data[rows, labels], (logp,), vjp, "nll_gather")


def stack_columns(cols):
    """Stack k same-length vectors into an [n, k] matrix."""
    cols = tuple(cols)
    if not cols:
        raise ShapeError("stack_columns needs at least one column")
    n = cols[0].data.shape
    if any(c.data.ndim != 1 or c.data.shape != n for c in cols):
        raise ShapeError("stack_columns expects same-shape 1-D columns")

    def vjp(g):
        for j, c in enumerate(cols):
            if c.requires_grad:
                _add_grad(c, g[:, j])

    return _make(np.stack([c.data for c in cols], axis=1), cols, vjp, "stack")


def concat_rows(parts):
    """Concatenate [n_i, q] matrices along the row axis."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    if any(p.data.ndim != 2 or p.data.shape[1] != parts[0].data.shape[1] for p in parts):
        raise ShapeError("concat_rows expects 2-D parts with equal column counts")
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _add_grad(p, g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, vjp, "concat_rows")


def residual_block(a, weight, bias, scale, shift, state, mode="train", update_running=True):
    """Fused ``a + batch_norm(relu(affine(a)))`` with a hand-derived gradient.

    Arithmetic is identical, step for step, to composing the four primitive
    ops; fusing just removes per-op graph overhead on the training hot path.
    """
    if a.data.ndim != 2:
        raise ShapeError("residual_block expects a:[n,w]")
    n = a.data.shape[0]
    pre = a.data @ weight.data + bias.data
    act = np.where(pre > 0.0, pre, 0.0)
    if mode == "train":
        if n < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs n >= 2, got n={n}")
        mean = act.mean(axis=0)
        centered = act - mean
        var = (centered * centered).mean(axis=0)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv
        if update_running:
            m = state.momentum
            state.running_mean = (1.0 - m) * state.running_mean + m * mean
            state.running_var = (1.0 - m) * state.running_var + m * var * n / (n - 1)
    elif mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (act - state.running_mean) * inv
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = a.data + (scale.data * xhat + shift.data)

    def vjp(g):
        gh = g * scale.data
        if mode == "train":
            gact = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        else:
            gact = gh * inv
        gpre = np.where(pre > 0.0, gact, 0.0)
        if a.requires_grad:
            _add_grad(a, g + gpre @ weight.data.T)
        if weight.requires_grad:
            _add_grad(weight, a.data.T @ gpre)
        if bias.requires_grad:
            _add_grad(bias, gpre.sum(axis=0))
        if scale.requires_grad:
            _add_grad(scale, (g * xhat).sum(axis=0))
        if shift.requires_grad:
            _add_grad(shift, g.sum(axis=0))

    return _make(out, (a, weight, bias, scale, shift), vjp, "residual_block")


# -- gradient checking -------------------------------------------------


def zero_grads(params):
    for p in params:
        p.grad = None


def finite_diff_check(loss_fn, params, epsilon=1e-5, sample=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild and return the scalar loss tensor from the
    current values of ``params`` without other side effects. Checks every
    coordinate, or a random subsample of at least 100 when ``sample`` is
    given. The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    zero_grads(params)
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError("loss_fn must return a scalar tensor")
    loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    coords = [(k, j) for k, p in enumerate(params) for j in range(p.data.size)]
    if sample is not None and len(coords) > max(int(sample), 100):
        rng = np.random.default_rng(0) if rng is None else rng
        picks = rng.choice(len(coords), size=max(int(sample), 100), replace=False)
        coords = [coords[int(i)] for i in picks]

    worst = 0.0
    for k, j in coords:
        p = params[k]
        orig = p.data.flat[j]
        with no_grad():
            p.data.flat[j] = orig + epsilon
            f_plus = float(loss_fn().data)
            p.data.flat[j] = orig - epsilon
            f_minus = float(loss_fn().data)
        p.data.flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic[k].flat[j])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst:
            worst = rel
    return worst


def check_finite(arr, context):
    """Raise NumericError if ``arr`` has NaN/Inf entries."""
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {context}")
    return arr


__all__ = [
    "BatchNormState",
    "DegenerateBatchError",
    "NumericError",
    "ShapeError",
    "Tensor",
    "affine",
    "batch_norm",
    "check_finite",
    "concat_rows",
    "finite_diff_check",
    "gather_labels",
    "log_softmax",
    "no_grad",
    "relu",
    "residual_block",
    "stack_columns",
    "zero_grads",
]
