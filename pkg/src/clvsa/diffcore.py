"""Dense float64 tensors with reverse-mode gradients recorded on a tape.

Every differentiable operation appends one :class:`Node` to the :class:`Tape`
of its inputs. ``Tape.backward`` walks the nodes in reverse creation order and
applies the gradient rule registered for each op in :data:`GRAD_RULES`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

IGNORE_INDEX = -100
LOG_FLOOR = 1e-12

GRAD_RULES: dict[str, Callable] = {}


def _rule(name: str):
    def deco(fn):
        GRAD_RULES[name] = fn
        return fn
    return deco


class TapeError(RuntimeError):
    pass


def as_tensor(values, shape=None) -> np.ndarray:
    """Copy ``values`` into a finite float64 array, optionally reshaped."""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ValueError(f"shape {shape} does not hold {arr.size} values")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


class Node:
    __slots__ = ("tape", "index", "value", "op", "parents", "ctx",
                 "requires_grad", "_grad", "name")

    def __init__(self, tape, index, value, op, parents, ctx, requires_grad, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.requires_grad = requires_grad
        self._grad = None
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"


class Tape:
    """Ordered record of nodes; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._done = False

    def _record(self, op, value, parents=(), ctx=None, name=None) -> Node:
        for p in parents:
            if p.tape is not self:
                raise TapeError("operands belong to different tapes")
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, op, tuple(parents), ctx,
                    requires_grad, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None) -> Node:
        node = self._record("leaf", as_tensor(value), name=name)
        node.requires_grad = True
        return node

    def constant(self, value, name=None) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        return self._record("const", arr, name=name)

    def reset(self):
        for node in self.nodes:
            node._grad = None
        self._done = False

    def backward(self, loss: Node):
        if loss.tape is not self:
            raise TapeError("loss is not on this tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.value.shape}")
        if self._done:
            raise TapeError("backward already ran on this tape; call reset() first")
        self._done = True
        loss._grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = node._grad
            if g is None or not node.parents or not node.requires_grad:
                continue
            grads = GRAD_RULES[node.op](node, g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._grad is None:
                    parent._grad = np.array(pg, dtype=np.float64, copy=True)
                else:
                    parent._grad += pg


def backward(tape: Tape, loss: Node):
    tape.backward(loss)


def _same_shape(a: Node, b: Node, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -----------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")
    return a.tape._record("add", a.value + b.value, (a, b))


@_rule("add")
def _add_grad(node, g):
    return g, g


def hadamard(a: Node, b: Node) -> Node:
    _same_shape(a, b, "hadamard")
    return a.tape._record("hadamard", a.value * b.value, (a, b))


@_rule("hadamard")
def _hadamard_grad(node, g):
    a, b = node.parents
    return g * b.value, g * a.value


def sigmoid(a: Node) -> Node:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    return a.tape._record("sigmoid", 0.5 * (1.0 + np.tanh(0.5 * a.value)), (a,))


@_rule("sigmoid")
def _sigmoid_grad(node, g):
    s = node.value
    return (g * s * (1.0 - s),)


def tanh(a: Node) -> Node:
    return a.tape._record("tanh", np.tanh(a.value), (a,))


@_rule("tanh")
def _tanh_grad(node, g):
    return (g * (1.0 - node.value ** 2),)


def relu(a: Node) -> Node:
    return a.tape._record("relu", np.maximum(a.value, 0.0), (a,))


@_rule("relu")
def _relu_grad(node, g):
    return (g * (node.parents[0].value > 0),)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "hadamard": hadamard}


def elementwise(kind: str, a: Node, b: Node | None = None) -> Node:
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


def scale(a: Node, c: float) -> Node:
    return a.tape._record("scale", a.value * c, (a,), ctx=float(c))


@_rule("scale")
def _scale_grad(node, g):
    return (g * node.ctx,)


def add_n(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ValueError("add_n needs at least one operand")
    first = nodes[0]
    for n in nodes[1:]:
        _same_shape(first, n, "add_n")
    value = first.value.copy()
    for n in nodes[1:]:
        value += n.value
    return first.tape._record("add_n", value, tuple(nodes))


@_rule("add_n")
def _add_n_grad(node, g):
    return (g,) * len(node.parents)


def clip(a: Node, lo: float, hi: float) -> Node:
    return a.tape._record("clip", np.clip(a.value, lo, hi), (a,), ctx=(lo, hi))


@_rule("clip")
def _clip_grad(node, g):
    lo, hi = node.ctx
    x = node.parents[0].value
    return (g * ((x >= lo) & (x <= hi)),)


# -- linear maps -----------------------------------------------------------

def affine(W: Node, x: Node, b: Node | None = None) -> Node:
    """``W x + b`` applied over any leading axes of ``x``; W is [out, in]."""
    if W.value.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"affine: cannot apply W{W.shape} to x{x.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"affine: bias shape {b.shape} != ({W.shape[0]},)")
    y = x.value @ W.value.T
    if b is None:
        return W.tape._record("affine", y, (W, x))
    return W.tape._record("affine", y + b.value, (W, x, b))


@_rule("affine")
def _affine_grad(node, g):
    W, x = node.parents[:2]
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.value.reshape(-1, x.shape[-1])
    grads = [g2.T @ x2, g @ W.value]
    if len(node.parents) == 3:
        grads.append(g2.sum(axis=0))
    return grads


@dataclass
class Kernel:
    """Row-shared temporal kernel: weight [width, in, out], bias [out]."""
    weight: Node
    bias: Node

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 3 or w[0] % 2 == 0:
            raise ValueError(f"kernel weight must be [odd width, in, out], got {w}")
        if self.bias.shape != (w[2],):
            raise ValueError(f"kernel bias shape {self.bias.shape} != ({w[2]},)")

    @property
    def width(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[2]


def conv1d_row_shared(x: Node, k: Kernel) -> Node:
    """Slide ``k`` along the time axis of x [..., F, T, Cin], zero 'same' padding.

    The same weights apply to every feature row F.
    """
    if x.value.ndim < 3 or x.shape[-1] != k.in_channels:
        raise ValueError(f"conv: input {x.shape} vs kernel in-channels {k.in_channels}")
    width, cin, cout = k.weight.shape
    pad = (width - 1) // 2
    T = x.shape[-2]
    widths = [(0, 0)] * (x.value.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.value, widths)
    cols = np.concatenate([xp[..., j:j + T, :] for j in range(width)], axis=-1)
    y = cols @ k.weight.value.reshape(width * cin, cout) + k.bias.value
    return x.tape._record("conv1d_row_shared", y, (x, k.weight, k.bias), ctx=cols)


@_rule("conv1d_row_shared")
def _conv_grad(node, g):
    x, w, _ = node.parents
    cols = node.ctx
    width, cin, cout = w.shape
    pad = (width - 1) // 2
    T = x.shape[-2]
    g2 = g.reshape(-1, cout)
    gw = (cols.reshape(-1, width * cin).T @ g2).reshape(width, cin, cout)
    gb = g2.sum(axis=0)
    gcols = g @ w.value.reshape(width * cin, cout).T
    gxp = np.zeros(x.shape[:-2] + (T + 2 * pad, cin))
    for j in range(width):
        gxp[..., j:j + T, :] += gcols[..., j * cin:(j + 1) * cin]
    return gxp[..., pad:pad + T, :], gw, gb


# -- shape plumbing --------------------------------------------------------

def reshape(a: Node, shape) -> Node:
    return a.tape._record("reshape", a.value.reshape(shape), (a,))


@_rule("reshape")
def _reshape_grad(node, g):
    return (g.reshape(node.parents[0].shape),)


def concat_last(a: Node, b: Node) -> Node:
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_last: leading shapes differ {a.shape} vs {b.shape}")
    return a.tape._record("concat_last", np.concatenate([a.value, b.value], axis=-1), (a, b))


@_rule("concat_last")
def _concat_grad(node, g):
    n = node.parents[0].shape[-1]
    return g[..., :n], g[..., n:]


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    if not nodes:
        raise ValueError("stack needs at least one operand")
    for n in nodes[1:]:
        _same_shape(nodes[0], n, "stack")
    value = np.stack([n.value for n in nodes], axis=axis)
    return nodes[0].tape._record("stack", value, tuple(nodes), ctx=axis)


@_rule("stack")
def _stack_grad(node, g):
    return [np.take(g, i, axis=node.ctx) for i in range(len(node.parents))]


# -- attention primitives --------------------------------------------------

def dot_last(keys: Node, query: Node) -> Node:
    """Scores keys [..., K, D] against query [..., D] -> [..., K]."""
    if keys.shape[:-2] + keys.shape[-1:] != query.shape:
        raise ValueError(f"dot_last: keys {keys.shape} vs query {query.shape}")
    value = np.einsum("...kd,...d->...k", keys.value, query.value)
    return keys.tape._record("dot_last", value, (keys, query))


@_rule("dot_last")
def _dot_last_grad(node, g):
    keys, query = node.parents
    gk = g[..., :, None] * query.value[..., None, :]
    gq = np.einsum("...k,...kd->...d", g, keys.value)
    return gk, gq


def weighted_sum(weights: Node, values: Node) -> Node:
    """Mixes values [..., K, D] with weights [..., K] -> [..., D]."""
    if values.shape[:-1] != weights.shape:
        raise ValueError(f"weighted_sum: weights {weights.shape} vs values {values.shape}")
    value = np.einsum("...k,...kd->...d", weights.value, values.value)
    return weights.tape._record("weighted_sum", value, (weights, values))


@_rule("weighted_sum")
def _weighted_sum_grad(node, g):
    w, v = node.parents
    gw = np.einsum("...d,...kd->...k", g, v.value)
    gv = w.value[..., :, None] * g[..., None, :]
    return gw, gv


def softmax_last(x: Node) -> Node:
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    e = np.exp(x.value - x.value.max(axis=-1, keepdims=True))
    return x.tape._record("softmax_last", e / e.sum(axis=-1, keepdims=True), (x,))


@_rule("softmax_last")
def _softmax_grad(node, g):
    y = node.value
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


# -- losses and stochastic layers -----------------------------------------

def cross_entropy(probs: Node, labels) -> Node:
    """Mean of -log(probs[label]) over all positions not marked IGNORE_INDEX.

    ``probs`` is [..., n]; ``labels`` is an int or an int array of shape [...].
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[-1]
    if labels.shape != probs.shape[:-1]:
        raise ValueError(f"cross_entropy: labels {labels.shape} vs probs {probs.shape}")
    mask = labels != IGNORE_INDEX
    if np.any((labels[mask] < 0) | (labels[mask] >= n)):
        raise ValueError(f"label out of range for {n} classes")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: no labelled positions")
    idx = np.where(mask, labels, 0)
    picked = np.take_along_axis(probs.value, idx[..., None], axis=-1)[..., 0]
    clamped = np.maximum(picked, LOG_FLOOR)
    loss = -(np.log(clamped) * mask).sum() / count
    ctx = (idx, mask, picked, count)
    return probs.tape._record("cross_entropy", np.array(loss), (probs,), ctx=ctx)


@_rule("cross_entropy")
def _cross_entropy_grad(node, g):
    idx, mask, picked, count = node.ctx
    probs = node.parents[0]
    live = mask & (picked >= LOG_FLOOR)
    coef = np.where(live, -1.0 / np.maximum(picked, LOG_FLOOR), 0.0) * (g / count)
    out = np.zeros_like(probs.value)
    np.put_along_axis(out, idx[..., None], coef[..., None], axis=-1)
    return (out,)


def reparameterize(mu: Node, logvar: Node, eps) -> Node:
    """``mu + exp(logvar / 2) * eps``; eps is a constant standard-normal draw."""
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(mu, logvar, "reparameterize")
    if eps.shape != mu.shape:
        raise ValueError(f"reparameterize: eps {eps.shape} vs mu {mu.shape}")
    std = np.exp(0.5 * logvar.value)
    return mu.tape._record("reparameterize", mu.value + std * eps, (mu, logvar),
                           ctx=(std, eps))


@_rule("reparameterize")
def _reparameterize_grad(node, g):
    std, eps = node.ctx
    return g, g * 0.5 * std * eps


def dropout(x: Node, rate: float, training: bool, rng: np.random.Generator | None) -> Node:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x.tape._record("dropout", x.value * mask, (x,), ctx=mask)


@_rule("dropout")
def _dropout_grad(node, g):
    return (g * node.ctx,)


def gaussian_kl(mu_q: Node, logvar_q: Node, mu_p: Node, logvar_p: Node) -> Node:
    """KL(q || p) for diagonal Gaussians, summed over the last axis and
    averaged over any leading axes."""
    for n in (logvar_q, mu_p, logvar_p):
        _same_shape(mu_q, n, "gaussian_kl")
    var_q = np.exp(logvar_q.value)
    inv_var_p = np.exp(-logvar_p.value)
    diff = mu_q.value - mu_p.value
    terms = 0.5 * (logvar_p.value - logvar_q.value + (var_q + diff ** 2) * inv_var_p - 1.0)
    count = max(1, int(np.prod(mu_q.shape[:-1])))
    value = np.array(terms.sum() / count)
    return mu_q.tape._record("gaussian_kl", value, (mu_q, logvar_q, mu_p, logvar_p),
                             ctx=(var_q, inv_var_p, diff, count))


@_rule("gaussian_kl")
def _gaussian_kl_grad(node, g):
    var_q, inv_var_p, diff, count = node.ctx
    c = g / count
    g_mu_q = c * diff * inv_var_p
    g_lv_q = c * 0.5 * (var_q * inv_var_p - 1.0)
    g_lv_p = c * 0.5 * (1.0 - (var_q + diff ** 2) * inv_var_p)
    return g_mu_q, g_lv_q, -g_mu_q, g_lv_p


def sum_squares(a: Node) -> Node:
    return a.tape._record("sum_squares", np.array(np.sum(a.value ** 2)), (a,))


@_rule("sum_squares")
def _sum_squares_grad(node, g):
    return (2.0 * g * node.parents[0].value,)


# -- finite-difference checking -------------------------------------------

@dataclass
class GradCheckResult:
    errors: dict[str, float]
    checked: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def _evaluate(f, params: dict[str, np.ndarray]) -> float:
    tape = Tape()
    nodes = {k: tape.leaf(v, name=k) for k, v in params.items()}
    return float(f(tape, nodes).value)


def grad_check(f: Callable[[Tape, dict[str, Node]], Node],
               params: dict[str, np.ndarray],
               step: float = 1e-5,
               max_entries: int | None = None,
               seed: int = 0) -> GradCheckResult:
    """Compare tape gradients with central differences.

    ``f(tape, nodes)`` must build a scalar loss from the leaf nodes and be
    deterministic. With ``max_entries`` set, that many entries per parameter
    are sampled (seeded) instead of checking every one. Relative error is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    tape = Tape()
    nodes = {k: tape.leaf(v, name=k) for k, v in params.items()}
    loss = f(tape, nodes)
    base = float(loss.value)
    tape.backward(loss)
    analytic = {k: n.grad for k, n in nodes.items()}
    if _evaluate(f, params) != base:
        raise ValueError("grad_check: f is not deterministic")

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked = 0
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            picks = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            picks = np.arange(flat.size)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = _evaluate(f, work)
            flat[i] = orig - step
            down = _evaluate(f, work)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
            checked += 1
        errors[name] = worst
    return GradCheckResult(errors, checked)
