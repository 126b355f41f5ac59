"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (entered as a
context manager). Without an active tape they only compute values,
which is what inference and finite-difference probes use.

    with Tape() as tape:
        loss = model.loss(batch)
    tape.backward(loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, GradCheckRefused, NumericError

PROB_FLOOR = 1e-12

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus a flag saying whether gradients flow into it."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable tensor with a gradient buffer of the same shape."""

    __slots__ = ("name", "grad")

    def __init__(self, name, value):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("outputs", "inputs", "backward")

    def __init__(self, outputs, inputs, backward):
        self.outputs = outputs
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of operations; backward runs in exact reverse order."""

    def __init__(self):
        self.nodes = []
        self.stochastic_ops = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def backward(self, loss: Tensor):
        """Write d(loss)/d(param) into every Parameter reached by the trace.

        Parameters that the loss does not depend on are left untouched;
        callers zero gradients before the forward pass.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        params = {}
        for node in reversed(self.nodes):
            out_grads = [grads.pop(id(o), None) for o in node.outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [np.zeros_like(o.data) if g is None else g for g, o in zip(out_grads, node.outputs)]
            in_grads = node.backward(*out_grads)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if isinstance(inp, Parameter):
                    params[key] = inp
        for key, p in params.items():
            p.grad = p.grad + grads.pop(key)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")
    return arr


def _record(outputs, inputs, backward):
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    tape.nodes.append(_Node(outputs, inputs, backward))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementary ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D."""
    if b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ad, bd = a.data, b.data
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.outer(ad, g)
            else:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    _record((out,), (a, b), backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_check_finite(a.data + b.data, "add"))
    _record((out,), (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_check_finite(a.data - b.data, "sub"))
    _record((out,), (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_check_finite(a.data * b.data, "mul"))

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    _record((out,), (a, b), backward)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    _record((out,), (x,), lambda g: (g * c,))
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    _record((out,), (x,), lambda g: (g * (1.0 - y * y),))
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = kernels._pykernels.sigmoid(x.data)
    out = Tensor(y)
    _record((out,), (x,), lambda g: (g * y * (1.0 - y),))
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{kind}: non-finite input")
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, max-subtracted.

    ``mask`` (same shape, 1 = keep) zeroes excluded positions exactly.
    """
    if x.data.size == 0 or x.data.shape[-1] == 0:
        raise DimensionError("softmax of an empty tensor")
    z = x.data
    if mask is not None:
        z = np.where(mask > 0, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(_check_finite(p, "softmax"))

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    _record((out,), (x,), backward)
    return out


def cross_entropy(probs: Tensor, target, weights=None) -> Tensor:
    """Negative log-likelihood of ``target`` under ``probs``.

    A 1-D ``probs`` with an integer target gives ``-log p[target]``. A
    2-D ``probs`` (B, V) with a target vector gives the (optionally
    weighted) sum over rows. Probabilities are floored at 1e-12.
    """
    p = probs.data
    if p.ndim == 1:
        if not 0 <= int(target) < p.shape[0]:
            raise IndexError(f"target {target} out of range for {p.shape[0]} classes")
        pt = p[int(target)]
        out = Tensor(-np.log(max(pt, PROB_FLOOR)))

        def backward1(g):
            gp = np.zeros_like(p)
            if pt > PROB_FLOOR:
                gp[int(target)] = -g / pt
            return (gp,)

        _record((out,), (probs,), backward1)
        return out

    targets = np.asarray(target, dtype=np.int64)
    if targets.shape != (p.shape[0],):
        raise DimensionError("cross_entropy: one target per row required")
    if ((targets < 0) | (targets >= p.shape[1])).any():
        raise IndexError("cross_entropy: target out of range")
    w = np.ones(p.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.arange(p.shape[0])
    pt = p[rows, targets]
    clamped = np.maximum(pt, PROB_FLOOR)
    out = Tensor(float(-(w * np.log(clamped)).sum()))

    def backward2(g):
        gp = np.zeros_like(p)
        live = pt > PROB_FLOOR
        gp[rows[live], targets[live]] = -g * w[live] / pt[live]
        return (gp,)

    _record((out,), (probs,), backward2)
    return out


def concat(tensors, axis=-1) -> Tensor:
    arrays = [t.data for t in tensors]
    out = Tensor(np.concatenate(arrays, axis=axis))
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    _record((out,), tuple(tensors), backward)
    return out


def stack(tensors, axis=1) -> Tensor:
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    _record((out,), tuple(tensors), backward)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    _record((out,), (x,), lambda g: (g.reshape(x.shape),))
    return out


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = Tensor(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    _record((out,), (x,), backward)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    _record((out,), (table,), backward)
    return out


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over axis 1 of (B, T, D) counting only positions with mask 1."""
    mask = np.asarray(mask, dtype=np.float64)
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    weights = mask / counts
    out = Tensor((x.data * weights[:, :, None]).sum(axis=1))
    _record((out,), (x,), lambda g: (g[:, None, :] * weights[:, :, None],))
    return out


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Row-wise convex combination: (B, T) weights over (B, T, D) values."""
    if weights.shape != values.shape[:2]:
        raise DimensionError(f"weighted_sum: {weights.shape} vs {values.shape}")
    out = Tensor(np.einsum("bt,btd->bd", weights.data, values.data))

    def backward(g):
        gw = np.einsum("bd,btd->bt", g, values.data)
        gv = weights.data[:, :, None] * g[:, None, :]
        return gw, gv

    _record((out,), (weights, values), backward)
    return out


def where_mask(mask, new: Tensor, old: Tensor) -> Tensor:
    """``mask * new + (1 - mask) * old`` for a constant 0/1 mask (B, 1)."""
    m = np.asarray(mask, dtype=np.float64)
    out = Tensor(m * new.data + (1.0 - m) * old.data)
    _record((out,), (new, old), lambda g: (_unbroadcast(g * m, new.shape), _unbroadcast(g * (1.0 - m), old.shape)))
    return out


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    """One LSTM step on a (B, d_in) batch; returns ``(h, c)``.

    Gate blocks in ``w_x``/``w_h``/``b`` are ordered input, forget,
    candidate, output.
    """
    hidden = h_prev.shape[-1]
    if w_x.shape != (x.shape[-1], 4 * hidden) or w_h.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, W_x {w_x.shape}, W_h {w_h.shape}, b {b.shape}"
        )
    squeeze = x.data.ndim == 1
    xd = np.atleast_2d(x.data)
    hd = np.atleast_2d(h_prev.data)
    cd = np.ascontiguousarray(np.atleast_2d(c_prev.data))
    z = xd @ w_x.data + hd @ w_h.data + b.data
    _check_finite(z, "lstm_cell")
    h, c, acts, tanh_c = kernels.lstm_gates_forward(np.ascontiguousarray(z), cd)
    if squeeze:
        h_out, c_out = Tensor(h[0]), Tensor(c[0])
    else:
        h_out, c_out = Tensor(h), Tensor(c)

    def backward(gh, gc):
        gh = np.ascontiguousarray(np.atleast_2d(gh))
        gc = np.ascontiguousarray(np.atleast_2d(gc))
        dz, dc_prev = kernels.lstm_gates_backward(gh, gc, acts, tanh_c, cd)
        dx = dz @ w_x.data.T
        dh = dz @ w_h.data.T
        if squeeze:
            dx, dh, dc_prev = dx[0], dh[0], dc_prev[0]
        return dx, dh, dc_prev, xd.T @ dz, hd.T @ dz, dz.sum(axis=0)

    _record((h_out, c_out), (x, h_prev, c_prev, w_x, w_h, b), backward)
    return h_out, c_out


class Dropout:
    """Inverted dropout with an explicit RNG and a replayable frozen mode.

    In frozen mode the i-th call of a pass reuses the i-th mask drawn in
    the first frozen pass, so repeated evaluations are deterministic.
    Call :meth:`begin_pass` at the start of every forward pass.
    """

    def __init__(self, keep_prob: float, seed=0):
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        self.keep_prob = keep_prob
        self.rng = np.random.default_rng(seed)
        self.training = False
        self.frozen = False
        self._masks = []
        self._cursor = 0

    def begin_pass(self):
        self._cursor = 0

    def freeze(self):
        self.frozen = True
        self._masks = []
        self._cursor = 0

    def unfreeze(self):
        self.frozen = False
        self._masks = []

    def _draw(self, shape):
        return (self.rng.random(shape) < self.keep_prob) / self.keep_prob

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.keep_prob == 1.0:
            return x
        if self.frozen:
            if self._cursor < len(self._masks) and self._masks[self._cursor].shape == x.shape:
                mask = self._masks[self._cursor]
            else:
                mask = self._draw(x.shape)
                del self._masks[self._cursor :]
                self._masks.append(mask)
            self._cursor += 1
        else:
            mask = self._draw(x.shape)
            tape = active_tape()
            if tape is not None:
                tape.stochastic_ops += 1
        out = Tensor(x.data * mask)
        _record((out,), (x,), lambda g: (g * mask,))
        return out


# ----------------------------------------------------------------------
# verification harness


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int

    def passed(self, rel_tol: float) -> bool:
        return self.max_rel_error < rel_tol


def _relative_error(a, n, abs_floor=1e-8):
    scale_ = max(abs(a), abs(n))
    if scale_ < abs_floor:
        return abs(a - n)
    return abs(a - n) / scale_


def grad_check(f, params, eps=1e-5, abs_floor=1e-8, refine_eps=None, refine_above=1e-5) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from
    ``params``. Functions that draw fresh randomness (live dropout) are
    refused. The per-element error is relative, switching to absolute
    when both values are below ``abs_floor``. Judge the returned report
    with :meth:`GradCheckReport.passed`.

    With ``refine_eps`` set, elements whose two-point error exceeds
    ``refine_above`` are re-estimated with the five-point central
    stencil at step ``refine_eps``. Its O(h^4) truncation allows a much
    larger step, which cuts the roundoff that dominates two-point
    estimates of very small gradients.
    """
    if eps <= 0 or (refine_eps is not None and refine_eps <= 0):
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if tape.stochastic_ops:
        raise GradCheckRefused(f"{tape.stochastic_ops} unfrozen stochastic op(s) in the traced function")
    tape.backward(loss)
    base = loss.item()
    if f().item() != base:
        raise GradCheckRefused("function value changed between identical evaluations")

    def at(p, idx, value):
        p.data[idx] = value
        return f().item()

    worst = (0.0, "", ())
    n = 0
    for p in params:
        analytic = p.grad.copy()
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            numeric = (at(p, idx, orig + eps) - at(p, idx, orig - eps)) / (2.0 * eps)
            err = _relative_error(analytic[idx], numeric, abs_floor)
            if refine_eps is not None and err > refine_above:
                h = refine_eps
                numeric = (
                    -at(p, idx, orig + 2 * h) + 8 * at(p, idx, orig + h) - 8 * at(p, idx, orig - h) + at(p, idx, orig - 2 * h)
                ) / (12.0 * h)
                err = _relative_error(analytic[idx], numeric, abs_floor)
            p.data[idx] = orig
            n += 1
            if err > worst[0]:
                worst = (err, p.name, idx)
    return GradCheckReport(worst[0], worst[1], worst[2], n)
