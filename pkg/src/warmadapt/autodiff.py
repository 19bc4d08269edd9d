"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every differentiable operation in execution order;
:func:`backward` replays that record once, in reverse, accumulating
vector-Jacobian products. Execution order is already a topological order,
so no graph sort is needed.

Everything is 64-bit: the models built on top are desk-scale, so speed is
dominated by BLAS anyway, and the finite-difference checks in the test
suite need the precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class TapeError(RuntimeError):
    """A backward pass was asked about something the tape never recorded."""


class Tensor:
    """A float64 array plus the bookkeeping reverse mode needs.

    Tensors are created through a :class:`Tape` (``param``/``const``) or by
    the operations below; they are never mutated in place.
    """

    __slots__ = ("data", "tape", "needs_grad", "param_id", "trainable", "_idx", "_recorded")

    def __init__(self, data, tape, needs_grad=False, param_id=None, trainable=False):
        self.data = data
        self.tape = tape
        self.needs_grad = needs_grad
        self.param_id = param_id
        self.trainable = trainable
        self._idx = tape._next_index()
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" param={self.param_id!r}" if self.param_id is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"


class Tape:
    """Ordered record of operations plus the parameter leaves bound to it.

    A tape is confined to one forward/backward pass (one logical thread);
    build a fresh tape per optimization step.
    """

    def __init__(self):
        self._ops = []
        self._params = {}
        self._count = 0

    def _next_index(self):
        idx = self._count
        self._count += 1
        return idx

    def param(self, name, value, trainable=True):
        """Bind a named parameter leaf. Frozen (non-trainable) parameters
        participate in the forward pass but never receive gradients."""
        if name in self._params:
            raise TapeError(f"parameter {name!r} already bound to this tape")
        t = Tensor(
            np.asarray(value, dtype=np.float64),
            self,
            needs_grad=bool(trainable),
            param_id=name,
            trainable=bool(trainable),
        )
        self._params[name] = t
        return t

    def const(self, value):
        """Wrap a constant input (features, targets, ...); never differentiated."""
        return Tensor(np.asarray(value, dtype=np.float64), self)

    def record_op(self, out, inputs, vjp):
        """Register a custom differentiable op; ``vjp(upstream)`` must return
        one gradient (or None) per input, in order."""
        out._recorded = True
        self._ops.append((out, inputs, vjp))

    def num_ops(self):
        return len(self._ops)

    def gradients(self):
        """Shapes of the accumulators a backward pass would fill."""
        return {name: t.data.shape for name, t in self._params.items() if t.trainable}


def backward(tape, loss):
    """Gradients of a scalar ``loss`` w.r.t. every trainable parameter.

    Returns a dict param-name -> ndarray. Frozen parameters are absent, not
    zero. Gradient accumulation across fan-out is additive.
    """
    if loss.tape is not tape:
        raise TapeError("loss was not produced under this tape")
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss._recorded and loss.param_id is None:
        raise TapeError("loss is not recorded on the tape")

    grads = {loss._idx: np.ones((), dtype=np.float64)}
    for out, inputs, vjp in reversed(tape._ops):
        g = grads.pop(out._idx, None)
        if g is None:
            continue
        for t, gt in zip(inputs, vjp(g)):
            if gt is None or not t.needs_grad:
                continue
            prev = grads.get(t._idx)
            # out-of-place accumulation: gt may alias upstream buffers
            grads[t._idx] = gt if prev is None else prev + gt

    out = {}
    for name, t in tape._params.items():
        if t.trainable and t._idx in grads:
            out[name] = np.asarray(grads[t._idx])
    return out


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------


def _same_tape(*tensors):
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise TapeError("operands belong to different tapes")
    return tape


def _out(tape, data, needs):
    return Tensor(data, tape, needs_grad=needs)


def matmul(a, b):
    """Matrix product; 2-d, or stacked 3-d with identical leading dims."""
    tape = _same_tape(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs at least 2-d operands")
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")
    out = _out(tape, a.data @ b.data, a.needs_grad or b.needs_grad)
    if out.needs_grad:
        na, nb = a.needs_grad, b.needs_grad
        ad, bd = a.data, b.data

        def vjp(g):
            ga = g @ np.swapaxes(bd, -1, -2) if na else None
            gb = np.swapaxes(ad, -1, -2) @ g if nb else None
            return ga, gb

        tape.record_op(out, (a, b), vjp)
    return out


def add(a, b):
    tape = _same_tape(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add mismatch: {a.data.shape} vs {b.data.shape}")
    out = _out(tape, a.data + b.data, a.needs_grad or b.needs_grad)
    if out.needs_grad:
        na, nb = a.needs_grad, b.needs_grad
        tape.record_op(out, (a, b), lambda g: (g if na else None, g if nb else None))
    return out


def sub(a, b):
    tape = _same_tape(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub mismatch: {a.data.shape} vs {b.data.shape}")
    out = _out(tape, a.data - b.data, a.needs_grad or b.needs_grad)
    if out.needs_grad:
        na, nb = a.needs_grad, b.needs_grad
        tape.record_op(out, (a, b), lambda g: (g if na else None, -g if nb else None))
    return out


def mul(a, b):
    tape = _same_tape(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul mismatch: {a.data.shape} vs {b.data.shape}")
    out = _out(tape, a.data * b.data, a.needs_grad or b.needs_grad)
    if out.needs_grad:
        na, nb = a.needs_grad, b.needs_grad
        ad, bd = a.data, b.data
        tape.record_op(out, (a, b), lambda g: (g * bd if na else None, g * ad if nb else None))
    return out


def bias_add(x, b):
    """Broadcasting add of a 1-d bias over the last axis; the only
    broadcasting this engine allows, so shape bugs stay loud."""
    tape = _same_tape(x, b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"bias_add mismatch: {x.data.shape} + {b.data.shape}")
    out = _out(tape, x.data + b.data, x.needs_grad or b.needs_grad)
    if out.needs_grad:
        nx, nb = x.needs_grad, b.needs_grad
        d = b.data.shape[0]

        def vjp(g):
            gb = g.reshape(-1, d).sum(axis=0) if nb else None
            return (g if nx else None), gb

        tape.record_op(out, (x, b), vjp)
    return out


def scale(x, s):
    s = float(s)
    out = _out(x.tape, x.data * s, x.needs_grad)
    if out.needs_grad:
        x.tape.record_op(out, (x,), lambda g: (g * s,))
    return out


def relu(x):
    out = _out(x.tape, np.maximum(x.data, 0.0), x.needs_grad)
    if out.needs_grad:
        mask = x.data > 0.0
        x.tape.record_op(out, (x,), lambda g: (g * mask,))
    return out


def gelu(x):
    """Exact Gaussian-error-linear unit, x * Phi(x); smooth everywhere."""
    phi_cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = _out(x.tape, x.data * phi_cdf, x.needs_grad)
    if out.needs_grad:
        xd = x.data

        def vjp(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return (g * (phi_cdf + xd * pdf),)

        x.tape.record_op(out, (x,), vjp)
    return out


def softmax(x):
    """Softmax over the last axis; rows sum to 1 within 1e-12."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _out(x.tape, y, x.needs_grad)
    if out.needs_grad:

        def vjp(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        x.tape.record_op(out, (x,), vjp)
    return out


def log_softmax(x):
    """x - logsumexp(x) over the last axis, computed stably."""
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    y = x.data - lse
    out = _out(x.tape, y, x.needs_grad)
    if out.needs_grad:

        def vjp(g):
            return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

        x.tape.record_op(out, (x,), vjp)
    return out


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine.

    A constant vector normalizes to zeros (the eps keeps the division
    finite), so the affine output is just ``bias``.
    """
    tape = _same_tape(x, gain, bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm gain/bias must be 1-d of the normalized width")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _out(tape, xhat * gain.data + bias.data, x.needs_grad or gain.needs_grad or bias.needs_grad)
    if out.needs_grad:
        nx, ng, nb = x.needs_grad, gain.needs_grad, bias.needs_grad
        gd = gain.data

        def vjp(g):
            gg = (g * xhat).reshape(-1, d).sum(axis=0) if ng else None
            gb = g.reshape(-1, d).sum(axis=0) if nb else None
            gx = None
            if nx:
                dxhat = g * gd
                gx = inv * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                )
            return gx, gg, gb

        tape.record_op(out, (x, gain, bias), vjp)
    return out


def embedding(table, ids):
    """Row lookup into a (rows, d) table; ids is a plain integer array."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError("embedding table must be 2-d")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding ids out of range")
    out = _out(table.tape, table.data[ids], table.needs_grad)
    if out.needs_grad:
        shape = table.data.shape

        def vjp(g):
            gt = np.zeros(shape, dtype=np.float64)
            np.add.at(gt, ids, g)
            return (gt,)

        table.tape.record_op(out, (table,), vjp)
    return out


def slice_axis(x, start, stop, axis=0):
    """Contiguous range slice along one axis."""
    n = x.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of length {n}")
    sel = tuple(slice(None) if a != axis else slice(start, stop) for a in range(x.data.ndim))
    out = _out(x.tape, x.data[sel], x.needs_grad)
    if out.needs_grad:
        shape = x.data.shape

        def vjp(g):
            gx = np.zeros(shape, dtype=np.float64)
            gx[sel] = g
            return (gx,)

        x.tape.record_op(out, (x,), vjp)
    return out


def concat(parts, axis=0):
    parts = tuple(parts)
    tape = _same_tape(*parts)
    out = _out(tape, np.concatenate([p.data for p in parts], axis=axis), any(p.needs_grad for p in parts))
    if out.needs_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        needs = [p.needs_grad for p in parts]

        def vjp(g):
            pieces = []
            for i in range(len(sizes)):
                if not needs[i]:
                    pieces.append(None)
                    continue
                sel = tuple(
                    slice(None) if a != axis else slice(offsets[i], offsets[i + 1])
                    for a in range(g.ndim)
                )
                pieces.append(g[sel])
            return tuple(pieces)

        tape.record_op(out, parts, vjp)
    return out


def reshape(x, shape):
    out = _out(x.tape, x.data.reshape(shape), x.needs_grad)
    if out.needs_grad:
        orig = x.data.shape
        x.tape.record_op(out, (x,), lambda g: (g.reshape(orig),))
    return out


def swapaxes(x, a, b):
    out = _out(x.tape, np.swapaxes(x.data, a, b), x.needs_grad)
    if out.needs_grad:
        x.tape.record_op(out, (x,), lambda g: (np.swapaxes(g, a, b),))
    return out


def sum_all(x):
    """Sum of all elements; produces the scalar losses feed on."""
    out = _out(x.tape, np.asarray(x.data.sum()), x.needs_grad)
    if out.needs_grad:
        shape = x.data.shape
        x.tape.record_op(out, (x,), lambda g: (np.full(shape, float(g)),))
    return out


def add_n(tensors):
    """Sum a list of same-shaped tensors (batch-loss aggregation)."""
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return acc


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Worst-case analytic vs central-difference comparison."""

    max_rel_err: float
    worst_param: str
    tolerance: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
            f"(param {self.worst_param!r}, tolerance {self.tolerance:.1e})"
        )


def grad_check(loss_fn, params, tolerance=1e-4, step=1e-5):
    """Compare analytic gradients against central finite differences.

    ``loss_fn(tape, bound)`` must build and return a scalar loss Tensor from
    the bound parameter map. Intended for fragments under 10^4 parameters;
    larger fragments are refused.
    """
    total = sum(int(np.asarray(v).size) for v in params.values())
    if total >= 10_000:
        raise ValueError(f"grad_check is for test-scale fragments (< 1e4 params), got {total}")

    tape = Tape()
    bound = {k: tape.param(k, v) for k, v in params.items()}
    analytic = backward(tape, loss_fn(tape, bound))

    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value():
        t = Tape()
        b = {k: t.const(w) for k, w in work.items()}
        return float(loss_fn(t, b).data)

    per_param = {}
    worst = (0.0, "")
    for name in sorted(params):
        a = analytic.get(name)
        if a is None:
            a = np.zeros_like(work[name])
        flat = work[name].ravel()
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = value()
            flat[i] = orig - step
            lm = value()
            flat[i] = orig
            num[i] = (lp - lm) / (2.0 * step)
        num = num.reshape(work[name].shape)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-6)
        err = float(np.max(np.abs(a - num) / denom)) if a.size else 0.0
        per_param[name] = err
        if err > worst[0]:
            worst = (err, name)
    return GradCheckReport(max_rel_err=worst[0], worst_param=worst[1], tolerance=tolerance, per_param=per_param)
