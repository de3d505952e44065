"""Tape-based reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every operation applied to :class:`Tensor` objects
created on it.  :func:`backward` walks the tape once in reverse order and
returns gradients for the named leaves.

Example::

    >>> tape = Tape()
    >>> x = tape.leaf(np.array(3.0), "x")
    >>> y = x * x
    >>> backward(tape, y)["x"]
    array(6.)
"""

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "AutogradError",
    "record_forward",
    "backward",
    "gradcheck",
    "grad_of_penalty_fd",
    "as_array",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "square",
    "sum",
    "mean",
    "variance",
    "sqnorm",
    "log_softmax",
    "mask",
    "concat",
    "stack",
    "gather_rows",
    "transpose",
    "reshape",
    "custom",
]

DTYPE = np.float64


class AutogradError(ValueError):
    """Raised on shape mismatches, non-scalar outputs and similar misuse."""


class Node:
    __slots__ = ("op", "inputs", "vjp", "shape")

    def __init__(self, op, inputs, vjp, shape):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.shape = shape


class Tape:
    """Ordered record of operations.

    Node ``k`` only ever references inputs with smaller ids, so a single
    reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self.output = None

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, op, inputs=(), vjp=None, name=None):
        idx = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), vjp, value.shape))
        return Tensor(value, self, idx, name)

    def leaf(self, value, name):
        """Register a differentiable input under ``name``."""
        if name in self.leaves:
            raise AutogradError(f"duplicate leaf name {name!r}")
        t = self._push(_to_array(value).copy(), "leaf", name=name)
        self.leaves[name] = t
        return t

    def release(self):
        """Drop recorded nodes so saved activations can be freed."""
        self.nodes = []
        self.leaves = {}
        self.output = None

    def const(self, value):
        """Wrap a non-differentiable value."""
        return Tensor(_to_array(value), self, None)


class Tensor:
    """Immutable float64 array bound to a tape.

    ``index`` is ``None`` for constants, which never receive gradients.
    """

    __slots__ = ("value", "tape", "index", "name")
    __array_priority__ = 1000

    def __init__(self, value, tape, index, name=None):
        value = value.view()
        value.flags.writeable = False
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def data(self):
        return self.value.ravel()

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def requires_grad(self):
        return self.index is not None

    def item(self):
        return float(self.value)

    def __repr__(self):
        kind = "const" if self.index is None else f"node={self.index}"
        return f"Tensor(shape={self.shape}, {kind})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    @property
    def T(self):
        return transpose(self)


def _to_array(value):
    arr = np.asarray(value, dtype=DTYPE)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def as_array(x):
    """Plain ndarray view of a Tensor, array or scalar."""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=DTYPE)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise AutogradError("operands live on different tapes")
    return tape


def _finish(op, value, args, vjps):
    """Create the output node; args without gradients are pruned."""
    tape = _tape_of(*args)
    value = _to_array(value)
    # a finite sum implies every entry is finite; only fall back when it is not
    if not np.isfinite(np.add.reduce(value, axis=None)) and not np.all(np.isfinite(value)):
        raise AutogradError(f"{op}: produced non-finite values")
    live = [(a.index, f) for a, f in zip(args, vjps)
            if isinstance(a, Tensor) and a.index is not None]
    if tape is None:
        return value
    if not live:
        return Tensor(value, tape, None)
    inputs = tuple(i for i, _ in live)
    fns = tuple(f for _, f in live)
    return tape._push(value, op, inputs, fns)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise AutogradError(
            f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b):
    va, vb = as_array(a), as_array(b)
    _broadcast_shape("add", va, vb)
    return _finish("add", va + vb, (a, b), (
        lambda g: _unbroadcast(g, va.shape),
        lambda g: _unbroadcast(g, vb.shape),
    ))


def sub(a, b):
    va, vb = as_array(a), as_array(b)
    _broadcast_shape("sub", va, vb)
    return _finish("sub", va - vb, (a, b), (
        lambda g: _unbroadcast(g, va.shape),
        lambda g: -_unbroadcast(g, vb.shape),
    ))


def mul(a, b):
    va, vb = as_array(a), as_array(b)
    _broadcast_shape("mul", va, vb)
    return _finish("mul", va * vb, (a, b), (
        lambda g: _unbroadcast(g * vb, va.shape),
        lambda g: _unbroadcast(g * va, vb.shape),
    ))


def div(a, b):
    va, vb = as_array(a), as_array(b)
    _broadcast_shape("div", va, vb)
    out = va / vb
    return _finish("div", out, (a, b), (
        lambda g: _unbroadcast(g / vb, va.shape),
        lambda g: _unbroadcast(-g * out / vb, vb.shape),
    ))


def neg(a):
    return _finish("neg", -as_array(a), (a,), (lambda g: -g,))


def matmul(a, b):
    va, vb = as_array(a), as_array(b)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise AutogradError(
            f"matmul: cannot multiply shapes {va.shape} and {vb.shape}")
    return _finish("matmul", va @ vb, (a, b), (
        lambda g: g @ vb.T,
        lambda g: va.T @ g,
    ))


# ---------------------------------------------------------------------------
# elementwise unary ops


def relu(a):
    va = as_array(a)
    # subgradient at exactly 0 is 0
    active = va > 0
    return _finish("relu", np.maximum(va, 0.0), (a,),
                   (lambda g: g * active,))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    s = _sigmoid(as_array(a))
    return _finish("sigmoid", s, (a,), (lambda g: g * s * (1.0 - s),))


def softplus(a):
    """log(1 + exp(a)), evaluated without overflow."""
    va = as_array(a)
    out = np.maximum(va, 0.0) + np.log1p(np.exp(-np.abs(va)))
    return _finish("softplus", out, (a,), (lambda g: g * _sigmoid(va),))


def exp(a):
    out = np.exp(as_array(a))
    return _finish("exp", out, (a,), (lambda g: g * out,))


def log(a):
    va = as_array(a)
    if np.any(va <= 0):
        raise AutogradError("log: non-positive input")
    return _finish("log", np.log(va), (a,), (lambda g: g / va,))


def sqrt(a):
    va = as_array(a)
    if np.any(va < 0):
        raise AutogradError("sqrt: negative input")
    out = np.sqrt(va)
    return _finish("sqrt", out, (a,), (lambda g: g * 0.5 / out,))


def square(a):
    va = as_array(a)
    return _finish("square", va * va, (a,), (lambda g: 2.0 * g * va,))


def mask(a, keep):
    """Multiply by a constant 0/1 (or any fixed) array."""
    va, m = as_array(a), np.asarray(keep, dtype=DTYPE)
    _broadcast_shape("mask", va, m)
    return _finish("mask", va * m, (a,),
                   (lambda g: _unbroadcast(g * m, va.shape),))


# ---------------------------------------------------------------------------
# reductions


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    va = as_array(a)
    out = va.sum(axis=axis, keepdims=keepdims)
    return _finish("sum", out, (a,),
                   (lambda g: _expand(g, va.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False):
    va = as_array(a)
    if va.size == 0:
        raise AutogradError("mean: empty input")
    n = va.size if axis is None else va.shape[axis]
    out = va.mean(axis=axis, keepdims=keepdims)
    return _finish("mean", out, (a,),
                   (lambda g: _expand(g, va.shape, axis, keepdims) / n,))


def variance(a, axis=None, keepdims=False):
    """Population variance (divides by n)."""
    va = as_array(a)
    if va.size == 0:
        raise AutogradError("variance: empty input")
    n = va.size if axis is None else va.shape[axis]
    centered = va - va.mean(axis=axis, keepdims=True)
    out = (centered * centered).mean(axis=axis, keepdims=keepdims)
    return _finish("variance", out, (a,), (
        lambda g: _expand(g, va.shape, axis, keepdims) * (2.0 / n) * centered,
    ))


def sqnorm(a, axis=None, keepdims=False):
    """Sum of squares along ``axis`` (all elements by default)."""
    va = as_array(a)
    out = (va * va).sum(axis=axis, keepdims=keepdims)
    return _finish("sqnorm", out, (a,), (
        lambda g: 2.0 * _expand(g, va.shape, axis, keepdims) * va,
    ))


def log_softmax(a, axis=-1):
    va = as_array(a)
    shifted = va - va.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _finish("log_softmax", out, (a,), (
        lambda g: g - soft * g.sum(axis=axis, keepdims=True),
    ))


# ---------------------------------------------------------------------------
# structural ops


def concat(xs, axis=0):
    vals = [as_array(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise AutogradError(
            f"concat: incompatible shapes {[v.shape for v in vals]} "
            f"along axis {axis}") from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def piece(k):
        return lambda g: np.split(g, bounds, axis=axis)[k]

    return _finish("concat", out, tuple(xs),
                   tuple(piece(k) for k in range(len(vals))))


def stack(xs, axis=0):
    vals = [as_array(x) for x in xs]
    if len({v.shape for v in vals}) > 1:
        raise AutogradError(
            f"stack: mismatched shapes {[v.shape for v in vals]}")

    def piece(k):
        return lambda g: np.take(g, k, axis=axis)

    return _finish("stack", np.stack(vals, axis=axis), tuple(xs),
                   tuple(piece(k) for k in range(len(vals))))


def gather_rows(a, index):
    va = as_array(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -va.shape[0] or index.max() >= va.shape[0]):
        raise AutogradError(
            f"gather_rows: index out of range for {va.shape[0]} rows")

    def vjp(g):
        out = np.zeros_like(va)
        np.add.at(out, index, g)
        return out

    return _finish("gather_rows", va[index], (a,), (vjp,))


def transpose(a):
    va = as_array(a)
    if va.ndim != 2:
        raise AutogradError(f"transpose: expected 2-d input, got {va.shape}")
    return _finish("transpose", va.T, (a,), (lambda g: g.T,))


def reshape(a, shape):
    va = as_array(a)
    try:
        out = va.reshape(shape)
    except ValueError:
        raise AutogradError(
            f"reshape: cannot reshape {va.shape} to {shape}") from None
    return _finish("reshape", out, (a,), (lambda g: g.reshape(va.shape),))


def custom(op, value, inputs, vjps):
    """Escape hatch for fused ops with a hand-written vector-Jacobian product.

    ``vjps[k]`` maps the output cotangent to the cotangent of ``inputs[k]``.
    """
    if len(inputs) != len(vjps):
        raise AutogradError(f"{op}: need one vjp per input")
    return _finish(op, value, tuple(inputs), tuple(vjps))


# ---------------------------------------------------------------------------
# driving the tape


def record_forward(graph_builder, inputs):
    """Evaluate ``graph_builder`` on fresh leaves and keep the tape.

    ``inputs`` maps leaf names to arrays.  Returns ``(value, tape)`` where
    ``value`` is the output Tensor and ``tape.output`` its node id.
    """
    tape = Tape()
    leaves = {name: tape.leaf(v, name) for name, v in inputs.items()}
    out = graph_builder(**leaves)
    if not isinstance(out, Tensor):
        out = tape.const(out)
    tape.output = out.index
    return out, tape


def backward(tape, output=None, seed=1.0, wrt=None):
    """Reverse sweep from a scalar output.

    Returns ``{name: gradient}`` for every leaf (or just those in ``wrt``).
    Leaves the output does not depend on get zero gradients.
    """
    if output is None:
        idx = tape.output
    elif isinstance(output, Tensor):
        if output.tape is not tape:
            raise AutogradError("output does not belong to this tape")
        idx = output.index
        if output.value.size != 1:
            raise AutogradError(
                f"backward: output must be scalar, got shape {output.shape}")
    else:
        raise AutogradError("output must be a Tensor")
    names = list(tape.leaves) if wrt is None else list(wrt)
    for n in names:
        if n not in tape.leaves:
            raise AutogradError(f"unknown parameter {n!r}")

    grads = [None] * len(tape.nodes)
    if idx is not None:
        out_shape = tape.nodes[idx].shape
        if int(np.prod(out_shape)) != 1:
            raise AutogradError(
                f"backward: output must be scalar, got shape {out_shape}")
        grads[idx] = np.full(out_shape, seed, dtype=DTYPE)
        for k in range(idx, -1, -1):
            g = grads[k]
            node = tape.nodes[k]
            if g is None or node.vjp is None:
                continue
            for i, fn in zip(node.inputs, node.vjp):
                contrib = fn(g)
                grads[i] = contrib if grads[i] is None else grads[i] + contrib
            grads[k] = None
    result = {}
    for n in names:
        leaf = tape.leaves[n]
        g = grads[leaf.index]
        result[n] = (np.zeros(leaf.shape) if g is None
                     else np.array(g, dtype=DTYPE).reshape(leaf.shape))
    return result


# ---------------------------------------------------------------------------
# finite-difference verification


def _eval_scalar(fn, params):
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    out = fn(**leaves)
    value = float(np.asarray(as_array(out)).reshape(()))
    return value


def _central_fd(fn, params, eps, label):
    grads = {}
    for name, base in params.items():
        g = np.zeros(base.shape)
        flat = g.reshape(-1)
        for j in range(base.size):
            plus = base.copy()
            minus = base.copy()
            plus.reshape(-1)[j] += eps
            minus.reshape(-1)[j] -= eps
            fp = _eval_scalar(fn, {**params, name: plus})
            fm = _eval_scalar(fn, {**params, name: minus})
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise AutogradError(
                    f"{label}: non-finite value at {name}[{j}] +/- {eps}")
            flat[j] = (fp - fm) / (2.0 * eps)
        grads[name] = g
    return grads


def _as_param_dict(point):
    if isinstance(point, dict):
        return {k: _to_array(v).copy() for k, v in point.items()}, True
    return {"x": _to_array(point).copy()}, False


def gradcheck(scalar_fn, point, eps=1e-5):
    """Largest ``|analytic - central FD| / max(1, |analytic|)`` over coordinates.

    ``point`` is an array (passed to ``scalar_fn`` positionally) or a dict of
    named arrays (passed as keyword arguments).
    """
    if eps <= 0:
        raise AutogradError("gradcheck: eps must be positive")
    params, named = _as_param_dict(point)
    fn = scalar_fn if named else (lambda x: scalar_fn(x))
    out, tape = record_forward(fn, params)
    analytic = backward(tape, out)
    numeric = _central_fd(fn, params, eps, "gradcheck")
    worst = 0.0
    for name in params:
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n) / np.maximum(1.0, np.abs(a))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def grad_of_penalty_fd(penalty_fn, params, eps=1e-5):
    """Central-difference gradient of ``penalty_fn(**params)`` for every parameter.

    ``penalty_fn`` may run its own tape internally (for example to obtain a
    gradient it then penalises); it must return a float or scalar Tensor.
    """
    if eps <= 0:
        raise AutogradError("grad_of_penalty_fd: eps must be positive")
    params = {k: _to_array(v).copy() for k, v in params.items()}

    def scalar(**kw):
        return penalty_fn(**{k: as_array(v) for k, v in kw.items()})

    return _central_fd(scalar, params, eps, "grad_of_penalty_fd")
