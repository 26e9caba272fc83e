"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything the models need is built from the primitives here: row-major
contiguous numpy storage, a recorded computation graph, and a topological
backward pass. 64-bit floats throughout so gradient checks and DP oracles
are limited by algorithmic correctness, not precision.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "NonFiniteError",
    "NondeterministicFunction",
    "no_grad",
    "set_debug_checks",
    "matmul",
    "add",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "concat_last",
    "concat_rows",
    "narrow_last",
    "softmax_last",
    "log_softmax_last",
    "layernorm",
    "sigmoid",
    "swish",
    "glu",
    "depthwise_conv1d",
    "pointwise_conv1d",
    "unfold_time",
    "embedding_lookup",
    "gather_last",
    "scatter_rows",
    "dropout",
    "log",
    "exp",
    "power",
    "reduce_sum",
    "reduce_mean",
    "mask_fill",
    "finite_diff_check",
]

_state = threading.local()

# Debug-mode finiteness checking for op inputs (off by default).
_DEBUG_CHECKS = False


def set_debug_checks(enabled):
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (e.g. for decoding)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op receives a NaN or infinite input."""


class NondeterministicFunction(RuntimeError):
    """Raised when finite_diff_check sees two evaluations disagree."""


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    Tensors produced by ops record their parents and a backward closure;
    ``backward()`` on a scalar loss walks the graph in reverse topological
    order and accumulates into ``grad``. Repeated backward calls without a
    ``zero_grad`` accumulate, which is what gradient accumulation over a
    batch of single utterances relies on.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Scalar-arithmetic conveniences used when assembling losses.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        if other == 0:
            return self
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable requires_grad node."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        # Iterative post-order topological sort; training graphs get deep
        # enough that recursion would be fragile.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        # Per-call flow of gradients; node.grad accumulates across calls.
        # Stored flow arrays are never mutated in place, so backward
        # closures may return views.
        flows = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.grad is not None:
                node.grad += g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = flows.get(id(p))
                flows[id(p)] = pg if acc is None else acc + pg


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    if _DEBUG_CHECKS:
        for p in parents:
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError(f"{op}: non-finite input")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward
        return out
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    out = a.data @ b.data

    def bwd(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _node(out, (a, b), bwd, "matmul")


def add(a, b):
    """Elementwise sum with numpy broadcasting (used for biases too)."""
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        out = a.data + float(b)
        return _node(out, (a,), lambda g: (g,), "add")
    a = _as_tensor(a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.data.shape, b.data.shape) from None

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), bwd, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul", a.data.shape, b.data.shape) from None

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), bwd, "mul")


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose", a.data.shape)
    out = np.ascontiguousarray(a.data.T)
    return _node(out, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape).copy()
    orig = a.data.shape
    return _node(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def concat_last(tensors):
    """Concatenate along the last dimension; gradients split back cleanly."""
    tensors = [_as_tensor(t) for t in tensors]
    base = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        if t.data.shape[:-1] != base:
            raise ShapeMismatch("concat-last-dim", *[t.data.shape for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.data.shape[-1] for t in tensors]

    def bwd(g):
        grads, off = [], 0
        for t, w in zip(tensors, widths):
            grads.append(g[..., off : off + w] if t.requires_grad else None)
            off += w
        return grads

    return _node(out, tuple(tensors), bwd, "concat-last-dim")


def concat_rows(tensors):
    """Concatenate 2-D tensors along the first (frame) dimension."""
    tensors = [_as_tensor(t) for t in tensors]
    width = tensors[0].data.shape[-1]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[-1] != width:
            raise ShapeMismatch("concat-rows", *[t.data.shape for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)
    heights = [t.data.shape[0] for t in tensors]

    def bwd(g):
        grads, off = [], 0
        for t, h in zip(tensors, heights):
            grads.append(g[off : off + h] if t.requires_grad else None)
            off += h
        return grads

    return _node(out, tuple(tensors), bwd, "concat-rows")


def narrow_last(a, start, stop):
    a = _as_tensor(a)
    width = a.data.shape[-1]
    if not (0 <= start < stop <= width):
        raise ShapeMismatch("narrow-last", a.data.shape, (start, stop))
    out = a.data[..., start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _node(out, (a,), bwd, "narrow-last")


def softmax_last(a):
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _node(p, (a,), bwd, "softmax-last-dim")


def log_softmax_last(a):
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), bwd, "log-softmax-last-dim")


def layernorm(a, eps=1e-5):
    """Normalize the last dimension to zero mean, unit variance (no affine).

    A zero-variance row comes out all zero: the variance is floored by eps,
    which keeps padded or constant frames finite.
    """
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _node(y, (a,), bwd, "layernorm")


def sigmoid(a):
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(a):
    a = _as_tensor(a)
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    return _node(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "swish")


def glu(a):
    """Gated linear unit over the last dimension: first half times sigmoid of second."""
    a = _as_tensor(a)
    width = a.data.shape[-1]
    if width % 2 != 0:
        raise ShapeMismatch("glu", a.data.shape)
    half = width // 2
    return mul(narrow_last(a, 0, half), sigmoid(narrow_last(a, half, width)))


def depthwise_conv1d(x, kernel):
    """Per-channel temporal convolution with same padding; kernel shape [K, C], K odd."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 2 or kernel.data.ndim != 2 or x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeMismatch("depthwise-conv1d", x.data.shape, kernel.data.shape)
    K = kernel.data.shape[0]
    if K % 2 == 0:
        raise ShapeMismatch("depthwise-conv1d", kernel.data.shape)
    T = x.data.shape[0]
    pad = K // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for k in range(K):
        out += xp[k : k + T] * kernel.data[k]

    def bwd(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[k : k + T] += g * kernel.data[k]
            gx = gxp[pad : pad + T]
        if kernel.requires_grad:
            gk = np.stack([(xp[k : k + T] * g).sum(axis=0) for k in range(K)])
        return (gx, gk)

    return _node(out, (x, kernel), bwd, "depthwise-conv1d")


def pointwise_conv1d(x, w, b=None):
    """1x1 convolution over channels, i.e. a per-frame linear map."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def unfold_time(x, kernel, stride):
    """Stack sliding windows of `kernel` frames (valid padding) into rows.

    [T, C] becomes [T_out, kernel*C] with T_out = (T - kernel)//stride + 1.
    A full strided convolution is then just a matmul on the result.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatch("unfold-time", x.data.shape)
    T, C = x.data.shape
    if T < kernel:
        raise ShapeMismatch("unfold-time", x.data.shape, (kernel,))
    t_out = (T - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, C))[::stride, 0]
    out = win.reshape(t_out, kernel * C).copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gw = g.reshape(t_out, kernel, C)
        for i in range(t_out):
            gx[i * stride : i * stride + kernel] += gw[i]
        return (gx,)

    return _node(out, (x,), bwd, "unfold-time")


def embedding_lookup(table, ids):
    """Gather rows of `table` by integer index; duplicate ids accumulate grads."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or table.data.ndim != 2:
        raise ShapeMismatch("embedding-lookup", table.data.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding-lookup: id out of range [0, {table.data.shape[0]}): "
            f"{int(ids.min())}..{int(ids.max())}"
        )
    out = table.data[ids].copy()

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(out, (table,), bwd, "embedding-lookup")


def gather_last(a, ids):
    """Pick one entry per row: out[i] = a[i, ids[i]]."""
    a = _as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    n = a.data.shape[0]
    if a.data.ndim != 2 or ids.shape != (n,):
        raise ShapeMismatch("gather-last", a.data.shape, ids.shape)
    rows = np.arange(n)
    out = a.data[rows, ids].copy()

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, ids), g)
        return (ga,)

    return _node(out, (a,), bwd, "gather-last")


def scatter_rows(values, ids, length):
    """Place rows of `values` at positions `ids` of a zero [length, C] output.

    ids must be unique; the MoE dispatch uses this to reassemble per-expert
    outputs into frame order.
    """
    values = _as_tensor(values)
    ids = np.asarray(ids, dtype=np.int64)
    if values.data.ndim != 2 or ids.shape != (values.data.shape[0],):
        raise ShapeMismatch("scatter-rows", values.data.shape, ids.shape)
    out = np.zeros((length, values.data.shape[1]), dtype=np.float64)
    out[ids] = values.data

    return _node(out, (values,), lambda g: (g[ids],), "scatter-rows")


def dropout(a, p, rng, training):
    """Inverted dropout; the identity (same tensor) in eval mode or at p=0."""
    if not training or p <= 0.0:
        return a
    a = _as_tensor(a)
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


def log(a):
    a = _as_tensor(a)
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    out = a.data**p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(out, (a,), bwd, "reduce-sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mask_fill(a, mask, value):
    """Replace entries where `mask` is true by `value`; no gradient flows there."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.data.shape:
        raise ShapeMismatch("mask-fill", a.data.shape, mask.shape)
    out = np.where(mask, float(value), a.data)
    return _node(out, (a,), lambda g: (np.where(mask, 0.0, g),), "mask-fill")


def finite_diff_check(f, params, eps=1e-5, max_coords_per_param=None, rng=None):
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``f`` must be deterministic (eval mode, frozen routing); this is verified
    by evaluating it twice up front. Returns the worst relative error
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`` over all
    checked coordinates. ``max_coords_per_param`` samples coordinates to keep
    large checks affordable.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must be in [1e-7, 1e-3], got {eps}")

    def evaluate():
        out = f(params)
        if out.data.size != 1:
            raise ValueError("finite_diff_check requires a scalar-valued function")
        return float(out.data)

    v1, v2 = evaluate(), evaluate()
    if v1 != v2:
        raise NondeterministicFunction(
            f"two evaluations differ: {v1!r} vs {v2!r}; disable dropout and freeze routing"
        )

    for p in params:
        if not p.requires_grad:
            raise ValueError("all checked params must have requires_grad=True")
        p.zero_grad()
    loss = f(params)
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            rel = abs(an_flat[i] - numeric) / (abs(an_flat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst
