"""Dense-tensor reverse-mode automatic differentiation.

Tensors wrap contiguous numpy buffers (float64 by default) and record the
producing operation so a scalar loss can be backpropagated through an
arbitrary DAG.  Gradients accumulate across backward calls until explicitly
zeroed.  `detach` severs the graph: nothing upstream of a detached tensor
ever receives gradient.

Complex spectra (FFT outputs, spectral-layer activations) live in
`ComplexTensor`.  The gradient convention for a complex node z is
dL/d(Re z) + i*dL/d(Im z), which makes the backward of a unitary FFT the
inverse FFT of the cotangent.
"""

from __future__ import annotations

import warnings

import numpy as np

__all__ = [
    "Tensor",
    "ComplexTensor",
    "tensor",
    "detach",
    "backward",
    "zero_grads",
    "fft2",
    "ifft2",
    "real",
    "mode_mix",
    "graph_dump",
]


class GraphNode:
    """Record of the operation that produced a tensor."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents  # tuple of Tensor/ComplexTensor
        self.backward_fn = backward_fn  # grad_out -> tuple of parent grads (or None)


class _TensorBase:
    __slots__ = ("data", "grad", "requires_grad", "graph_node")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None


def _needs_graph(*xs):
    return any(
        isinstance(x, _TensorBase) and (x.requires_grad or x.graph_node is not None)
        for x in xs
    )


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor(_TensorBase):
    """Real-valued dense tensor participating in the reverse-mode graph."""

    def __init__(self, data, requires_grad=False, dtype=None, graph_node=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.graph_node = graph_node

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    # -- operator sugar -------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)


class ComplexTensor(_TensorBase):
    """Complex-valued tensor (separate real/imag storage view via complex128)."""

    def __init__(self, data, requires_grad=False, graph_node=None):
        self.data = np.ascontiguousarray(data, dtype=np.complex128)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.graph_node = graph_node

    def __repr__(self):
        return f"ComplexTensor(shape={self.data.shape})"

    @property
    def real_values(self):
        return self.data.real

    @property
    def imag_values(self):
        return self.data.imag


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_value(x):
    if isinstance(x, _TensorBase):
        return x.data
    return x


def _make(data, op, parents, backward_fn, complex_out=False):
    """Wrap an op result; attach a graph node only when a parent needs grad."""
    cls = ComplexTensor if complex_out else Tensor
    if _needs_graph(*parents):
        live = tuple(p for p in parents if isinstance(p, _TensorBase))
        node = GraphNode(op, live, backward_fn)
        return cls(data, requires_grad=True, graph_node=node)
    return cls(data)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _binary(op, a, b, forward, grad_a, grad_b):
    av, bv = _as_value(a), _as_value(b)
    av_arr, bv_arr = np.asarray(av), np.asarray(bv)
    if av_arr.shape != bv_arr.shape:
        try:
            np.broadcast_shapes(av_arr.shape, bv_arr.shape)
        except ValueError:
            raise ValueError(
                f"{op}: incompatible shapes {av_arr.shape} and {bv_arr.shape}"
            ) from None
    out = forward(av, bv)

    def backward_fn(g):
        grads = []
        for x, gfn in ((a, grad_a), (b, grad_b)):
            if isinstance(x, _TensorBase):
                grads.append(_unbroadcast(gfn(g, av, bv), x.data.shape))
            # plain scalars receive no gradient
        return tuple(grads)

    return _make(out, op, (a, b), backward_fn)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def power(a, exponent):
    if isinstance(exponent, _TensorBase):
        return _binary(
            "pow", a, exponent,
            lambda x, y: x ** y,
            lambda g, x, y: g * y * x ** (y - 1),
            lambda g, x, y: g * x ** y * np.log(x),
        )
    p = float(exponent)
    av = _as_value(a)
    out = av ** p

    def backward_fn(g):
        return (g * p * av ** (p - 1),)

    return _make(out, "pow", (a,), backward_fn)


def _unary(op, a, forward, grad):
    av = _as_value(a)
    out = forward(av)

    def backward_fn(g):
        return (grad(g, av, out),)

    return _make(out, op, (a,), backward_fn)


def exp(a):
    return _unary("exp", a, np.exp, lambda g, x, y: g * y)


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def absval(a):
    return _unary("abs", a, np.abs, lambda g, x, y: g * np.sign(x))


def relu(a):
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, y: g * (x > 0))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Gaussian error linear unit, tanh approximation."""

    def fwd(x):
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))

    def grad(g, x, y):
        inner = _GELU_C * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _unary("gelu", a, fwd, grad)


ELEMENTWISE_UNARY = {"tanh": tanh, "gelu": gelu, "relu": relu, "exp": exp}
ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": power}


def elementwise(op_kind, a, b=None):
    """Dispatch by name; binary ops require `b`, unary ops forbid it."""
    if op_kind in ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return ELEMENTWISE_UNARY[op_kind](a)
    if op_kind in ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"{op_kind} is binary")
        return ELEMENTWISE_BINARY[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# matmul / shape ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    av, bv = _as_value(a), _as_value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def backward_fn(g):
        grads = []
        if isinstance(a, _TensorBase):
            grads.append(g @ bv.T)
        if isinstance(b, _TensorBase):
            grads.append(av.T @ g)
        return tuple(grads)

    return _make(out, "matmul", (a, b), backward_fn)


def reshape(a, shape):
    av = _as_value(a)
    out = av.reshape(shape)

    def backward_fn(g):
        return (g.reshape(av.shape),)

    return _make(out, "reshape", (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_axes(a, axes):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    for ax in axes:
        if not (-a.data.ndim <= ax < a.data.ndim):
            raise ValueError(f"axis {ax} invalid for shape {a.data.shape}")
    return axes


def reduce_sum(a, axes=None):
    axes = _check_axes(a, axes)
    av = _as_value(a)
    out = av.sum(axis=axes)

    def backward_fn(g):
        g = np.asarray(g)
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), backward_fn)


def reduce_mean(a, axes=None):
    axes = _check_axes(a, axes)
    av = _as_value(a)
    out = av.mean(axis=axes)
    count = av.size if axes is None else int(np.prod([av.shape[ax] for ax in axes]))

    def backward_fn(g):
        g = np.asarray(g) / count
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(np.asarray(out), "mean", (a,), backward_fn)


def sq_norm(a, axes=None):
    """Sum of squared elements over `axes` (all axes by default)."""
    axes = _check_axes(a, axes)
    av = _as_value(a)
    out = (av * av).sum(axis=axes)

    def backward_fn(g):
        g = np.asarray(g)
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (2.0 * av * np.broadcast_to(g, av.shape),)

    return _make(np.asarray(out), "sq_norm", (a,), backward_fn)


def reduce(op_kind, a, axes=None):
    fns = {"sum": reduce_sum, "mean": reduce_mean, "sq_norm": sq_norm}
    if op_kind not in fns:
        raise ValueError(f"unknown reduce op {op_kind!r}")
    return fns[op_kind](a, axes)


# ---------------------------------------------------------------------------
# detach / backward
# ---------------------------------------------------------------------------

def detach(x):
    """Same values, no graph: gradients never flow past the returned tensor."""
    if isinstance(x, ComplexTensor):
        return ComplexTensor(x.data)
    return Tensor(x.data)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.graph_node is not None:
            for p in node.graph_node.parents:
                stack.append((p, False))
    return order  # parents before children


def backward(loss):
    """Backpropagate from a scalar loss; gradients accumulate into `.grad`."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    nonfinite = False
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad or node.graph_node is None:
            if node.grad is None:
                node.grad = np.zeros_like(
                    node.data, dtype=np.complex128
                    if isinstance(node, ComplexTensor) else node.data.dtype)
            node.grad += g
        gn = node.graph_node
        if gn is None:
            continue
        parent_grads = gn.backward_fn(g)
        for p, pg in zip(gn.parents, parent_grads):
            if pg is None:
                continue
            if not np.all(np.isfinite(pg)):
                nonfinite = True
            if id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg
    if nonfinite:
        warnings.warn("non-finite gradient encountered during backward",
                      RuntimeWarning, stacklevel=2)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def graph_dump(root):
    """Text DAG listing (node id, op kind, shape) for diagnostics."""
    lines = []
    for node in _topo_order(root):
        op = node.graph_node.op if node.graph_node else "leaf"
        lines.append(f"{id(node):x}\t{op}\t{tuple(node.data.shape)}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# FFT ops (unitary convention, power-of-two sizes)
# ---------------------------------------------------------------------------

def _check_pow2(shape):
    h, w = shape[-2], shape[-1]
    for n in (h, w):
        if n < 1 or (n & (n - 1)) != 0:
            raise ValueError(f"fft2 requires power-of-two dims, got {h}x{w}")


def fft2(x):
    """Unitary 2D FFT over the trailing two axes."""
    _check_pow2(x.data.shape)
    out = np.fft.fft2(_as_value(x), norm="ortho")

    def backward_fn(g):
        gx = np.fft.ifft2(g, norm="ortho")
        if isinstance(x, Tensor):
            gx = gx.real
        return (gx,)

    return _make(out, "fft2", (x,), backward_fn, complex_out=True)


def ifft2(x):
    """Unitary 2D inverse FFT over the trailing two axes."""
    _check_pow2(x.data.shape)
    out = np.fft.ifft2(_as_value(x), norm="ortho")

    def backward_fn(g):
        return (np.fft.fft2(g, norm="ortho"),)

    return _make(out, "ifft2", (x,), backward_fn, complex_out=True)


def real(z):
    """Real part of a complex tensor as a real Tensor."""
    out = _as_value(z).real.copy()

    def backward_fn(g):
        return (g.astype(np.complex128),)

    return _make(out, "real", (z,), backward_fn)


def mode_mix(z, w_re, w_im, mask):
    """Per-mode complex channel mixing on the masked spectral modes.

    z:    ComplexTensor [C_in, H, W]
    w_re: Tensor [C_out, C_in, K]  (K = mask.sum())
    w_im: Tensor [C_out, C_in, K]
    mask: boolean [H, W] selecting the retained modes.

    Returns ComplexTensor [C_out, H, W], zero outside the mask.
    """
    zv = _as_value(z)
    wr, wi = _as_value(w_re), _as_value(w_im)
    c_out, c_in, k = wr.shape
    if zv.shape[0] != c_in:
        raise ValueError(f"mode_mix: {zv.shape[0]} input channels, weights expect {c_in}")
    if int(mask.sum()) != k:
        raise ValueError(f"mode_mix: mask selects {int(mask.sum())} modes, weights have {k}")
    w = wr + 1j * wi
    zk = zv[:, mask]  # [C_in, K]
    out = np.zeros((c_out,) + zv.shape[1:], dtype=np.complex128)
    out[:, mask] = np.einsum("oik,ik->ok", w, zk)

    def backward_fn(g):
        gk = g[:, mask]  # [C_out, K]
        grads = []
        if isinstance(z, _TensorBase):
            gz = np.zeros_like(zv)
            gz[:, mask] = np.einsum("oik,ok->ik", np.conj(w), gk)
            grads.append(gz)
        gw = np.einsum("ik,ok->oik", np.conj(zk), gk)
        if isinstance(w_re, _TensorBase):
            grads.append(gw.real)
        if isinstance(w_im, _TensorBase):
            grads.append(gw.imag)
        return tuple(grads)

    return _make(out, "mode_mix", (z, w_re, w_im), backward_fn, complex_out=True)
