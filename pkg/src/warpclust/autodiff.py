"""Reverse-mode automatic differentiation over numpy arrays.

Every tensor is a float64 :class:`numpy.ndarray` held by a :class:`Node` on a
:class:`Tape`.  Operations execute eagerly and append one record per primitive
in execution order, so the tape doubles as a deterministic replay program:
``forward`` re-runs it (optionally with fresh leaf values) and reproduces the
original values bit for bit, and ``backward`` walks it once in reverse to
accumulate vector-Jacobian products into the leaves.

The primitive set is intentionally small: broadcasting arithmetic, matmul,
pointwise nonlinearities, reductions, shape ops, 1-d convolution and pooling,
and piecewise-linear interpolation.  Custom primitives (used for the flow
integrator) can be registered with :func:`register_primitive`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import StructuralError

Array = np.ndarray

__all__ = [
    "Array",
    "Node",
    "Primitive",
    "Tape",
    "absval",
    "add",
    "backward",
    "check_gradient",
    "concat",
    "conv1d",
    "div",
    "elu",
    "exp",
    "forward",
    "interp_linear",
    "log",
    "matmul",
    "maxpool1d",
    "mean",
    "mul",
    "narrow",
    "neg",
    "power",
    "register_primitive",
    "relu",
    "reshape",
    "softplus",
    "sqrt",
    "sub",
    "total",
    "transpose",
]


def _as_f64(value: Any) -> Array:
    return np.asarray(value, dtype=np.float64)


@dataclass(frozen=True)
class Primitive:
    """Forward/VJP pair implementing one differentiable operation.

    ``fwd(vals, attrs)`` returns ``(out, saved)`` where ``saved`` holds
    whatever the backward pass needs.  ``vjp(saved, grad, attrs)`` returns one
    gradient per parent, ``None`` for parents that do not receive one.
    """

    name: str
    fwd: Callable[[tuple[Array, ...], Mapping[str, Any]], tuple[Array, Any]]
    vjp: Callable[[Any, Array, Mapping[str, Any]], tuple[Array | None, ...]]


_PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(prim: Primitive) -> Primitive:
    if prim.name in _PRIMITIVES:
        raise StructuralError(f"primitive {prim.name!r} already registered")
    _PRIMITIVES[prim.name] = prim
    return prim


class Node:
    """One tape record: a value plus the recipe that produced it."""

    __slots__ = ("tape", "nid", "op", "parents", "attrs", "value", "saved",
                 "requires_grad", "name")

    def __init__(self, tape: "Tape", nid: int, op: str,
                 parents: tuple["Node", ...], attrs: dict[str, Any],
                 value: Array, saved: Any, requires_grad: bool,
                 name: str = "") -> None:
        self.tape = tape
        self.nid = nid
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.saved = saved
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.nid} {self.op}{label} shape={self.value.shape}>"

    # Arithmetic sugar; python scalars become constant leaves on the tape.
    def _coerce(self, other: Any) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise StructuralError("operands live on different tapes")
            return other
        return self.tape.leaf(other)

    def __add__(self, other: Any) -> "Node":
        return add(self, self._coerce(other))

    def __radd__(self, other: Any) -> "Node":
        return add(self._coerce(other), self)

    def __sub__(self, other: Any) -> "Node":
        return sub(self, self._coerce(other))

    def __rsub__(self, other: Any) -> "Node":
        return sub(self._coerce(other), self)

    def __mul__(self, other: Any) -> "Node":
        return mul(self, self._coerce(other))

    def __rmul__(self, other: Any) -> "Node":
        return mul(self._coerce(other), self)

    def __truediv__(self, other: Any) -> "Node":
        return div(self, self._coerce(other))

    def __rtruediv__(self, other: Any) -> "Node":
        return div(self._coerce(other), self)

    def __neg__(self) -> "Node":
        return neg(self)

    def __pow__(self, exponent: float) -> "Node":
        return power(self, float(exponent))

    def __matmul__(self, other: Any) -> "Node":
        return matmul(self, self._coerce(other))

    def sum(self, axis: int | tuple[int, ...] | None = None,
            keepdims: bool = False) -> "Node":
        return total(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None,
             keepdims: bool = False) -> "Node":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Node":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Execution-ordered list of nodes; leaves first come, first recorded."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def leaf(self, value: Any, requires_grad: bool = False,
             name: str = "") -> Node:
        node = Node(self, len(self.nodes), "leaf", (), {}, _as_f64(value),
                    None, requires_grad, name)
        self.nodes.append(node)
        return node

    def apply(self, op: str, parents: Sequence[Node],
              **attrs: Any) -> Node:
        prim = _PRIMITIVES[op]
        for p in parents:
            if p.tape is not self:
                raise StructuralError(
                    f"{op}: parent node #{p.nid} belongs to another tape")
        vals = tuple(p.value for p in parents)
        out, saved = prim.fwd(vals, attrs)
        node = Node(self, len(self.nodes), op, tuple(parents), attrs,
                    out, saved, any(p.requires_grad for p in parents))
        self.nodes.append(node)
        return node


def forward(tape: Tape, bindings: Mapping[Node, Any] | None = None
            ) -> dict[Node, Array]:
    """Replay the tape, optionally substituting leaf values.

    Returns a value for every node.  With no bindings the result matches the
    eagerly computed values bit for bit: the same primitives run in the same
    order on the same inputs.
    """
    subs: dict[int, Array] = {}
    if bindings:
        for node, value in bindings.items():
            if node.op != "leaf":
                raise StructuralError(
                    f"can only bind leaves, node #{node.nid} is {node.op!r}")
            arr = _as_f64(value)
            if arr.shape != node.value.shape:
                raise StructuralError(
                    f"binding for node #{node.nid} has shape {arr.shape}, "
                    f"leaf has {node.value.shape}")
            subs[node.nid] = arr
    vals: dict[int, Array] = {}
    for node in tape.nodes:
        if node.op == "leaf":
            vals[node.nid] = subs.get(node.nid, node.value)
        else:
            pv = tuple(vals[p.nid] for p in node.parents)
            out, _ = _PRIMITIVES[node.op].fwd(pv, node.attrs)
            vals[node.nid] = out
    return {node: vals[node.nid] for node in tape.nodes}


def backward(output: Node) -> dict[Node, Array]:
    """Reverse sweep from a scalar output to every differentiable leaf.

    Gradients accumulate in reverse execution order, so repeated calls give
    identical results.  Raises :class:`StructuralError` if ``output`` is not
    a single-element tensor.
    """
    if output.value.size != 1:
        raise StructuralError(
            f"backward target must be scalar, node #{output.nid} has shape "
            f"{output.value.shape}")
    grads: dict[int, Array] = {output.nid: np.ones_like(output.value)}
    leaf_grads: dict[Node, Array] = {}
    for node in reversed(output.tape.nodes[:output.nid + 1]):
        g = grads.pop(node.nid, None)
        if g is None or not node.requires_grad:
            continue
        if node.op == "leaf":
            leaf_grads[node] = g
            continue
        parent_grads = _PRIMITIVES[node.op].vjp(node.saved, g, node.attrs)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(parent.nid)
            grads[parent.nid] = pg if acc is None else acc + pg
    return leaf_grads


def check_gradient(fn: Callable[[Node], Node], point: Any,
                   h: float = 1e-4) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps one leaf node to a scalar node.  Returns the maximum over
    coordinates of ``|analytic - fd| / max(1, |fd|)``.
    """
    point = _as_f64(point)
    tape = Tape()
    x = tape.leaf(point, requires_grad=True, name="x")
    out = fn(x)
    if out.value.size != 1:
        raise StructuralError("check_gradient needs a scalar-valued function")
    analytic = backward(out).get(x)
    if analytic is None:
        analytic = np.zeros_like(point)
    analytic = analytic.reshape(-1)
    flat = point.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        plus = forward(tape, {x: bumped.reshape(point.shape)})[out].item()
        bumped[i] = flat[i] - h
        minus = forward(tape, {x: bumped.reshape(point.shape)})[out].item()
        fd = (plus - minus) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst


# ---------------------------------------------------------------------------
# primitive definitions
# ---------------------------------------------------------------------------

def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum-reduce ``grad`` down to ``shape`` (inverse of broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(name: str, f: Callable[[Array, Array], Array],
            dfa: Callable[[Array, Array, Array], Array],
            dfb: Callable[[Array, Array, Array], Array]) -> None:
    def fwd(vals, attrs):
        a, b = vals
        return f(a, b), (a, b)

    def vjp(saved, g, attrs):
        a, b = saved
        return (_unbroadcast(dfa(a, b, g), a.shape),
                _unbroadcast(dfb(a, b, g), b.shape))

    register_primitive(Primitive(name, fwd, vjp))


_binary("add", lambda a, b: a + b, lambda a, b, g: g, lambda a, b, g: g)
_binary("sub", lambda a, b: a - b, lambda a, b, g: g, lambda a, b, g: -g)
_binary("mul", lambda a, b: a * b, lambda a, b, g: g * b, lambda a, b, g: g * a)
_binary("div", lambda a, b: a / b, lambda a, b, g: g / b,
        lambda a, b, g: -g * a / (b * b))


def _unary(name: str, f: Callable[..., Array],
           df: Callable[..., Array]) -> None:
    def fwd(vals, attrs):
        (x,) = vals
        out = f(x, **attrs)
        return out, (x, out)

    def vjp(saved, g, attrs):
        x, out = saved
        return (df(x, out, g, **attrs),)

    register_primitive(Primitive(name, fwd, vjp))


_unary("neg", lambda x: -x, lambda x, out, g: -g)
_unary("exp", np.exp, lambda x, out, g: g * out)
_unary("log", np.log, lambda x, out, g: g / x)
_unary("sqrt", np.sqrt, lambda x, out, g: g * 0.5 / out)
_unary("absval", np.abs, lambda x, out, g: g * np.sign(x))
_unary("relu", lambda x: np.maximum(x, 0.0),
       lambda x, out, g: g * (x > 0.0))
_unary("power", lambda x, exponent: x ** exponent,
       lambda x, out, g, exponent: g * exponent * x ** (exponent - 1.0))


def _elu(x: Array, alpha: float = 1.0) -> Array:
    return np.where(x > 0.0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x: Array, out: Array, g: Array, alpha: float = 1.0) -> Array:
    return g * np.where(x > 0.0, 1.0, out + alpha)


_unary("elu", _elu, _elu_grad)


def _softplus(x: Array) -> Array:
    return np.logaddexp(0.0, x)


def _softplus_grad(x: Array, out: Array, g: Array) -> Array:
    # sigmoid(x) written as exp(x - softplus(x)) to stay finite for large |x|
    return g * np.exp(x - out)


_unary("softplus", _softplus, _softplus_grad)


def _sum_fwd(vals, attrs):
    (x,) = vals
    out = x.sum(axis=attrs["axis"], keepdims=attrs["keepdims"])
    return _as_f64(out), x.shape


def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims) -> Array:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def _sum_vjp(saved, g, attrs):
    return (_expand_reduced(g, saved, attrs["axis"], attrs["keepdims"]),)


register_primitive(Primitive("sum", _sum_fwd, _sum_vjp))


def _mean_fwd(vals, attrs):
    (x,) = vals
    out = x.mean(axis=attrs["axis"], keepdims=attrs["keepdims"])
    return _as_f64(out), x.shape


def _mean_vjp(saved, g, attrs):
    shape = saved
    axis = attrs["axis"]
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a % len(shape)] for a in axes]))
    expanded = _expand_reduced(g, shape, axis, attrs["keepdims"])
    return (expanded / count,)


register_primitive(Primitive("mean", _mean_fwd, _mean_vjp))


def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2:
        raise StructuralError(
            f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise StructuralError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _matmul_vjp(saved, g, attrs):
    a, b = saved
    return g @ b.T, a.T @ g


register_primitive(Primitive("matmul", _matmul_fwd, _matmul_vjp))


def _reshape_fwd(vals, attrs):
    (x,) = vals
    return x.reshape(attrs["shape"]), x.shape


def _reshape_vjp(saved, g, attrs):
    return (g.reshape(saved),)


register_primitive(Primitive("reshape", _reshape_fwd, _reshape_vjp))


def _transpose_fwd(vals, attrs):
    (x,) = vals
    return np.ascontiguousarray(x.transpose(attrs["axes"])), None


def _transpose_vjp(saved, g, attrs):
    inverse = np.argsort(attrs["axes"])
    return (np.ascontiguousarray(g.transpose(tuple(inverse))),)


register_primitive(Primitive("transpose", _transpose_fwd, _transpose_vjp))


def _narrow_fwd(vals, attrs):
    (x,) = vals
    axis, start, length = attrs["axis"], attrs["start"], attrs["length"]
    key = [slice(None)] * x.ndim
    key[axis] = slice(start, start + length)
    return np.ascontiguousarray(x[tuple(key)]), x.shape


def _narrow_vjp(saved, g, attrs):
    axis, start, length = attrs["axis"], attrs["start"], attrs["length"]
    out = np.zeros(saved, dtype=np.float64)
    key = [slice(None)] * len(saved)
    key[axis] = slice(start, start + length)
    out[tuple(key)] = g
    return (out,)


register_primitive(Primitive("narrow", _narrow_fwd, _narrow_vjp))


def _concat_fwd(vals, attrs):
    return np.concatenate(vals, axis=attrs["axis"]), tuple(v.shape for v in vals)


def _concat_vjp(saved, g, attrs):
    axis = attrs["axis"]
    sizes = [s[axis] for s in saved]
    pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
    return tuple(np.ascontiguousarray(p) for p in pieces)


register_primitive(Primitive("concat", _concat_fwd, _concat_vjp))


def _conv1d_fwd(vals, attrs):
    x, w = vals
    if x.ndim != 3 or w.ndim != 3:
        raise StructuralError(
            f"conv1d expects x[N,C,T] and w[Cout,Cin,k], got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise StructuralError(
            f"conv1d channel mismatch: input has {x.shape[1]}, "
            f"kernel expects {w.shape[1]}")
    k = w.shape[2]
    pad_l, pad_r = (k - 1) // 2, k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad_l, pad_r)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    out = np.tensordot(win, w, axes=([1, 3], [1, 2]))  # [N, T, Cout]
    return np.ascontiguousarray(out.transpose(0, 2, 1)), (xp, w, x.shape)


def _conv1d_vjp(saved, g, attrs):
    xp, w, xshape = saved
    k = w.shape[2]
    pad_l = (k - 1) // 2
    t = xshape[2]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    gt = np.ascontiguousarray(g.transpose(0, 2, 1))  # [N, T, Cout]
    dw = np.tensordot(gt, win, axes=([0, 1], [0, 2]))  # [Cout, Cin, k]
    gw = np.tensordot(gt, w, axes=([2], [0]))  # [N, T, Cin, k]
    dxp = np.zeros_like(xp)
    for j in range(k):
        dxp[:, :, j:j + t] += gw[:, :, :, j].transpose(0, 2, 1)
    return np.ascontiguousarray(dxp[:, :, pad_l:pad_l + t]), dw


register_primitive(Primitive("conv1d", _conv1d_fwd, _conv1d_vjp))


def _maxpool1d_fwd(vals, attrs):
    (x,) = vals
    width = attrs["width"]
    n, c, t = x.shape
    t2 = t // width
    if t2 == 0:
        raise StructuralError(
            f"maxpool1d: length {t} shorter than pool width {width}")
    win = x[:, :, :t2 * width].reshape(n, c, t2, width)
    idx = win.argmax(axis=3)  # ties resolve to the first index
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    return out, (idx, x.shape)


def _maxpool1d_vjp(saved, g, attrs):
    idx, xshape = saved
    width = attrs["width"]
    n, c, t = xshape
    t2 = t // width
    gwin = np.zeros((n, c, t2, width), dtype=np.float64)
    np.put_along_axis(gwin, idx[..., None], g[..., None], axis=3)
    dx = np.zeros(xshape, dtype=np.float64)
    dx[:, :, :t2 * width] = gwin.reshape(n, c, t2 * width)
    return (dx,)


register_primitive(Primitive("maxpool1d", _maxpool1d_fwd, _maxpool1d_vjp))


def _interp_fwd(vals, attrs):
    values, pos = vals
    if values.ndim != 3 or pos.ndim != 2:
        raise StructuralError(
            f"interp_linear expects values[N,d,T] and pos[N,T'], got "
            f"{values.shape}, {pos.shape}")
    if values.shape[0] != pos.shape[0]:
        raise StructuralError(
            f"interp_linear batch mismatch: {values.shape[0]} curves vs "
            f"{pos.shape[0]} position rows")
    t = values.shape[2]
    u = pos * (t - 1)
    idx = np.clip(np.floor(u).astype(np.int64), 0, t - 2)
    frac = u - idx
    idx_b = idx[:, None, :]
    lo = np.take_along_axis(values, np.broadcast_to(idx_b, (values.shape[0],
                            values.shape[1], pos.shape[1])), axis=2)
    hi = np.take_along_axis(values, np.broadcast_to(idx_b + 1, lo.shape), axis=2)
    w_hi = frac[:, None, :]
    # convex combination keeps knot and endpoint values exact in floats
    out = lo * (1.0 - w_hi) + hi * w_hi
    return out, (values.shape, idx, frac, lo, hi)


def _interp_vjp(saved, g, attrs):
    vshape, idx, frac, lo, hi = saved
    n, d, t = vshape
    t2 = idx.shape[1]
    dv = np.zeros(vshape, dtype=np.float64)
    rows = np.arange(n)[:, None, None]
    dims = np.arange(d)[None, :, None]
    idx_b = np.broadcast_to(idx[:, None, :], (n, d, t2))
    w_hi = frac[:, None, :]
    np.add.at(dv, (rows, dims, idx_b), g * (1.0 - w_hi))
    np.add.at(dv, (rows, dims, idx_b + 1), g * w_hi)
    dpos = ((hi - lo) * g).sum(axis=1) * (t - 1)
    return dv, dpos


register_primitive(Primitive("interp_linear", _interp_fwd, _interp_vjp))


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    return a.tape.apply("add", (a, b))


def sub(a: Node, b: Node) -> Node:
    return a.tape.apply("sub", (a, b))


def mul(a: Node, b: Node) -> Node:
    return a.tape.apply("mul", (a, b))


def div(a: Node, b: Node) -> Node:
    return a.tape.apply("div", (a, b))


def neg(x: Node) -> Node:
    return x.tape.apply("neg", (x,))


def exp(x: Node) -> Node:
    return x.tape.apply("exp", (x,))


def log(x: Node) -> Node:
    return x.tape.apply("log", (x,))


def sqrt(x: Node) -> Node:
    return x.tape.apply("sqrt", (x,))


def absval(x: Node) -> Node:
    return x.tape.apply("absval", (x,))


def relu(x: Node) -> Node:
    return x.tape.apply("relu", (x,))


def elu(x: Node, alpha: float = 1.0) -> Node:
    return x.tape.apply("elu", (x,), alpha=alpha)


def softplus(x: Node) -> Node:
    return x.tape.apply("softplus", (x,))


def power(x: Node, exponent: float) -> Node:
    return x.tape.apply("power", (x,), exponent=float(exponent))


def total(x: Node, axis: int | tuple[int, ...] | None = None,
          keepdims: bool = False) -> Node:
    return x.tape.apply("sum", (x,), axis=axis, keepdims=keepdims)


def mean(x: Node, axis: int | tuple[int, ...] | None = None,
         keepdims: bool = False) -> Node:
    return x.tape.apply("mean", (x,), axis=axis, keepdims=keepdims)


def matmul(a: Node, b: Node) -> Node:
    return a.tape.apply("matmul", (a, b))


def reshape(x: Node, shape: Iterable[int]) -> Node:
    return x.tape.apply("reshape", (x,), shape=tuple(shape))


def transpose(x: Node, axes: Iterable[int]) -> Node:
    return x.tape.apply("transpose", (x,), axes=tuple(axes))


def narrow(x: Node, axis: int, start: int, length: int) -> Node:
    return x.tape.apply("narrow", (x,), axis=axis, start=start, length=length)


def concat(nodes: Sequence[Node], axis: int) -> Node:
    if not nodes:
        raise StructuralError("concat needs at least one node")
    return nodes[0].tape.apply("concat", tuple(nodes), axis=axis)


def conv1d(x: Node, w: Node) -> Node:
    """Same-padded stride-1 cross-correlation of ``x[N,Cin,T]`` with
    ``w[Cout,Cin,k]``."""
    return x.tape.apply("conv1d", (x, w))


def maxpool1d(x: Node, width: int = 2) -> Node:
    return x.tape.apply("maxpool1d", (x,), width=int(width))


def interp_linear(values: Node, pos: Node) -> Node:
    """Sample ``values[N,d,T]`` (on a uniform grid over [0,1]) at ``pos[N,T']``.

    Positions at interior knots take the right-hand segment, so the slope is
    one-sided there; positions are clamped to the outermost segments.
    """
    return values.tape.apply("interp_linear", (values, pos))
