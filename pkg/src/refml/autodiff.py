"""Small reverse-mode autodiff engine on float64 numpy arrays.

Every op records a vector-Jacobian product that is itself written with
graph ops.  Running ``backward`` in ``GradMode.SECOND`` therefore records
the gradient computation, and the returned gradients can be differentiated
again (one MAML inner step needs exactly that).  ``GradMode.FIRST`` runs
the same VJPs with recording switched off and returns constants.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from enum import Enum
from typing import Callable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

Tensor = np.ndarray

_state = threading.local()
_ids = itertools.count()


class ShapeError(ValueError):
    pass


class UnreachableError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GradMode(str, Enum):
    FIRST = "first"
    SECOND = "second"


def is_recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def recording(enabled: bool) -> Iterator[None]:
    prev = is_recording()
    _state.record = enabled
    try:
        yield
    finally:
        _state.record = prev


def no_record():
    return recording(False)


class Node:
    """A value in the computation graph.

    Leaves created with ``variable`` have ``requires_grad`` set; everything
    built from them while recording keeps its parents and VJP closure.
    """

    __slots__ = ("value", "op", "parents", "vjp", "requires_grad", "id", "grad")

    def __init__(self, value, op="const", parents=(), vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents: tuple[Node, ...] = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.grad: Tensor | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_node(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_node(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_node(other))


def constant(value) -> Node:
    return Node(value)


def variable(value) -> Node:
    return Node(value, op="leaf", requires_grad=True)


def detach(node: Node) -> Node:
    return Node(node.value)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, op: str, parents: Sequence[Node], vjp: Callable) -> Node:
    if is_recording() and any(p.requires_grad for p in parents):
        return Node(value, op, parents, vjp, requires_grad=True)
    return Node(value, op)


# ---------------------------------------------------------------- elementwise


def add(a: Node, b: Node) -> Node:
    return _make(
        a.value + b.value, "add", (a, b),
        lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)),
    )


def sub(a: Node, b: Node) -> Node:
    return _make(
        a.value - b.value, "sub", (a, b),
        lambda g: (sum_to(g, a.shape), scale(sum_to(g, b.shape), -1.0)),
    )


def mul(a: Node, b: Node) -> Node:
    return _make(
        a.value * b.value, "mul", (a, b),
        lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)),
    )


def scale(a: Node, s: float) -> Node:
    return _make(a.value * s, "scale", (a,), lambda g: (scale(g, s),))


def pow_scalar(a: Node, p: float) -> Node:
    return _make(
        a.value ** p, "pow", (a,),
        lambda g: (mul(g, scale(pow_scalar(a, p - 1.0), p)),),
    )


def relu(a: Node) -> Node:
    def vjp(g):
        return (mul(g, Node(a.value > 0)),)

    return _make(np.maximum(a.value, 0.0), "relu", (a,), vjp)


# ---------------------------------------------------------------- shape ops


def reshape(a: Node, shape) -> Node:
    src = a.shape
    return _make(a.value.reshape(shape), "reshape", (a,), lambda g: (reshape(g, src),))


def flatten(a: Node) -> Node:
    return _make(
        a.value.reshape(a.shape[0], -1), "flatten", (a,),
        lambda g: (reshape(g, a.shape),),
    )


def transpose(a: Node, axes=None) -> Node:
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(a.value, axes), "transpose", (a,),
        lambda g: (transpose(g, inv),),
    )


def broadcast_to(a: Node, shape) -> Node:
    shape = tuple(shape)
    return _make(
        np.broadcast_to(a.value, shape).copy(), "broadcast", (a,),
        lambda g: (sum_to(g, a.shape),),
    )


def sum_to(a: Node, shape) -> Node:
    """Sum ``a`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    v = a.value
    lead = v.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and v.shape[lead + i] != 1
    )
    out = v.sum(axis=axes, keepdims=True).reshape(shape)
    return _make(out, "sum_to", (a,), lambda g: (broadcast_to(g, a.shape),))


def reduce_sum(a: Node, axis=None, keepdims=False) -> Node:
    out = a.value.sum(axis=axis, keepdims=keepdims)
    kept = a.value.sum(axis=axis, keepdims=True).shape

    def vjp(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make(out, "sum", (a,), vjp)


def reduce_mean(a: Node, axis=None, keepdims=False) -> Node:
    s = reduce_sum(a, axis, keepdims)
    return scale(s, s.value.size / a.value.size)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.value @ b.value, "matmul", (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """``x @ weight.T + bias`` with ``weight`` laid out as (out, in)."""
    if x.value.ndim == 1:
        return reshape(linear(reshape(x, (1, -1)), weight, bias), (-1,))
    if weight.value.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input features {x.shape[-1]} do not match weight {weight.shape}"
        )
    out = matmul(x, transpose(weight))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = add(out, bias)
    return out


# ---------------------------------------------------------------- gather / scatter


def gather(a: Node, index: np.ndarray, op: str = "gather") -> Node:
    """``a.flat[index]`` with ``index == -1`` reading as zero (padding)."""
    flat = a.value.reshape(-1)
    valid = index >= 0
    out = np.where(valid, flat[np.where(valid, index, 0)], 0.0)
    return _make(out, op, (a,), lambda g: (scatter_add(g, index, a.shape),))


def scatter_add(g: Node, index: np.ndarray, shape) -> Node:
    """Adjoint of ``gather``: accumulate ``g`` into a zero array of ``shape``."""
    size = int(np.prod(shape))
    valid = index >= 0
    out = np.bincount(index[valid], weights=g.value[valid], minlength=size).reshape(shape)
    return _make(out, "scatter_add", (g,), lambda h: (gather(h, index),))


# ---------------------------------------------------------------- network layers


def flip(a: Node) -> Node:
    """Reverse the last axis."""
    return _make(a.value[..., ::-1].copy(), "flip", (a,), lambda g: (flip(g),))


def _cols(v: np.ndarray, k: int) -> np.ndarray:
    """Same-padded patches of (B, C, L) laid out as (C * k, B * L)."""
    b, c, length = v.shape
    pad = k // 2
    xt = np.zeros((c, b, length + 2 * pad))
    xt[:, :, pad:pad + length] = v.transpose(1, 0, 2)
    cols = np.empty((c, k, b, length))
    for j in range(k):
        cols[:, j] = xt[:, :, j:j + length]
    return cols.reshape(c * k, b * length)


def _conv_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Numpy-only input gradient: W^T g followed by overlap-add of the k shifts."""
    b, cout, length = g.shape
    _, cin, k = w.shape
    pad = k // 2
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(cout, b * length)
    cols = (w.reshape(cout, cin * k).T @ g2).reshape(cin, k, b, length)
    acc = np.zeros((cin, b, length + 2 * pad))
    for j in range(k):
        acc[:, :, j:j + length] += cols[:, j]
    return np.ascontiguousarray(acc[:, :, pad:pad + length].transpose(1, 0, 2))


def conv1d(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """Stride-1 convolution with same padding; x (B, Cin, L), weight (Cout, Cin, k)."""
    if x.value.ndim != 3 or weight.value.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, length = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv1d: input has {cin} channels but weight expects {wcin}")
    if k % 2 != 1:
        raise ShapeError(f"conv1d: same padding needs an odd kernel, got {k}")
    cols = _cols(x.value, k)
    out = weight.value.reshape(cout, cin * k) @ cols
    out = np.ascontiguousarray(out.reshape(cout, b, length).transpose(1, 0, 2))

    def vjp(g):
        dx = None
        if x.requires_grad:
            if is_recording():
                # adjoint of a same-padded correlation is the correlation
                # with the channel-swapped, flipped kernel
                dx = conv1d(g, flip(transpose(weight, (1, 0, 2))))
            else:
                dx = Node(_conv_input_grad(g.value, weight.value))
        if not weight.requires_grad:
            return dx, None
        return dx, conv1d_weight_grad(x, g, k, cols)

    out = _make(out, "conv1d", (x, weight), vjp)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv1d: bias {bias.shape} does not match {cout} output channels")
        out = add(out, reshape(bias, (1, cout, 1)))
    return out


def conv1d_weight_grad(x: Node, g: Node, k: int, cols: np.ndarray | None = None) -> Node:
    """dW[o, i, j] = sum_{b,t} g[b, o, t] * xpad[b, i, t + j]."""
    b, cin, length = x.shape
    cout = g.shape[1]
    if cols is None:
        cols = _cols(x.value, k)
    g2 = g.value.transpose(1, 0, 2).reshape(cout, b * length)
    out = (g2 @ cols.T).reshape(cout, cin, k)

    def vjp(h):
        return (conv1d(g, flip(transpose(h, (1, 0, 2)))), conv1d(x, h))

    return _make(out, "conv1d_wgrad", (x, g), vjp)


def select(a: Node, index: np.ndarray, op: str = "select") -> Node:
    """``a.flat[index]`` for non-repeating ``index``."""
    out = a.value.reshape(-1)[index]
    return _make(out, op, (a,), lambda g: (place(g, index, a.shape),))


def place(g: Node, index: np.ndarray, shape) -> Node:
    """Adjoint of ``select``: zeros of ``shape`` with ``g`` written at ``index``."""
    out = np.zeros(int(np.prod(shape)))
    out[index.reshape(-1)] = g.value.reshape(-1)
    return _make(out.reshape(shape), "place", (g,), lambda h: (select(h, index),))


def _pool_blocks(v: np.ndarray, window: int, stride: int, n_out: int) -> np.ndarray:
    if stride == window:
        return v[..., : n_out * window].reshape(v.shape[:-1] + (n_out, window))
    return np.stack([v[..., s:s + window] for s in range(0, n_out * stride, stride)], axis=-2)


def pool_take(a: Node, pick: np.ndarray, window: int, stride: int) -> Node:
    """Element ``pick`` of every pooling window of ``a``."""
    n_out = pick.shape[-1]
    blocks = _pool_blocks(a.value, window, stride, n_out)
    out = np.take_along_axis(blocks, pick[..., None], axis=-1)[..., 0]
    return _make(out, "maxpool1d", (a,),
                 lambda g: (pool_put(g, pick, window, stride, a.shape[-1]),))


def pool_put(g: Node, pick: np.ndarray, window: int, stride: int, length: int) -> Node:
    """Adjoint of ``pool_take``: route ``g`` back to the picked positions."""
    n_out = pick.shape[-1]
    out = np.zeros(g.shape[:-1] + (length,))
    if stride == window:
        blocks = out[..., : n_out * window].reshape(g.shape + (window,))
        for j in range(window):
            blocks[..., j] = g.value * (pick == j)
        out[..., : n_out * window] = blocks.reshape(g.shape[:-1] + (n_out * window,))
    else:
        pos = np.arange(n_out) * stride + pick
        np.put_along_axis(out, pos, g.value, axis=-1)
    return _make(out, "pool_put", (g,), lambda h: (pool_take(h, pick, window, stride),))


def maxpool1d(x: Node, window: int, stride: int | None = None) -> Node:
    """Max-pool along the last axis; ties go to the lowest index."""
    stride = stride or window
    v = x.value
    if v.ndim == 1:
        return reshape(maxpool1d(reshape(x, (1, 1, -1)), window, stride), (-1,))
    if stride < window:
        raise ShapeError(f"maxpool1d: overlapping windows (stride {stride} < window {window})")
    length = v.shape[-1]
    n_out = (length - window) // stride + 1
    if n_out < 1:
        raise ShapeError(f"maxpool1d: window {window} longer than input length {length}")
    blocks = _pool_blocks(v, window, stride, n_out)
    # strict '>' keeps the earliest maximum on ties
    best = blocks[..., 0]
    pick = np.zeros(best.shape, dtype=np.int8 if window < 128 else np.int64)
    for j in range(1, window):
        better = blocks[..., j] > best
        best = np.maximum(best, blocks[..., j])
        pick[better] = j
    return _make(best, "maxpool1d", (x,), lambda g: (pool_put(g, pick, window, stride, length),))


def _bn_normalise(x: Node, eps: float) -> tuple[Node, Node]:
    """(xhat, inv_std) built from graph ops, differentiable in ``x``."""
    mu = reduce_mean(x, axis=(0, 2), keepdims=True)
    xc = sub(x, mu)
    var = reduce_mean(mul(xc, xc), axis=(0, 2), keepdims=True)
    inv = pow_scalar(add(var, constant(eps)), -0.5)
    return mul(xc, inv), inv


def batchnorm1d(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    """Normalise (B, C, L) per channel with current-batch statistics."""
    if x.value.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"batchnorm1d: input {x.shape} incompatible with gamma {gamma.shape}, beta {beta.shape}"
        )
    c = x.shape[1]
    m = x.shape[0] * x.shape[2]
    v = x.value
    mu = v.sum(axis=(0, 2)) / m
    var = np.maximum(np.einsum("bcl,bcl->c", v, v) / m - mu * mu, 0.0)
    inv_v = 1.0 / np.sqrt(var + eps)
    s = gamma.value * inv_v
    out = v * s[None, :, None]
    out += (beta.value - mu * s)[None, :, None]

    def vjp(g):
        if is_recording():
            return _bn_vjp_graph(g, x, gamma, eps)
        gv = g.value
        dbeta = gv.sum(axis=(0, 2))
        dgamma = inv_v * (np.einsum("bcl,bcl->c", gv, v) - mu * dbeta)
        dx = None
        if x.requires_grad:
            # dx = s * (g - mean(g) - xhat * mean(g * xhat)), expanded per channel
            ca = -s * dgamma * inv_v / m
            cb = -s * dbeta / m - ca * mu
            dx = gv * s[None, :, None]
            dx += v * ca[None, :, None]
            dx += cb[None, :, None]
            dx = Node(dx)
        return dx, Node(dgamma), Node(dbeta)

    return _make(out, "batchnorm1d", (x, gamma, beta), vjp)


def _bn_vjp_graph(g: Node, x: Node, gamma: Node, eps: float):
    c = x.shape[1]
    xhat, inv = _bn_normalise(x, eps)
    gg = mul(g, reshape(gamma, (1, c, 1)))
    dx = mul(inv, sub(
        sub(gg, reduce_mean(gg, axis=(0, 2), keepdims=True)),
        mul(xhat, reduce_mean(mul(gg, xhat), axis=(0, 2), keepdims=True)),
    ))
    return dx, reduce_sum(mul(g, xhat), axis=(0, 2)), reduce_sum(g, axis=(0, 2))


# ---------------------------------------------------------------- softmax / loss


def _softmax_value(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Node) -> Node:
    def vjp(g):
        s = softmax(a)
        return (mul(s, sub(g, reduce_sum(mul(g, s), axis=-1, keepdims=True))),)

    return _make(_softmax_value(a.value), "softmax", (a,), vjp)


def log_softmax(a: Node) -> Node:
    v = a.value
    m = v.max(axis=-1, keepdims=True)
    out = v - m - np.log(np.exp(v - m).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (sub(g, mul(softmax(a), reduce_sum(g, axis=-1, keepdims=True))),)

    return _make(out, "log_softmax", (a,), vjp)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean cross-entropy of (B, N) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} do not match labels {labels.shape}"
        )
    n = logits.shape[1]
    if n < 2:
        raise ShapeError("softmax_cross_entropy: need at least 2 classes")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"label out of range for {n} classes: {labels.tolist()}")
    idx = np.arange(labels.size) * n + labels
    picked = gather(log_softmax(logits), idx)
    return scale(reduce_sum(picked), -1.0 / labels.size)


def cross_entropy(logits: Node, label: int) -> Node:
    """Cross-entropy of a single logit vector against one class index."""
    logits = _as_node(logits)
    if logits.value.ndim != 1:
        raise ShapeError(f"cross_entropy: expected a vector of logits, got {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    return softmax_cross_entropy(reshape(logits, (1, -1)), [label])


_OPS: dict[str, Callable[..., Node]] = {
    "conv1d": conv1d,
    "batchnorm1d": batchnorm1d,
    "relu": relu,
    "maxpool1d": maxpool1d,
    "flatten": flatten,
    "linear": linear,
    "softmax_cross_entropy": softmax_cross_entropy,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "reduce_mean": reduce_mean,
}


def forward_op(tag: str, *inputs, **attrs) -> Node:
    try:
        fn = _OPS[tag]
    except KeyError:
        raise ValueError(f"unknown op {tag!r}; supported: {sorted(_OPS)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward


def _topo(loss: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen[n.id] = n
        stack.extend(n.parents)
    return sorted(seen.values(), key=lambda n: n.id)


def backward(loss: Node, wrt: Sequence[Node], mode: GradMode | str = GradMode.FIRST) -> list[Node]:
    """Gradients of a scalar ``loss`` with respect to each node in ``wrt``.

    In ``GradMode.SECOND`` the returned nodes carry their own graph, so
    parameters formed from them can be differentiated through again.
    """
    mode = GradMode(mode)
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo(loss)
    reach = {n.id for n in order}
    for w in wrt:
        if w.id not in reach:
            raise UnreachableError(f"{w!r} is not reachable from the loss")
    want = {w.id for w in wrt}
    found: dict[int, Node] = {}
    with recording(mode is GradMode.SECOND):
        grads: dict[int, Node] = {loss.id: Node(np.ones_like(loss.value))}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.id in want:
                found[node.id] = g
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = found.get(w.id) or Node(np.zeros_like(w.value))
        w.grad = g.value
        out.append(g)
    return out


def grad(loss: Node, wrt: Sequence[Node]) -> list[Tensor]:
    return [g.value for g in backward(loss, wrt, GradMode.FIRST)]


# ---------------------------------------------------------------- checking


class GradCheckResult(NamedTuple):
    max_rel_err: float
    checked: int
    skipped: int  # coordinates whose difference stencil straddles a kink


def grad_check_report(
    f: Callable[[dict[str, Node]], Node],
    point: Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    skip_kinks: bool = False,
    kink_tol: float = 1e-6,
) -> GradCheckResult:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    With ``skip_kinks`` each coordinate is also differenced with step h/2.
    On a smooth stretch the two estimates agree to O(h^2); when they
    disagree by more than ``kink_tol`` (relative) the stencil crosses a
    ReLU or max-pool switch, the finite difference is meaningless there,
    and the coordinate is counted in ``skipped`` instead of ``max_rel_err``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = list(point)
    leaves = {k: variable(np.array(point[k], dtype=np.float64)) for k in names}
    base_value = f(leaves)
    if not np.all(np.isfinite(base_value.value)):
        raise NonFiniteError("function is not finite at the check point")
    analytic = dict(zip(names, grad(base_value, [leaves[k] for k in names])))
    if not all(np.all(np.isfinite(g)) for g in analytic.values()):
        raise NonFiniteError("analytic gradient is not finite at the check point")
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0

    def evaluate(vals):
        # leaves stay variables so that ``f`` may itself call backward
        out = float(f({k: variable(v) for k, v in vals.items()}).value)
        if not np.isfinite(out):
            raise NonFiniteError("function is not finite at a perturbed point")
        return out

    base = {k: np.array(point[k], dtype=np.float64) for k in names}

    def central(k, i, step):
        orig = base[k].flat[i]
        base[k].flat[i] = orig + step
        fp = evaluate(base)
        base[k].flat[i] = orig - step
        fm = evaluate(base)
        base[k].flat[i] = orig
        return (fp - fm) / (2 * step)

    for k in names:
        size = base[k].size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        for i in coords:
            num = central(k, i, h)
            if skip_kinks:
                half = central(k, i, h / 2)
                if abs(num - half) > kink_tol * (abs(num) + abs(half)) + 1e-9:
                    skipped += 1
                    continue
            ana = analytic[k].flat[i]
            worst = max(worst, abs(ana - num) / (abs(ana) + abs(num) + 1e-12))
            checked += 1
    return GradCheckResult(worst, checked, skipped)


def grad_check(
    f: Callable[[dict[str, Node]], Node],
    point: Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps a dict of parameter nodes to a scalar node.  When
    ``max_coords`` is set, that many coordinates per entry are sampled.
    """
    return grad_check_report(f, point, h, max_coords, seed).max_rel_err
