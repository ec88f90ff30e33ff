"""Reverse-mode differentiation over dense float64 arrays.

A small eager tape: every operation on :class:`Node` objects records its
inputs and a closure computing the local gradients.  :func:`backward`
walks the recorded graph once in reverse topological order and returns
the gradient of a scalar root with respect to requested leaves.

Conventions baked into the primitives:

* everything is 64-bit floating point, C-contiguous;
* image tensors use channels-last layout ``[B, H, W, C]`` (cheap im2col);
* ``clamp`` back-propagates 1 on the closed active interval and 0 outside;
* ``sign`` is treated as a constant in the backward pass;
* the two classification losses (softmax cross-entropy, KL between two
  softmax distributions) are fused, numerically stabilized scalar ops
  that average over the leading batch axis.

Gradient flow is pruned at construction time: an operation whose inputs
are all constants yields a constant, so e.g. a convolution never computes
or stores what its kernel gradient would need unless the kernel actually
requires a gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

Array = np.ndarray

_F64 = np.float64


def as_tensor(x) -> Array:
    """Coerce to a C-contiguous float64 ndarray (0-d stays 0-d)."""
    arr = np.asarray(x, dtype=_F64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def check_finite(value, what: str = "value") -> None:
    """Raise :class:`NonFiniteError` if ``value`` contains NaN or Inf."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite {what} encountered")


class Node:
    """One tape entry: a value, its inputs, and a local-gradient closure.

    ``backward_fn(g)`` returns one gradient array per parent (``None``
    where a parent does not require a gradient).  Leaves created through
    :func:`variable` have ``requires=True`` and no closure; constants
    have ``requires=False``.
    """

    __slots__ = ("value", "parents", "backward_fn", "requires")

    def __init__(self, value: Array, parents: tuple = (), backward_fn=None, requires: bool = False):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires = requires or backward_fn is not None

    @property
    def shape(self):
        return self.value.shape


def constant(x) -> Node:
    return Node(as_tensor(x))


def variable(x) -> Node:
    """A differentiable leaf."""
    return Node(as_tensor(x), requires=True)


def lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _node(value: Array, parents: tuple[Node, ...], backward_fn) -> Node:
    """Build an op node, folding to a constant when no parent needs grads."""
    if not any(p.requires for p in parents):
        return Node(value)
    return Node(value, parents, backward_fn)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    v = a.value + b.value
    na, nb = a.requires, b.requires
    ash, bsh = a.value.shape, b.value.shape

    def bwd(g):
        return (_unbroadcast(g, ash) if na else None,
                _unbroadcast(g, bsh) if nb else None)

    return _node(v, (a, b), bwd)


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    v = a.value - b.value
    na, nb = a.requires, b.requires
    ash, bsh = a.value.shape, b.value.shape

    def bwd(g):
        return (_unbroadcast(g, ash) if na else None,
                _unbroadcast(-g, bsh) if nb else None)

    return _node(v, (a, b), bwd)


def neg(a) -> Node:
    a = lift(a)

    def bwd(g):
        return (-g,)

    return _node(-a.value, (a,), bwd)


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    v = av * bv
    na, nb = a.requires, b.requires

    def bwd(g):
        return (_unbroadcast(g * bv, av.shape) if na else None,
                _unbroadcast(g * av, bv.shape) if nb else None)

    return _node(v, (a, b), bwd)


def maximum(a, b) -> Node:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    v = np.maximum(av, bv)
    na, nb = a.requires, b.requires

    def bwd(g):
        return (_unbroadcast(g * (av >= bv), av.shape) if na else None,
                _unbroadcast(g * (bv > av), bv.shape) if nb else None)

    return _node(v, (a, b), bwd)


def minimum(a, b) -> Node:
    """Elementwise min; ties route the gradient to the first operand."""
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    v = np.minimum(av, bv)
    na, nb = a.requires, b.requires

    def bwd(g):
        return (_unbroadcast(g * (av <= bv), av.shape) if na else None,
                _unbroadcast(g * (bv < av), bv.shape) if nb else None)

    return _node(v, (a, b), bwd)


def clamp(a, lo, hi) -> Node:
    """Clip into ``[lo, hi]``; gradient 1 on the closed interval, 0 outside.

    ``lo``/``hi`` are constants (scalars or arrays), not tape nodes.
    """
    a = lift(a)
    av = a.value
    v = np.clip(av, lo, hi)

    def bwd(g):
        return (g * ((av >= lo) & (av <= hi)),)

    return _node(v, (a,), bwd)


def relu(a) -> Node:
    a = lift(a)
    v = np.maximum(a.value, 0.0)

    def bwd(g):
        return (g * (v > 0.0),)

    return _node(v, (a,), bwd)


def tanh(a) -> Node:
    a = lift(a)
    v = np.tanh(a.value)

    def bwd(g):
        return (g * (1.0 - v * v),)

    return _node(v, (a,), bwd)


def sign(a) -> Node:
    """Elementwise sign with sign(0) = +1.  Constant in the backward pass."""
    a = lift(a)
    return Node(np.where(a.value < 0.0, -1.0, 1.0))


def reshape(a, shape) -> Node:
    a = lift(a)
    old = a.value.shape

    def bwd(g):
        return (g.reshape(old),)

    return _node(a.value.reshape(shape), (a,), bwd)


def transpose2(a) -> Node:
    """Transpose of a 2-D node."""
    a = lift(a)
    if a.value.ndim != 2:
        raise ShapeMismatchError(f"transpose2 expects 2-D, got {a.value.shape}")

    def bwd(g):
        return (g.T,)

    return _node(np.ascontiguousarray(a.value.T), (a,), bwd)


def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatchError(f"matmul shapes {av.shape} and {bv.shape} do not compose")
    v = av @ bv
    na, nb = a.requires, b.requires

    def bwd(g):
        return (g @ bv.T if na else None,
                av.T @ g if nb else None)

    return _node(v, (a, b), bwd)


# ---------------------------------------------------------------------------
# spatial primitives (channels-last)
# ---------------------------------------------------------------------------


def _im2col(x: Array, kh: int, kw: int, stride: int):
    b, h, w, c = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = np.empty((b, ho, wo, kh * kw * c), dtype=_F64)
    k = 0
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, k:k + c] = x[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            k += c
    return cols, ho, wo


def conv2d(x, kernel, stride: int = 1) -> Node:
    """Valid (unpadded) 2-D convolution.

    ``x`` is ``[B, H, W, C]``, ``kernel`` is ``[kh, kw, C, O]``, output is
    ``[B, H', W', O]`` with ``H' = (H - kh)//stride + 1``.
    """
    x, kernel = lift(x), lift(kernel)
    xv, kv = x.value, kernel.value
    if xv.ndim != 4 or kv.ndim != 4:
        raise ShapeMismatchError("conv2d expects 4-D input and kernel")
    b, h, w, c = xv.shape
    kh, kw, cin, co = kv.shape
    if c != cin:
        raise ShapeMismatchError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    if h < kh or w < kw:
        raise ShapeMismatchError(f"conv2d input {h}x{w} smaller than kernel {kh}x{kw}")
    if stride < 1:
        raise ShapeMismatchError("conv2d stride must be >= 1")

    cols, ho, wo = _im2col(xv, kh, kw, stride)
    m = cols.reshape(-1, kh * kw * c)
    kmat = kv.reshape(-1, co)
    v = (m @ kmat).reshape(b, ho, wo, co)

    need_x, need_k = x.requires, kernel.requires
    if not (need_x or need_k):
        return Node(v)
    m_keep = m if need_k else None

    def bwd(g):
        gm = g.reshape(-1, co)
        gx = gk = None
        if need_x:
            dcols = (gm @ kmat.T).reshape(b, ho, wo, kh, kw, c)
            gx = np.zeros((b, h, w, c), dtype=_F64)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        if need_k:
            gk = (m_keep.T @ gm).reshape(kh, kw, cin, co)
        return gx, gk

    return _node(v, (x, kernel), bwd)


def maxpool2(x) -> Node:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Within each window, ties resolve to the lowest (row-major) index, so
    the backward scatter is deterministic.
    """
    x = lift(x)
    xv = x.value
    if xv.ndim != 4:
        raise ShapeMismatchError("maxpool2 expects 4-D input")
    b, h, w, c = xv.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeMismatchError(f"maxpool2 input {h}x{w} too small")
    a00 = xv[:, 0:2 * h2:2, 0:2 * w2:2, :]
    a01 = xv[:, 0:2 * h2:2, 1:2 * w2:2, :]
    a10 = xv[:, 1:2 * h2:2, 0:2 * w2:2, :]
    a11 = xv[:, 1:2 * h2:2, 1:2 * w2:2, :]
    top = np.maximum(a00, a01)
    bot = np.maximum(a10, a11)
    v = np.maximum(top, bot)
    # window-local winner index in {0, 1, 2, 3}, lowest index wins ties
    idx = np.where(bot > top, 2 + (a11 > a10), (a01 > a00).astype(np.int8)).astype(np.int8)

    def bwd(g):
        gx = np.zeros((b, h, w, c), dtype=_F64)
        gx[:, 0:2 * h2:2, 0:2 * w2:2, :] = np.where(idx == 0, g, 0.0)
        gx[:, 0:2 * h2:2, 1:2 * w2:2, :] = np.where(idx == 1, g, 0.0)
        gx[:, 1:2 * h2:2, 0:2 * w2:2, :] = np.where(idx == 2, g, 0.0)
        gx[:, 1:2 * h2:2, 1:2 * w2:2, :] = np.where(idx == 3, g, 0.0)
        return (gx,)

    return _node(v, (x,), bwd)


# ---------------------------------------------------------------------------
# fused scalar losses
# ---------------------------------------------------------------------------


def _log_softmax(z: Array) -> Array:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: Array) -> Array:
    """Row-wise softmax of a plain 2-D array (not a tape op)."""
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Node:
    """Mean over the batch of -log softmax(logits)[label].

    ``labels`` is a constant integer array of shape ``[B]``.
    """
    logits = lift(logits)
    lv = logits.value
    if lv.ndim != 2:
        raise ShapeMismatchError(f"logits must be 2-D, got {lv.shape}")
    y = np.asarray(labels)
    b, k = lv.shape
    if y.shape != (b,):
        raise ShapeMismatchError(f"labels shape {y.shape} does not match batch {b}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ShapeMismatchError(f"label out of range for {k} classes")
    logp = _log_softmax(lv)
    rows = np.arange(b)
    v = np.asarray(-logp[rows, y].mean())
    sm = np.exp(logp)

    def bwd(g):
        gl = sm.copy()
        gl[rows, y] -= 1.0
        gl *= float(g) / b
        return (gl,)

    return _node(v, (logits,), bwd)


def kl_softmax(ref_logits, logits) -> Node:
    """Mean over the batch of KL(softmax(ref_logits) || softmax(logits)).

    Differentiable in both arguments; pass the reference as a constant to
    keep it fixed.
    """
    ref, q = lift(ref_logits), lift(logits)
    rv, qv = ref.value, q.value
    if rv.shape != qv.shape or rv.ndim != 2:
        raise ShapeMismatchError(f"KL shapes {rv.shape} and {qv.shape} must match and be 2-D")
    b = rv.shape[0]
    logp = _log_softmax(rv)
    logq = _log_softmax(qv)
    p = np.exp(logp)
    diff = logp - logq
    row_kl = (p * diff).sum(axis=1)
    v = np.asarray(row_kl.mean())
    nr, nq = ref.requires, q.requires

    def bwd(g):
        s = float(g) / b
        gr = gq = None
        if nr:
            gr = p * (diff - row_kl[:, None]) * s
        if nq:
            gq = (np.exp(logq) - p) * s
        return gr, gq

    return _node(v, (ref, q), bwd)


def cw_margin(logits, labels, kappa: float = 0.0) -> Node:
    """Mean over the batch of max(z_label - max_{j != label} z_j, -kappa).

    The clamp keeps already-misclassified points at a flat -kappa, so no
    gradient flows for them (boundary counts as active: gradient flows at
    margin == -kappa exactly).
    """
    logits = lift(logits)
    lv = logits.value
    if lv.ndim != 2 or lv.shape[1] < 2:
        raise ShapeMismatchError("margin loss needs 2-D logits with >= 2 classes")
    y = np.asarray(labels)
    b, k = lv.shape
    if y.shape != (b,):
        raise ShapeMismatchError(f"labels shape {y.shape} does not match batch {b}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ShapeMismatchError(f"label out of range for {k} classes")
    rows = np.arange(b)
    masked = lv.copy()
    masked[rows, y] = -np.inf
    runner = masked.argmax(axis=1)
    margin = lv[rows, y] - lv[rows, runner]
    v = np.asarray(np.maximum(margin, -kappa).mean())
    active = margin >= -kappa

    def bwd(g):
        gl = np.zeros_like(lv)
        a = active * (float(g) / b)
        gl[rows, y] += a
        gl[rows, runner] -= a
        return (gl,)

    return _node(v, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root: Node, wrt: Sequence[Node], stop: Sequence[Node] = ()) -> list[Array]:
    """Gradient of a scalar ``root`` with respect to each node in ``wrt``.

    Visits every reachable differentiable node exactly once, in reverse
    topological order.  Nodes in ``wrt`` with no path from ``root`` get a
    zero gradient.  Nodes in ``stop`` are treated as leaves: they receive
    their accumulated gradient but the walk does not continue into their
    ancestors.  Deterministic: traversal order depends only on graph
    structure, so repeated calls are bit-identical.
    """
    if root.value.size != 1:
        raise ShapeMismatchError(f"backward root must be scalar, got shape {root.value.shape}")
    stop_ids = {id(s) for s in stop}

    # iterative postorder DFS over the requires-grad subgraph
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in stop_ids:
            continue
        for p in node.parents:
            if p.requires and id(p) not in seen:
                stack.append((p, False))

    keep = {id(v) for v in wrt}
    grads: dict[int, Array] = {id(root): np.ones_like(root.value)}
    owned: set[int] = set()
    for node in reversed(order):
        nid = id(node)
        g = grads.get(nid)
        if g is None:
            continue
        if node.backward_fn is not None and nid not in stop_ids:
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires:
                    continue
                pid = id(parent)
                cur = grads.get(pid)
                if cur is None:
                    grads[pid] = pg
                elif pid in owned:
                    cur += pg
                    grads[pid] = cur  # numpy scalars rebind instead of mutating
                else:
                    # first accumulation copies: the stored array may be a
                    # view shared with another node's gradient
                    grads[pid] = cur + pg
                    owned.add(pid)
        if nid not in keep:
            del grads[nid]

    return [np.asarray(grads.get(id(v), np.zeros_like(v.value))) for v in wrt]


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Array], float], x, h: float = 1e-5) -> Array:
    """Central-difference gradient estimate of a scalar function.

    Evaluates ``(f(x + h e_i) - f(x - h e_i)) / (2h)`` per coordinate.
    This is the independent oracle the reverse-mode engine is tested
    against; it never touches the tape.
    """
    x = as_tensor(x)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("non-finite function value during finite differencing")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
