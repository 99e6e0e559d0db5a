"""Reverse-mode automatic differentiation over a dense-tensor DAG.

Graphs are built once from ``leaf``/``constant`` nodes and numpy-style
operators, then evaluated against leaf bindings any number of times. A
graph is therefore reusable across parameter values, which is what the
finite-difference oracle and the gradient analyzer rely on.

Conventions:

* shapes are inferred eagerly at construction, so mismatches fail at
  build time rather than mid-evaluation;
* every intermediate is checked finite during evaluation (NaN/Inf is an
  error state, reported with the offending node);
* the backward pass walks a fixed reverse topological order, so repeated
  calls with identical inputs are bitwise identical in single-threaded
  mode.

Training runs in float32 by default; gradient verification against
``finite_difference_gradient`` should use float64 leaves.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import kernels

_ids = itertools.count()


class GraphError(Exception):
    """Raised for evaluation-time failures (unbound leaf, non-scalar root)."""


class NonFiniteError(GraphError):
    """An intermediate value contained NaN or Inf."""


class Node:
    """One vertex of the expression DAG."""

    __slots__ = ("op", "args", "extra", "shape", "id")

    def __init__(self, op, args=(), extra=None, shape=None):
        self.op = op
        self.args = tuple(args)
        self.extra = extra
        self.shape = tuple(shape) if shape is not None else ()
        self.id = next(_ids)

    def __repr__(self):
        tag = f"'{self.extra}'" if self.op == "leaf" else f"#{self.id}"
        return f"<{self.op} {tag} shape={self.shape}>"

    # -- operator sugar ------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_node(x):
    if isinstance(x, Node):
        return x
    return constant(x)


def as_node(x):
    """Wrap a value as a constant node; nodes pass through."""
    return _as_node(x)


def _shape_of(x):
    return np.shape(x)


# ---------------------------------------------------------------------
# node constructors
# ---------------------------------------------------------------------

def leaf(name, shape):
    """A named rebindable input with a declared shape."""
    return Node("leaf", (), extra=name, shape=shape)


def constant(value):
    """An embedded value; python scalars stay weakly typed so they do not
    promote float32 graphs to float64."""
    if not isinstance(value, (int, float)):
        value = np.asarray(value)
    return Node("const", (), extra=value, shape=_shape_of(value))


def _binary(op, a, b):
    a, b = _as_node(a), _as_node(b)
    shape = np.broadcast_shapes(a.shape, b.shape)
    return Node(op, (a, b), shape=shape)


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def div(a, b):
    return _binary("div", a, b)


def neg(a):
    a = _as_node(a)
    return Node("neg", (a,), shape=a.shape)


def power(a, exponent):
    a = _as_node(a)
    return Node("pow", (a,), extra=float(exponent), shape=a.shape)


def log(a):
    a = _as_node(a)
    return Node("log", (a,), shape=a.shape)


def exp(a):
    a = _as_node(a)
    return Node("exp", (a,), shape=a.shape)


def sqrt(a):
    a = _as_node(a)
    return Node("sqrt", (a,), shape=a.shape)


def tanh(a):
    a = _as_node(a)
    return Node("tanh", (a,), shape=a.shape)


def gelu(a):
    a = _as_node(a)
    return Node("gelu", (a,), shape=a.shape)


def stop_gradient(a):
    a = _as_node(a)
    return Node("stop_gradient", (a,), shape=a.shape)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _reduced_shape(shape, axes, keepdims):
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_node(a)
    axes = _normalize_axes(axis, len(a.shape))
    return Node("sum", (a,), extra=(axes, keepdims),
                shape=_reduced_shape(a.shape, axes, keepdims))


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_node(a)
    axes = _normalize_axes(axis, len(a.shape))
    return Node("mean", (a,), extra=(axes, keepdims),
                shape=_reduced_shape(a.shape, axes, keepdims))


def reduce_max(a, axis=None, keepdims=False):
    a = _as_node(a)
    axes = _normalize_axes(axis, len(a.shape))
    return Node("amax", (a,), extra=(axes, keepdims),
                shape=_reduced_shape(a.shape, axes, keepdims))


def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    if len(a.shape) < 2 or len(b.shape) < 2:
        raise ValueError("matmul requires operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    shape = batch + (a.shape[-2], b.shape[-1])
    return Node("matmul", (a, b), shape=shape)


def reshape(a, shape):
    a = _as_node(a)
    target = tuple(shape)
    if int(np.prod(target, dtype=np.int64)) != int(np.prod(a.shape, dtype=np.int64)):
        raise ValueError(f"cannot reshape {a.shape} to {target}")
    return Node("reshape", (a,), extra=target, shape=target)


def transpose(a, axes):
    a = _as_node(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(len(a.shape))):
        raise ValueError(f"bad transpose axes {axes} for rank {len(a.shape)}")
    return Node("transpose", (a,), extra=axes,
                shape=tuple(a.shape[i] for i in axes))


def broadcast_to(a, shape):
    a = _as_node(a)
    target = tuple(shape)
    np.broadcast_shapes(a.shape, target)  # raises if incompatible
    return Node("broadcast_to", (a,), extra=target, shape=target)


def slice_(a, key):
    a = _as_node(a)
    if not isinstance(key, tuple):
        key = (key,)
    if any(not isinstance(k, slice) for k in key):
        raise ValueError("only slice objects are supported; reshape to drop axes")
    full = key + tuple(slice(None) for _ in range(len(a.shape) - len(key)))
    shape = tuple(len(range(*k.indices(s))) for k, s in zip(full, a.shape))
    return Node("slice", (a,), extra=full, shape=shape)


def concat(nodes, axis=0):
    nodes = [_as_node(n) for n in nodes]
    if not nodes:
        raise ValueError("concat of zero nodes")
    axis = axis % len(nodes[0].shape)
    base = list(nodes[0].shape)
    total = 0
    for n in nodes:
        if len(n.shape) != len(base):
            raise ValueError("concat rank mismatch")
        for i, (s0, s1) in enumerate(zip(base, n.shape)):
            if i != axis and s0 != s1:
                raise ValueError(f"concat shape mismatch on axis {i}")
        total += n.shape[axis]
    base[axis] = total
    return Node("concat", tuple(nodes), extra=axis, shape=tuple(base))


def softmax(a):
    """Softmax over the last axis, computed with max subtraction."""
    a = _as_node(a)
    return Node("softmax", (a,), shape=a.shape)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Layer normalization over the last axis (mean 0, variance 1, then affine)."""
    x, gamma, beta = _as_node(x), _as_node(gamma), _as_node(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError("layer_norm affine params must be 1-D of the feature size")
    return Node("layer_norm", (x, gamma, beta), extra=float(eps), shape=x.shape)


def cosine_similarity(a, b):
    """Cosine similarity over the last axis. Zero-norm inputs are an error."""
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ValueError("cosine_similarity operands must share a shape")
    return Node("cosine_sim", (a, b), shape=a.shape[:-1])


def index_rows(table, idx):
    """Select rows of a 2-D table: out[..., :] = table[idx[...], :].

    ``idx`` is a fixed integer array; gradients scatter-add into the table.
    """
    table = _as_node(table)
    idx = np.asarray(idx, dtype=np.intp)
    if len(table.shape) != 2:
        raise ValueError("index_rows expects a 2-D table")
    return Node("index_rows", (table,), extra=idx, shape=idx.shape + (table.shape[1],))


def gather_tokens(x, idx):
    """Per-sample token selection: out[b, m, :] = x[b, idx[b, m], :]."""
    x = _as_node(x)
    idx = np.asarray(idx, dtype=np.intp)
    if len(x.shape) != 3 or idx.ndim != 2:
        raise ValueError("gather_tokens expects x (B,L,D) and idx (B,M)")
    if idx.shape[0] != x.shape[0]:
        raise ValueError("gather_tokens batch sizes differ")
    return Node("gather_tokens", (x,), extra=idx,
                shape=(x.shape[0], idx.shape[1], x.shape[2]))


# ---------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------

def topo_order(root):
    """Deterministic postorder over the DAG below ``root``."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for arg in reversed(node.args):
            stack.append((arg, False))
    return order


def _rows2d(x):
    x = np.ascontiguousarray(x)
    return x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x


def _forward(node, vals, env, aux):
    op = node.op
    a = node.args
    if op == "leaf":
        try:
            v = env[node.extra]
        except KeyError:
            raise GraphError(f"unbound leaf '{node.extra}'") from None
        if _shape_of(v) != node.shape:
            raise GraphError(
                f"leaf '{node.extra}' bound with shape {_shape_of(v)}, declared {node.shape}")
        return np.asarray(v)
    if op == "const":
        return node.extra
    x = vals[a[0].id] if a else None
    if op == "add":
        return x + vals[a[1].id]
    if op == "sub":
        return x - vals[a[1].id]
    if op == "mul":
        return x * vals[a[1].id]
    if op == "div":
        return x / vals[a[1].id]
    if op == "neg":
        return -x
    if op == "pow":
        return x ** node.extra
    if op == "log":
        return np.log(x)
    if op == "exp":
        return np.exp(x)
    if op == "sqrt":
        return np.sqrt(x)
    if op == "tanh":
        return np.tanh(x)
    if op == "gelu":
        y = kernels.gelu_fwd(_rows2d(x))
        return y.reshape(node.shape)
    if op == "stop_gradient":
        return x
    if op in ("sum", "mean", "amax"):
        axes, keepdims = node.extra
        fn = {"sum": np.sum, "mean": np.mean, "amax": np.max}[op]
        return fn(x, axis=axes, keepdims=keepdims)
    if op == "matmul":
        return x @ vals[a[1].id]
    if op == "reshape":
        return np.reshape(x, node.extra)
    if op == "transpose":
        return np.transpose(x, node.extra)
    if op == "broadcast_to":
        return np.broadcast_to(x, node.extra)
    if op == "slice":
        return x[node.extra]
    if op == "concat":
        return np.concatenate([vals[n.id] for n in a], axis=node.extra)
    if op == "softmax":
        p = kernels.softmax_fwd(_rows2d(x))
        return p.reshape(node.shape)
    if op == "layer_norm":
        gamma, beta = vals[a[1].id], vals[a[2].id]
        y, mean, rstd = kernels.layernorm_fwd(_rows2d(x), gamma, beta, node.extra)
        aux[node.id] = (mean, rstd)
        return y.reshape(node.shape)
    if op == "cosine_sim":
        b = vals[a[1].id]
        na = np.sqrt(np.sum(x * x, axis=-1))
        nb = np.sqrt(np.sum(b * b, axis=-1))
        if np.any(na == 0) or np.any(nb == 0):
            raise GraphError("cosine_similarity of a zero-norm vector")
        dot = np.sum(x * b, axis=-1)
        aux[node.id] = (na, nb, dot)
        return dot / (na * nb)
    if op == "index_rows":
        return vals[a[0].id][node.extra]
    if op == "gather_tokens":
        return np.take_along_axis(x, node.extra[:, :, None], axis=1)
    raise GraphError(f"unknown op '{op}'")


def _unbroadcast(g, shape):
    """Reduce a gradient computed at broadcast shape back to ``shape``."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _expand_reduced(g, in_shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def _backward(node, vals, aux, g):
    """Return per-argument gradient contributions (None where undefined)."""
    op = node.op
    a = node.args
    if op == "add":
        return (_unbroadcast(g, a[0].shape), _unbroadcast(g, a[1].shape))
    if op == "sub":
        return (_unbroadcast(g, a[0].shape), _unbroadcast(-g, a[1].shape))
    if op == "mul":
        va, vb = vals[a[0].id], vals[a[1].id]
        return (_unbroadcast(g * vb, a[0].shape), _unbroadcast(g * va, a[1].shape))
    if op == "div":
        va, vb = vals[a[0].id], vals[a[1].id]
        return (_unbroadcast(g / vb, a[0].shape),
                _unbroadcast(-g * va / (vb * vb), a[1].shape))
    if op == "neg":
        return (-g,)
    if op == "pow":
        c = node.extra
        return (g * c * vals[a[0].id] ** (c - 1.0),)
    if op == "log":
        return (g / vals[a[0].id],)
    if op == "exp":
        return (g * vals[node.id],)
    if op == "sqrt":
        return (g * 0.5 / vals[node.id],)
    if op == "tanh":
        y = vals[node.id]
        return (g * (1.0 - y * y),)
    if op == "gelu":
        gx = kernels.gelu_bwd(_rows2d(vals[a[0].id]), _rows2d(g))
        return (gx.reshape(a[0].shape),)
    if op == "stop_gradient":
        return (None,)
    if op == "sum":
        axes, keepdims = node.extra
        return (_expand_reduced(g, a[0].shape, axes, keepdims),)
    if op == "mean":
        axes, keepdims = node.extra
        count = 1
        for ax in axes:
            count *= a[0].shape[ax]
        return (_expand_reduced(g, a[0].shape, axes, keepdims) / count,)
    if op == "amax":
        axes, keepdims = node.extra
        x = vals[a[0].id]
        m = _expand_reduced(vals[node.id], a[0].shape, axes, keepdims)
        mask = (x == m)
        counts = np.sum(mask, axis=axes, keepdims=True)
        ge = _expand_reduced(g, a[0].shape, axes, keepdims)
        return (ge * mask / counts,)
    if op == "matmul":
        va, vb = vals[a[0].id], vals[a[1].id]
        ga = g @ np.swapaxes(vb, -1, -2)
        gb = np.swapaxes(va, -1, -2) @ g
        return (_unbroadcast(ga, a[0].shape), _unbroadcast(gb, a[1].shape))
    if op == "reshape":
        return (np.reshape(g, a[0].shape),)
    if op == "transpose":
        inv = np.argsort(node.extra)
        return (np.transpose(g, inv),)
    if op == "broadcast_to":
        return (_unbroadcast(g, a[0].shape),)
    if op == "slice":
        gx = np.zeros(a[0].shape, dtype=g.dtype)
        gx[node.extra] = g
        return (gx,)
    if op == "concat":
        axis = node.extra
        out, start = [], 0
        for n in a:
            stop = start + n.shape[axis]
            idx = tuple(slice(None) if i != axis else slice(start, stop)
                        for i in range(len(n.shape)))
            out.append(np.ascontiguousarray(g[idx]))
            start = stop
        return tuple(out)
    if op == "softmax":
        p = vals[node.id]
        gx = kernels.softmax_bwd(_rows2d(p), _rows2d(g))
        return (gx.reshape(a[0].shape),)
    if op == "layer_norm":
        mean, rstd = aux[node.id]
        x = _rows2d(vals[a[0].id])
        gamma = vals[a[1].id]
        gx, dgamma, dbeta = kernels.layernorm_bwd(x, gamma, mean, rstd, _rows2d(g))
        return (gx.reshape(a[0].shape), dgamma, dbeta)
    if op == "cosine_sim":
        va, vb = vals[a[0].id], vals[a[1].id]
        na, nb, dot = aux[node.id]
        c = vals[node.id]
        ge = g[..., None]
        ga = ge * (vb / (na * nb)[..., None] - (c / (na * na))[..., None] * va)
        gb = ge * (va / (na * nb)[..., None] - (c / (nb * nb))[..., None] * vb)
        return (ga, gb)
    if op == "index_rows":
        gt = np.zeros(a[0].shape, dtype=g.dtype)
        np.add.at(gt, node.extra.ravel(), g.reshape(-1, a[0].shape[1]))
        return (gt,)
    if op == "gather_tokens":
        gx = np.zeros(a[0].shape, dtype=g.dtype)
        b_idx = np.arange(a[0].shape[0])[:, None]
        np.add.at(gx, (b_idx, node.extra), g)
        return (gx,)
    raise GraphError(f"no gradient rule for op '{op}'")


_NO_GRAD_FWD = frozenset(["leaf", "const"])


def evaluate(root, env, check_finite=True):
    """Evaluate ``root`` given leaf bindings; pure, leaves untouched."""
    vals, aux = {}, {}
    for node in topo_order(root):
        v = _forward(node, vals, env, aux)
        if check_finite and not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite value produced by {node!r}")
        vals[node.id] = v
    return vals[root.id]


def value_and_grad(root, env, wrt, check_finite=True):
    """Forward + reverse pass; returns (root value, {leaf name: gradient}).

    ``wrt`` is an iterable of leaf names or leaf nodes. The root must be
    scalar. Leaves the root does not depend on get zero gradients.
    """
    if root.shape != ():
        raise GraphError(f"gradient requires a scalar root, got shape {root.shape}")
    shape_hints = {}
    names = []
    for w in wrt:
        if isinstance(w, Node):
            if w.op != "leaf":
                raise GraphError("wrt nodes must be leaves")
            shape_hints[w.extra] = w.shape
            names.append(w.extra)
        else:
            names.append(w)
    wrt = names
    order = topo_order(root)
    vals, aux = {}, {}
    for node in order:
        v = _forward(node, vals, env, aux)
        if check_finite and not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite value produced by {node!r}")
        vals[node.id] = v

    root_val = vals[root.id]
    grads = {root.id: np.asarray(np.ones_like(root_val))}
    leaf_grads = {}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.op == "leaf":
            if node.extra in leaf_grads:
                leaf_grads[node.extra] = leaf_grads[node.extra] + g
            else:
                leaf_grads[node.extra] = g
            continue
        if node.op in _NO_GRAD_FWD or not node.args:
            continue
        contribs = _backward(node, vals, aux, g)
        for arg, contrib in zip(node.args, contribs):
            if contrib is None or arg.op == "const":
                continue
            if arg.id in grads:
                grads[arg.id] = grads[arg.id] + contrib
            else:
                grads[arg.id] = contrib

    out = {}
    for name in wrt:
        found = leaf_grads.get(name)
        if found is None:
            shape = _leaf_shape(order, name)
            if shape is None:
                shape = shape_hints.get(name)
            if shape is None and name in env:
                shape = _shape_of(env[name])
            if shape is None:
                raise GraphError(f"leaf '{name}' does not appear in the graph")
            found = np.zeros(shape, dtype=np.asarray(root_val).dtype)
        out[name] = found
    return root_val, out


def _leaf_shape(order, name):
    for node in order:
        if node.op == "leaf" and node.extra == name:
            return node.shape
    return None


def gradient(root, env, wrt, check_finite=True):
    """d(root)/d(leaf) for each requested leaf, by reverse accumulation."""
    _, grads = value_and_grad(root, env, wrt, check_finite=check_finite)
    return grads


def finite_difference_gradient(root, env, leaf_name, epsilon=1e-5, coords=None):
    """Central-difference gradient oracle: (f(x+eps) - f(x-eps)) / (2 eps).

    Perturbs one coordinate of ``leaf_name`` at a time. With ``coords``
    (flat indices), only those entries are computed and the rest are NaN.
    Use float64 bindings; float32 finite differences are unreliable.
    """
    if root.shape != ():
        raise GraphError("finite differences require a scalar root")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = np.array(env[leaf_name], dtype=np.float64, copy=True)
    work = dict(env)
    flat_coords = range(base.size) if coords is None else coords
    out = np.full(base.size, np.nan)
    flat = base.ravel()
    for c in flat_coords:
        orig = flat[c]
        flat[c] = orig + epsilon
        work[leaf_name] = base
        f_plus = evaluate(root, work)
        flat[c] = orig - epsilon
        f_minus = evaluate(root, work)
        flat[c] = orig
        out[c] = (f_plus - f_minus) / (2.0 * epsilon)
    return out.reshape(base.shape)
