"""A small reverse-mode tape over numpy arrays.

Each primitive carries a hand-written vector-Jacobian product expressed in
terms of other primitives, so passing ``create_graph=True`` to :func:`grad`
records the backward pass itself and second derivatives (needed for force
matching) come out of the same machinery.

Counting mode attributes multiply-accumulate counts of every forward
primitive to the innermost active :func:`block`.
"""

from __future__ import annotations

import contextlib
import time
from collections import defaultdict

import numpy as np

from . import numerics

_state = {
    "grad": True,
    "counting": None,   # defaultdict(int) while counting
    "timers": None,     # defaultdict(float) while timing
    "block": [],
    "suspend_count": 0,
}


class Tensor:
    __slots__ = ("data", "parents", "vjp", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = ()
        self.vjp = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
    return out


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def _suspend_counting():
    _state["suspend_count"] += 1
    try:
        yield
    finally:
        _state["suspend_count"] -= 1


@contextlib.contextmanager
def counting():
    """Enable MAC counting; yields the live counter dict."""
    prev = _state["counting"]
    counts = defaultdict(int)
    _state["counting"] = counts
    try:
        yield counts
    finally:
        _state["counting"] = prev


def counting_enabled() -> bool:
    return _state["counting"] is not None


@contextlib.contextmanager
def timing():
    """Enable scoped block timers; yields the live timer dict (seconds)."""
    prev = _state["timers"]
    timers = defaultdict(float)
    _state["timers"] = timers
    try:
        yield timers
    finally:
        _state["timers"] = prev


@contextlib.contextmanager
def block(name: str):
    """Attribute counts and wall time inside the context to `name`.

    Counts go to the innermost block name. Timers are keyed by the full
    nesting path (``"outer/inner"``), so top-level keys never double count.
    """
    _state["block"].append(name)
    timers = _state["timers"]
    key = "/".join(_state["block"])
    t0 = time.perf_counter_ns() if timers is not None else 0
    try:
        yield
    finally:
        if timers is not None:
            timers[key] += (time.perf_counter_ns() - t0) * 1e-9
        _state["block"].pop()


def add_count(n: int):
    counts = _state["counting"]
    if counts is not None and not _state["suspend_count"]:
        name = _state["block"][-1] if _state["block"] else "other"
        counts[name] += int(n)


def _unbroadcast(g: Tensor, shape) -> Tensor:
    if g.shape == tuple(shape):
        return g
    return sum_to(g, shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)))


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    add_count(out.size)
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
                            _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    add_count(out.size)

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb
    return _node(out, (a, b), vjp)


def sin(a):
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a):
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def exp(a):
    a = as_tensor(a)
    out = _node(np.exp(a.data), (a,), None)
    if out.requires_grad:
        out.vjp = lambda g: (mul(g, out),)
    return out


def sqrt(a):
    a = as_tensor(a)
    out = _node(np.sqrt(a.data), (a,), None)
    if out.requires_grad:
        out.vjp = lambda g: (div(mul(g, 0.5), out),)
    return out


def sigmoid(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = _node(s, (a,), None)
    if out.requires_grad:
        out.vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def silu(a):
    a = as_tensor(a)
    return mul(a, sigmoid(a))


def where(mask, a, b):
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    zero = np.zeros(())
    return _node(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(where(mask, g, zero), a.shape),
                            _unbroadcast(where(mask, zero, g), b.shape)))


def quantize(a, fmt):
    """Round onto `fmt`; the adjoint is rounded onto the same format."""
    fmt = numerics.get_format(fmt)
    a = as_tensor(a)
    if fmt.name == "fp64":
        return a
    return _node(numerics.quantize(a.data, fmt), (a,), lambda g: (quantize(g, fmt),))


# ---------------------------------------------------------------- shape ops

def sum_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1)
    out = a.data.sum(axis=axes, keepdims=True) if axes else a.data
    out = out.reshape(shape)
    return _node(out, (a,), lambda g: (broadcast_to(g, a.shape),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (sum_to(g, a.shape),))


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            shape = [1 if i in axes else s for i, s in enumerate(a.shape)]
            g = reshape(g, tuple(shape))
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)
    return _node(out, (a,), vjp)


def getitem(a, idx):
    a = as_tensor(a)
    return _node(a.data[idx], (a,), lambda g: (_index_add_into(g, idx, a.shape),))


def _index_add_into(g, idx, shape):
    g = as_tensor(g)
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)
    return _node(out, (g,), lambda h: (getitem(h, idx),))


def concatenate(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        grads = []
        for k, t in enumerate(tensors):
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(int(bounds[k]), int(bounds[k + 1]))
            grads.append(getitem(g, tuple(sl)) if t.requires_grad else None)
        return tuple(grads)
    return _node(out, tuple(tensors), vjp)


def stack(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else tensors[0].ndim + 1 + axis
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(ax, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concatenate(expanded, axis=ax)


# ---------------------------------------------------------------- gather / scatter

def take(a, index, fmt=numerics.FP64):
    """Rows ``a[index]``; the adjoint is a scatter-add in format `fmt`."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    return _node(a.data[index], (a,),
                 lambda g: (scatter_add(g, index, a.shape[0], fmt),))


def _segment_ranks(index, n):
    """Position of each entry within its destination segment (stable)."""
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    starts = np.searchsorted(sorted_idx, np.arange(n))
    ranks = np.empty(index.size, dtype=np.intp)
    ranks[order] = np.arange(index.size) - starts[sorted_idx]
    return ranks


def scatter_add(a, index, n, fmt=numerics.FP64, order=None):
    """Sum rows of `a` into `n` bins ``out[index[e]] += a[e]``.

    For reduced accumulation formats the running sums are rounded to `fmt`
    after every addition, processing contributions to each bin in the order
    given by `order` (a permutation of rows; default: row order).
    """
    a = as_tensor(a)
    fmt = numerics.get_format(fmt)
    index = np.asarray(index, dtype=np.intp)
    if order is not None:
        order = np.asarray(order, dtype=np.intp)
        data, idx = a.data[order], index[order]
    else:
        data, idx = a.data, index
    out = np.zeros((n,) + a.shape[1:])
    add_count(a.size)
    if idx.size:
        if fmt.name == "fp64":
            ranks = _segment_ranks(idx, n)
            # rank-ordered sequential accumulation keeps the summation order
            # independent of how rows are laid out
            for r in range(int(ranks.max()) + 1):
                sel = ranks == r
                out[idx[sel]] += data[sel]
        else:
            ranks = _segment_ranks(idx, n)
            for r in range(int(ranks.max()) + 1):
                sel = ranks == r
                dst = idx[sel]
                out[dst] = numerics.quantize(out[dst] + data[sel], fmt)
    return _node(out, (a,), lambda g: (take(g, index, fmt),))


def gather_last(a, index):
    """``a[..., index]``; the adjoint is :func:`segment_sum_last`."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[-1]
    return _node(a.data[..., index], (a,), lambda g: (segment_sum_last(g, index, n),))


def segment_sum_last(a, segment, n):
    """Sum entries of the last axis into `n` bins given by `segment`.

    Bins are summed in increasing position order within each bin (stable
    sort), so the result does not depend on anything but the layout of `a`.
    """
    a = as_tensor(a)
    segment = np.asarray(segment, dtype=np.intp)
    order = np.argsort(segment, kind="stable")
    seg_sorted = segment[order]
    present, starts = np.unique(seg_sorted, return_index=True)
    out = np.zeros(a.shape[:-1] + (n,))
    if segment.size:
        add_count(a.size)
        out[..., present] = np.add.reduceat(a.data[..., order], starts, axis=-1)
    return _node(out, (a,), lambda g: (gather_last(g, segment),))


# ---------------------------------------------------------------- einsum

_path_cache = {}


def _parse_subscripts(subscripts, nops):
    lhs, _, rhs = subscripts.replace(" ", "").partition("->")
    ins = lhs.split(",")
    if len(ins) != nops:
        raise ValueError("operand count mismatch")
    for s in ins:
        if len(set(s)) != len(s):
            raise ValueError("repeated index within an operand is not supported")
    return ins, rhs


def _einsum_macs(ins, out, dims, path):
    """MAC count of executing the contraction along `path`."""
    if path is None:
        n = 1
        for c in set("".join(ins)):
            n *= dims[c]
        return n
    ops = [set(s) for s in ins]
    total = 0
    for step in path:
        step = sorted(step, reverse=True)
        involved = set().union(*(ops[i] for i in step))
        for i in step:
            ops.pop(i)
        n = 1
        for c in involved:
            n *= dims[c]
        total += n
        keep = set(out).union(*ops) if ops else set(out)
        ops.append(involved & keep)
    return total


def einsum(subscripts, *operands, optimize=True):
    """Differentiable einsum.

    ``optimize=False`` executes the naive nested loop (every index of every
    operand in one loop nest); otherwise a cached greedy pairwise path is used.
    """
    ops = [as_tensor(o) for o in operands]
    ins, out_sub = _parse_subscripts(subscripts, len(ops))
    dims = {}
    for s, o in zip(ins, ops):
        for c, n in zip(s, o.shape):
            dims[c] = n
    if optimize and len(ops) > 1:
        key = (subscripts, tuple(o.shape for o in ops))
        path = _path_cache.get(key)
        if path is None:
            path = np.einsum_path(subscripts, *[o.data for o in ops], optimize="greedy")[0]
            _path_cache[key] = path
        data = np.einsum(subscripts, *[o.data for o in ops], optimize=path)
        if counting_enabled():
            add_count(_einsum_macs(ins, out_sub, dims, [tuple(p) for p in path[1:]]))
    else:
        data = np.einsum(subscripts, *[o.data for o in ops], optimize=False)
        if counting_enabled():
            add_count(_einsum_macs(ins, out_sub, dims, None))

    def vjp(g):
        grads = []
        for i, t in enumerate(ops):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [ins[j] for j in range(len(ops)) if j != i]
            avail = set(out_sub).union(*others) if others else set(out_sub)
            target = "".join(c for c in ins[i] if c in avail)
            sub_ = ",".join([out_sub] + others) + "->" + target
            gi = einsum(sub_, g, *[ops[j] for j in range(len(ops)) if j != i],
                        optimize=optimize)
            if target != ins[i]:
                shape = tuple(dims[c] if c in avail else 1 for c in ins[i])
                gi = broadcast_to(reshape(gi, shape), t.shape)
            grads.append(gi)
        return tuple(grads)
    return _node(data, tuple(ops), vjp)


def matmul(a, b):
    """``a @ b`` for a 2-D weight `b`; `a` may have leading batch axes."""
    a = as_tensor(a)
    lead = "abcdefgh"[:a.ndim - 1]
    return einsum(f"{lead}i,ij->{lead}j", a, b)


# ---------------------------------------------------------------- driver

def _toposort(root: Tensor):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(output, inputs, grad_output=None, create_graph=False):
    """Gradients of `output` with respect to each tensor in `inputs`.

    Unreached inputs get zero gradients. With ``create_graph=True`` the
    returned tensors are themselves differentiable.
    """
    output = as_tensor(output)
    single = isinstance(inputs, Tensor)
    if single:
        inputs = [inputs]
    if grad_output is None:
        grad_output = np.ones(output.shape)
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx, _suspend_counting():
        grads = {id(output): as_tensor(grad_output)}
        if output.requires_grad:
            for node in reversed(_toposort(output)):
                g = grads.get(id(node))
                if g is None or node.vjp is None:
                    continue
                for p, gp in zip(node.parents, node.vjp(g)):
                    if gp is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = gp if prev is None else add(prev, gp)
        result = []
        for x in inputs:
            g = grads.get(id(x))
            result.append(g if g is not None else Tensor(np.zeros(x.shape)))
    return result[0] if single else result
