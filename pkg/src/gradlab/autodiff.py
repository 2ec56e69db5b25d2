"""Reverse-mode automatic differentiation on an append-only tape.

Every primitive evaluation appends one node to a Tape. Backward passes are
built out of the same primitives and recorded on the same tape, so a gradient
is itself a differentiable quantity: call grad once with differentiable=True,
build a scalar from the returned nodes, and call grad again. This is what
makes input-gradient penalties trainable.

Piecewise-linear kinks follow the conventions fixed at recording time: relu
uses the activity mask of the recorded point (zero at the kink), abs uses the
recorded sign (zero at zero), max-pool uses the recorded argmax mask. All of
these enter backward passes as constants, so they contribute nothing at
second order.
"""

from __future__ import annotations

import gc

import numpy as np

from . import tensor as tc
from .tensor import ConvGeometry, Tensor


class Node:
    """One recorded value on a tape."""

    __slots__ = ("tape", "idx", "op", "parents", "value", "aux")

    def __init__(self, tape, idx, op, parents, value, aux):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.parents = parents
        self.value = value
        self.aux = aux

    @property
    def shape(self):
        return self.value.shape

    @property
    def tensor(self) -> Tensor:
        return Tensor._wrap(self.value)

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a scalar node, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    # arithmetic sugar; constants are lifted onto the same tape
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self) if isinstance(other, Node) else add(neg(self), other)

    def __truediv__(self, other):
        other = _lift(self.tape, other)
        return mul(self, powc(other, -1.0))

    def __pow__(self, p):
        return powc(self, p)

    def sum(self, axis=None):
        return nsum(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Node(#{self.idx} {self.op} shape={self.shape})"


class Tape:
    """Append-only record of a computation.

    Replaying re-evaluates every non-leaf node from its parents in recording
    order; with unchanged inputs the replay reproduces every stored value
    bit-exactly.
    """

    def __init__(self):
        gc.collect(0)
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def release(self):
        """Drop the recorded graph so memory returns via reference counting.

        Tape and nodes refer to each other, so a dropped tape otherwise waits
        for the cyclic collector, which is far too slow for loops that record
        hundreds of megabytes per step. After release the tape is dead:
        replay and grad on its nodes are invalid. The collect(0) on
        construction sweeps recently dropped tapes for callers that do not
        release explicitly.
        """
        self.nodes.clear()

    def input(self, value) -> Node:
        return self._leaf("input", value)

    def const(self, value) -> Node:
        return self._leaf("const", value)

    def _leaf(self, op, value):
        a = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), op, (), a, None)
        self.nodes.append(node)
        return node

    def replay(self, overrides=None) -> list:
        """Recompute all node values in order; returns the list of arrays.

        overrides maps input nodes to replacement values (value-level replay
        only; recorded aux like relu masks is not refreshed).
        """
        overrides = overrides or {}
        vals = []
        for node in self.nodes:
            if not node.parents:
                v = np.asarray(overrides.get(node, node.value), dtype=np.float64)
            else:
                v = _F[node.op]([vals[p.idx] for p in node.parents], node.aux)
            vals.append(v)
        return vals


def _lift(tape, v) -> Node:
    if isinstance(v, Node):
        if v.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return v
    return tape.const(v)


def _tape_of(*vs):
    for v in vs:
        if isinstance(v, Node):
            return v.tape
    raise TypeError("at least one operand must be a Node")


def _record(tape, op, parents, aux=None) -> Node:
    value = _F[op]([p.value for p in parents], aux)
    node = Node(tape, len(tape.nodes), op, tuple(parents), value, aux)
    tape.nodes.append(node)
    return node


# -- forward evaluation rules (shared by recording and replay) ----------------

def _fwd_conv(vals, aux):
    x, k = vals
    if x.ndim == 3:
        return tc._conv_forward(x[None], k, aux["geom"])[0]
    return tc._conv_forward(x, k, aux["geom"])


def _fwd_conv_dx(vals, aux):
    g, k = vals
    if g.ndim == 3:
        return tc._conv_input_grad(g[None], k, aux["geom"], aux["in_hw"])[0]
    return tc._conv_input_grad(g, k, aux["geom"], aux["in_hw"])


def _fwd_conv_dk(vals, aux):
    x, g = vals
    if x.ndim == 3:
        x, g = x[None], g[None]
    return tc._conv_kernel_grad(x, g, aux["geom"], aux["k_hw"])


def _fwd_pow(vals, aux):
    v = np.power(vals[0], aux["p"])
    if not np.all(np.isfinite(v)):
        raise ValueError(f"pow with exponent {aux['p']} produced non-finite values")
    return v


def _fwd_log(vals, aux):
    v = np.log(vals[0])
    if not np.all(np.isfinite(v)):
        raise ValueError("log produced non-finite values")
    return v


_F = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "neg": lambda v, a: -v[0],
    "pow": _fwd_pow,
    "exp": lambda v, a: np.exp(v[0]),
    "log": _fwd_log,
    "sum": lambda v, a: v[0].sum(axis=a["axis"]),
    "reshape": lambda v, a: v[0].reshape(a["shape"]),
    "broadcast": lambda v, a: np.ascontiguousarray(np.broadcast_to(v[0], a["shape"])),
    "transpose": lambda v, a: np.ascontiguousarray(v[0].T),
    "matmul": lambda v, a: v[0] @ v[1],
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "abs": lambda v, a: np.abs(v[0]),
    "max": lambda v, a: v[0].max(axis=a["axis"]),
    "conv2d": _fwd_conv,
    "conv2d-dinput": _fwd_conv_dx,
    "conv2d-dkernel": _fwd_conv_dk,
    "avgpool": lambda v, a: tc._blocks(v[0], *_pg(v[0], a["mask"])).mean(axis=(-3, -1)),
    "maxpool": lambda v, a: tc._max_pool_and_mask(v[0], a["mask"])[0],
    "upsample": lambda v, a: tc._block_upsample(v[0], a["mask"]),
    "blocksum": lambda v, a: tc._block_sum(v[0], a["mask"]),
}


def _pg(a, mask):
    mh, mw, ho, wo = tc._pool_geometry(a.shape, mask, "avgpool")
    return mh, mw, ho, wo


# -- primitives ----------------------------------------------------------------

def add(a, b) -> Node:
    t = _tape_of(a, b)
    return _record(t, "add", (_lift(t, a), _lift(t, b)))


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    return _record(t, "sub", (_lift(t, a), _lift(t, b)))


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    return _record(t, "mul", (_lift(t, a), _lift(t, b)))


def neg(a: Node) -> Node:
    return _record(a.tape, "neg", (a,))


def powc(a: Node, p) -> Node:
    return _record(a.tape, "pow", (a,), {"p": float(p)})


def exp(a: Node) -> Node:
    return _record(a.tape, "exp", (a,))


def log(a: Node) -> Node:
    return _record(a.tape, "log", (a,))


def nsum(a: Node, axis=None) -> Node:
    if axis is not None:
        axis = (axis,) if isinstance(axis, int) else tuple(axis)
        axis = tuple(ax % len(a.shape) for ax in axis)
    return _record(a.tape, "sum", (a,), {"axis": axis})


def reshape(a: Node, shape) -> Node:
    return _record(a.tape, "reshape", (a,), {"shape": tuple(shape), "from": a.shape})


def broadcast_to(a: Node, shape) -> Node:
    return _record(a.tape, "broadcast", (a,), {"shape": tuple(shape), "from": a.shape})


def transpose(a: Node) -> Node:
    if len(a.shape) != 2:
        raise ValueError(f"transpose expects a rank-2 node, got shape {a.shape}")
    return _record(a.tape, "transpose", (a,))


def matmul(a: Node, b: Node) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return _record(t, "matmul", (a, b))


def relu(a: Node) -> Node:
    node = _record(a.tape, "relu", (a,))
    node.aux = {"mask": (a.value > 0.0).astype(np.float64)}
    return node


def absv(a: Node) -> Node:
    node = _record(a.tape, "abs", (a,))
    node.aux = {"sign": np.sign(a.value)}
    return node


def vmax(a: Node, axis=None) -> Node:
    """Maximum over an axis (or all entries); ties route the gradient to the
    first maximal element."""
    ax = None if axis is None else int(axis) % len(a.shape)
    node = _record(a.tape, "max", (a,), {"axis": ax})
    v = a.value
    mask = np.zeros_like(v)
    if ax is None:
        mask.reshape(-1)[np.argmax(v)] = 1.0
    else:
        np.put_along_axis(mask, np.expand_dims(np.argmax(v, axis=ax), ax), 1.0, axis=ax)
    node.aux = {"axis": ax, "mask": mask}
    return node


def conv2d(x: Node, k: Node, geom: ConvGeometry) -> Node:
    t = _tape_of(x, k)
    x, k = _lift(t, x), _lift(t, k)
    aux = {"geom": geom, "in_hw": x.shape[-2:], "k_hw": k.shape[-2:]}
    return _record(t, "conv2d", (x, k), aux)


def conv2d_dinput(g: Node, k: Node, geom: ConvGeometry, in_hw) -> Node:
    t = _tape_of(g, k)
    g, k = _lift(t, g), _lift(t, k)
    aux = {"geom": geom, "in_hw": tuple(in_hw), "k_hw": k.shape[-2:]}
    return _record(t, "conv2d-dinput", (g, k), aux)


def conv2d_dkernel(x: Node, g: Node, geom: ConvGeometry, k_hw) -> Node:
    t = _tape_of(x, g)
    x, g = _lift(t, x), _lift(t, g)
    aux = {"geom": geom, "in_hw": x.shape[-2:], "k_hw": tuple(k_hw)}
    return _record(t, "conv2d-dkernel", (x, g), aux)


def avg_pool(a: Node, mask) -> Node:
    return _record(a.tape, "avgpool", (a,), {"mask": tc._pair(mask, "pool mask")})


def max_pool(a: Node, mask) -> Node:
    m = tc._pair(mask, "pool mask")
    node = _record(a.tape, "maxpool", (a,), {"mask": m})
    node.aux = {"mask": m, "argmask": tc._max_pool_and_mask(a.value, m)[1]}
    return node


def upsample(a: Node, mask) -> Node:
    return _record(a.tape, "upsample", (a,), {"mask": tc._pair(mask, "upsample mask")})


def block_sum(a: Node, mask) -> Node:
    return _record(a.tape, "blocksum", (a,), {"mask": tc._pair(mask, "pool mask")})


def detach(a: Node) -> Node:
    """Same value as a constant leaf: gradients do not flow through."""
    return a.tape.const(a.value)


# -- backward rules ------------------------------------------------------------
#
# Each rule maps (node, adjoint node, wanted flags) to one adjoint per parent,
# built from the primitives above so the result is differentiable in turn.
# None entries are skipped; the wanted flags let grad() prune adjoints for
# parents that cannot reach any requested node (this is what keeps
# input-gradient loops from paying for kernel adjoints).

def _unbroadcast(g: Node, shape) -> Node:
    if g.shape == tuple(shape):
        return g
    extra = len(g.shape) - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1)
    r = nsum(g, axis=axes) if axes else g
    return reshape(r, shape) if r.shape != tuple(shape) else r


def _vjp_sum(node, g, w):
    (a,) = node.parents
    axis = node.aux["axis"]
    if axis is None:
        return (broadcast_to(g, a.shape),)
    kd = list(a.shape)
    for ax in axis:
        kd[ax] = 1
    return (broadcast_to(reshape(g, kd), a.shape),)


def _vjp_pow(node, g, w):
    (a,) = node.parents
    p = node.aux["p"]
    if p == 1.0:
        return (g,)
    return (mul(g, mul(powc(a, p - 1.0), node.tape.const(p))),)


def _vjp_max(node, g):
    (a,) = node.parents
    ax = node.aux["axis"]
    if ax is not None:
        kd = list(a.shape)
        kd[ax] = 1
        g = reshape(g, kd)
    return mul(broadcast_to(g, a.shape), node.tape.const(node.aux["mask"]))


_VJP = {
    "add": lambda n, g, w: (_unbroadcast(g, n.parents[0].shape) if w[0] else None,
                            _unbroadcast(g, n.parents[1].shape) if w[1] else None),
    "sub": lambda n, g, w: (_unbroadcast(g, n.parents[0].shape) if w[0] else None,
                            _unbroadcast(neg(g), n.parents[1].shape) if w[1] else None),
    "mul": lambda n, g, w: (
        _unbroadcast(mul(g, n.parents[1]), n.parents[0].shape) if w[0] else None,
        _unbroadcast(mul(g, n.parents[0]), n.parents[1].shape) if w[1] else None),
    "neg": lambda n, g, w: (neg(g),),
    "pow": _vjp_pow,
    "exp": lambda n, g, w: (mul(g, n),),
    "log": lambda n, g, w: (mul(g, powc(n.parents[0], -1.0)),),
    "sum": _vjp_sum,
    "reshape": lambda n, g, w: (reshape(g, n.aux["from"]),),
    "broadcast": lambda n, g, w: (_unbroadcast(g, n.aux["from"]),),
    "transpose": lambda n, g, w: (transpose(g),),
    "matmul": lambda n, g, w: (
        matmul(g, transpose(n.parents[1])) if w[0] else None,
        matmul(transpose(n.parents[0]), g) if w[1] else None),
    "relu": lambda n, g, w: (mul(g, n.tape.const(n.aux["mask"])),),
    "abs": lambda n, g, w: (mul(g, n.tape.const(n.aux["sign"])),),
    "max": lambda n, g, w: (_vjp_max(n, g),),
    "conv2d": lambda n, g, w: (
        conv2d_dinput(g, n.parents[1], n.aux["geom"], n.aux["in_hw"]) if w[0] else None,
        conv2d_dkernel(n.parents[0], g, n.aux["geom"], n.aux["k_hw"]) if w[1] else None),
    "conv2d-dinput": lambda n, g, w: (
        conv2d(g, n.parents[1], n.aux["geom"]) if w[0] else None,
        conv2d_dkernel(g, n.parents[0], n.aux["geom"], n.aux["k_hw"]) if w[1] else None),
    "conv2d-dkernel": lambda n, g, w: (
        conv2d_dinput(n.parents[1], g, n.aux["geom"], n.aux["in_hw"]) if w[0] else None,
        conv2d(n.parents[0], g, n.aux["geom"]) if w[1] else None),
    "avgpool": lambda n, g, w: (mul(upsample(g, n.aux["mask"]),
                                    n.tape.const(1.0 / (n.aux["mask"][0] * n.aux["mask"][1]))),),
    "maxpool": lambda n, g, w: (mul(upsample(g, n.aux["mask"]),
                                    n.tape.const(n.aux["argmask"])),),
    "upsample": lambda n, g, w: (block_sum(g, n.aux["mask"]),),
    "blocksum": lambda n, g, w: (upsample(g, n.aux["mask"]),),
}


def grad(output: Node, wrt, differentiable: bool = False):
    """Reverse-accumulate d(output)/d(wrt) for a scalar output node.

    Args:
        output: scalar node to differentiate.
        wrt: a node or sequence of nodes to differentiate with respect to.
        differentiable: when True the returned map holds tape nodes, so a
            scalar built from them can be differentiated again; when False it
            holds plain tensors.

    Returns:
        dict mapping each requested node to its gradient. Nodes the output
        does not depend on get an exact zero gradient.

    The backward computation is always recorded on the tape; the flag only
    selects the return representation.
    """
    single = isinstance(wrt, Node)
    wrt_nodes = [wrt] if single else list(wrt)
    if output.value.shape != ():
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    tape = output.tape
    for w in wrt_nodes:
        if w.tape is not tape:
            raise ValueError("wrt node was recorded on a different tape")

    # nodes through which some wrt node is reachable; adjoints elsewhere are
    # never consumed, so they are not built
    reach = bytearray(output.idx + 1)
    for w in wrt_nodes:
        if w.idx <= output.idx:
            reach[w.idx] = 1
    for idx in range(output.idx + 1):
        if not reach[idx]:
            node = tape.nodes[idx]
            if any(reach[p.idx] for p in node.parents):
                reach[idx] = 1

    adj = {output.idx: tape.const(1.0)}
    for idx in range(output.idx, -1, -1):
        g = adj.get(idx)
        if g is None:
            continue
        node = tape.nodes[idx]
        if not node.parents:
            continue
        wanted = tuple(reach[p.idx] for p in node.parents)
        if not any(wanted):
            continue
        for p, pg in zip(node.parents, _VJP[node.op](node, g, wanted)):
            if pg is None:
                continue
            if pg.shape != p.shape:
                raise AssertionError(
                    f"adjoint shape {pg.shape} != parent shape {p.shape} for op {node.op}")
            cur = adj.get(p.idx)
            adj[p.idx] = pg if cur is None else add(cur, pg)

    out = {}
    for w in wrt_nodes:
        gw = adj.get(w.idx)
        if gw is None:
            gw = tape.const(np.zeros(w.shape))
        out[w] = gw if differentiable else Tensor._wrap(gw.value)
    return out


def finite_diff(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central finite differences of a scalar function at x (test oracle)."""
    base = np.array(x, dtype=np.float64)
    g = np.zeros_like(base)
    flat, gf = base.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base)))
        flat[i] = orig - h
        fm = float(f(Tensor(base)))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return Tensor._wrap(g)


def relu_activity(tape: Tape) -> list:
    """Active fractions of every relu recorded on the tape, in order."""
    return [float(n.aux["mask"].mean()) for n in tape.nodes if n.op == "relu"]
