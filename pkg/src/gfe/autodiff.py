"""Minimal reverse-mode differentiation tape over numpy arrays.

Covers exactly the primitives the decoder stack is built from (affine map,
ELU, sigmoid, BCE/L2 reductions) plus the elementary ops their derivative
rules are written in.  Because every derivative rule is itself expressed in
those same primitives, a reverse sweep can be recorded as a new graph and
differentiated again, which is how Hessian-vector products and mixed
parameter/latent second derivatives are obtained.

Conventions: all array values are float64 and 2-D (a single sample is a
1-row matrix); reductions produce python floats.  Elementwise kinks and
clip boundaries use closed-interval masks, so e.g. d/dx min(x, 0) is 1 at
x == 0.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Node",
    "ComputationRecord",
    "PassCounter",
    "UsageError",
    "grad_wrt_latent",
    "grad_wrt_params",
    "hessian_vector_latent",
    "mixed_grad_params",
    "affine",
    "elu",
    "sigmoid",
    "bce",
    "l2",
]


class UsageError(RuntimeError):
    """Raised when differentiation API calls violate their preconditions."""


class PassCounter:
    """Counts traversals of a recorded computation, as a compute proxy.

    One unit is one sweep over the model graph: a forward evaluation is 1,
    a reverse (gradient) sweep is 1, a second-order reverse sweep is 2
    because it walks the joined forward+gradient graph.
    """

    __slots__ = ("passes",)

    def __init__(self):
        self.passes = 0

    def add(self, n: int = 1):
        self.passes += n

    def __repr__(self):
        return f"PassCounter(passes={self.passes})"


class Node:
    """One value in a recorded computation."""

    __slots__ = ("value", "parents", "op", "ctx", "idx")
    _ids = itertools.count()

    def __init__(self, value, parents=(), op="leaf", ctx=None):
        self.value = value
        self.parents = parents
        self.op = op
        self.ctx = ctx
        self.idx = next(Node._ids)

    def __repr__(self):
        shape = getattr(self.value, "shape", ())
        return f"Node({self.op}, shape={shape})"


def _is_node(x):
    return isinstance(x, Node)


def _val(x):
    return x.value if isinstance(x, Node) else x


def _leaf(x):
    return x if isinstance(x, Node) else Node(x)


# ---------------------------------------------------------------------------
# Primitives.  Each works on Nodes (recording) or raw values (plain numpy);
# mixing is allowed and promotes to recording.  FORWARD re-executes an op
# from parent values (used by record replay), VJP maps an output cotangent
# to parent cotangents and is written in terms of these same primitives.
# ---------------------------------------------------------------------------

FORWARD = {}
VJP = {}


def _primitive(op, forward, vjp):
    FORWARD[op] = forward
    VJP[op] = vjp


def _apply(op, args, ctx=None):
    if any(_is_node(a) for a in args):
        parents = tuple(_leaf(a) for a in args)
        value = FORWARD[op]([p.value for p in parents], ctx)
        return Node(value, parents, op, ctx)
    return FORWARD[op](list(args), ctx)


def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def neg(a):
    return _apply("neg", (a,))


def mul(a, b):
    return _apply("mul", (a, b))


def smul(a, s):
    """Array times scalar, where the scalar may be a recorded float."""
    return _apply("smul", (a, s))


def scale(a, c: float):
    return _apply("scale", (a,), ctx=c)


def cadd(a, c: float):
    return _apply("cadd", (a,), ctx=c)


def cmul(a, arr):
    """Multiply by a constant (non-differentiated) array."""
    return _apply("cmul", (a,), ctx=arr)


def matmul(a, b):
    return _apply("matmul", (a, b))


def transpose(a):
    return _apply("transpose", (a,))


def add_rowvec(x, v):
    """Add a (1, n) row vector to every row of a (B, n) matrix."""
    return _apply("add_rowvec", (x, v))


def sum_rows(x):
    return _apply("sum_rows", (x,))


def brows(v, nrows: int):
    return _apply("brows", (v,), ctx=nrows)


def sum_all(x):
    return _apply("sum_all", (x,))


def bfill(s, shape):
    return _apply("bfill", (s,), ctx=tuple(shape))


def exp(a):
    return _apply("exp", (a,))


def log(a):
    return _apply("log", (a,))


def recip(a):
    return _apply("recip", (a,))


def clip(a, lo, hi):
    v = _val(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    mask = ((v >= lo_) & (v <= hi_)).astype(np.float64)
    return _apply("clip", (a,), ctx=(lo_, hi_, mask))


# VJP signature: (cotangent, out, ctx, *parents) -> parent cotangents.
# In graph mode `out` and parents are Nodes; in value mode raw values.

_primitive("add", lambda v, c: v[0] + v[1], lambda g, out, c, a, b: (g, g))
_primitive("sub", lambda v, c: v[0] - v[1], lambda g, out, c, a, b: (g, neg(g)))
_primitive("neg", lambda v, c: -v[0], lambda g, out, c, a: (neg(g),))
_primitive(
    "mul",
    lambda v, c: v[0] * v[1],
    lambda g, out, c, a, b: (mul(g, b), mul(g, a)),
)
_primitive(
    "smul",
    lambda v, c: v[0] * v[1],
    lambda g, out, c, a, s: (smul(g, s), sum_all(mul(g, a))),
)
_primitive("scale", lambda v, c: v[0] * c, lambda g, out, c, a: (scale(g, c),))
_primitive("cadd", lambda v, c: v[0] + c, lambda g, out, c, a: (g,))
_primitive("cmul", lambda v, c: v[0] * c, lambda g, out, c, a: (cmul(g, c),))
_primitive(
    "matmul",
    lambda v, c: v[0] @ v[1],
    lambda g, out, c, a, b: (matmul(g, transpose(b)), matmul(transpose(a), g)),
)
_primitive("transpose", lambda v, c: v[0].T.copy(), lambda g, out, c, a: (transpose(g),))
_primitive(
    "add_rowvec",
    lambda v, c: v[0] + v[1],
    lambda g, out, c, x, vv: (g, sum_rows(g)),
)
_primitive(
    "sum_rows",
    lambda v, c: v[0].sum(axis=0, keepdims=True),
    lambda g, out, c, x: (brows(g, _val(x).shape[0]),),
)
_primitive(
    "brows",
    lambda v, c: np.broadcast_to(v[0], (c, v[0].shape[1])).copy(),
    lambda g, out, c, vv: (sum_rows(g),),
)
_primitive(
    "sum_all",
    lambda v, c: float(v[0].sum()),
    lambda g, out, c, x: (bfill(g, _val(x).shape),),
)
_primitive(
    "bfill",
    lambda v, c: np.full(c, v[0]),
    lambda g, out, c, s: (sum_all(g),),
)


def _exp_fwd(v, c):
    with np.errstate(over="ignore"):
        return np.exp(v[0])


_primitive("exp", _exp_fwd, lambda g, out, c, a: (mul(g, out),))
_primitive("log", lambda v, c: np.log(v[0]), lambda g, out, c, a: (mul(g, recip(a)),))
_primitive(
    "recip",
    lambda v, c: 1.0 / v[0],
    lambda g, out, c, a: (neg(mul(g, mul(out, out))),),
)
_primitive(
    "clip",
    lambda v, c: np.clip(v[0], c[0], c[1]),
    lambda g, out, c, a: (cmul(g, c[2]),),
)


# ---------------------------------------------------------------------------
# Composite layers used by the decoder/encoder stacks.
# ---------------------------------------------------------------------------


def affine(x, w, b):
    """x @ w.T + b for x (B, n_in), w (n_out, n_in), b (1, n_out)."""
    return add_rowvec(matmul(x, transpose(w)), b)


def elu(x):
    """ELU with alpha = 1; the x >= 0 branch is linear."""
    xv = _val(x)
    mp = (xv >= 0.0).astype(np.float64)
    mn = 1.0 - mp
    en = exp(clip(x, None, 0.0))
    return add(cmul(x, mp), cmul(cadd(en, -1.0), mn))


def sigmoid(x):
    """Numerically stable sigmoid; never exponentiates a positive value."""
    xv = _val(x)
    mp = (xv >= 0.0).astype(np.float64)
    mn = 1.0 - mp
    epos = exp(clip(neg(x), None, 0.0))
    eneg = exp(clip(x, None, 0.0))
    spos = recip(cadd(epos, 1.0))
    sneg = mul(eneg, recip(cadd(eneg, 1.0)))
    return add(cmul(spos, mp), cmul(sneg, mn))


BCE_FLOOR = 1e-12


def bce(y, yhat):
    """Bernoulli cross-entropy, averaged over pixels, summed over rows.

    Predictions are clamped to [BCE_FLOOR, 1 - BCE_FLOOR] before the logs.
    `y` is constant data.
    """
    yv = np.asarray(_val(y), dtype=np.float64)
    npix = yv.shape[-1]
    c = clip(yhat, BCE_FLOOR, 1.0 - BCE_FLOOR)
    terms = add(cmul(log(c), yv), cmul(log(cadd(neg(c), 1.0)), 1.0 - yv))
    return scale(sum_all(terms), -1.0 / npix)


def l2(y, yhat):
    """Squared L2 distance summed over all entries; `y` is constant data."""
    d = sub(yhat, np.asarray(_val(y), dtype=np.float64))
    return sum_all(mul(d, d))


# ---------------------------------------------------------------------------
# Records and reverse sweeps.
# ---------------------------------------------------------------------------


class ComputationRecord:
    """A finalized forward evaluation ending in a scalar loss.

    Holds the input slots (latent node, parameter nodes) and the output
    node of the recorded graph.  All differentiation entry points below
    take a record; building one costs one forward pass on its counter.
    """

    def __init__(self, z_node, param_nodes, output, counter=None):
        if not isinstance(output, Node) or not np.isscalar(output.value):
            raise UsageError("record must end in a scalar loss node")
        self.z = z_node
        self.params = list(param_nodes)
        self.output = output
        self.counter = counter
        self._topo = _toposort(output)
        if counter is not None:
            counter.add(1)

    def replay(self):
        """Re-execute the recorded op list; returns the scalar output."""
        vals = {}
        for node in self._topo:
            if node.op == "leaf":
                vals[node.idx] = node.value
            else:
                vals[node.idx] = FORWARD[node.op](
                    [vals[p.idx] for p in node.parents], node.ctx
                )
        return vals[self.output.idx]

    def _count(self, n):
        if self.counter is not None:
            self.counter.add(n)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.idx in seen:
            continue
        seen.add(node.idx)
        stack.append((node, True))
        for p in node.parents:
            if p.idx not in seen:
                stack.append((p, False))
    return order


def _zero_like(v):
    if np.isscalar(v):
        return 0.0
    return np.zeros_like(v)


def _backward(root, seed, graph, topo=None):
    """Reverse sweep from a scalar root.

    graph=False propagates raw arrays (a plain gradient); graph=True calls
    the VJP rules with Nodes so the sweep itself is recorded and can be
    differentiated again.  Returns {node.idx: cotangent} for every node
    reached from the root.
    """
    if topo is None:
        topo = _toposort(root)
    cot = {root.idx: seed}
    for node in reversed(topo):
        g = cot.get(node.idx)
        if g is None or node.op == "leaf":
            continue
        if graph:
            parent_cots = VJP[node.op](g, node, node.ctx, *node.parents)
        else:
            parent_cots = VJP[node.op](
                g, node.value, node.ctx, *[p.value for p in node.parents]
            )
        for p, pc in zip(node.parents, parent_cots):
            prev = cot.get(p.idx)
            if prev is None:
                cot[p.idx] = pc
            elif graph:
                cot[p.idx] = add(prev, pc)
            else:
                cot[p.idx] = prev + pc
    return cot


def _check_record(record):
    if not isinstance(record, ComputationRecord):
        raise UsageError("expected a finalized ComputationRecord")


def grad_wrt_latent(record, seed: float = 1.0):
    """Gradient of the recorded scalar loss with respect to the latent input."""
    _check_record(record)
    cot = _backward(record.output, seed, graph=False, topo=record._topo)
    record._count(1)
    g = cot.get(record.z.idx)
    if g is None:
        g = np.zeros_like(record.z.value)
    return np.asarray(g).reshape(-1)


def grad_wrt_params(record):
    """Gradient with respect to every parameter slot, z held constant.

    Returns a list of arrays matching record.params order.
    """
    _check_record(record)
    cot = _backward(record.output, 1.0, graph=False, topo=record._topo)
    record._count(1)
    return [
        np.asarray(cot.get(p.idx, _zero_like(p.value))).reshape(p.value.shape)
        for p in record.params
    ]


def _second_order(record, lam):
    lam = np.asarray(lam, dtype=np.float64).reshape(record.z.value.shape)
    gcot = _backward(record.output, 1.0, graph=True, topo=record._topo)
    record._count(1)
    gz = gcot.get(record.z.idx)
    if gz is None:
        # output does not depend on z: both second-order products vanish
        return None, gcot
    s = sum_all(cmul(gz, lam))
    return s, gcot


def hessian_vector_latent(record, lam):
    """Hessian-vector product: d/dz <lam, grad_z loss>, lam held constant."""
    _check_record(record)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.size != record.z.value.size:
        raise UsageError(
            f"lambda has size {lam.size}, latent has size {record.z.value.size}"
        )
    s, _ = _second_order(record, lam)
    if s is None:
        record._count(2)
        return np.zeros(record.z.value.size)
    cot = _backward(s, 1.0, graph=False)
    record._count(2)
    h = cot.get(record.z.idx)
    if h is None:
        h = np.zeros_like(record.z.value)
    return np.asarray(h).reshape(-1)


def mixed_grad_params(record, lam):
    """Parameter gradient of <lam, grad_z loss> with lam constant.

    This is the integrand of the adjoint correction term: lam^T d_theta
    grad_z loss, returned in record.params order.
    """
    _check_record(record)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.size != record.z.value.size:
        raise UsageError(
            f"lambda has size {lam.size}, latent has size {record.z.value.size}"
        )
    s, _ = _second_order(record, lam)
    if s is None:
        record._count(2)
        return [np.zeros_like(p.value) for p in record.params]
    cot = _backward(s, 1.0, graph=False)
    record._count(2)
    return [
        np.asarray(cot.get(p.idx, _zero_like(p.value))).reshape(p.value.shape)
        for p in record.params
    ]
