"""Static computation graphs with reverse-mode and forward-mode derivatives.

A :class:`Graph` is a flat, insertion-ordered tape of primitive operations
over float64 arrays. Leaves are named and bound at evaluation time, so one
graph can be evaluated many times with different weights/inputs.

Three derivative modes are supported:

* ``gradient``  — reverse mode, for scalar losses;
* ``jvp``       — forward mode (dual evaluation), directional derivatives;
* graphs may contain ``jvp`` *nodes* (an inner graph evaluated in forward
  mode, recorded as a single differentiable primitive). ``gradient`` on
  such a graph runs reverse-over-forward: the dual evaluation of the inner
  graph is itself backpropagated, which needs second derivatives of each
  primitive. This covers losses built from PDE residuals without a full
  higher-order tape.

All data is float64. Broadcasting is restricted to two static patterns:
scalar-with-anything, and row-broadcast ``(n, m) op (m,)`` for bias adds
and gating.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping

import numpy as np
from scipy.special import expit as _sigmoid

__all__ = [
    "Graph",
    "GraphError",
    "Var",
    "evaluate",
    "gradient",
    "jvp",
    "tanh",
    "sigmoid",
    "concat",
    "slice_cols",
    "reshape",
    "reduce_sum",
    "sqnorm",
]


class GraphError(ValueError):
    """Raised for structural problems: unbound leaves, shape mismatches."""


class _Node:
    __slots__ = ("op", "inputs", "shape", "attrs")

    def __init__(self, op: str, inputs: tuple[int, ...], shape: tuple[int, ...], attrs=None):
        self.op = op
        self.inputs = inputs
        self.shape = shape
        self.attrs = attrs


class Var:
    """Handle to one node of a graph; supports arithmetic operators."""

    __slots__ = ("graph", "idx", "shape")

    def __init__(self, graph: "Graph", idx: int, shape: tuple[int, ...]):
        self.graph = graph
        self.idx = idx
        self.shape = shape

    def __add__(self, other: "Var") -> "Var":
        return self.graph._add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return self.graph._add(self, self.graph.affine(other, -1.0))

    def __mul__(self, other: "Var") -> "Var":
        return self.graph._mul(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return self.graph._matmul(self, other)

    def __neg__(self) -> "Var":
        return self.graph.affine(self, -1.0)


def _bcast_shape(sa: tuple, sb: tuple) -> tuple:
    """Allowed elementwise pairings: equal, scalar-any, (n,m) with (m,)."""
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    if len(sa) == 2 and sb == (sa[1],):
        return sa
    if len(sb) == 2 and sa == (sb[1],):
        return sb
    raise GraphError(f"incompatible shapes for elementwise op: {sa} vs {sb}")


def _unbroadcast(arr: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted cotangent back to the operand's shape."""
    if arr.shape == shape:
        return arr
    if shape == ():
        return np.asarray(arr.sum())
    # (n, m) reduced to (m,)
    return arr.sum(axis=0)


class Graph:
    """Append-only tape of primitive ops; immutable once ``output`` is set."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaf_ids: dict[str, int] = {}
        self.result: int | None = None

    # -- construction -----------------------------------------------------

    def _push(self, op, inputs, shape, attrs=None) -> Var:
        if self.result is not None:
            raise GraphError("graph is finalized; no further ops may be added")
        self.nodes.append(_Node(op, inputs, shape, attrs))
        return Var(self, len(self.nodes) - 1, shape)

    def leaf(self, name: str, shape: Iterable[int]) -> Var:
        if name in self.leaf_ids:
            raise GraphError(f"duplicate leaf name {name!r}")
        shape = tuple(int(s) for s in shape)
        v = self._push("leaf", (), shape, {"name": name})
        self.leaf_ids[name] = v.idx
        return v

    def const(self, value) -> Var:
        arr = np.asarray(value, dtype=np.float64)
        return self._push("const", (), arr.shape, {"value": arr})

    def _check(self, v: Var):
        if v.graph is not self:
            raise GraphError("operands belong to different graphs")

    def _add(self, a: Var, b: Var) -> Var:
        self._check(a), self._check(b)
        return self._push("add", (a.idx, b.idx), _bcast_shape(a.shape, b.shape))

    def _mul(self, a: Var, b: Var) -> Var:
        self._check(a), self._check(b)
        return self._push("mul", (a.idx, b.idx), _bcast_shape(a.shape, b.shape))

    def affine(self, a: Var, alpha: float, beta: float = 0.0) -> Var:
        self._check(a)
        return self._push("affine", (a.idx,), a.shape, {"alpha": float(alpha), "beta": float(beta)})

    def _matmul(self, a: Var, b: Var) -> Var:
        self._check(a), self._check(b)
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise GraphError(f"matmul shapes {a.shape} @ {b.shape}")
        return self._push("matmul", (a.idx, b.idx), (a.shape[0], b.shape[1]))

    def rowdot(self, x: Var, y: Var) -> Var:
        """Per-row contraction: (n, d) with (n, d, r) -> (n, r)."""
        self._check(x), self._check(y)
        if len(x.shape) != 2 or len(y.shape) != 3 or x.shape != y.shape[:2]:
            raise GraphError(f"rowdot shapes {x.shape} with {y.shape}")
        return self._push("rowdot", (x.idx, y.idx), (x.shape[0], y.shape[2]))

    def tanh(self, a: Var) -> Var:
        self._check(a)
        return self._push("tanh", (a.idx,), a.shape)

    def sigmoid(self, a: Var) -> Var:
        self._check(a)
        return self._push("sigmoid", (a.idx,), a.shape)

    def concat(self, parts: Iterable[Var], axis: int = -1) -> Var:
        parts = list(parts)
        for p in parts:
            self._check(p)
        nd = len(parts[0].shape)
        ax = axis % nd
        base = list(parts[0].shape)
        total = 0
        for p in parts:
            if len(p.shape) != nd:
                raise GraphError("concat rank mismatch")
            for d in range(nd):
                if d != ax and p.shape[d] != base[d]:
                    raise GraphError(f"concat shape mismatch: {p.shape} vs {tuple(base)}")
            total += p.shape[ax]
        base[ax] = total
        sizes = tuple(p.shape[ax] for p in parts)
        return self._push("concat", tuple(p.idx for p in parts), tuple(base), {"axis": ax, "sizes": sizes})

    def slice_cols(self, a: Var, j0: int, j1: int) -> Var:
        self._check(a)
        if len(a.shape) != 2 or not (0 <= j0 <= j1 <= a.shape[1]):
            raise GraphError(f"slice_cols [{j0}:{j1}] on shape {a.shape}")
        return self._push("slice_cols", (a.idx,), (a.shape[0], j1 - j0), {"j0": j0, "j1": j1})

    def reshape(self, a: Var, shape: Iterable[int]) -> Var:
        self._check(a)
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != math.prod(a.shape):
            raise GraphError(f"reshape {a.shape} -> {shape}")
        return self._push("reshape", (a.idx,), shape, {"from": a.shape})

    def reduce_sum(self, a: Var) -> Var:
        self._check(a)
        return self._push("sum", (a.idx,), ())

    def sqnorm(self, a: Var) -> Var:
        self._check(a)
        return self._push("sqnorm", (a.idx,), ())

    def jvp(self, inner: "Graph", bindings: Mapping[str, Var], tangents: Mapping[str, Var]) -> Var:
        """Record forward-mode evaluation of ``inner`` as one primitive.

        ``bindings`` supplies every inner leaf from outer nodes; ``tangents``
        seeds the directional derivative on a subset of them. The node's
        output is the tangent of the inner result, and it is differentiable
        with respect to all of its outer inputs.
        """
        if inner.result is None:
            raise GraphError("inner graph has no output")
        missing = set(inner.leaf_ids) - set(bindings)
        if missing:
            raise GraphError(f"jvp inner leaves unbound: {sorted(missing)}")
        bad = set(tangents) - set(inner.leaf_ids)
        if bad:
            raise GraphError(f"jvp tangents for unknown leaves: {sorted(bad)}")
        names = sorted(bindings)
        tnames = sorted(tangents)
        ids = []
        for n in names:
            v = bindings[n]
            self._check(v)
            want = inner.nodes[inner.leaf_ids[n]].shape
            if v.shape != want:
                raise GraphError(f"jvp binding {n!r}: shape {v.shape} != leaf {want}")
            ids.append(v.idx)
        for n in tnames:
            v = tangents[n]
            self._check(v)
            want = inner.nodes[inner.leaf_ids[n]].shape
            if v.shape != want:
                raise GraphError(f"jvp tangent {n!r}: shape {v.shape} != leaf {want}")
            ids.append(v.idx)
        out_shape = inner.nodes[inner.result].shape
        return self._push(
            "jvp", tuple(ids), out_shape,
            {"inner": inner, "names": tuple(names), "tnames": tuple(tnames)},
        )

    def output(self, v: Var) -> "Graph":
        self._check(v)
        self.result = v.idx
        return self


# module-level sugar mirroring the Graph methods ---------------------------

def tanh(a: Var) -> Var:
    return a.graph.tanh(a)


def sigmoid(a: Var) -> Var:
    return a.graph.sigmoid(a)


def concat(parts, axis: int = -1) -> Var:
    return parts[0].graph.concat(parts, axis)


def slice_cols(a: Var, j0: int, j1: int) -> Var:
    return a.graph.slice_cols(a, j0, j1)


def reshape(a: Var, shape) -> Var:
    return a.graph.reshape(a, shape)


def reduce_sum(a: Var) -> Var:
    return a.graph.reduce_sum(a)


def sqnorm(a: Var) -> Var:
    return a.graph.sqnorm(a)


# -- forward evaluation ----------------------------------------------------

def _leaf_value(node, bindings):
    name = node.attrs["name"]
    if name not in bindings:
        raise GraphError(f"unbound leaf {name!r}")
    v = np.asarray(bindings[name], dtype=np.float64)
    if v.shape != node.shape:
        raise GraphError(f"leaf {name!r}: bound shape {v.shape} != declared {node.shape}")
    return v


def _forward(g: Graph, bindings, check_finite: bool, jvp_cache: dict | None = None) -> list:
    vals = [None] * len(g.nodes)
    for i, nd in enumerate(g.nodes):
        op = nd.op
        if op == "leaf":
            v = _leaf_value(nd, bindings)
        elif op == "const":
            v = nd.attrs["value"]
        elif op == "add":
            v = vals[nd.inputs[0]] + vals[nd.inputs[1]]
        elif op == "mul":
            v = vals[nd.inputs[0]] * vals[nd.inputs[1]]
        elif op == "affine":
            v = nd.attrs["alpha"] * vals[nd.inputs[0]] + nd.attrs["beta"]
        elif op == "matmul":
            v = vals[nd.inputs[0]] @ vals[nd.inputs[1]]
        elif op == "rowdot":
            v = np.einsum("nd,ndr->nr", vals[nd.inputs[0]], vals[nd.inputs[1]])
        elif op == "tanh":
            v = np.tanh(vals[nd.inputs[0]])
        elif op == "sigmoid":
            v = _sigmoid(vals[nd.inputs[0]])
        elif op == "concat":
            v = np.concatenate([vals[j] for j in nd.inputs], axis=nd.attrs["axis"])
        elif op == "slice_cols":
            v = vals[nd.inputs[0]][:, nd.attrs["j0"]:nd.attrs["j1"]]
        elif op == "reshape":
            v = vals[nd.inputs[0]].reshape(nd.shape)
        elif op == "sum":
            v = np.asarray(vals[nd.inputs[0]].sum())
        elif op == "sqnorm":
            a = vals[nd.inputs[0]]
            v = np.asarray(np.vdot(a, a))
        elif op == "jvp":
            triple = _eval_jvp_node(nd, vals)
            if jvp_cache is not None:
                jvp_cache[i] = triple
            v = triple[2]
        else:  # pragma: no cover
            raise GraphError(f"unknown op {op}")
        if check_finite and not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite value at node {i} ({op})")
        vals[i] = np.asarray(v)
    return vals


def _eval_jvp_node(nd, vals):
    """Dual-evaluate the inner graph of a jvp node; return (pvals, tvals, out)."""
    inner: Graph = nd.attrs["inner"]
    names, tnames = nd.attrs["names"], nd.attrs["tnames"]
    b = {n: vals[nd.inputs[k]] for k, n in enumerate(names)}
    seeds = {n: vals[nd.inputs[len(names) + k]] for k, n in enumerate(tnames)}
    pvals, tvals = _forward_dual(inner, b, seeds)
    out = tvals[inner.result]
    if out is None:
        out = np.zeros(inner.nodes[inner.result].shape)
    return pvals, tvals, out


def _forward_dual(g: Graph, bindings, seeds) -> tuple[list, list]:
    """Forward evaluation carrying tangents; ``None`` tangent means zero."""
    pvals = [None] * len(g.nodes)
    tvals = [None] * len(g.nodes)
    for i, nd in enumerate(g.nodes):
        op = nd.op
        ins = nd.inputs
        if op == "leaf":
            pvals[i] = _leaf_value(nd, bindings)
            s = seeds.get(nd.attrs["name"])
            tvals[i] = None if s is None else np.asarray(s, dtype=np.float64)
            continue
        if op == "const":
            pvals[i] = nd.attrs["value"]
            continue
        if op == "add":
            a, b = ins
            pvals[i] = pvals[a] + pvals[b]
            ta, tb = tvals[a], tvals[b]
            if ta is None and tb is None:
                t = None
            elif ta is None:
                t = np.broadcast_to(tb, nd.shape) if tb.shape != nd.shape else tb
            elif tb is None:
                t = np.broadcast_to(ta, nd.shape) if ta.shape != nd.shape else ta
            else:
                t = ta + tb
            tvals[i] = t
        elif op == "mul":
            a, b = ins
            pa, pb = pvals[a], pvals[b]
            pvals[i] = pa * pb
            ta, tb = tvals[a], tvals[b]
            t = None
            if ta is not None:
                t = ta * pb
            if tb is not None:
                t = pa * tb if t is None else t + pa * tb
            tvals[i] = t
        elif op == "affine":
            (a,) = ins
            al = nd.attrs["alpha"]
            pvals[i] = al * pvals[a] + nd.attrs["beta"]
            tvals[i] = None if tvals[a] is None else al * tvals[a]
        elif op == "matmul":
            a, b = ins
            pa, pb = pvals[a], pvals[b]
            pvals[i] = pa @ pb
            ta, tb = tvals[a], tvals[b]
            t = None
            if ta is not None:
                t = ta @ pb
            if tb is not None:
                t = pa @ tb if t is None else t + pa @ tb
            tvals[i] = t
        elif op == "rowdot":
            a, b = ins
            pa, pb = pvals[a], pvals[b]
            pvals[i] = np.einsum("nd,ndr->nr", pa, pb)
            ta, tb = tvals[a], tvals[b]
            t = None
            if ta is not None:
                t = np.einsum("nd,ndr->nr", ta, pb)
            if tb is not None:
                u = np.einsum("nd,ndr->nr", pa, tb)
                t = u if t is None else t + u
            tvals[i] = t
        elif op == "tanh":
            (a,) = ins
            y = np.tanh(pvals[a])
            pvals[i] = y
            tvals[i] = None if tvals[a] is None else (1.0 - y * y) * tvals[a]
        elif op == "sigmoid":
            (a,) = ins
            s = _sigmoid(pvals[a])
            pvals[i] = s
            tvals[i] = None if tvals[a] is None else s * (1.0 - s) * tvals[a]
        elif op == "concat":
            ax = nd.attrs["axis"]
            pvals[i] = np.concatenate([pvals[j] for j in ins], axis=ax)
            if any(tvals[j] is not None for j in ins):
                parts = [
                    tvals[j] if tvals[j] is not None else np.zeros(g.nodes[j].shape)
                    for j in ins
                ]
                tvals[i] = np.concatenate(parts, axis=ax)
        elif op == "slice_cols":
            (a,) = ins
            j0, j1 = nd.attrs["j0"], nd.attrs["j1"]
            pvals[i] = pvals[a][:, j0:j1]
            tvals[i] = None if tvals[a] is None else tvals[a][:, j0:j1]
        elif op == "reshape":
            (a,) = ins
            pvals[i] = pvals[a].reshape(nd.shape)
            tvals[i] = None if tvals[a] is None else tvals[a].reshape(nd.shape)
        elif op == "sum":
            (a,) = ins
            pvals[i] = np.asarray(pvals[a].sum())
            tvals[i] = None if tvals[a] is None else np.asarray(tvals[a].sum())
        elif op == "sqnorm":
            (a,) = ins
            pa = pvals[a]
            pvals[i] = np.asarray(np.vdot(pa, pa))
            tvals[i] = None if tvals[a] is None else np.asarray(2.0 * np.vdot(pa, tvals[a]))
        elif op == "jvp":
            raise GraphError("nested jvp nodes are not supported")
        else:  # pragma: no cover
            raise GraphError(f"unknown op {op}")
    return pvals, tvals


# -- reverse mode -----------------------------------------------------------
#
# Cotangent stores track ownership: an "owned" entry is a freshly allocated
# array no other node aliases, so further contributions may be accumulated
# into it in place. Contributions that are views (concat/reshape/sum
# backward) or shared objects (add backward passes the output bar through)
# are stored un-owned and copied on first reuse.

class _Store:
    __slots__ = ("arr", "own")

    def __init__(self, n: int):
        self.arr = [None] * n
        self.own = [False] * n

    def acc(self, idx: int, contrib, fresh: bool):
        prev = self.arr[idx]
        if prev is None:
            self.arr[idx] = contrib
            self.own[idx] = fresh
        elif self.own[idx] and isinstance(prev, np.ndarray) and prev.ndim > 0:
            prev += contrib
        else:
            self.arr[idx] = prev + contrib
            self.own[idx] = True

    def acc_slice(self, idx: int, shape, j0: int, j1: int, bar):
        prev = self.arr[idx]
        if prev is None:
            full = np.zeros(shape)
            full[:, j0:j1] = bar
            self.arr[idx] = full
            self.own[idx] = True
        elif self.own[idx]:
            prev[:, j0:j1] += bar
        else:
            full = prev + 0.0
            full[:, j0:j1] += bar
            self.arr[idx] = full
            self.own[idx] = True


def _acc_elemwise(store: _Store, g: Graph, j: int, bar, other):
    """bar * other reduced to operand j's shape."""
    c = bar * other
    sh = g.nodes[j].shape
    if c.shape != sh:
        c = _unbroadcast(c, sh)
    store.acc(j, c, True)


def _backward(g: Graph, vals: list, store: _Store, jvp_cache: dict | None = None):
    """Accumulate cotangents through ``g`` given a seeded store."""
    bars = store.arr
    for i in range(len(g.nodes) - 1, -1, -1):
        bar = bars[i]
        if bar is None:
            continue
        nd = g.nodes[i]
        op = nd.op
        ins = nd.inputs
        if op in ("leaf", "const"):
            continue
        if op == "add":
            for j in ins:
                sh = g.nodes[j].shape
                if bar.shape != sh:
                    store.acc(j, _unbroadcast(bar, sh), True)
                else:
                    store.acc(j, bar, False)
        elif op == "mul":
            a, b = ins
            _acc_elemwise(store, g, a, bar, vals[b])
            _acc_elemwise(store, g, b, bar, vals[a])
        elif op == "affine":
            store.acc(ins[0], nd.attrs["alpha"] * bar, True)
        elif op == "matmul":
            a, b = ins
            store.acc(a, bar @ vals[b].T, True)
            store.acc(b, vals[a].T @ bar, True)
        elif op == "rowdot":
            a, b = ins
            store.acc(a, np.einsum("nr,ndr->nd", bar, vals[b]), True)
            store.acc(b, np.einsum("nd,nr->ndr", vals[a], bar), True)
        elif op == "tanh":
            y = vals[i]
            store.acc(ins[0], bar * (1.0 - y * y), True)
        elif op == "sigmoid":
            s = vals[i]
            store.acc(ins[0], bar * (s * (1.0 - s)), True)
        elif op == "concat":
            ax = nd.attrs["axis"]
            sel = [slice(None)] * len(nd.shape)
            off = 0
            for j, sz in zip(ins, nd.attrs["sizes"]):
                sel[ax] = slice(off, off + sz)
                store.acc(j, bar[tuple(sel)], False)
                off += sz
        elif op == "slice_cols":
            store.acc_slice(ins[0], g.nodes[ins[0]].shape,
                            nd.attrs["j0"], nd.attrs["j1"], bar)
        elif op == "reshape":
            store.acc(ins[0], bar.reshape(nd.attrs["from"]), False)
        elif op == "sum":
            store.acc(ins[0], np.broadcast_to(bar, g.nodes[ins[0]].shape), False)
        elif op == "sqnorm":
            store.acc(ins[0], 2.0 * bar * vals[ins[0]], True)
        elif op == "jvp":
            cached = jvp_cache.get(i) if jvp_cache is not None else None
            _backward_jvp_node(nd, vals, store, bar, cached)
        else:  # pragma: no cover
            raise GraphError(f"unknown op {op}")


def _backward_jvp_node(nd, vals: list, store: _Store, bar, cached=None):
    """Reverse-over-forward through one jvp node.

    Replays the inner dual evaluation (from cache when available) and
    backpropagates two cotangent streams — primal and tangent —
    simultaneously; primal cotangents of inner leaves flow to the outer
    binding nodes, tangent cotangents of seeded leaves flow to the outer
    direction nodes. The tangent-stream rules carry the second derivatives
    of each primitive.
    """
    inner: Graph = nd.attrs["inner"]
    names, tnames = nd.attrs["names"], nd.attrs["tnames"]
    pvals, tvals, _ = cached if cached is not None else _eval_jvp_node(nd, vals)
    n_inner = len(inner.nodes)
    ps = _Store(n_inner)
    ts = _Store(n_inner)
    ts.arr[inner.result] = bar
    pbar_l, tbar_l = ps.arr, ts.arr
    for i in range(n_inner - 1, -1, -1):
        pb, tb = pbar_l[i], tbar_l[i]
        if pb is None and tb is None:
            continue
        indn = inner.nodes[i]
        op = indn.op
        ins = indn.inputs
        if op in ("leaf", "const"):
            continue
        if op == "add":
            for j in ins:
                sh = inner.nodes[j].shape
                if pb is not None:
                    if pb.shape != sh:
                        ps.acc(j, _unbroadcast(pb, sh), True)
                    else:
                        ps.acc(j, pb, False)
                if tb is not None:
                    if tb.shape != sh:
                        ts.acc(j, _unbroadcast(tb, sh), True)
                    else:
                        ts.acc(j, tb, False)
        elif op == "mul":
            a, b = ins
            pa, pb_v = pvals[a], pvals[b]
            ta, tb_v = tvals[a], tvals[b]
            if pb is not None:
                _acc_elemwise(ps, inner, a, pb, pb_v)
                _acc_elemwise(ps, inner, b, pb, pa)
            if tb is not None:
                if tb_v is not None:
                    _acc_elemwise(ps, inner, a, tb, tb_v)
                if ta is not None:
                    _acc_elemwise(ps, inner, b, tb, ta)
                _acc_elemwise(ts, inner, a, tb, pb_v)
                _acc_elemwise(ts, inner, b, tb, pa)
        elif op == "affine":
            al = indn.attrs["alpha"]
            if pb is not None:
                ps.acc(ins[0], al * pb, True)
            if tb is not None:
                ts.acc(ins[0], al * tb, True)
        elif op == "matmul":
            a, b = ins
            pa, pb_v = pvals[a], pvals[b]
            ta, tb_v = tvals[a], tvals[b]
            if pb is not None:
                ps.acc(a, pb @ pb_v.T, True)
                ps.acc(b, pa.T @ pb, True)
            if tb is not None:
                if tb_v is not None:
                    ps.acc(a, tb @ tb_v.T, True)
                if ta is not None:
                    ps.acc(b, ta.T @ tb, True)
                ts.acc(a, tb @ pb_v.T, True)
                ts.acc(b, pa.T @ tb, True)
        elif op == "rowdot":
            a, b = ins
            pa, pb_v = pvals[a], pvals[b]
            ta, tb_v = tvals[a], tvals[b]
            if pb is not None:
                ps.acc(a, np.einsum("nr,ndr->nd", pb, pb_v), True)
                ps.acc(b, np.einsum("nd,nr->ndr", pa, pb), True)
            if tb is not None:
                if tb_v is not None:
                    ps.acc(a, np.einsum("nr,ndr->nd", tb, tb_v), True)
                if ta is not None:
                    ps.acc(b, np.einsum("nd,nr->ndr", ta, tb), True)
                ts.acc(a, np.einsum("nr,ndr->nd", tb, pb_v), True)
                ts.acc(b, np.einsum("nd,nr->ndr", pa, tb), True)
        elif op == "tanh":
            (a,) = ins
            y = pvals[i]
            d = 1.0 - y * y
            if pb is not None:
                ps.acc(a, pb * d, True)
            if tb is not None:
                if tvals[a] is not None:
                    ps.acc(a, tb * (-2.0 * y * d) * tvals[a], True)
                ts.acc(a, tb * d, True)
        elif op == "sigmoid":
            (a,) = ins
            s = pvals[i]
            d = s * (1.0 - s)
            if pb is not None:
                ps.acc(a, pb * d, True)
            if tb is not None:
                if tvals[a] is not None:
                    ps.acc(a, tb * (d * (1.0 - 2.0 * s)) * tvals[a], True)
                ts.acc(a, tb * d, True)
        elif op == "concat":
            ax = indn.attrs["axis"]
            sel = [slice(None)] * len(indn.shape)
            off = 0
            for j, sz in zip(ins, indn.attrs["sizes"]):
                sel[ax] = slice(off, off + sz)
                if pb is not None:
                    ps.acc(j, pb[tuple(sel)], False)
                if tb is not None:
                    ts.acc(j, tb[tuple(sel)], False)
                off += sz
        elif op == "slice_cols":
            (a,) = ins
            j0, j1 = indn.attrs["j0"], indn.attrs["j1"]
            sh = inner.nodes[a].shape
            if pb is not None:
                ps.acc_slice(a, sh, j0, j1, pb)
            if tb is not None:
                ts.acc_slice(a, sh, j0, j1, tb)
        elif op == "reshape":
            (a,) = ins
            frm = indn.attrs["from"]
            if pb is not None:
                ps.acc(a, pb.reshape(frm), False)
            if tb is not None:
                ts.acc(a, tb.reshape(frm), False)
        elif op == "sum":
            (a,) = ins
            sh = inner.nodes[a].shape
            if pb is not None:
                ps.acc(a, np.broadcast_to(pb, sh), False)
            if tb is not None:
                ts.acc(a, np.broadcast_to(tb, sh), False)
        elif op == "sqnorm":
            (a,) = ins
            if pb is not None:
                ps.acc(a, 2.0 * pb * pvals[a], True)
            if tb is not None:
                if tvals[a] is not None:
                    ps.acc(a, 2.0 * tb * tvals[a], True)
                ts.acc(a, 2.0 * tb * pvals[a], True)
        else:  # pragma: no cover
            raise GraphError(f"op {op} not supported inside jvp")
    # route inner cotangents to the outer nodes feeding this jvp node;
    # never donate: a routed array may be a view into another inner bar
    for k, n in enumerate(names):
        c = pbar_l[inner.leaf_ids[n]]
        if c is not None:
            store.acc(nd.inputs[k], c, False)
    for k, n in enumerate(tnames):
        c = tbar_l[inner.leaf_ids[n]]
        if c is not None:
            store.acc(nd.inputs[len(names) + k], c, False)


# -- public API --------------------------------------------------------------

def evaluate(g: Graph, bindings: Mapping[str, np.ndarray], check_finite: bool = True) -> np.ndarray:
    """Run the graph forward; deterministic for fixed bindings."""
    if g.result is None:
        raise GraphError("graph has no output")
    return _forward(g, bindings, check_finite)[g.result]


def gradient(
    g: Graph,
    bindings: Mapping[str, np.ndarray],
    wrt: Iterable[str],
    check_finite: bool = True,
    return_value: bool = False,
):
    """Reverse-mode gradient of a scalar-output graph w.r.t. named leaves.

    Handles graphs containing jvp nodes (reverse-over-forward). With
    ``return_value`` the forward value is returned alongside the gradient
    map, sharing one forward pass.
    """
    if g.result is None:
        raise GraphError("graph has no output")
    if g.nodes[g.result].shape != ():
        raise GraphError(f"gradient requires scalar output, got shape {g.nodes[g.result].shape}")
    wrt = list(wrt)
    for name in wrt:
        if name not in g.leaf_ids:
            raise GraphError(f"unknown leaf {name!r}")
    jvp_cache: dict = {}
    vals = _forward(g, bindings, check_finite, jvp_cache)
    store = _Store(len(g.nodes))
    store.arr[g.result] = np.asarray(1.0)
    _backward(g, vals, store, jvp_cache)
    grads = {}
    for name in wrt:
        b = store.arr[g.leaf_ids[name]]
        grads[name] = np.zeros(g.nodes[g.leaf_ids[name]].shape) if b is None else b
    if return_value:
        return float(vals[g.result]), grads
    return grads


def jvp(g: Graph, bindings: Mapping[str, np.ndarray], wrt, direction=None) -> np.ndarray:
    """Forward-mode directional derivative of the graph output.

    ``wrt`` is a leaf name with ``direction`` its tangent, or a mapping
    ``{leaf: direction}`` to seed several leaves at once (the result is the
    sum of the individual directional derivatives, by linearity).
    """
    if g.result is None:
        raise GraphError("graph has no output")
    if isinstance(wrt, str):
        seeds = {wrt: direction}
    else:
        seeds = dict(wrt)
    for name, d in seeds.items():
        if name not in g.leaf_ids:
            raise GraphError(f"unknown leaf {name!r}")
        want = g.nodes[g.leaf_ids[name]].shape
        d = np.asarray(d, dtype=np.float64)
        if d.shape != want:
            raise GraphError(f"direction for {name!r}: shape {d.shape} != leaf {want}")
        seeds[name] = d
    _, tvals = _forward_dual(g, bindings, seeds)
    t = tvals[g.result]
    return np.zeros(g.nodes[g.result].shape) if t is None else t
