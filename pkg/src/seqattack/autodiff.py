"""Reverse-mode differentiation on an explicit tape, plus an Adam optimizer.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 and C (row
major) layout; scalars are 0-d arrays.  A :class:`Tape` records a computation
as an append-only list of primitive applications.  Named ``input`` nodes are
free variables bound at evaluation time, ``constant`` nodes are baked in.
Tapes are immutable once built (nothing is ever removed or rewritten) and may
be shared by any number of concurrent evaluations; every call to
:func:`eval_tape` / :func:`grad` / :meth:`Tape.run` owns its private
workspace.

The primitive vocabulary is intentionally small: elementwise add / sub / mul,
scalar multiplication, matmul, conv2d (stride 1 or 2, zero "same" padding,
fused bias), non-overlapping maxpool2d, tanh, relu, exp, log, square, sum
(full or per axis), per-row log_softmax, row gathering, concatenation,
elementwise logaddexp, and the structural ops reshape / transpose /
repeat_rows.  Everything in this package (victim models, CTC, attack
objectives) is composed from these.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np


class TapeError(Exception):
    """Base class for tape construction and evaluation errors."""


class ShapeError(TapeError):
    """Operand shapes incompatible with a primitive's contract."""


class UnboundInputError(TapeError):
    """A free input of the tape was not bound at evaluation time."""


class NonFiniteError(TapeError):
    """A NaN or infinity entered or left a primitive."""


class NonFiniteGradientError(ValueError):
    """Adam received a gradient containing NaN or infinity."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (the tensor convention here).

    0-d arrays stay 0-d (ascontiguousarray would promote them to 1-d).
    """
    return np.asarray(x, dtype=np.float64, order="C")


class Node:
    """Handle to one tape position; records only id and static shape."""

    __slots__ = ("tape", "nid", "shape")

    def __init__(self, tape: "Tape", nid: int, shape: tuple):
        self.tape = tape
        self.nid = nid
        self.shape = shape

    def __repr__(self):
        return f"Node({self.nid}, shape={self.shape})"

    def __add__(self, other: "Node") -> "Node":
        return self.tape.add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return self.tape.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.mul(self, other)
        return self.tape.smul(float(other), self)

    __rmul__ = __mul__

    def __neg__(self) -> "Node":
        return self.tape.smul(-1.0, self)


def _same_pads(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    lo = total // 2
    return lo, total - lo


class Tape:
    """Append-only record of primitive applications.

    Node ids are assigned in construction order, so ids are already a
    topological order of the graph.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._args: list[tuple[int, ...]] = []
        self._meta: list = []
        self._shapes: list[tuple] = []
        self._consts: dict[int, np.ndarray] = {}
        self._inputs: dict[str, int] = {}      # name -> nid
        self._input_names: dict[int, str] = {}
        self._outputs: dict[str, int] = {}     # registered named outputs
        self._plans: dict = {}

    # ------------------------------------------------------------------
    # construction

    def _push(self, op: str, args: tuple[int, ...], meta, shape: tuple) -> Node:
        nid = len(self._ops)
        self._ops.append(op)
        self._args.append(args)
        self._meta.append(meta)
        self._shapes.append(tuple(int(s) for s in shape))
        return Node(self, nid, self._shapes[-1])

    def _chk(self, *nodes: Node):
        for n in nodes:
            if not isinstance(n, Node) or n.tape is not self:
                raise TapeError("operand is not a node of this tape")

    def input(self, name: str, shape: Sequence[int]) -> Node:
        if name in self._inputs:
            raise TapeError(f"duplicate input name {name!r}")
        node = self._push("input", (), None, tuple(shape))
        self._inputs[name] = node.nid
        self._input_names[node.nid] = name
        return node

    def constant(self, value) -> Node:
        a = as_tensor(value)
        if not np.isfinite(a).all():
            raise NonFiniteError("constant contains non-finite entries")
        a.setflags(write=False)
        node = self._push("const", (), None, a.shape)
        self._consts[node.nid] = a
        return node

    def mark_output(self, name: str, node: Node) -> Node:
        self._chk(node)
        self._outputs[name] = node.nid
        return node

    # -- elementwise -----------------------------------------------------

    def _binary(self, op: str, a: Node, b: Node) -> Node:
        self._chk(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
        return self._push(op, (a.nid, b.nid), None, a.shape)

    def add(self, a: Node, b: Node) -> Node:
        return self._binary("add", a, b)

    def sub(self, a: Node, b: Node) -> Node:
        return self._binary("sub", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        return self._binary("mul", a, b)

    def logaddexp(self, a: Node, b: Node) -> Node:
        return self._binary("logaddexp", a, b)

    def smul(self, s: float, a: Node) -> Node:
        self._chk(a)
        return self._push("smul", (a.nid,), float(s), a.shape)

    def _unary(self, op: str, a: Node) -> Node:
        self._chk(a)
        return self._push(op, (a.nid,), None, a.shape)

    def tanh(self, a: Node) -> Node:
        return self._unary("tanh", a)

    def relu(self, a: Node) -> Node:
        return self._unary("relu", a)

    def exp(self, a: Node) -> Node:
        return self._unary("exp", a)

    def log(self, a: Node) -> Node:
        return self._unary("log", a)

    def square(self, a: Node) -> Node:
        return self._unary("square", a)

    # -- linear algebra ---------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        self._chk(a, b)
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        return self._push("matmul", (a.nid, b.nid), None, (a.shape[0], b.shape[1]))

    def conv2d(self, x: Node, w: Node, b: Node, stride: int = 1) -> Node:
        """2-d convolution, NHWC input, (kh, kw, cin, cout) kernel, fused bias."""
        self._chk(x, w, b)
        if stride not in (1, 2):
            raise ShapeError("conv2d: stride must be 1 or 2")
        if len(x.shape) != 4 or len(w.shape) != 4:
            raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
        n, h, wd, ci = x.shape
        kh, kw, wci, co = w.shape
        if wci != ci or b.shape != (co,):
            raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}, b {b.shape}")
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(wd, kw, stride)
        ho = (h + pt + pb - kh) // stride + 1
        wo = (wd + pl + pr - kw) // stride + 1
        meta = (stride, (pt, pb, pl, pr), ho, wo)
        return self._push("conv2d", (x.nid, w.nid, b.nid), meta, (n, ho, wo, co))

    def maxpool2d(self, x: Node, window: tuple[int, int]) -> Node:
        """Non-overlapping max pooling; window ties go to the lowest index."""
        self._chk(x)
        ph, pw = window
        if len(x.shape) != 4:
            raise ShapeError(f"maxpool2d: x {x.shape}")
        n, h, wd, c = x.shape
        if h % ph or wd % pw:
            raise ShapeError(f"maxpool2d: {x.shape} not divisible by {window}")
        return self._push("maxpool2d", (x.nid,), (ph, pw), (n, h // ph, wd // pw, c))

    # -- reductions and rows ----------------------------------------------

    def sum(self, a: Node, axis: int | None = None) -> Node:
        self._chk(a)
        if axis is None:
            return self._push("sum", (a.nid,), None, ())
        if not -len(a.shape) <= axis < len(a.shape):
            raise ShapeError(f"sum: axis {axis} out of range for {a.shape}")
        axis = axis % len(a.shape)
        shape = a.shape[:axis] + a.shape[axis + 1:]
        return self._push("sum", (a.nid,), axis, shape)

    def log_softmax(self, a: Node) -> Node:
        self._chk(a)
        if len(a.shape) != 2:
            raise ShapeError(f"log_softmax: expected 2-d, got {a.shape}")
        return self._push("log_softmax", (a.nid,), None, a.shape)

    def gather_rows(self, a: Node, rows: Iterable[int]) -> Node:
        self._chk(a)
        if len(a.shape) != 2:
            raise ShapeError(f"gather_rows: expected 2-d, got {a.shape}")
        idx = np.asarray(list(rows), dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise ShapeError("gather_rows: row index out of range")
        idx.setflags(write=False)
        return self._push("gather_rows", (a.nid,), idx, (idx.size, a.shape[1]))

    def concat(self, parts: Sequence[Node], axis: int = 0) -> Node:
        parts = list(parts)
        if not parts:
            raise ShapeError("concat: no operands")
        self._chk(*parts)
        rank = len(parts[0].shape)
        for p in parts:
            if len(p.shape) != rank:
                raise ShapeError("concat: rank mismatch")
            for ax in range(rank):
                if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                    raise ShapeError("concat: off-axis shape mismatch")
        shape = list(parts[0].shape)
        shape[axis] = sum(p.shape[axis] for p in parts)
        sizes = tuple(p.shape[axis] for p in parts)
        return self._push("concat", tuple(p.nid for p in parts), (axis, sizes), tuple(shape))

    # -- structural --------------------------------------------------------

    def reshape(self, a: Node, shape: Sequence[int]) -> Node:
        self._chk(a)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != int(np.prod(a.shape, dtype=np.int64)):
            raise ShapeError(f"reshape: {a.shape} -> {shape}")
        return self._push("reshape", (a.nid,), (a.shape, shape), shape)

    def transpose(self, a: Node, axes: Sequence[int]) -> Node:
        self._chk(a)
        axes = tuple(axes)
        if sorted(axes) != list(range(len(a.shape))):
            raise ShapeError(f"transpose: bad axes {axes} for {a.shape}")
        shape = tuple(a.shape[ax] for ax in axes)
        return self._push("transpose", (a.nid,), axes, shape)

    def repeat_rows(self, a: Node, n: int) -> Node:
        self._chk(a)
        if len(a.shape) != 2 or a.shape[0] != 1:
            raise ShapeError(f"repeat_rows: expected (1, c), got {a.shape}")
        return self._push("repeat_rows", (a.nid,), int(n), (int(n), a.shape[1]))

    # ------------------------------------------------------------------
    # execution

    def _ancestors(self, roots: Iterable[int]) -> set[int]:
        seen: set[int] = set()
        stack = list(roots)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self._args[nid])
        return seen

    def _plan(self, out_ids: tuple[int, ...], grad_of: int | None,
              wrt_ids: tuple[int, ...]):
        key = (out_ids, grad_of, wrt_ids)
        plan = self._plans.get(key)
        if plan is None:
            roots = set(out_ids)
            if grad_of is not None:
                roots.add(grad_of)
            needed = self._ancestors(roots)
            order = sorted(needed)
            if grad_of is None:
                plan = (order, [], frozenset())
            else:
                # backward touches only nodes lying on a wrt -> output path
                desc = set(wrt_ids)
                for nid in range(grad_of + 1):
                    if any(arg in desc for arg in self._args[nid]):
                        desc.add(nid)
                grad_set = frozenset(self._ancestors([grad_of]) & desc)
                path = sorted(grad_set | {grad_of}, reverse=True)
                plan = (order, path, grad_set)
            self._plans[key] = plan
        return plan

    def run(
        self,
        bindings: Mapping[str, np.ndarray],
        outputs: Sequence[Node],
        grad_of: Node | None = None,
        wrt: Sequence[str] = (),
        validate: bool = False,
    ) -> tuple[list[np.ndarray], dict[str, np.ndarray]]:
        """Forward pass for ``outputs`` and, optionally, one backward pass.

        Returns the output values in order plus a dict of gradients of
        ``grad_of`` (a one-element node) with respect to the named inputs in
        ``wrt``.  Inputs with no path to ``grad_of`` get zero gradients.
        ``validate=True`` additionally checks every node value for NaN/Inf.
        """
        for node in outputs:
            self._chk(node)
        wrt = list(wrt)
        for name in wrt:
            if name not in self._inputs:
                raise UnboundInputError(f"unknown input name {name!r}")
        gid = None
        if grad_of is not None:
            self._chk(grad_of)
            if int(np.prod(grad_of.shape, dtype=np.int64)) != 1:
                raise ShapeError(
                    f"grad: output node {grad_of.nid} has shape {grad_of.shape}, "
                    "expected exactly one element")
            gid = grad_of.nid

        wrt_ids = tuple(self._inputs[name] for name in wrt)
        order, path, grad_set = self._plan(tuple(n.nid for n in outputs), gid, wrt_ids)

        vals: list = [None] * len(self._ops)
        for nid, arr in self._consts.items():
            vals[nid] = arr
        ops, args, meta = self._ops, self._args, self._meta
        aux: dict[int, object] = {}
        for nid in order:
            op = ops[nid]
            if op == "input":
                name = self._input_names[nid]
                if name not in bindings:
                    raise UnboundInputError(f"input {name!r} (node {nid}) not bound")
                a = as_tensor(bindings[name])
                if a.shape != self._shapes[nid]:
                    raise ShapeError(
                        f"input {name!r} (node {nid}): bound shape {a.shape}, "
                        f"declared {self._shapes[nid]}")
                if not np.isfinite(a).all():
                    raise NonFiniteError(f"input {name!r} (node {nid}) is not finite")
                vals[nid] = a
            elif op == "const":
                pass
            else:
                vals[nid] = _FWD[op](vals, args[nid], meta[nid], nid, aux)
                if validate and not np.isfinite(vals[nid]).all():
                    raise NonFiniteError(f"non-finite value at node {nid} ({op})")

        out_vals = [vals[n.nid] for n in outputs]
        grads: dict[str, np.ndarray] = {}
        if gid is not None:
            acc: list = [None] * len(self._ops)
            owned = [False] * len(self._ops)
            acc[gid] = np.ones(self._shapes[gid])
            owned[gid] = True
            for nid in path:
                g = acc[nid]
                if g is None:
                    continue
                op = ops[nid]
                if op in ("input", "const"):
                    continue
                node_args = args[nid]
                wanted = tuple(arg in grad_set for arg in node_args)
                if not any(wanted):
                    continue
                for slot, garr, own in _BWD[op](g, vals, node_args, meta[nid], nid, aux, wanted):
                    cur = acc[slot]
                    if cur is None:
                        acc[slot] = garr
                        owned[slot] = own
                    elif owned[slot] and isinstance(cur, np.ndarray) and cur.ndim:
                        cur += garr
                    else:
                        # 0-d results are numpy scalars, immutable: rebind
                        acc[slot] = cur + garr
                        owned[slot] = True
            for name in wrt:
                nid = self._inputs[name]
                g = acc[nid]
                grads[name] = np.zeros(self._shapes[nid]) if g is None else as_tensor(g)
        return out_vals, grads


# ----------------------------------------------------------------------
# primitive forward implementations


def _f_add(v, a, m, nid, aux):
    return v[a[0]] + v[a[1]]


def _f_sub(v, a, m, nid, aux):
    return v[a[0]] - v[a[1]]


def _f_mul(v, a, m, nid, aux):
    return v[a[0]] * v[a[1]]


def _f_logaddexp(v, a, m, nid, aux):
    return np.logaddexp(v[a[0]], v[a[1]])


def _f_smul(v, a, m, nid, aux):
    return m * v[a[0]]


def _f_tanh(v, a, m, nid, aux):
    return np.tanh(v[a[0]])


def _f_relu(v, a, m, nid, aux):
    return np.maximum(v[a[0]], 0.0)


def _f_exp(v, a, m, nid, aux):
    return np.exp(v[a[0]])


def _f_log(v, a, m, nid, aux):
    return np.log(v[a[0]])


def _f_square(v, a, m, nid, aux):
    x = v[a[0]]
    return x * x


def _f_matmul(v, a, m, nid, aux):
    return v[a[0]] @ v[a[1]]


def _f_conv2d(v, a, m, nid, aux):
    x, w, b = v[a[0]], v[a[1]], v[a[2]]
    stride, (pt, pb, pl, pr), ho, wo = m
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    if pt or pb or pl or pr:
        xp = np.zeros((n, h + pt + pb, wd + pl + pr, ci))
        xp[:, pt:pt + h, pl:pl + wd, :] = x
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                       # (n, ho, wo, ci, kh, kw)
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * ho * wo, kh * kw * ci)
    aux[nid] = col
    out = col @ w.reshape(kh * kw * ci, co)
    out += b
    return out.reshape(n, ho, wo, co)


def _f_maxpool2d(v, a, m, nid, aux):
    x = v[a[0]]
    ph, pw = m
    n, h, wd, c = x.shape
    return x.reshape(n, h // ph, ph, wd // pw, pw, c).max(axis=(2, 4))


def _f_sum(v, a, m, nid, aux):
    x = v[a[0]]
    return np.asarray(x.sum() if m is None else x.sum(axis=m))


def _f_log_softmax(v, a, m, nid, aux):
    x = v[a[0]]
    mx = x.max(axis=1, keepdims=True)
    z = x - mx
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _f_gather_rows(v, a, m, nid, aux):
    return v[a[0]][m]


def _f_concat(v, a, m, nid, aux):
    axis, _ = m
    return np.concatenate([v[x] for x in a], axis=axis)


def _f_reshape(v, a, m, nid, aux):
    return v[a[0]].reshape(m[1])


def _f_transpose(v, a, m, nid, aux):
    return v[a[0]].transpose(m)


def _f_repeat_rows(v, a, m, nid, aux):
    return np.broadcast_to(v[a[0]], (m, v[a[0]].shape[1]))


# ----------------------------------------------------------------------
# primitive backward implementations
# each yields (arg_nid, grad_array, owned) triples for the wanted slots only;
# "owned" means the array is freshly allocated and safe to add into in place.
# the forward value of the node itself is v[nid], reused where it helps.


def _b_add(g, v, a, m, nid, aux, wanted):
    out = []
    if wanted[0]:
        out.append((a[0], g, False))
    if wanted[1]:
        out.append((a[1], g, False))
    return out


def _b_sub(g, v, a, m, nid, aux, wanted):
    out = []
    if wanted[0]:
        out.append((a[0], g, False))
    if wanted[1]:
        out.append((a[1], -g, True))
    return out


def _b_mul(g, v, a, m, nid, aux, wanted):
    out = []
    if wanted[0]:
        out.append((a[0], g * v[a[1]], True))
    if wanted[1]:
        out.append((a[1], g * v[a[0]], True))
    return out


def _b_logaddexp(g, v, a, m, nid, aux, wanted):
    y = v[nid]
    out = []
    if wanted[0]:
        out.append((a[0], g * np.exp(v[a[0]] - y), True))
    if wanted[1]:
        out.append((a[1], g * np.exp(v[a[1]] - y), True))
    return out


def _b_smul(g, v, a, m, nid, aux, wanted):
    return ((a[0], m * g, True),)


def _b_tanh(g, v, a, m, nid, aux, wanted):
    y = v[nid]
    return ((a[0], g * (1.0 - y * y), True),)


def _b_relu(g, v, a, m, nid, aux, wanted):
    return ((a[0], g * (v[nid] > 0.0), True),)


def _b_exp(g, v, a, m, nid, aux, wanted):
    return ((a[0], g * v[nid], True),)


def _b_log(g, v, a, m, nid, aux, wanted):
    return ((a[0], g / v[a[0]], True),)


def _b_square(g, v, a, m, nid, aux, wanted):
    return ((a[0], g * (2.0 * v[a[0]]), True),)


def _b_matmul(g, v, a, m, nid, aux, wanted):
    out = []
    if wanted[0]:
        out.append((a[0], g @ v[a[1]].T, True))
    if wanted[1]:
        out.append((a[1], v[a[0]].T @ g, True))
    return out


def _b_conv2d(g, v, a, m, nid, aux, wanted):
    x, w = v[a[0]], v[a[1]]
    stride, (pt, pb, pl, pr), ho, wo = m
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    gflat = g.reshape(-1, co)
    out = []
    if wanted[0]:
        gcol = (gflat @ w.reshape(kh * kw * ci, co).T).reshape(n, ho, wo, kh, kw, ci)
        gxp = np.zeros((n, h + pt + pb, wd + pl + pr, ci))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :] += \
                    gcol[:, :, :, i, j, :]
        gx = gxp[:, pt:pt + h, pl:pl + wd, :]
        if pt or pb or pl or pr:
            gx = np.ascontiguousarray(gx)
        out.append((a[0], gx, True))
    if wanted[1]:
        col = aux[nid]
        out.append((a[1], (col.T @ gflat).reshape(kh, kw, ci, co), True))
    if wanted[2]:
        out.append((a[2], g.sum(axis=(0, 1, 2)), True))
    return out


def _b_maxpool2d(g, v, a, m, nid, aux, wanted):
    # route to the first window position (row-major) attaining the max
    ph, pw = m
    x = v[a[0]]
    y = v[nid]
    n, h, wd, c = x.shape
    ho, wo = h // ph, wd // pw
    xv = x.reshape(n, ho, ph, wo, pw, c)
    gx = np.zeros((n, ho, ph, wo, pw, c))
    taken = np.zeros((n, ho, wo, c), dtype=bool)
    for i in range(ph):
        for j in range(pw):
            sel = (xv[:, :, i, :, j, :] == y) & ~taken
            gx[:, :, i, :, j, :] = np.where(sel, g, 0.0)
            taken |= sel
    return ((a[0], gx.reshape(n, h, wd, c), True),)


def _b_sum(g, v, a, m, nid, aux, wanted):
    shape = v[a[0]].shape
    if m is None:
        return ((a[0], np.broadcast_to(g, shape), False),)
    return ((a[0], np.broadcast_to(np.expand_dims(g, m), shape), False),)


def _b_log_softmax(g, v, a, m, nid, aux, wanted):
    sm = np.exp(v[nid])
    return ((a[0], g - sm * g.sum(axis=1, keepdims=True), True),)


def _b_gather_rows(g, v, a, m, nid, aux, wanted):
    gx = np.zeros(v[a[0]].shape)
    np.add.at(gx, m, g)
    return ((a[0], gx, True),)


def _b_concat(g, v, a, m, nid, aux, wanted):
    axis, sizes = m
    out = []
    off = 0
    sl = [slice(None)] * g.ndim
    for arg, size, want in zip(a, sizes, wanted):
        if want:
            sl[axis] = slice(off, off + size)
            out.append((arg, g[tuple(sl)], False))
        off += size
    return out


def _b_reshape(g, v, a, m, nid, aux, wanted):
    return ((a[0], g.reshape(m[0]), False),)


def _b_transpose(g, v, a, m, nid, aux, wanted):
    inv = np.argsort(m)
    return ((a[0], g.transpose(inv), False),)


def _b_repeat_rows(g, v, a, m, nid, aux, wanted):
    return ((a[0], g.sum(axis=0, keepdims=True), True),)


_FWD = {
    "add": _f_add, "sub": _f_sub, "mul": _f_mul, "logaddexp": _f_logaddexp,
    "smul": _f_smul, "tanh": _f_tanh, "relu": _f_relu, "exp": _f_exp,
    "log": _f_log, "square": _f_square, "matmul": _f_matmul,
    "conv2d": _f_conv2d, "maxpool2d": _f_maxpool2d, "sum": _f_sum,
    "log_softmax": _f_log_softmax, "gather_rows": _f_gather_rows,
    "concat": _f_concat, "reshape": _f_reshape, "transpose": _f_transpose,
    "repeat_rows": _f_repeat_rows,
}

_BWD = {
    "add": _b_add, "sub": _b_sub, "mul": _b_mul, "logaddexp": _b_logaddexp,
    "smul": _b_smul, "tanh": _b_tanh, "relu": _b_relu, "exp": _b_exp,
    "log": _b_log, "square": _b_square, "matmul": _b_matmul,
    "conv2d": _b_conv2d, "maxpool2d": _b_maxpool2d, "sum": _b_sum,
    "log_softmax": _b_log_softmax, "gather_rows": _b_gather_rows,
    "concat": _b_concat, "reshape": _b_reshape, "transpose": _b_transpose,
    "repeat_rows": _b_repeat_rows,
}


# ----------------------------------------------------------------------
# public entry points


def eval_tape(
    tape: Tape,
    bindings: Mapping[str, np.ndarray],
    outputs: Sequence[Node] | None = None,
) -> dict[str, np.ndarray] | list[np.ndarray]:
    """Evaluate a tape.

    With ``outputs=None``, returns the tape's registered named outputs as a
    dict; otherwise returns the values of the given nodes as a list.
    Evaluation is pure and referentially transparent: identical bindings
    always produce bitwise-identical results.
    """
    if outputs is None:
        nodes = [Node(tape, nid, tape._shapes[nid]) for nid in tape._outputs.values()]
        vals, _ = tape.run(bindings, nodes)
        return dict(zip(tape._outputs.keys(), vals))
    vals, _ = tape.run(bindings, list(outputs))
    return vals


def grad(
    tape: Tape,
    output: Node,
    wrt: Sequence[str],
    bindings: Mapping[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Gradient of a one-element ``output`` with respect to named inputs.

    Each gradient has the shape of its input; inputs with no path to the
    output get zeros.
    """
    _, grads = tape.run(bindings, [], grad_of=output, wrt=wrt)
    return grads


# ----------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam state; one instance per optimization run."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=[np.zeros_like(as_tensor(p)) for p in params],
                   v=[np.zeros_like(as_tensor(p)) for p in params],
                   t=0, beta1=beta1, beta2=beta2, eps=eps, lr=lr)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and the state.

    Moment buffers are updated in place (the state is single-owner).  A
    non-finite gradient is rejected with :class:`NonFiniteGradientError` so
    the caller can decide how to recover.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("adam_step: params/grads/state length mismatch")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"adam_step: param {np.shape(p)} vs grad {np.shape(g)}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError("adam_step: non-finite gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = as_tensor(g)
        state.m[i] *= b1
        state.m[i] += (1.0 - b1) * g
        state.v[i] *= b2
        state.v[i] += (1.0 - b2) * (g * g)
        step = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        out.append(as_tensor(p) - step)
    return out, state
