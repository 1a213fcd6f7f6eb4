"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` is a reusable expression graph: declare inputs and parameters,
compose them with the primitive ops below, mark an output, then call
:func:`forward` (re-runnable with fresh inputs) and :func:`grad` (reverse
sweep from a scalar output).  Everything is float64 and single threaded;
parameters live as one flat vector per network and are carved up with
:func:`segment` / :func:`reshape`.

Non-finite values produced by any op abort the forward pass with
:class:`NonFiniteError` -- NaN/Inf is an error state, never silently carried.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit
from scipy.special import logsumexp as _scipy_logsumexp

Tensor = np.ndarray


class TapeError(ValueError):
    """Structural misuse of a tape (missing output, bad wiring, bad shapes)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf during a forward pass."""


def tensor(values) -> Tensor:
    """Coerce to a C-order float64 array (the only dtype the tape uses)."""
    return np.asarray(values, dtype=np.float64, order="C")


# --- primitive registry -------------------------------------------------

# forward(parent_values, meta) -> value
# vjp(parent_values, out_value, out_adjoint, meta) -> tuple of parent adjoints
@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable
    vjp: Callable


OPS: dict[str, OpDef] = {}


def _register(name):
    def wrap(pair):
        fwd, bwd = pair()
        OPS[name] = OpDef(name, fwd, bwd)
        return pair

    return wrap


def _unbroadcast(adj: np.ndarray, shape: tuple) -> np.ndarray:
    # only scalar () broadcasting is supported
    if shape == ():
        return np.asarray(adj.sum())
    return adj


@_register("add")
def _op_add():
    return (lambda v, m: v[0] + v[1],
            lambda v, y, g, m: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)))


@_register("sub")
def _op_sub():
    return (lambda v, m: v[0] - v[1],
            lambda v, y, g, m: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)))


@_register("mul")
def _op_mul():
    return (lambda v, m: v[0] * v[1],
            lambda v, y, g, m: (_unbroadcast(g * v[1], v[0].shape),
                                _unbroadcast(g * v[0], v[1].shape)))


@_register("neg")
def _op_neg():
    return (lambda v, m: -v[0], lambda v, y, g, m: (-g,))


@_register("scale")
def _op_scale():
    return (lambda v, m: v[0] * m["c"], lambda v, y, g, m: (g * m["c"],))


@_register("shift")
def _op_shift():
    return (lambda v, m: v[0] + m["c"], lambda v, y, g, m: (g,))


@_register("matvec")
def _op_matvec():
    return (lambda v, m: v[0] @ v[1],
            lambda v, y, g, m: (np.outer(g, v[1]), v[0].T @ g))


@_register("matmul")
def _op_matmul():
    return (lambda v, m: v[0] @ v[1],
            lambda v, y, g, m: (g @ v[1].T, v[0].T @ g))


@_register("add_rowvec")
def _op_add_rowvec():
    return (lambda v, m: v[0] + v[1][None, :],
            lambda v, y, g, m: (g, g.sum(axis=0)))


@_register("add_colvec")
def _op_add_colvec():
    return (lambda v, m: v[0] + v[1][:, None],
            lambda v, y, g, m: (g, g.sum(axis=1)))


@_register("mul_rowvec")
def _op_mul_rowvec():
    return (lambda v, m: v[0] * v[1][None, :],
            lambda v, y, g, m: (g * v[1][None, :], (g * v[0]).sum(axis=0)))


@_register("tanh")
def _op_tanh():
    return (lambda v, m: np.tanh(v[0]), lambda v, y, g, m: (g * (1.0 - y * y),))


@_register("sigmoid")
def _op_sigmoid():
    # expit is the numerically stable logistic for large |x|
    return (lambda v, m: expit(v[0]), lambda v, y, g, m: (g * y * (1.0 - y),))


@_register("exp")
def _op_exp():
    return (lambda v, m: np.exp(v[0]), lambda v, y, g, m: (g * y,))


@_register("log")
def _op_log():
    return (lambda v, m: np.log(v[0]), lambda v, y, g, m: (g / v[0],))


@_register("square")
def _op_square():
    return (lambda v, m: v[0] * v[0], lambda v, y, g, m: (2.0 * g * v[0],))


@_register("clip")
def _op_clip():
    # subgradient: 1 strictly inside (lo, hi), 0 outside and at the boundary
    return (lambda v, m: np.clip(v[0], m["lo"], m["hi"]),
            lambda v, y, g, m: (g * ((v[0] > m["lo"]) & (v[0] < m["hi"])),))


@_register("minimum")
def _op_minimum():
    # ties route the adjoint to the first argument
    return (lambda v, m: np.minimum(v[0], v[1]),
            lambda v, y, g, m: (g * (v[0] <= v[1]), g * (v[0] > v[1])))


@_register("maximum")
def _op_maximum():
    return (lambda v, m: np.maximum(v[0], v[1]),
            lambda v, y, g, m: (g * (v[0] >= v[1]), g * (v[0] < v[1])))


@_register("total")
def _op_total():
    return (lambda v, m: np.asarray(v[0].sum()),
            lambda v, y, g, m: (np.broadcast_to(g, v[0].shape).copy(),))


@_register("mean")
def _op_mean():
    return (lambda v, m: np.asarray(v[0].mean()),
            lambda v, y, g, m: (np.broadcast_to(g / v[0].size, v[0].shape).copy(),))


@_register("sum_rows")
def _op_sum_rows():
    return (lambda v, m: v[0].sum(axis=1),
            lambda v, y, g, m: (np.broadcast_to(g[:, None], v[0].shape).copy(),))


@_register("logsumexp_rows")
def _op_logsumexp_rows():
    return (lambda v, m: _scipy_logsumexp(v[0], axis=1),
            lambda v, y, g, m: (g[:, None] * np.exp(v[0] - y[:, None]),))


def _bw_gather_rows(v, y, g, m):
    out = np.zeros_like(v[0])
    np.add.at(out, m["idx"], g)
    return (out,)


@_register("gather_rows")
def _op_gather_rows():
    return (lambda v, m: v[0][m["idx"]], _bw_gather_rows)


def _bw_take_per_row(v, y, g, m):
    out = np.zeros_like(v[0])
    np.add.at(out, (np.arange(v[0].shape[0]), m["idx"]), g)
    return (out,)


@_register("take_per_row")
def _op_take_per_row():
    return (lambda v, m: v[0][np.arange(v[0].shape[0]), m["idx"]], _bw_take_per_row)


def _bw_segment(v, y, g, m):
    out = np.zeros_like(v[0])
    out[m["start"]:m["stop"]] = g
    return (out,)


@_register("segment")
def _op_segment():
    return (lambda v, m: v[0][m["start"]:m["stop"]], _bw_segment)


@_register("reshape")
def _op_reshape():
    return (lambda v, m: v[0].reshape(m["shape"]),
            lambda v, y, g, m: (g.reshape(v[0].shape),))


# --- tape ---------------------------------------------------------------

@dataclass(frozen=True)
class _Rec:
    kind: str                  # "input" | "param" | "const" | op name
    parents: tuple
    shape: tuple
    meta: dict | None = None


class Node:
    """Handle to one value in a tape's expression graph."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def shape(self) -> tuple:
        return self.tape._recs[self.nid].shape

    def __add__(self, other):
        return shift(self, float(other)) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -float(other)) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        return scale(self, float(other)) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Node({self.tape._recs[self.nid].kind}, id={self.nid}, shape={self.shape})"


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


class Tape:
    """Ordered operation records forming a DAG; node inputs reference
    strictly earlier nodes, so one forward sweep and one reverse sweep
    visit each node exactly once."""

    def __init__(self):
        self._recs: list[_Rec] = []
        self._input_ids: list[int] = []
        self._bound: dict[int, np.ndarray] = {}   # param/const values
        self._output_id: int | None = None
        self._values: list[np.ndarray] | None = None

    # -- construction --

    def _append(self, kind, parents, shape, meta=None) -> Node:
        self._recs.append(_Rec(kind, tuple(p.nid for p in parents), tuple(shape), meta))
        self._values = None
        return Node(self, len(self._recs) - 1)

    def input(self, shape: Sequence[int] | tuple = ()) -> Node:
        node = self._append("input", (), tuple(np.atleast_1d(shape).astype(int)) if shape != () else ())
        self._input_ids.append(node.nid)
        return node

    def param(self, value) -> Node:
        value = tensor(value)
        node = self._append("param", (), value.shape)
        self._bound[node.nid] = value
        return node

    def const(self, value) -> Node:
        value = tensor(value)
        node = self._append("const", (), value.shape)
        self._bound[node.nid] = value
        return node

    def set_param(self, node: Node, value) -> None:
        value = tensor(value)
        if self._recs[node.nid].kind not in ("param", "const"):
            raise TapeError("set_param expects a param or const node")
        if value.shape != self._recs[node.nid].shape:
            raise TapeError(f"param shape {value.shape} != declared {self._recs[node.nid].shape}")
        self._bound[node.nid] = value
        self._values = None

    def set_output(self, node: Node) -> None:
        if node.tape is not self:
            raise TapeError("output node belongs to a different tape")
        self._output_id = node.nid

    # -- inspection --

    @property
    def n_inputs(self) -> int:
        return len(self._input_ids)

    def input_shapes(self) -> list[tuple]:
        return [self._recs[i].shape for i in self._input_ids]

    def value(self, node: Node) -> Tensor:
        """Value computed for ``node`` in the most recent forward pass."""
        if self._values is None:
            raise TapeError("no forward pass has run")
        return self._values[node.nid]


def forward(tape: Tape, inputs: Sequence[Tensor] = ()) -> Tensor:
    """Evaluate the tape on ``inputs``; saves all intermediates for backward.

    Raises :class:`TapeError` on arity/shape mismatch and
    :class:`NonFiniteError` if any op yields NaN/Inf.
    """
    if tape._output_id is None:
        raise TapeError("tape has no output; call set_output first")
    if len(inputs) != tape.n_inputs:
        raise TapeError(f"expected {tape.n_inputs} inputs, got {len(inputs)}")
    bound_inputs = {}
    for nid, value in zip(tape._input_ids, inputs):
        value = tensor(value)
        if value.shape != tape._recs[nid].shape:
            raise TapeError(f"input shape {value.shape} != declared {tape._recs[nid].shape}")
        bound_inputs[nid] = value

    values: list = [None] * len(tape._recs)
    with np.errstate(all="ignore"):
        for nid, rec in enumerate(tape._recs):
            if rec.kind == "input":
                values[nid] = bound_inputs[nid]
            elif rec.kind in ("param", "const"):
                values[nid] = tape._bound[nid]
            else:
                out = OPS[rec.kind].forward([values[p] for p in rec.parents], rec.meta)
                if not np.all(np.isfinite(out)):
                    raise NonFiniteError(f"op '{rec.kind}' (node {nid}) produced non-finite values")
                values[nid] = np.asarray(out)
    tape._values = values
    return values[tape._output_id]


def grad(tape: Tape, params: Sequence[Node]) -> list[Tensor]:
    """d(output)/d(param) for each param node, after a forward pass.

    The output must be scalar.  Parameters the output does not depend on get
    zero gradients of the parameter's shape.
    """
    if tape._values is None:
        raise TapeError("run forward before grad")
    out_id = tape._output_id
    if tape._recs[out_id].shape != ():
        raise TapeError("grad requires a scalar output")

    values = tape._values
    adjoints: list = [None] * len(tape._recs)
    adjoints[out_id] = np.asarray(1.0)
    for nid in range(out_id, -1, -1):
        g = adjoints[nid]
        if g is None:
            continue
        rec = tape._recs[nid]
        if rec.kind in ("input", "param", "const"):
            continue
        parent_vals = [values[p] for p in rec.parents]
        with np.errstate(all="ignore"):
            contribs = OPS[rec.kind].vjp(parent_vals, values[nid], g, rec.meta)
        for pid, contrib in zip(rec.parents, contribs):
            if adjoints[pid] is None:
                adjoints[pid] = np.array(contrib, dtype=np.float64)
            else:
                adjoints[pid] = adjoints[pid] + contrib

    out = []
    for p in params:
        a = adjoints[p.nid]
        out.append(np.zeros(tape._recs[p.nid].shape) if a is None else np.asarray(a, dtype=np.float64))
    return out


# --- op constructors ----------------------------------------------------

def _node(tape, kind, parents, shape, meta=None) -> Node:
    for p in parents:
        if p.tape is not tape:
            raise TapeError("nodes from different tapes cannot be combined")
    return tape._append(kind, parents, shape, meta)


def _same_or_scalar(a: Node, b: Node) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if b.shape == ():
        return a.shape
    if a.shape == ():
        return b.shape
    raise TapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: Node, b: Node) -> Node:
    return _node(a.tape, "add", (a, b), _same_or_scalar(a, b))


def sub(a: Node, b: Node) -> Node:
    return _node(a.tape, "sub", (a, b), _same_or_scalar(a, b))


def mul(a: Node, b: Node) -> Node:
    return _node(a.tape, "mul", (a, b), _same_or_scalar(a, b))


def neg(a: Node) -> Node:
    return _node(a.tape, "neg", (a,), a.shape)


def scale(a: Node, c: float) -> Node:
    return _node(a.tape, "scale", (a,), a.shape, {"c": float(c)})


def shift(a: Node, c: float) -> Node:
    return _node(a.tape, "shift", (a,), a.shape, {"c": float(c)})


def matvec(w: Node, x: Node) -> Node:
    if len(w.shape) != 2 or len(x.shape) != 1 or w.shape[1] != x.shape[0]:
        raise TapeError(f"matvec shapes {w.shape} @ {x.shape}")
    return _node(w.tape, "matvec", (w, x), (w.shape[0],))


def matmul(a: Node, b: Node) -> Node:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise TapeError(f"matmul shapes {a.shape} @ {b.shape}")
    return _node(a.tape, "matmul", (a, b), (a.shape[0], b.shape[1]))


def add_rowvec(m: Node, v: Node) -> Node:
    if len(m.shape) != 2 or v.shape != (m.shape[1],):
        raise TapeError(f"add_rowvec shapes {m.shape} + {v.shape}")
    return _node(m.tape, "add_rowvec", (m, v), m.shape)


def add_colvec(m: Node, v: Node) -> Node:
    """Add v[i] to every entry of row i."""
    if len(m.shape) != 2 or v.shape != (m.shape[0],):
        raise TapeError(f"add_colvec shapes {m.shape} + {v.shape}")
    return _node(m.tape, "add_colvec", (m, v), m.shape)


def mul_rowvec(m: Node, v: Node) -> Node:
    if len(m.shape) != 2 or v.shape != (m.shape[1],):
        raise TapeError(f"mul_rowvec shapes {m.shape} * {v.shape}")
    return _node(m.tape, "mul_rowvec", (m, v), m.shape)


def _unary(kind):
    def op(a: Node) -> Node:
        return _node(a.tape, kind, (a,), a.shape)
    op.__name__ = kind
    return op


tanh = _unary("tanh")
sigmoid = _unary("sigmoid")
exp = _unary("exp")
log = _unary("log")
square = _unary("square")


def clip(a: Node, lo: float, hi: float) -> Node:
    if not lo < hi:
        raise TapeError("clip requires lo < hi")
    return _node(a.tape, "clip", (a,), a.shape, {"lo": float(lo), "hi": float(hi)})


def minimum(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise TapeError(f"minimum shapes {a.shape} vs {b.shape}")
    return _node(a.tape, "minimum", (a, b), a.shape)


def maximum(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise TapeError(f"maximum shapes {a.shape} vs {b.shape}")
    return _node(a.tape, "maximum", (a, b), a.shape)


def total(a: Node) -> Node:
    return _node(a.tape, "total", (a,), ())


def mean(a: Node) -> Node:
    return _node(a.tape, "mean", (a,), ())


def sum_rows(m: Node) -> Node:
    if len(m.shape) != 2:
        raise TapeError("sum_rows expects a matrix")
    return _node(m.tape, "sum_rows", (m,), (m.shape[0],))


def logsumexp_rows(m: Node) -> Node:
    if len(m.shape) != 2:
        raise TapeError("logsumexp_rows expects a matrix")
    return _node(m.tape, "logsumexp_rows", (m,), (m.shape[0],))


def gather_rows(m: Node, idx) -> Node:
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if len(m.shape) != 2 or idx.ndim != 1:
        raise TapeError("gather_rows expects a matrix and an index vector")
    return _node(m.tape, "gather_rows", (m,), (idx.size, m.shape[1]), {"idx": idx})


def take_per_row(m: Node, idx) -> Node:
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if len(m.shape) != 2 or idx.shape != (m.shape[0],):
        raise TapeError("take_per_row expects a matrix and one index per row")
    return _node(m.tape, "take_per_row", (m,), (m.shape[0],), {"idx": idx})


def segment(v: Node, start: int, stop: int) -> Node:
    if len(v.shape) != 1 or not 0 <= start <= stop <= v.shape[0]:
        raise TapeError(f"segment [{start}:{stop}] of shape {v.shape}")
    return _node(v.tape, "segment", (v,), (stop - start,), {"start": int(start), "stop": int(stop)})


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != int(np.prod(a.shape, dtype=np.int64)):
        raise TapeError(f"reshape {a.shape} -> {shape}")
    return _node(a.tape, "reshape", (a,), shape, {"shape": shape})


# --- finite differences -------------------------------------------------

@dataclass
class FDReport:
    """Per-parameter worst-coordinate comparison of adjoints vs central differences."""
    passed: bool
    max_rel_error: float
    worst_param: int          # index into the params list
    worst_coord: int          # flat coordinate within that parameter
    per_param_error: list[float] = field(default_factory=list)


def finite_difference_check(tape: Tape, params: Sequence[Node], step: float,
                            tolerance: float, inputs: Sequence[Tensor] | None = None) -> FDReport:
    """Compare grad() against central finite differences on the bound tape.

    ``inputs`` defaults to the values used by the most recent forward pass.
    Relative error uses a unit floor: |ad - fd| / max(1, |ad|, |fd|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if inputs is None:
        if tape._values is None:
            if tape.n_inputs:
                raise TapeError("no inputs bound; pass inputs or run forward first")
            inputs = []
        else:
            inputs = [tape._values[i] for i in tape._input_ids]
    inputs = [tensor(x) for x in inputs]

    forward(tape, inputs)
    analytic = grad(tape, params)

    max_err = 0.0
    worst_param = worst_coord = 0
    per_param = []
    for pi, p in enumerate(params):
        base = tape._bound[p.nid].copy()
        flat = base.ravel()
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            for sgn, slot in ((+1.0, 0), (-1.0, 1)):
                bumped = flat.copy()
                bumped[i] += sgn * step
                tape.set_param(p, bumped.reshape(base.shape))
                val = float(forward(tape, inputs))
                if slot == 0:
                    hi = val
                else:
                    fd[i] = (hi - val) / (2.0 * step)
        tape.set_param(p, base)
        a = analytic[pi].ravel()
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(fd)))
        err = np.abs(a - fd) / denom
        per_param.append(float(err.max()) if err.size else 0.0)
        if err.size and err.max() > max_err:
            max_err = float(err.max())
            worst_param = pi
            worst_coord = int(err.argmax())
    forward(tape, inputs)   # restore saved values for the unperturbed point
    return FDReport(passed=max_err <= tolerance, max_rel_error=max_err,
                    worst_param=worst_param, worst_coord=worst_coord,
                    per_param_error=per_param)
