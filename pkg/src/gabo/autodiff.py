"""Dense float64 tensors with a re-entrant reverse-mode tape.

The backward pass is expressed in terms of the same recorded operations,
so running ``grad(..., create_graph=True)`` appends the backward
computation to the tape and the returned gradients can be differentiated
again. That re-entrancy is what the truncated hypergradient in the
bilevel trainer relies on.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the attempted op."""


class TapeError(RuntimeError):
    """Misuse of tape handles (missing, stale, or mixed tapes)."""


class Tensor:
    """Immutable-by-convention dense array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node_id", "gen")

    def __init__(self, data, tape=None, node_id=None, gen=0):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id
        self.gen = gen

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no tape handle."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def is_tracked(self) -> bool:
        return self.tape is not None and self.gen == self.tape.generation

    def __repr__(self):
        flag = "tracked" if self.is_tracked() else "const"
        return f"Tensor(shape={self.shape}, {flag})"


class OpRecord:
    """One tape entry: op kind, input tensors, op-specific saved values."""

    __slots__ = ("op", "parents", "saved")

    def __init__(self, op, parents, saved=None):
        self.op = op
        self.parents = parents
        self.saved = saved


class Tape:
    """Ordered op records forming a DAG; appending during backward is allowed."""

    _ids = 0

    def __init__(self):
        self.records: list[OpRecord] = []
        self.generation = 0
        self._paused = 0
        Tape._ids += 1
        self._uid = Tape._ids

    def __len__(self):
        return len(self.records)

    @property
    def paused(self) -> bool:
        return self._paused > 0

    @contextmanager
    def pause(self):
        """Suspend recording (used by grad when create_graph is off)."""
        self._paused += 1
        try:
            yield
        finally:
            self._paused -= 1

    def reset(self):
        """Drop all records and invalidate every handle issued so far."""
        self.records.clear()
        self.generation += 1

    def leaf(self, data) -> Tensor:
        """Create a tracked leaf holding a copy of ``data``."""
        arr = data.data if isinstance(data, Tensor) else data
        t = Tensor(np.array(arr, dtype=np.float64))
        self._attach("leaf", (), t)
        return t

    def leaf_view(self, t: Tensor) -> Tensor:
        """Tracked leaf sharing ``t``'s array (values are never mutated)."""
        out = Tensor(t.data)
        self._attach("leaf", (), out)
        return out

    def watch(self, t: Tensor) -> Tensor:
        """Register an existing tensor as a leaf on this tape."""
        if t.is_tracked():
            if t.tape is self:
                return t
            raise TapeError("tensor is already tracked on another live tape")
        self._attach("leaf", (), t)
        return t

    def _attach(self, op, parents, out, saved=None):
        self.records.append(OpRecord(op, parents, saved))
        out.tape = self
        out.node_id = len(self.records) - 1
        out.gen = self.generation

    def node_id_of(self, t: Tensor):
        if t.tape is self and t.gen == self.generation:
            return t.node_id
        return None


def _live_tape(tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.is_tracked():
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeError("op mixes tensors from two live tapes")
    if tape is not None and tape.paused:
        return None
    return tape


def _make(op, parents, out_data, saved=None) -> Tensor:
    out = Tensor(out_data)
    tape = _live_tape(parents)
    if tape is not None:
        tape._attach(op, parents, out, saved)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_shapes(op, a, b):
    """Equal shapes, or one scalar operand. Anything else is an error."""
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------------------
# forward ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return _make("add", (a, b), a.data + b.data)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return _make("sub", (a, b), a.data - b.data)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    return _make("mul", (a, b), a.data * b.data)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _make("matmul", (a, b), a.data @ b.data)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.shape}")
    return _make("transpose", (a,), a.data.T.copy())


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _make("relu", (a,), np.maximum(a.data, 0.0))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    t = _make("sigmoid", (a,), out)
    if t.is_tracked():
        t.tape.records[t.node_id].saved = {"out": t}
    return t


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; the bce building block."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make("softplus", (a,), out)


def tsum(a) -> Tensor:
    """Full sum to a scalar."""
    a = _as_tensor(a)
    return _make("sum", (a,), np.asarray(a.data.sum()), {"shape": a.shape})


def tmean(a) -> Tensor:
    """Full mean to a scalar."""
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    return mul(tsum(a), Tensor(1.0 / a.size))


def axis_sum(a, axis) -> Tensor:
    """Sum over one axis of a rank-2 tensor, keeping the axis (size 1)."""
    a = _as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"axis_sum: expected rank 2, got shape {a.shape}")
    return _make("axis_sum", (a,), a.data.sum(axis=axis, keepdims=True),
                 {"axis": axis})


def broadcast_to(a, shape) -> Tensor:
    """Expand a scalar, (1, k) row, or (m, 1) column to the given 2-D shape."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return _make("broadcast", (a,), a.data.copy(), {"src": a.shape})
    ok = (a.shape == ()
          or (len(a.shape) == 2 and len(shape) == 2
              and ((a.shape[0] == 1 and a.shape[1] == shape[1])
                   or (a.shape[1] == 1 and a.shape[0] == shape[0]))))
    if not ok:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}")
    return _make("broadcast", (a,), np.broadcast_to(a.data, shape).copy(),
                 {"src": a.shape})


def concat(tensors, axis=1) -> Tensor:
    """Concatenate rank-2 tensors along the given axis."""
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    for t in tensors:
        if len(t.shape) != 2:
            raise ShapeError(f"concat: expected rank 2, got shape {t.shape}")
    other = 1 - axis
    ext = tensors[0].shape[other]
    for t in tensors[1:]:
        if t.shape[other] != ext:
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {t.shape} disagree off-axis")
    sizes = tuple(t.shape[axis] for t in tensors)
    return _make("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
                 {"axis": axis, "sizes": sizes})


def narrow(a, axis, start, length) -> Tensor:
    """Contiguous slice along one axis of a rank-2 tensor."""
    a = _as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"narrow: expected rank 2, got shape {a.shape}")
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: slice [{start}:{start + length}] exceeds shape {a.shape}")
    sl = (slice(start, start + length), slice(None)) if axis == 0 \
        else (slice(None), slice(start, start + length))
    return _make("narrow", (a,), a.data[sl].copy(),
                 {"axis": axis, "start": start, "full": a.shape})


def pad_slice(a, full_shape, axis, start) -> Tensor:
    """Embed a rank-2 tensor into zeros of ``full_shape`` (adjoint of narrow)."""
    a = _as_tensor(a)
    out = np.zeros(full_shape, dtype=np.float64)
    length = a.shape[axis]
    sl = (slice(start, start + length), slice(None)) if axis == 0 \
        else (slice(None), slice(start, start + length))
    out[sl] = a.data
    return _make("pad_slice", (a,), out, {"axis": axis, "start": start, "length": length})


def index_select(a, idx) -> Tensor:
    """Gather rows of a rank-2 tensor (embedding lookup)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if len(a.shape) != 2 or idx.ndim != 1:
        raise ShapeError(f"index_select: expected rank-2 table and rank-1 index, "
                         f"got {a.shape} and index shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"index_select: index out of range for {a.shape[0]} rows")
    return _make("index_select", (a,), a.data[idx], {"idx": idx, "rows": a.shape[0]})


def scatter_sum(src, idx, num_out) -> Tensor:
    """Sum rows of ``src`` into ``num_out`` destination rows given by ``idx``."""
    src = _as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    if len(src.shape) != 2 or idx.ndim != 1 or idx.shape[0] != src.shape[0]:
        raise ShapeError(f"scatter_sum: expected rank-2 src with one index per row, "
                         f"got {src.shape} and index shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_out):
        raise ShapeError(f"scatter_sum: index out of range for {num_out} rows")
    out = np.zeros((num_out, src.shape[1]), dtype=np.float64)
    np.add.at(out, idx, src.data)
    return _make("scatter_sum", (src,), out, {"idx": idx})


# ---------------------------------------------------------------------------
# backward rules
#
# Each rule maps (record, grad_out) to per-parent gradients, expressed with
# the ops above so that create_graph can record them onto the same tape.


def _unbroadcast(g: Tensor, target_shape) -> Tensor:
    if g.shape == target_shape:
        return g
    if target_shape == ():
        return tsum(g)
    if target_shape[0] == 1:
        return axis_sum(g, 0)
    return axis_sum(g, 1)


def _bw_add(rec, g):
    a, b = rec.parents
    return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _bw_sub(rec, g):
    a, b = rec.parents
    return (_unbroadcast(g, a.shape), _unbroadcast(mul(g, Tensor(-1.0)), b.shape))


def _bw_mul(rec, g):
    a, b = rec.parents
    return (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape))


def _bw_matmul(rec, g):
    a, b = rec.parents
    return (matmul(g, transpose(b)), matmul(transpose(a), g))


def _bw_transpose(rec, g):
    return (transpose(g),)


def _bw_relu(rec, g):
    (a,) = rec.parents
    mask = Tensor((a.data > 0).astype(np.float64))
    return (mul(g, mask),)


def _bw_sigmoid(rec, g):
    out = rec.saved["out"]
    one = Tensor(np.ones(out.shape))
    return (mul(g, mul(out, sub(one, out))),)


def _bw_softplus(rec, g):
    (a,) = rec.parents
    return (mul(g, sigmoid(a)),)


def _bw_sum(rec, g):
    shape = rec.saved["shape"]
    if shape == ():
        return (g,)
    return (broadcast_to(g, shape),)


def _bw_axis_sum(rec, g):
    (a,) = rec.parents
    return (broadcast_to(g, a.shape),)


def _bw_broadcast(rec, g):
    src = rec.saved["src"]
    return (_unbroadcast(g, src),)


def _bw_concat(rec, g):
    axis, sizes = rec.saved["axis"], rec.saved["sizes"]
    grads, start = [], 0
    for s in sizes:
        grads.append(narrow(g, axis, start, s))
        start += s
    return tuple(grads)


def _bw_narrow(rec, g):
    saved = rec.saved
    return (pad_slice(g, saved["full"], saved["axis"], saved["start"]),)


def _bw_pad_slice(rec, g):
    saved = rec.saved
    return (narrow(g, saved["axis"], saved["start"], saved["length"]),)


def _bw_index_select(rec, g):
    saved = rec.saved
    return (scatter_sum(g, saved["idx"], saved["rows"]),)


def _bw_scatter_sum(rec, g):
    return (index_select(g, rec.saved["idx"]),)


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "matmul": _bw_matmul,
    "transpose": _bw_transpose,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "softplus": _bw_softplus,
    "sum": _bw_sum,
    "axis_sum": _bw_axis_sum,
    "broadcast": _bw_broadcast,
    "concat": _bw_concat,
    "narrow": _bw_narrow,
    "pad_slice": _bw_pad_slice,
    "index_select": _bw_index_select,
    "scatter_sum": _bw_scatter_sum,
}


def grad(output: Tensor, wrt, create_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    With ``create_graph`` the backward computation is recorded on the same
    tape, so the returned gradients are tracked and can be differentiated
    again. Tensors in ``wrt`` that the output does not depend on receive
    zero gradients.
    """
    if output.shape != ():
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
    if not output.is_tracked():
        raise TapeError("grad: output is not on a live tape")
    tape = output.tape
    wrt = list(wrt)
    for w in wrt:
        if tape.node_id_of(w) is None:
            raise TapeError("grad: wrt tensor is not on the output's tape")
    wrt_ids = {w.node_id for w in wrt}

    # a tracked seed keeps gradients of linear ops on the tape, so a second
    # grad over them is well defined (and zero) rather than an error
    seed = tape.leaf(1.0) if create_graph else Tensor(1.0)
    grads: dict[int, Tensor] = {output.node_id: seed}
    limit = output.node_id
    from contextlib import nullcontext

    ctx = nullcontext() if create_graph else tape.pause()
    with ctx:
        for idx in range(limit, -1, -1):
            if idx not in grads:
                continue
            rec = tape.records[idx]
            if rec.op == "leaf":
                continue
            g = grads[idx] if idx in wrt_ids else grads.pop(idx)
            for parent, pg in zip(rec.parents, _BACKWARD[rec.op](rec, g)):
                pid = tape.node_id_of(parent)
                if pid is None or pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else add(acc, pg)

    out = []
    for w in wrt:
        g = grads.get(w.node_id)
        out.append(g if g is not None else Tensor(np.zeros(w.shape)))
    return out


# ---------------------------------------------------------------------------
# optimizer


def sgd_momentum_step(params, grads, buffers, lr, momentum, weight_decay=0.0,
                      tracked=False):
    """One SGD+momentum step over parallel lists of tensors.

    v' = momentum * v + (g + weight_decay * p);  p' = p - lr * v'.
    With ``tracked`` the update is built from tape ops so the unroll window
    can differentiate through it; otherwise it runs on raw arrays.
    """
    if lr < 0:
        raise ValueError(f"sgd_momentum_step: negative lr {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"sgd_momentum_step: momentum {momentum} outside [0, 1)")
    if not (len(params) == len(grads) == len(buffers)):
        raise ShapeError("sgd_momentum_step: list lengths differ")
    new_params, new_buffers = [], []
    for p, g, v in zip(params, grads, buffers):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"sgd_momentum_step: shapes {p.shape}/{g.shape}/{v.shape} differ")
        if tracked:
            gw = add(g, mul(p, Tensor(weight_decay)))
            v2 = add(mul(v, Tensor(momentum)), gw)
            p2 = sub(p, mul(v2, Tensor(lr)))
        else:
            gw = g.data + weight_decay * p.data
            v2 = Tensor(momentum * v.data + gw)
            p2 = Tensor(p.data - lr * v2.data)
        new_params.append(p2)
        new_buffers.append(v2)
    return new_params, new_buffers


# ---------------------------------------------------------------------------
# named parameter collections


class Params:
    """Ordered name -> Tensor mapping shared by the model and augmenter code."""

    def __init__(self, items=None):
        self._items: dict[str, Tensor] = dict(items or {})

    def __getitem__(self, name) -> Tensor:
        return self._items[name]

    def __setitem__(self, name, t: Tensor):
        self._items[name] = t

    def __contains__(self, name) -> bool:
        return name in self._items

    def __len__(self):
        return len(self._items)

    def names(self):
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def items(self):
        return self._items.items()

    def detached(self) -> "Params":
        return Params({k: t.detach() for k, t in self.items()})

    def copy(self) -> "Params":
        return Params({k: t.copy() for k, t in self.items()})

    def leaf_copy(self, tape: Tape) -> "Params":
        return Params({k: tape.leaf(t.data) for k, t in self.items()})

    def leaf_view(self, tape: Tape) -> "Params":
        return Params({k: tape.leaf_view(t) for k, t in self.items()})

    def replace_values(self, tensors) -> "Params":
        tensors = list(tensors)
        if len(tensors) != len(self._items):
            raise ShapeError("replace_values: wrong tensor count")
        return Params(dict(zip(self._items, tensors)))

    def l2_sumsq(self) -> Tensor:
        """Sum of squares over all tensors (as a tape op chain)."""
        total = None
        for t in self.tensors():
            s = tsum(mul(t, t))
            total = s if total is None else add(total, s)
        return total if total is not None else Tensor(0.0)
