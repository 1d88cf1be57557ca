"""Reverse-mode automatic differentiation on dense float64 arrays.

Operations are recorded define-by-run onto the innermost active :class:`Tape`.
Nothing is recorded when no tape is active, so plain forward passes (inference)
carry no graph and can run concurrently on disjoint tensors.

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(matmul(w, Tensor([[3.0]])))
    >>> tape.backward(loss)
    >>> float(w.grad[0, 0])
    3.0
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, FormatError

_local = threading.local()


def _stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        backward(loss, tape=self)


class _Record:
    __slots__ = ("op", "inputs", "outputs", "backward")

    def __init__(self, op, inputs, outputs, backward):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tensor:
    """Dense real array that can take part in differentiation.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialised
    ``grad`` buffer that :func:`backward` accumulates into. Tensors produced by
    recorded operations get their ``grad`` filled during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_record", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._record = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, datas, inputs, backward_fn):
    """Wrap ``datas`` as output tensors and record the op if gradients can flow."""
    outs = []
    for d in datas:
        t = Tensor.__new__(Tensor)
        t.data = d
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._record = None
        t._tape = None
        outs.append(t)
    stack = _stack()
    if stack and any(t.requires_grad for t in inputs):
        tape = stack[-1]
        rec = _Record(op, tuple(inputs), tuple(outs), backward_fn)
        tape.records.append(rec)
        for t in outs:
            t.requires_grad = True
            t._record = rec
            t._tape = tape
    return outs


def record_op(op, data, inputs, backward_fn):
    """Register a single-output op. ``backward_fn(g)`` returns one grad (or None) per input."""
    return _emit(op, [data], inputs, backward_fn)[0]


def record_multi_op(op, datas, inputs, backward_fn):
    """Register a multi-output op. ``backward_fn(*gs)`` receives one grad per output."""
    return _emit(op, datas, inputs, backward_fn)


def backward(loss, tape=None):
    """Populate ``grad`` on every requires-grad tensor reachable from scalar ``loss``."""
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None or loss._record is None or not tape.records:
        raise ContractError("loss was not recorded on a tape")
    grads = {id(loss): np.ones((), dtype=np.float64)}
    for rec in reversed(tape.records):
        gouts = [grads.pop(id(o), None) for o in rec.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(o.data) if g is None else g for o, g in zip(rec.outputs, gouts)]
        for o, g in zip(rec.outputs, gouts):
            o.grad = g
        gins = rec.backward(*gouts)
        for inp, g in zip(rec.inputs, gins):
            if g is None or not inp.requires_grad:
                continue
            if inp._record is None:
                inp.grad += g
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = g if prev is None else prev + g


def _same_or_scalar(op, a, b):
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return record_op("matmul", ad @ bd, (a, b), back)


def linear(x, w, b):
    """``x @ w + b`` with the bias broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    xd, wd = x.data, w.data

    def back(g):
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return record_op("linear", xd @ wd + b.data, (x, w, b), back)


def add(a, b):
    _same_or_scalar("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op("add", a.data + b.data, (a, b), back)


def sub(a, b):
    _same_or_scalar("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op("sub", a.data - b.data, (a, b), back)


def mul(a, b):
    _same_or_scalar("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return record_op("mul", ad * bd, (a, b), back)


def scale(x, c):
    c = float(c)
    return record_op("scale", x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x):
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    y = np.tanh(x.data)
    return record_op("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x):
    on = x.data > 0
    return record_op("relu", np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def concat(tensors, axis=-1):
    tensors = list(tensors)
    lead = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != lead or t.shape[:-1] != tensors[0].shape[:-1]:
            raise DimensionError(
                "concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors))
    if axis not in (-1, lead - 1):
        raise DimensionError("concat only supports the last axis")
    out = np.concatenate([t.data for t in tensors], axis=-1)
    cuts = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=-1))

    return record_op("concat", out, tuple(tensors), back)


def sum_(x, axis=None):
    shape = x.shape
    if axis is None:
        out = np.asarray(x.data.sum())
    else:
        out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record_op("sum", out, (x,), back)


def mean(x):
    n = x.size
    shape = x.shape
    return record_op("mean", np.asarray(x.data.sum() / n), (x,),
                     lambda g: (np.full(shape, float(g) / n),))


def reshape(x, shape):
    old = x.shape
    return record_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(x, index):
    """Gather rows ``x[index]``; repeated indices accumulate on backward."""
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim < 1 or (index.size and (index.min() < 0 or index.max() >= x.shape[0])):
        raise DimensionError(f"take_rows: index out of range for shape {x.shape}")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return record_op("take_rows", x.data[index], (x,), back)


def cosine(a, b):
    """Cosine similarity of vectors, or row-wise for two ``(n, d)`` matrices."""
    if a.shape != b.shape or a.data.ndim not in (1, 2):
        raise DimensionError(f"cosine: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    na = np.linalg.norm(ad, axis=-1)
    nb = np.linalg.norm(bd, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("cosine similarity of a zero vector")
    dot = (ad * bd).sum(axis=-1)
    cos = dot / (na * nb)

    def back(g):
        ge = np.expand_dims(g, -1)
        c = np.expand_dims(cos, -1)
        na_, nb_ = np.expand_dims(na, -1), np.expand_dims(nb, -1)
        ga = ge * (bd / (na_ * nb_) - c * ad / (na_ * na_)) if a.requires_grad else None
        gb = ge * (ad / (na_ * nb_) - c * bd / (nb_ * nb_)) if b.requires_grad else None
        return ga, gb

    return record_op("cosine", cos, (a, b), back)


def _sig(z):
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def lstm_cell(x, h, c, w, b, mask=None):
    """One fused LSTM step over a batch.

    ``w`` has shape ``(n_in + n_h, 4 n_h)`` with column blocks ordered input,
    forget, output and candidate gates. Rows whose ``mask`` entry is 0 carry
    ``h`` and ``c`` through unchanged, which lets variable-length sequences share
    one batched step.
    """
    n_h = h.shape[-1]
    if (x.data.ndim != 2 or h.shape != c.shape or h.shape[0] != x.shape[0]
            or w.shape != (x.shape[1] + n_h, 4 * n_h) or b.shape != (4 * n_h,)):
        raise DimensionError(
            f"lstm_cell: incompatible shapes x{x.shape} h{h.shape} c{c.shape} w{w.shape} b{b.shape}")
    xh = np.concatenate([x.data, h.data], axis=1)
    z = xh @ w.data + b.data
    i = _sig(z[:, :n_h])
    f = _sig(z[:, n_h:2 * n_h])
    o = _sig(z[:, 2 * n_h:3 * n_h])
    gg = np.tanh(z[:, 3 * n_h:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is None:
        m = None
        h_out, c_out = h_new, c_new
    else:
        m = np.asarray(mask, dtype=np.float64)[:, None]
        h_out = m * h_new + (1.0 - m) * h.data
        c_out = m * c_new + (1.0 - m) * c.data
    wd, cd, n_in = w.data, c.data, x.shape[1]

    def back(gh, gc):
        if m is None:
            gh_new, gc_new, gh_keep, gc_keep = gh, gc, 0.0, 0.0
        else:
            gh_new, gc_new = gh * m, gc * m
            gh_keep, gc_keep = gh * (1.0 - m), gc * (1.0 - m)
        gc_tot = gc_new + gh_new * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc_tot * gg * i * (1.0 - i),
            gc_tot * cd * f * (1.0 - f),
            gh_new * tc * o * (1.0 - o),
            gc_tot * i * (1.0 - gg * gg),
        ], axis=1)
        dxh = dz @ wd.T
        return (dxh[:, :n_in],
                dxh[:, n_in:] + gh_keep,
                gc_tot * f + gc_keep,
                xh.T @ dz if w.requires_grad else None,
                dz.sum(axis=0) if b.requires_grad else None)

    h_t, c_t = record_multi_op("lstm_cell", [h_out, c_out], (x, h, c, w, b), back)
    return h_t, c_t


def lstm_sequence(xs, mask, w, b):
    """Run the LSTM over ``T`` steps from a zero state; returns the final hidden state.

    ``xs`` is ``(T, B, n_in)``, ``mask`` is ``(T, B)``: a 0 entry skips that step
    for that row. Equivalent to chaining :func:`lstm_cell`, but recorded as a
    single op whose backward runs through time in one pass.
    """
    steps, batch, n_in = xs.shape
    n_h = b.shape[0] // 4
    if w.shape != (n_in + n_h, 4 * n_h) or np.shape(mask) != (steps, batch):
        raise DimensionError(f"lstm_sequence: incompatible shapes xs{xs.shape} w{w.shape} b{b.shape}")
    wd, bd = w.data, b.data
    m = np.asarray(mask, dtype=np.float64)[:, :, None]
    h = np.zeros((batch, n_h))
    c = np.zeros((batch, n_h))
    xh_all = np.empty((steps, batch, n_in + n_h))
    gates = np.empty((steps, batch, 4 * n_h))
    c_prev_all = np.empty((steps, batch, n_h))
    tc_all = np.empty((steps, batch, n_h))
    for t in range(steps):
        xh_all[t, :, :n_in] = xs.data[t]
        xh_all[t, :, n_in:] = h
        z = xh_all[t] @ wd + bd
        z[:, :3 * n_h] = _sig(z[:, :3 * n_h])
        z[:, 3 * n_h:] = np.tanh(z[:, 3 * n_h:])
        gates[t] = z
        c_prev_all[t] = c
        c_new = z[:, n_h:2 * n_h] * c + z[:, :n_h] * z[:, 3 * n_h:]
        tc = np.tanh(c_new)
        tc_all[t] = tc
        mt = m[t]
        h = mt * (z[:, 2 * n_h:3 * n_h] * tc) + (1.0 - mt) * h
        c = mt * c_new + (1.0 - mt) * c

    def back(gh):
        dz_all = np.empty_like(gates)
        gc = np.zeros((batch, n_h))
        gh = gh.copy()
        wt = wd.T
        for t in range(steps - 1, -1, -1):
            mt = m[t]
            z = gates[t]
            i, f, o, g = z[:, :n_h], z[:, n_h:2 * n_h], z[:, 2 * n_h:3 * n_h], z[:, 3 * n_h:]
            tc = tc_all[t]
            gh_new = gh * mt
            gc_tot = gc * mt + gh_new * o * (1.0 - tc * tc)
            dz = dz_all[t]
            dz[:, :n_h] = gc_tot * g * i * (1.0 - i)
            dz[:, n_h:2 * n_h] = gc_tot * c_prev_all[t] * f * (1.0 - f)
            dz[:, 2 * n_h:3 * n_h] = gh_new * tc * o * (1.0 - o)
            dz[:, 3 * n_h:] = gc_tot * i * (1.0 - g * g)
            dxh = dz @ wt
            gh = dxh[:, n_in:] + gh * (1.0 - mt)
            gc = gc_tot * f + gc * (1.0 - mt)
            dz_all[t] = dz
            xs_grad[t] = dxh[:, :n_in]
        flat_xh = xh_all.reshape(-1, n_in + n_h)
        flat_dz = dz_all.reshape(-1, 4 * n_h)
        return (xs_grad if xs.requires_grad else None,
                flat_xh.T @ flat_dz if w.requires_grad else None,
                flat_dz.sum(axis=0) if b.requires_grad else None)

    xs_grad = np.empty(xs.shape)
    return record_op("lstm_sequence", h, (xs, w, b), back)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


_ADAM_BLOCK = 65536


def adam_step(params, state):
    """Apply one bias-corrected Adam update in place and advance the step counter."""
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient")
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ContractError("parameter list changed between Adam steps")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    c1 = 1.0 - state.beta1
    c2 = 1.0 - state.beta2
    inv_bc2 = 1.0 / np.sqrt(bc2)
    step = state.lr / bc1
    tmp = np.empty(_ADAM_BLOCK)
    for p, m, v in zip(params, state.m, state.v):
        gf, mf, vf, pf = p.grad.reshape(-1), m.reshape(-1), v.reshape(-1), p.data.reshape(-1)
        # cache-sized blocks keep every pass in L2
        for s in range(0, gf.size, _ADAM_BLOCK):
            e = min(gf.size, s + _ADAM_BLOCK)
            t, g, mb, vb = tmp[:e - s], gf[s:e], mf[s:e], vf[s:e]
            np.multiply(g, c1, out=t)
            mb *= state.beta1
            mb += t
            np.multiply(g, g, out=t)
            t *= c2
            vb *= state.beta2
            vb += t
            np.sqrt(vb, out=t)
            t *= inv_bc2
            t += state.eps
            np.divide(mb, t, out=t)
            t *= step
            pf[s:e] -= t


def zero_grad(params):
    for p in params:
        p.zero_grad()


CHECKPOINT_MAGIC = b"VMWT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named):
    """Write ``{name: Tensor or array}`` in the VMWT layout."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, t in named.items():
        arr = np.array(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def load_checkpoint(path):
    """Read a VMWT file into an ordered ``{name: ndarray}`` dict."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a VMWT checkpoint", 0)
    version, count = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported VMWT version {version}", 4)
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<I", "name length")
        start = r.pos
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", start) from None
        (rank,) = r.unpack("<I", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        count_el = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * count_el, f"data of {name}"), dtype="<f8")
        out[name] = data.reshape(dims).astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return out
