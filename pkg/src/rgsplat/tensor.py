"""Dense arrays with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus a lazily allocated gradient slot.
Operations executed while a ``Tape`` is active append one node each; calling
``backward(tape, loss)`` replays the nodes in reverse execution order (which
is a reverse topological order, since nodes are recorded as they run) and
accumulates gradients additively into ``Tensor.grad``.

Precision is a process-level choice: float32 for training, float64 for
gradient tests. Every primitive checks its output for NaN/Inf while
``nan_checks`` is enabled so bad values fail loudly at the op that made them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_NAN_CHECKS = True
_TAPE_STACK: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (used by the gradient tests)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def set_nan_checks(enabled: bool) -> None:
    global _NAN_CHECKS
    _NAN_CHECKS = bool(enabled)


def nan_checks_enabled() -> bool:
    return _NAN_CHECKS


class TensorError(ValueError):
    """Raised on shape/contract violations in tensor operations."""


class Tensor:
    """A dense array with an optional gradient slot.

    Values are immutable by convention once the tensor participates in taped
    computation; only ``grad`` is written, and only during ``backward``.
    """

    __slots__ = ("values", "grad", "requires_grad", "is_param", "_produced_on")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = np.asarray(values, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.is_param = False  # marks persistent weights, independent of freezing
        self._produced_on: Optional["Tape"] = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False, dtype=self.values.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}{tag})"

    # arithmetic sugar; the module-level functions do the real work
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad)


def parameter(values) -> Tensor:
    """A persistent weight tensor: collected by modules, saved in checkpoints."""
    t = Tensor(values, requires_grad=True)
    t.is_param = True
    return t


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs: tuple, output: Tensor, vjp: Callable):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitives, single-use for one backward pass."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out_values: np.ndarray, inputs: Sequence, vjp: Callable, name: str) -> Tensor:
    """Wrap an op result, recording a node if a tape is active and needed."""
    if _NAN_CHECKS and not np.all(np.isfinite(out_values)):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    tape = active_tape()
    tensor_inputs = tuple(t for t in inputs if isinstance(t, Tensor))
    needs = tape is not None and any(
        t.requires_grad or t._produced_on is tape for t in tensor_inputs
    )
    out = Tensor(out_values, requires_grad=needs, dtype=out_values.dtype)
    if needs:
        out._produced_on = tape
        tape.nodes.append(_Node(tensor_inputs, out, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate gradients of everything reachable from ``loss`` on ``tape``.

    Gradients accumulate additively into ``Tensor.grad`` (so summed losses
    and repeated leaves compose linearly). A tape may be consumed only once.

    Freshly produced gradient arrays are adopted without a copy; anything
    that may alias another live buffer (views, or arrays already owned by a
    tensor this pass) is copied first.
    """
    if tape.consumed:
        raise TensorError("tape already consumed by a previous backward pass")
    if loss.size != 1:
        raise TensorError(f"loss must be scalar, got shape {loss.shape}")
    if loss._produced_on is not tape:
        raise TensorError("loss tensor was not produced on this tape")
    tape.consumed = True
    adopted: set[int] = set()

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        if t.grad is None:
            if (
                not isinstance(g, np.ndarray)
                or g.base is not None
                or id(g) in adopted
                or g.dtype != t.values.dtype
                or g.shape != t.values.shape
            ):
                t.grad = np.array(g, dtype=t.values.dtype, copy=True).reshape(t.values.shape)
            else:
                t.grad = g
            adopted.add(id(t.grad))
        else:
            t.grad += g

    accumulate(loss, np.ones_like(loss.values))
    for node in reversed(tape.nodes):
        g_out = node.output.grad
        if g_out is None:
            continue
        grads = node.vjp(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None:
                continue
            if t.requires_grad or t._produced_on is tape:
                accumulate(t, g)
    # break the tape <-> node <-> tensor reference cycles so a training loop
    # frees each step's activations without waiting for the cycle collector
    tape.nodes.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values + b.values

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values - b.values

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av * bv

    def vjp(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _record(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av / bv

    def vjp(g):
        return (
            _unbroadcast(g / bv, a.shape),
            _unbroadcast(-g * av / (bv * bv), b.shape),
        )

    return _record(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.values, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _record(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.values)
    return _record(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _record(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ex = np.exp(av[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), vjp, "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = np.maximum(av, 0.0)

    def vjp(g):
        return (g * (av > 0),)

    return _record(out, (a,), vjp, "relu")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    av = a.values

    def vjp(g):
        return (g * np.sign(av),)

    return _record(np.abs(av), (a,), vjp, "abs")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.values.reshape(shape)
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.values.transpose(axes)
    return _record(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, key) -> Tensor:
    """Basic (slice/int) indexing; use ``take`` for integer-array gathers."""
    a = as_tensor(a)
    out = a.values[key]

    def vjp(g):
        gx = np.zeros_like(a.values)
        gx[key] = g
        return (gx,)

    return _record(np.array(out, copy=True), (a,), vjp, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise TensorError("concat of zero tensors")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record(out, tensors, vjp, "concat")


def scatter_rows_sum(n_rows: int, idx_flat: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Segmented scatter-add of ``rows`` into ``n_rows`` bins (deterministic)."""
    out = np.zeros((n_rows,) + rows.shape[1:], dtype=rows.dtype)
    if idx_flat.size == 0:
        return out
    order = np.argsort(idx_flat, kind="stable")
    si = idx_flat[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(si)) + 1])
    sums = np.add.reduceat(rows[order], starts, axis=0)
    out[si[starts]] = sums
    return out


def take(a, idx) -> Tensor:
    """Gather rows (axis 0) with an integer index array; scatter-add backward."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = np.take(a.values, idx, axis=0)

    def vjp(g):
        flat = g.reshape((-1,) + a.shape[1:])
        return (scatter_rows_sum(a.shape[0], idx.reshape(-1), flat),)

    return _record(out, (a,), vjp, "take")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim == 0 or bv.ndim == 0:
        raise TensorError("matmul requires at least 1-d operands")
    out = av @ bv

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        ga = gb = None
        am = av[None, :] if av.ndim == 1 else av
        bm = bv[:, None] if bv.ndim == 1 else bv
        gm = g
        if av.ndim == 1:
            gm = np.expand_dims(gm, -2)
        if bv.ndim == 1:
            gm = np.expand_dims(gm, -1)
        ga = gm @ np.swapaxes(bm, -1, -2)
        gb = np.swapaxes(am, -1, -2) @ gm
        if av.ndim == 1:
            ga = ga.reshape(-1)[: av.shape[0]] if ga.ndim == 1 else _unbroadcast(ga, (1,) + av.shape).reshape(av.shape)
        else:
            ga = _unbroadcast(ga, av.shape)
        if bv.ndim == 1:
            gb = _unbroadcast(gb, bv.shape + (1,)).reshape(bv.shape)
        else:
            gb = _unbroadcast(gb, bv.shape)
        return ga, gb

    return _record(out, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# neural primitives
# ---------------------------------------------------------------------------

def linear(x, w, b=None) -> Tensor:
    """Row-wise affine map ``x @ w + b`` with explicit shape checking."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise TensorError(
            f"linear: input shape {x.shape} does not match weight shape {w.shape}"
        )
    out = matmul(x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise TensorError(
                f"linear: bias shape {b.shape} does not match weight shape {w.shape}"
            )
        out = add(out, b)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    av = a.values
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        tmp = g * out
        return (tmp - out * tmp.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp, "softmax")


def softmax_attention(q, k, v, scale: float) -> Tensor:
    """Scaled dot-product attention over full key/value sets.

    q: [n, d], k: [m, d], v: [m, dv] (leading batch dims allowed as long as
    they broadcast). Rows of softmax(q kT * scale) sum to 1 by construction.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-2] == 0:
        raise TensorError("softmax_attention: no keys (m = 0)")
    if q.shape[-1] != k.shape[-1]:
        raise TensorError(
            f"softmax_attention: query dim {q.shape} vs key dim {k.shape}"
        )
    scores = mul(matmul(q, transpose(k, _swap_last_two(k.ndim))), float(scale))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)


def _swap_last_two(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row of the last axis to zero mean, unit variance."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if c <= 1:
        raise TensorError("layer_norm: last axis must have more than one element")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def vjp(g):
        gg = g * gain.values
        gx = inv * (
            gg
            - gg.mean(axis=-1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), vjp, "layer_norm")


def pixel_unshuffle(x, r: int) -> Tensor:
    """Fold r x r spatial blocks into channels: [..., H, W, C] -> [..., H/r, W/r, C*r*r]."""
    x = as_tensor(x)
    if r < 1:
        raise TensorError("pixel_unshuffle: r must be >= 1")
    *lead, h, w, c = x.shape
    if h % r or w % r:
        raise TensorError(f"pixel_unshuffle: extents {h}x{w} not divisible by r={r}")
    lead = tuple(lead)
    nl = len(lead)
    xv = x.values.reshape(lead + (h // r, r, w // r, r, c))
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out = xv.transpose(perm).reshape(lead + (h // r, w // r, r * r * c))

    def vjp(g):
        gv = g.reshape(lead + (h // r, w // r, r, r, c)).transpose(perm)
        return (np.ascontiguousarray(gv).reshape(x.shape),)

    return _record(np.ascontiguousarray(out), (x,), vjp, "pixel_unshuffle")


def pixel_shuffle(x, r: int) -> Tensor:
    """Inverse of pixel_unshuffle: [..., H, W, C*r*r] -> [..., H*r, W*r, C]."""
    x = as_tensor(x)
    if r < 1:
        raise TensorError("pixel_shuffle: r must be >= 1")
    *lead, h, w, crr = x.shape
    if crr % (r * r):
        raise TensorError(f"pixel_shuffle: channels {crr} not divisible by r^2={r*r}")
    c = crr // (r * r)
    lead = tuple(lead)
    nl = len(lead)
    xv = x.values.reshape(lead + (h, w, r, r, c))
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out = xv.transpose(perm).reshape(lead + (h * r, w * r, c))

    def vjp(g):
        gv = g.reshape(lead + (h, r, w, r, c)).transpose(perm)
        return (np.ascontiguousarray(gv).reshape(x.shape),)

    return _record(np.ascontiguousarray(out), (x,), vjp, "pixel_shuffle")


def pad2d(x, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two spatial axes of [..., H, W, C]."""
    x = as_tensor(x)
    widths = [(0, 0)] * (x.ndim - 3) + [(top, bottom), (left, right), (0, 0)]
    out = np.pad(x.values, widths)
    *lead, h, w, c = x.shape

    def vjp(g):
        sl = (Ellipsis, slice(top, top + h), slice(left, left + w), slice(None))
        return (np.array(g[sl], copy=True),)

    return _record(out, (x,), vjp, "pad2d")


# ---------------------------------------------------------------------------
# image-shaped primitives
# ---------------------------------------------------------------------------

def _bilinear_weights(n_in: int, n_out: int):
    """Sampling positions and weights for half-pixel-centered resizing."""
    scale = n_in / n_out
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    x0 = np.floor(x).astype(np.int64)
    frac = x - x0
    i0 = np.clip(x0, 0, n_in - 1)
    i1 = np.clip(x0 + 1, 0, n_in - 1)
    return i0, i1, frac


def resize_bilinear(x, out_hw) -> Tensor:
    """Bilinear resize over the H, W axes of [..., H, W, C].

    Output sample centers map to input coordinates via the half-pixel
    convention ((i + 0.5) * scale - 0.5 in index space), so a same-size
    resize is exactly the identity.
    """
    x = as_tensor(x)
    *lead, h, w, c = x.shape
    ho, wo = int(out_hw[0]), int(out_hw[1])
    if ho < 1 or wo < 1:
        raise TensorError(f"resize_bilinear: bad output size {out_hw}")
    y0, y1, fy = _bilinear_weights(h, ho)
    x0, x1, fx = _bilinear_weights(w, wo)
    dt = x.dtype
    fy = fy.astype(dt)[:, None, None]
    fx = fx.astype(dt)[None, :, None]
    v = x.values
    top = v[..., y0, :, :]
    bot = v[..., y1, :, :]
    rows0 = top[..., :, x0, :] * (1 - fx) + top[..., :, x1, :] * fx
    rows1 = bot[..., :, x0, :] * (1 - fx) + bot[..., :, x1, :] * fx
    out = rows0 * (1 - fy) + rows1 * fy

    def vjp(g):
        gx = np.zeros_like(v)
        g0 = g * (1 - fy)
        g1 = g * fy
        flat = gx.reshape((-1, h, w, c))
        for gpart, yidx in ((g0, y0), (g1, y1)):
            gp = gpart.reshape((-1, ho, wo, c))
            ga = gp * (1 - fx)
            gb = gp * fx
            for b in range(flat.shape[0]):
                np.add.at(flat[b], (yidx[:, None], x0[None, :]), ga[b])
                np.add.at(flat[b], (yidx[:, None], x1[None, :]), gb[b])
        return (flat.reshape(x.shape),)

    return _record(np.ascontiguousarray(out), (x,), vjp, "resize_bilinear")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution over [N, H, W, Cin] with kernel [kh, kw, Cin, Cout]."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise TensorError(f"conv2d: expected 4-d input/kernel, got {x.shape}/{w.shape}")
    n, h, ww_, cin = x.shape
    kh, kw, cin_w, cout = w.shape
    if cin != cin_w:
        raise TensorError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    xv = x.values
    if padding:
        xv = np.pad(xv, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = xv.shape[1], xv.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise TensorError("conv2d: kernel larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xv, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [N, Ho, Wo, Cin, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * ho * wo, kh * kw * cin
    )
    wmat = w.values.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    if b is not None:
        out = out + b.values

    def vjp(g):
        gflat = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ gflat).reshape(w.shape)
        gcols = (gflat @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros((n, hp, wp, cin), dtype=xv.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += gcols[
                    :, :, :, i, j, :
                ]
        if padding:
            gx = gxp[:, padding : padding + h, padding : padding + ww_, :]
        else:
            gx = gxp
        if b is not None:
            gb = gflat.sum(axis=0)
            return np.ascontiguousarray(gx), gw, gb
        return np.ascontiguousarray(gx), gw

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, vjp, "conv2d")
