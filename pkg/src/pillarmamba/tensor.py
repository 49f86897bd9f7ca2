"""Dense numpy-backed tensors with reverse-mode differentiation on a recorded tape.

Every operator computes its result eagerly with numpy and, while a ``Tape`` is
active, records a closure mapping the output gradient back to input gradients.
Only the operators defined here are differentiable. The compute path runs in
single precision; oracle and gradient checks run the same operators in double.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation

Array = np.ndarray

_FLOAT_DTYPES = (np.float32, np.float64)


def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tensor:
    """Immutable-by-convention dense array value participating in the tape."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, reciprocal(other))


class Param:
    """A learnable value plus its accumulated gradient."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str = ""):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = np.zeros_like(self.value.data)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name or '<anon>'}, shape={self.value.shape})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Recorded-operation tape; reverse walk yields gradients.

    Usage::

        with Tape() as tape:
            loss = ...            # compose ops
        tape.backward(loss)
        g = tape.grad(some_tensor_or_param)
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._grads: dict[int, Array] | None = None

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self._records.append((out, tuple(parents), backward))

    def backward(self, root: Tensor) -> None:
        if root.size != 1:
            raise ContractViolation(
                f"backward root must be scalar (sum-reduce first), got shape {root.shape}"
            )
        grads: dict[int, Array] = {id(root): np.ones_like(root.data)}
        for out, parents, bwd in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            parent_grads = bwd(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        self._grads = grads

    def grad(self, obj: "Tensor | Param") -> Array:
        if self._grads is None:
            raise RuntimeError("call backward() before querying gradients")
        t = obj.value if isinstance(obj, Param) else obj
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def accumulate(self, params: Iterable[Param]) -> None:
        for p in params:
            p.grad += self.grad(p)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
    tape = _active_tape()
    if tape is not None:
        tape.record(out, parents, backward)


def as_tensor(x) -> Tensor:
    if isinstance(x, Param):
        return x.value
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def value(x) -> Array:
    return as_tensor(x).data


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    out = Tensor(ta.data + tb.data)
    sa, sb = ta.data.shape, tb.data.shape
    _record(out, (ta, tb), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    return out


def sub(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    out = Tensor(ta.data - tb.data)
    sa, sb = ta.data.shape, tb.data.shape
    _record(out, (ta, tb), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
    return out


def mul(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    out = Tensor(ta.data * tb.data)
    da, db = ta.data, tb.data
    _record(
        out,
        (ta, tb),
        lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)),
    )
    return out


def neg(a) -> Tensor:
    ta = as_tensor(a)
    out = Tensor(-ta.data)
    _record(out, (ta,), lambda g: (-g,))
    return out


def reciprocal(a) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    out = Tensor(1.0 / d)
    _record(out, (ta,), lambda g: (-g / (d * d),))
    return out


def texp(a) -> Tensor:
    ta = as_tensor(a)
    e = np.exp(ta.data)
    out = Tensor(e)
    _record(out, (ta,), lambda g: (g * e,))
    return out


def texpm1(a) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    out = Tensor(np.expm1(d))
    _record(out, (ta,), lambda g: (g * np.exp(d),))
    return out


def tlog(a) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    out = Tensor(np.log(d))
    _record(out, (ta,), lambda g: (g / d,))
    return out


def tabs(a) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    out = Tensor(np.abs(d))
    _record(out, (ta,), lambda g: (g * np.sign(d),))
    return out


def pow_const(a, p: float) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    out = Tensor(d**p)
    _record(out, (ta,), lambda g: (g * p * d ** (p - 1),))
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    out = Tensor(np.clip(d, lo, hi))
    inside = ((d > lo) & (d < hi)).astype(d.dtype)
    _record(out, (ta,), lambda g: (g * inside,))
    return out


def sigmoid(a) -> Tensor:
    ta = as_tensor(a)
    s = _stable_sigmoid(ta.data)
    out = Tensor(s)
    _record(out, (ta,), lambda g: (g * s * (1.0 - s),))
    return out


def silu(a) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    s = _stable_sigmoid(d)
    out = Tensor(d * s)
    _record(out, (ta,), lambda g: (g * (s + d * s * (1.0 - s)),))
    return out


def relu(a) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    out = Tensor(np.maximum(d, 0.0))
    _record(out, (ta,), lambda g: (g * (d > 0.0).astype(d.dtype),))
    return out


def softplus(a) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    out = Tensor(np.logaddexp(0.0, d).astype(d.dtype))
    s = _stable_sigmoid(d)
    _record(out, (ta,), lambda g: (g * s,))
    return out


# ---------------------------------------------------------------------------
# linear algebra / reductions / reshaping
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    da, db = ta.data, tb.data
    if da.ndim != 2 or db.ndim != 2:
        raise ContractViolation(f"matmul expects 2-D operands, got {da.shape} @ {db.shape}")
    if da.shape[1] != db.shape[0]:
        raise ContractViolation(f"matmul inner-dimension mismatch: {da.shape} @ {db.shape}")
    out = Tensor(da @ db)
    _record(out, (ta, tb), lambda g: (g @ db.T, da.T @ g))
    return out


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    out = Tensor(d.sum(axis=axis, keepdims=keepdims))
    shape = d.shape

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape).astype(d.dtype, copy=False),)

    _record(out, (ta,), bwd)
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    if axis is None:
        count = d.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([d.shape[i] for i in ax]))
    return mul(reduce_sum(ta, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    ta = as_tensor(a)
    d = ta.data
    out = Tensor(d.reshape(shape))
    orig = d.shape
    _record(out, (ta,), lambda g: (g.reshape(orig),))
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    datas = [t.data for t in ts]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]
    _record(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def split(a, sizes: Sequence[int], axis: int = 0) -> tuple[Tensor, ...]:
    ta = as_tensor(a)
    d = ta.data
    if sum(sizes) != d.shape[axis]:
        raise ContractViolation(
            f"split sizes {list(sizes)} do not sum to axis extent {d.shape[axis]}"
        )
    outs = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * d.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)
        piece = Tensor(d[sl].copy())

        def bwd(g, sl=sl):
            full = np.zeros_like(d)
            full[sl] = g
            return (full,)

        _record(piece, (ta,), bwd)
        outs.append(piece)
        start += size
    return tuple(outs)


def gather_rows(a, idx: Array) -> Tensor:
    """Reorder/select rows of a 2-D tensor; backward scatter-adds."""
    ta = as_tensor(a)
    d = ta.data
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(d[idx])
    unique = np.unique(idx).size == idx.size
    n = d.shape[0]

    def bwd(g):
        gz = np.zeros_like(d)
        if unique:
            gz[idx] = g
        else:
            np.add.at(gz, idx, g)
        return (gz,)

    _record(out, (ta,), bwd)
    return out


def scatter_rows(a, idx: Array, n_rows: int) -> Tensor:
    """Place rows of a 2-D tensor at unique row indices of a zero output."""
    ta = as_tensor(a)
    d = ta.data
    idx = np.asarray(idx, dtype=np.intp)
    if np.unique(idx).size != idx.size:
        raise ContractViolation("scatter_rows requires unique destination indices")
    out_data = np.zeros((n_rows,) + d.shape[1:], dtype=d.dtype)
    out_data[idx] = d
    out = Tensor(out_data)
    _record(out, (ta,), lambda g: (g[idx],))
    return out


def masked_max(a, mask: Array) -> Tensor:
    """Channelwise max over axis 1 of (P, K, C) restricted to mask (P, K).

    Every row must have at least one valid entry. Backward routes the gradient
    to the first position attaining the max.
    """
    ta = as_tensor(a)
    d = ta.data
    mask = np.asarray(mask, dtype=bool)
    if d.ndim != 3 or mask.shape != d.shape[:2]:
        raise ContractViolation(f"masked_max expects (P,K,C) with mask (P,K), got {d.shape} / {mask.shape}")
    if not mask.any(axis=1).all():
        raise ContractViolation("masked_max: some row has no valid entries")
    neg_inf = np.array(-np.inf, dtype=d.dtype)
    masked = np.where(mask[:, :, None], d, neg_inf)
    am = masked.argmax(axis=1)  # (P, C), first max wins
    out = Tensor(np.take_along_axis(masked, am[:, None, :], axis=1)[:, 0, :])

    def bwd(g):
        gz = np.zeros_like(d)
        np.put_along_axis(gz, am[:, None, :], g[:, None, :], axis=1)
        return (gz,)

    _record(out, (ta,), bwd)
    return out


# ---------------------------------------------------------------------------
# spatial ops on (C, H, W) maps
# ---------------------------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D convolution on a single (C, H, W) map.

    weight: (C_out, C_in/groups, kh, kw); groups == C_in gives a depthwise
    convolution, kernel 1 a pointwise channel mix.
    """
    tx, tw = as_tensor(x), as_tensor(weight)
    tb = as_tensor(bias) if bias is not None else None
    xd, wd = tx.data, tw.data
    if not (isinstance(stride, int) and stride >= 1):
        raise ConfigurationError(f"stride must be a positive int, got {stride!r}")
    if not (isinstance(padding, int) and padding >= 0):
        raise ConfigurationError(f"padding must be a nonnegative int, got {padding!r}")
    if xd.ndim != 3 or wd.ndim != 4:
        raise ContractViolation(f"conv2d expects x (C,H,W) and weight (O,I,kh,kw), got {xd.shape} / {wd.shape}")
    c_in, h, w = xd.shape
    c_out, c_in_g, kh, kw = wd.shape
    if c_in % groups != 0 or c_out % groups != 0:
        raise ContractViolation(f"channels {c_in}->{c_out} not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ContractViolation(
            f"weight shape {wd.shape} inconsistent with input shape {xd.shape} and groups={groups}"
        )
    if tb is not None and tb.data.shape != (c_out,):
        raise ContractViolation(f"bias shape {tb.data.shape} != ({c_out},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ContractViolation(f"empty output for input {xd.shape}, kernel {kh}x{kw}, stride {stride}")

    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C_in, OH, OW, kh, kw)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(groups, c_in_g * kh * kw, oh * ow)
    wg = wd.reshape(groups, c_out // groups, c_in_g * kh * kw)
    out_data = np.matmul(wg, cols).reshape(c_out, oh, ow)
    if tb is not None:
        out_data = out_data + tb.data[:, None, None]
    out = Tensor(out_data)

    hp, wp = xp.shape[1], xp.shape[2]

    def bwd(g):
        go = g.reshape(groups, c_out // groups, oh * ow)
        dw = np.matmul(go, cols.transpose(0, 2, 1)).reshape(wd.shape)
        dcols = np.matmul(wg.transpose(0, 2, 1), go)
        dcols = dcols.reshape(c_in, kh, kw, oh, ow)
        dxp = np.zeros((c_in, hp, wp), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride] += dcols[:, i, j]
        dx = dxp[:, padding : padding + h, padding : padding + w] if padding else dxp
        db = g.sum(axis=(1, 2)) if tb is not None else None
        return (dx, dw, db) if tb is not None else (dx, dw)

    parents = (tx, tw, tb) if tb is not None else (tx, tw)
    _record(out, parents, bwd)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5, axis: int = 0) -> Tensor:
    """Normalize over one axis (channels by default), per remaining site."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    tx, tg, tb = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = tx.data
    c = xd.shape[axis]
    if tg.data.shape != (c,) or tb.data.shape != (c,):
        raise ContractViolation(
            f"gamma/beta shapes {tg.data.shape}/{tb.data.shape} != ({c},) for axis {axis} of {xd.shape}"
        )
    bshape = [1] * xd.ndim
    bshape[axis] = c
    gb = tg.data.reshape(bshape)
    bb = tb.data.reshape(bshape)
    mean = xd.mean(axis=axis, keepdims=True)
    var = xd.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = Tensor(gb * xhat + bb)
    sum_axes = tuple(i for i in range(xd.ndim) if i != axis)

    def bwd(g):
        dxhat = g * gb
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        dgamma = (g * xhat).sum(axis=sum_axes)
        dbeta = g.sum(axis=sum_axes)
        return dx, dgamma, dbeta

    _record(out, (tx, tg, tb), bwd)
    return out


def global_average_pool(x) -> Tensor:
    """Spatial mean per channel: (C, H, W) -> (C,)."""
    tx = as_tensor(x)
    d = tx.data
    if d.ndim != 3:
        raise ContractViolation(f"global_average_pool expects (C,H,W), got {d.shape}")
    c, h, w = d.shape
    out = Tensor(d.mean(axis=(1, 2)))
    scale = 1.0 / (h * w)
    _record(
        out,
        (tx,),
        lambda g: (np.broadcast_to(g[:, None, None] * scale, d.shape).astype(d.dtype, copy=False),),
    )
    return out


def nearest_upsample_2x(x) -> Tensor:
    """(C, H, W) -> (C, 2H, 2W) by nearest-neighbor replication."""
    tx = as_tensor(x)
    d = tx.data
    if d.ndim != 3:
        raise ContractViolation(f"nearest_upsample_2x expects (C,H,W), got {d.shape}")
    c, h, w = d.shape
    out = Tensor(d.repeat(2, axis=1).repeat(2, axis=2))
    _record(out, (tx,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),))
    return out


def bev_to_tokens(x) -> Tensor:
    """(C, X, Y) -> (X*Y, C) row-major token sequence."""
    tx = as_tensor(x)
    d = tx.data
    if d.ndim != 3:
        raise ContractViolation(f"bev_to_tokens expects (C,X,Y), got {d.shape}")
    c = d.shape[0]
    out = Tensor(np.ascontiguousarray(d.reshape(c, -1).T))
    shape = d.shape
    _record(out, (tx,), lambda g: (np.ascontiguousarray(g.T).reshape(shape),))
    return out


def tokens_to_bev(t, x_cells: int, y_cells: int) -> Tensor:
    """(X*Y, C) row-major tokens -> (C, X, Y)."""
    tt = as_tensor(t)
    d = tt.data
    if d.ndim != 2 or d.shape[0] != x_cells * y_cells:
        raise ContractViolation(f"tokens_to_bev expects ({x_cells * y_cells}, C), got {d.shape}")
    c = d.shape[1]
    out = Tensor(np.ascontiguousarray(d.T).reshape(c, x_cells, y_cells))
    _record(out, (tt,), lambda g: (np.ascontiguousarray(g.reshape(c, -1).T),))
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    passed: bool
    per_input: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"[{status}] {self.name or 'grad_check'}: max_rel_error={self.max_rel_error:.3e}"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence["Tensor | Param"],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    name: str = "",
) -> GradCheckReport:
    """Compare the tape gradient of a scalar-valued fn against central differences.

    All checked inputs must be double precision; fn is re-evaluated 2*numel
    times per input, so keep shapes small.
    """
    tensors = [inp.value if isinstance(inp, Param) else inp for inp in inputs]
    for t in tensors:
        if t.dtype != np.float64:
            raise ConfigurationError("grad_check requires double-precision inputs")
    with Tape() as tape:
        out = fn(*inputs)
    if out.size != 1:
        raise ContractViolation("grad_check target must be scalar-valued (sum-reduce first)")
    tape.backward(out)
    analytic = [tape.grad(t) for t in tensors]

    per_input: list[float] = []
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(*inputs).item()
            flat[i] = orig - eps
            f_minus = fn(*inputs).item()
            flat[i] = orig
            num[i] = (f_plus - f_minus) / (2.0 * eps)
        af = a.reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(af), np.abs(num)))
        rel = np.abs(af - num) / denom
        per_input.append(float(rel.max()) if rel.size else 0.0)

    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(name=name, max_rel_error=worst, passed=worst <= tolerance, per_input=per_input)
