"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the operations needed by the perceptual models and the correlation
loss are provided. Values are stored in 32-bit floats by default; every op
computes internally in float64 and rounds its output once.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

BETA_MIN = 1e-6

_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class DegenerateBatchError(ValueError):
    """Raised when a correlation is requested on a zero-variance vector."""


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors.

    Used by gradient checks, where float32 rounding would swamp a
    central difference taken with a 1e-3 step.
    """
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


def default_dtype():
    return _DTYPE


_POOL_RECORDERS: list[list] = []


@contextlib.contextmanager
def record_pool_choices() -> Iterator[list]:
    """Collect the argmax index arrays chosen by every maxpool2 call in the block."""
    choices: list = []
    _POOL_RECORDERS.append(choices)
    try:
        yield choices
    finally:
        _POOL_RECORDERS.remove(choices)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Node:
    """One recorded op: its inputs and the rule mapping output grad to input grads."""

    __slots__ = ("inputs", "backward", "op")

    def __init__(self, inputs: Sequence["Tensor"], backward: Callable, op: str):
        self.inputs = tuple(inputs)
        self.backward = backward
        self.op = op


class Tensor:
    """A dense array, optionally tracked for gradients.

    Parameters
    ----------
    data : array_like
        Values; copied and cast to the current storage dtype.
    requires_grad : bool
        Whether this tensor is a leaf whose gradient should be accumulated.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _from_op(cls, value: np.ndarray, inputs, backward, op: str) -> "Tensor":
        _check_finite(value, op)
        out = cls.__new__(cls)
        out.data = np.asarray(value, dtype=_DTYPE)
        out.requires_grad = any(t.requires_grad for t in inputs)
        out.grad = None
        out.node = Node(inputs, backward, op) if out.requires_grad else None
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # elementwise arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, power(as_tensor(other), -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered list of the op nodes that lead to a root tensor."""

    def __init__(self, root: Tensor):
        self.order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.order)

    def clear(self) -> None:
        for t in self.order:
            t.node = None
        self.order = []


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    The graph hanging off ``loss`` is released afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape: no input requires grad")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for t in reversed(tape.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                _check_finite(g, "backward")
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g.astype(t.data.dtype)
            continue
        in_grads = t.node.backward(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    tape.clear()


# ---------------------------------------------------------------------------
# generic elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(_f64(a) + _f64(b), (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-_f64(a), (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = _f64(a), _f64(b)

    def bw(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return Tensor._from_op(av * bv, (a, b), bw, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    av = _f64(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av**exponent

    def bw(g):
        return (g * exponent * av ** (exponent - 1),)

    return Tensor._from_op(out, (a,), bw, f"pow{exponent}")


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(np.array(_f64(a).sum()), (a,),
                           lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return Tensor._from_op(np.array(_f64(a).mean()), (a,),
                           lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._from_op(_f64(a).reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-d tensors (or scalars) into one vector."""
    sizes = [t.data.size for t in items]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]].reshape(items[i].shape) for i in range(len(items)))

    value = np.concatenate([_f64(t).reshape(-1) for t in items])
    return Tensor._from_op(value, tuple(items), bw, "stack")


# ---------------------------------------------------------------------------
# image ops


def _reflect_pad_grad(gp: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of ``np.pad(x, p, mode="reflect")`` over the last two axes."""
    if p == 0:
        return gp
    for axis in (-2, -1):
        gp = np.moveaxis(gp, axis, 0)
        n = gp.shape[0] - 2 * p
        core = gp[p:p + n].copy()
        for r in range(p):
            core[p - r] += gp[r]
            core[n - 2 - r] += gp[p + n + r]
        gp = np.moveaxis(core, 0, axis)
    return gp


def _correlate(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    # xp: (n, cin, H, W), w: (cout, cin, k, k) -> (n, cout, H-k+1, W-k+1)
    k = w.shape[-1]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "valid") -> Tensor:
    """2-D cross-correlation with bias.

    ``padding="mirror-same"`` reflects the borders (without repeating the
    edge sample) so the output keeps the input's spatial size.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and (Cout, Cin, k, k) weight")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, weight expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    if padding == "valid":
        if k > h or k > w:
            raise ValueError(f"kernel {k} larger than input {h}x{w}")
        p = 0
    elif padding == "mirror-same":
        p = k // 2
        if p >= h or p >= w:
            raise ValueError(f"kernel {k} too large to mirror-pad a {h}x{w} input")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    xv = _f64(x)
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect") if p else xv
    wv = _f64(weight)
    out = _correlate(xp, wv) + _f64(bias)[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            win = sliding_window_view(xp, (k, k), axis=(2, 3))
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            wflip = wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _reflect_pad_grad(_correlate(gpad, wflip), p)
        return gx, gw, gb

    return Tensor._from_op(out, (x, weight, bias), bw, "conv2d")


@dataclass
class GdnParams:
    """Parameters of one generalized divisive normalization layer.

    ``gamma`` is a length-C vector when ``diagonal_only`` (each channel
    normalized by its own energy), otherwise a C x C matrix.
    """

    beta: Tensor
    gamma: Tensor
    diagonal_only: bool = False

    def __post_init__(self):
        c = self.beta.shape[0]
        expected = (c,) if self.diagonal_only else (c, c)
        if self.beta.shape != (c,) or self.gamma.shape != expected:
            raise ValueError(f"GDN shapes beta={self.beta.shape} gamma={self.gamma.shape} "
                             f"inconsistent (diagonal_only={self.diagonal_only})")

    @classmethod
    def create(cls, channels: int, diagonal_only: bool = False,
               beta: float = 1.0, gamma: float = 0.1) -> "GdnParams":
        b = np.full(channels, beta)
        g = np.full(channels, gamma) if diagonal_only else np.eye(channels) * gamma
        return cls(Tensor(b, requires_grad=True), Tensor(g, requires_grad=True), diagonal_only)

    @property
    def channels(self) -> int:
        return self.beta.shape[0]

    def gamma_matrix(self) -> np.ndarray:
        g = self.gamma.data
        return np.diag(g) if self.diagonal_only else g

    def project(self) -> None:
        """Clamp onto the feasible set: beta >= BETA_MIN, gamma >= 0."""
        np.maximum(self.beta.data, BETA_MIN, out=self.beta.data)
        np.maximum(self.gamma.data, 0.0, out=self.gamma.data)

    def check(self) -> None:
        if np.any(self.beta.data < BETA_MIN) or np.any(self.gamma.data < 0):
            raise ValueError("GDN parameters violate positivity constraints")


def gdn(x: Tensor, params: GdnParams) -> Tensor:
    """Per-pixel divisive normalization across channels.

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j**2)``
    """
    if x.ndim != 4:
        raise ValueError("gdn expects an NCHW tensor")
    n, c, h, w = x.shape
    if c != params.channels:
        raise ValueError(f"channel mismatch: input has {c}, GDN has {params.channels}")
    beta, gamma = params.beta, params.gamma
    xv = _f64(x).reshape(n, c, h * w)
    x2 = xv * xv
    bv = _f64(beta)
    gv = _f64(gamma)
    if params.diagonal_only:
        denom = bv[None, :, None] + gv[None, :, None] * x2
    else:
        denom = bv[None, :, None] + np.einsum("ij,njp->nip", gv, x2)
    if not np.all(np.isfinite(denom)) or np.any(denom <= 0):
        raise NonFiniteError("gdn denominator is non-finite or non-positive")
    rs = denom ** -0.5
    out = (xv * rs).reshape(n, c, h, w)

    def bw(g):
        gv_ = g.reshape(n, c, h * w)
        q = -0.5 * gv_ * xv * rs / denom  # dL/d(denominator)
        gb = q.sum(axis=(0, 2))
        if params.diagonal_only:
            gg = (q * x2).sum(axis=(0, 2))
            gx = gv_ * rs + 2.0 * xv * gv[None, :, None] * q
        else:
            gg = np.einsum("nip,njp->ij", q, x2)
            gx = gv_ * rs + 2.0 * xv * np.einsum("ij,nip->njp", gv, q)
        return gx.reshape(n, c, h, w), gb, gg

    return Tensor._from_op(out, (x, beta, gamma), bw, "gdn")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties resolve to the first row-major element."""
    if x.ndim != 4:
        raise ValueError("maxpool2 expects an NCHW tensor")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = _f64(x).reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    for rec in _POOL_RECORDERS:
        rec.append(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return Tensor._from_op(out, (x,), bw, "maxpool2")


def l2_feature_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between ``a[i]`` and ``b[i]`` for each batch item."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0]
    diff = (_f64(a) - _f64(b)).reshape(n, -1)
    dist = np.sqrt((diff * diff).sum(axis=1))

    def bw(g):
        safe = np.where(dist > 0, dist, 1.0)
        ga = np.where(dist[:, None] > 0, diff * (g / safe)[:, None], 0.0).reshape(a.shape)
        return ga, -ga

    return Tensor._from_op(dist, (a, b), bw, "l2_distance")


def pearson(u: Tensor, v) -> Tensor:
    """Pearson correlation of ``u`` against a fixed target ``v``; differentiable in ``u``."""
    u = as_tensor(u)
    uv = _f64(u).reshape(-1)
    vv = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64).reshape(-1)
    if uv.size != vv.size:
        raise ValueError(f"length mismatch: {uv.size} vs {vv.size}")
    if uv.size < 3:
        raise ValueError("pearson needs at least 3 samples")
    uc = uv - uv.mean()
    vc = vv - vv.mean()
    su = np.sqrt((uc * uc).sum())
    sv = np.sqrt((vc * vc).sum())
    scale = max(np.abs(uv).max(), 1e-300)
    if su <= 1e-12 * scale * np.sqrt(uv.size) or sv == 0:
        raise DegenerateBatchError("zero variance: correlation undefined")
    rho = float(np.clip((uc * vc).sum() / (su * sv), -1.0, 1.0))
    shape = u.shape

    def bw(g):
        gu = vc / (su * sv) - rho * uc / (su * su)
        return ((g * gu).reshape(shape),)

    return Tensor._from_op(np.array(rho), (u,), bw, "pearson")
