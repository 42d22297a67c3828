"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of primitives needed by LeNet, its losses and the attacks
are provided. Every op is a pure function of its inputs; when an active
:class:`Tape` is watching one of the inputs the op records a vector-Jacobian
product closure so that :meth:`Tape.gradient` can replay it in reverse.

Usage::

    with Tape() as tape:
        x = tape.watch(Tensor(x_arr))
        loss = cross_entropy_from_logits(linear(x, w, b), labels)
    (gx,) = tape.gradient(loss, [x])
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached an op that requires finite input."""


class TapeError(RuntimeError):
    """Gradient requested for a value the tape never saw."""


class Tensor:
    """Immutable wrapper around an ``ndarray``.

    The array is flagged read-only; ops always allocate fresh outputs.
    """

    __slots__ = ("data", "_tape", "__weakref__")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.data = arr
        self._tape = None  # weakref to the recording Tape; a strong ref would form a cycle

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal constructor: takes ownership without copying
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar used by the loss assembly
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("elementwise tensor products are not supported; use scale()")
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops for reverse accumulation.

    A tape only records ops that touch a watched tensor (directly or through
    an earlier recorded op). Entries are appended in execution order, which
    is a topological order of the graph, so the reverse walk is exact.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._ids: set[int] = set()
        self._keep: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, t: Tensor) -> Tensor:
        """Start tracking ``t``; returns it for chaining."""
        t._tape = weakref.ref(self)
        self._ids.add(id(t))
        self._keep.append(t)
        return t

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._ids and t._tape is not None and t._tape() is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        out._tape = weakref.ref(self)
        self._ids.add(id(out))
        self._keep.append(out)
        self.entries.append((out, inputs, vjp))

    def gradient(
        self,
        target: Tensor,
        sources: Iterable[Tensor],
        output_gradient: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Reverse-accumulate d(target)/d(source) for each source.

        ``target`` must be a scalar unless ``output_gradient`` (the seed, same
        shape as ``target``) is given. Sources that the target does not depend
        on get zero gradients. Gradients add across fan-out.
        """
        sources = list(sources)
        if not self.tracks(target):
            raise TapeError("target was not produced on this tape")
        for s in sources:
            if not self.tracks(s):
                raise TapeError(f"source {s!r} is not on this tape")
        if output_gradient is None:
            if target.size != 1:
                raise ShapeError(
                    f"target must be a scalar (got shape {target.shape}); "
                    "pass output_gradient for non-scalar targets"
                )
            seed = np.ones_like(target.data)
        else:
            seed = np.asarray(output_gradient, dtype=target.dtype)
            if seed.shape != target.shape:
                raise ShapeError(f"seed shape {seed.shape} != target shape {target.shape}")

        grads: dict[int, np.ndarray] = {id(target): seed}
        for out, inputs, vjp in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not self.tracks(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # a source may also be the target itself
        out = []
        for s in sources:
            g = grads.get(id(s))
            if s is target and g is None:
                g = seed
            out.append(np.zeros_like(s.data) if g is None else g)
        return out


def _active_tape(*inputs: Tensor) -> Tape | None:
    for t in inputs:
        tape = t._tape() if t._tape is not None else None
        if tape is not None and tape in _TAPES and tape.tracks(t):
            return tape
    return None


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _active_tape(*inputs)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def backward(tape: Tape, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional alias of :meth:`Tape.gradient` for a scalar loss."""
    return tape.gradient(loss, sources)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Sum of two tensors; ``b`` may broadcast against ``a``."""
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def absolute(a: Tensor) -> Tensor:
    """``|a|`` with subgradient ``sign(a)`` (zero at zero)."""
    s = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit(x * x, (a,), lambda g: (2 * g * x,))


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, returned as a 0-d tensor."""
    shape = a.shape
    return _emit(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(a.dtype, copy=True),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _emit(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, D) and ``weight`` (O, D)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(
            f"linear expects x[N,D], weight[O,D], bias[O]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(f"linear dim mismatch: x{x.shape} weight{weight.shape} bias{bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def vjp(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _emit(out, (x, weight, bias), vjp)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x[N,C,H,W] with kernel[F,C,kH,kW] plus bias[F].

    im2col per sample followed by a batched matrix product; the backward
    pass scatters column gradients back with one strided add per kernel tap.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(
            f"conv2d expects input[N,C,H,W], kernel[F,C,kH,kW], bias[F]; "
            f"got {x.shape}, {kernel.shape}, {bias.shape}"
        )
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if bias.shape[0] != f:
        raise ShapeError(f"conv2d bias has {bias.shape[0]} entries for {f} filters")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols[n] is the (C*kH*kW, Ho*Wo) patch matrix of sample n
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    kmat = kernel.data.reshape(f, -1)
    out = (kmat @ cols + bias.data[:, None]).reshape(n, f, ho, wo)
    xp_shape = xp.shape
    need_x = _active_tape(x) is not None
    need_k = _active_tape(kernel) is not None

    def vjp(g):
        g3 = g.reshape(n, f, ho * wo)
        gb = g3.sum(axis=(0, 2))
        gk = np.einsum("nfp,nkp->fk", g3, cols, optimize=True).reshape(kernel.shape) if need_k else None
        if not need_x:
            return None, gk, gb
        gcols = (kmat.T @ g3).reshape(n, c, kh, kw, ho, wo)
        gx = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gk, gb

    return _emit(out, (x, kernel, bias), vjp)


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Max pooling over square windows.

    Returns the pooled tensor and the flat in-window argmax per output cell.
    Ties go to the first element in row-major window order.
    """
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects input[N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ShapeError(f"invalid window={window} / stride={stride}")
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    xd = x.data

    def tap(t):
        i, j = divmod(t, window)
        return (slice(None), slice(None),
                slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    taps = window * window
    out = xd[tap(0)].copy()
    for t in range(1, taps):
        np.maximum(out, xd[tap(t)], out=out)
    # first tap in row-major order that attains the max
    idx = np.full(out.shape, taps - 1, dtype=np.int64)
    for t in range(taps - 2, -1, -1):
        idx[xd[tap(t)] == out] = t

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for t in range(taps):
            # one tap never maps two output cells onto the same input cell
            gx[tap(t)] += np.where(idx == t, g, 0)
        return (gx,)

    return _emit(out, (x,), vjp), idx


# ---------------------------------------------------------------- losses


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of (N, K) logits, stabilised by max subtraction."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax expects logits[N,K], got {logits.shape}")
    _check_finite(z, "softmax input")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (logits,), vjp)


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def cross_entropy_from_logits(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]`` (fused, no log of a softmax)."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross entropy expects logits[N,K], got {logits.shape}")
    labels = np.asarray(labels)
    n, k = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    _check_finite(z, "logits")
    lsm = log_softmax_array(z)
    rows = np.arange(n)
    loss = -lsm[rows, labels].mean()

    def vjp(g):
        p = np.exp(lsm)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _emit(np.asarray(loss, dtype=z.dtype), (logits,), vjp)
