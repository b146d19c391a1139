"""Dense tensors with a minimal reverse-mode differentiation tape.

Every operation is a plain function over :class:`Tensor`. When any input is
attached to a :class:`Tape`, the result is recorded on that tape together with
a closure that maps the output gradient to input gradients. Tensors that are
not attached to a tape are constants; operations on constants only evaluate
the forward value, which is what sampling uses.

Broadcasting rule for elementwise operations: shapes are right-aligned, a
missing leading axis counts as size 1, and every axis must either match or be
of size 1 on one side. Nothing else is broadcast.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "strict_mode",
    "constant",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity reached a primitive while strict mode was on."""


_STRICT = False


@contextlib.contextmanager
def strict_mode(enabled: bool = True) -> Iterator[None]:
    """Reject non-finite operands inside the block."""
    global _STRICT
    previous = _STRICT
    _STRICT = enabled
    try:
        yield
    finally:
        _STRICT = previous


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{where})"

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
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Tape:
    """Ordered record of primitive applications.

    Records are appended in evaluation order, so an operation's inputs are
    always recorded before it; :meth:`backward` walks the records once in
    reverse order and sums contributions over fan-out in that fixed order.
    """

    def __init__(self):
        self.records: list[tuple[str, int, tuple[int | None, ...], Callable]] = []
        self.leaves: list[int] = []
        self._count = 0

    def _new_node(self) -> int:
        self._count += 1
        return self._count

    def leaf(self, data) -> Tensor:
        node = self._new_node()
        self.leaves.append(node)
        return Tensor(np.asarray(data), self, node)

    def watch(self, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.leaf(value) for name, value in params.items()}

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn: Callable) -> Tensor:
        node = self._new_node()
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        self.records.append((op, node, ids, grad_fn))
        return Tensor(out, self, node)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _as_tensor(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype.kind != "b":
        arr = arr.astype(like.dtype, copy=False)
    return Tensor(arr)


def _like(x) -> np.ndarray | None:
    return x.data if isinstance(x, Tensor) else None


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError(f"{op}: operands are attached to different tapes")
    if tape is None:
        return Tensor(out)
    return tape.record(op, inputs, out, grad_fn)


def _check(op: str, *arrays: np.ndarray) -> None:
    if _STRICT:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"{op}: non-finite operand of shape {a.shape}")


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + tuple(a)
    pb = (1,) * (n - len(b)) + tuple(b)
    out = []
    for x, y in zip(pa, pb):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, _like(b))
    b = _as_tensor(b, a.data)
    _broadcast_shape("add", a.shape, b.shape)
    _check("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, _like(b))
    b = _as_tensor(b, a.data)
    _broadcast_shape("sub", a.shape, b.shape)
    _check("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, _like(b))
    b = _as_tensor(b, a.data)
    _broadcast_shape("mul", a.shape, b.shape)
    _check("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", (a, b), ad * bd, grad_fn)


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` for Python scalars."""
    _check("affine", x.data)
    out = x.data * x.data.dtype.type(scale)
    if shift:
        out = out + x.data.dtype.type(shift)
    return _emit("affine", (x,), out, lambda g: (g * x.data.dtype.type(scale),))


def exp(x: Tensor) -> Tensor:
    _check("exp", x.data)
    y = np.exp(x.data)
    return _emit("exp", (x,), y, lambda g: (g * y,))


def sigmoid(x: Tensor) -> Tensor:
    _check("sigmoid", x.data)
    y = expit(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def silu(x: Tensor) -> Tensor:
    _check("silu", x.data)
    d = x.data
    s = expit(d)
    y = d * s

    def grad_fn(g):
        # d/dx x*s(x) = s + y*(1 - s)
        out = 1 - s
        out *= y
        out += s
        out *= g
        return (out,)

    return _emit("silu", (x,), y, grad_fn)


def square(x: Tensor) -> Tensor:
    _check("square", x.data)
    d = x.data
    return _emit("square", (x,), d * d, lambda g: (2 * g * d,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product.

    ``a`` of shape ``(..., n, k)`` with ``b`` of shape ``(k, m)`` applies the
    same matrix to every leading index. Otherwise both operands need the same
    rank and identical leading extents (batched product).
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a.data)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, got {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    _check("matmul", a.data, b.data)
    ad, bd = a.data, b.data
    if b.ndim == 2:
        out = ad @ bd

        def grad_fn(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _emit("matmul", (a, b), out, grad_fn)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch shape mismatch {a.shape} vs {b.shape}")
    out = ad @ bd

    def grad_fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit("bmm", (a, b), out, grad_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis after adding an optional constant mask.

    Mask entries of ``-inf`` give exactly zero weight. A row that is masked
    everywhere is rejected.
    """
    _check("softmax", x.data)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=z.dtype)
        _broadcast_shape("softmax", z.shape, mask.shape)
        z = z + mask
        if np.any(np.all(np.isneginf(mask), axis=-1)):
            raise ValueError("softmax: a row is masked everywhere")
    y = z - z.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        s = np.einsum("...i,...i->...", g, y)[..., None]
        out = g - s
        out *= y
        return (out,)

    return _emit("softmax", (x,), y, grad_fn)


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps)`` over the last axis."""
    _check("rms_norm", x.data)
    d = x.data
    inv = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + d.dtype.type(eps))
    y = d * inv

    def grad_fn(g):
        return (inv * (g - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _emit("rms_norm", (x,), y, grad_fn)


# ---------------------------------------------------------------- reductions and shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), out, grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return affine(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("slice", (x,), out, grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in ts], axis=axis)

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _emit("concat", ts, out, grad_fn)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _emit("embedding", (table,), table.data[ids], grad_fn)


# ---------------------------------------------------------------- rotary / gating


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved channel pairs ``(2k, 2k+1)`` by tabulated angles.

    ``cos`` and ``sin`` have shape ``(N, hd // 2)`` and broadcast over any
    leading axes of ``x`` (``(..., N, hd)``).
    """
    if x.shape[-1] % 2 or cos.shape != (x.shape[-2], x.shape[-1] // 2) or sin.shape != cos.shape:
        raise ShapeError(f"rope: shape mismatch {x.shape} vs table {cos.shape}")
    _check("rope", x.data)
    cos = cos.astype(x.dtype, copy=False)
    sin = sin.astype(x.dtype, copy=False)
    out = _rotate_pairs(x.data, cos, sin)
    return _emit("rope", (x,), out, lambda g: (_rotate_pairs(g, cos, sin, inverse=True),))


def _rotate_pairs(d, cos, sin, inverse=False):
    if inverse:
        sin = -sin
    x0, x1 = d[..., 0::2], d[..., 1::2]
    out = np.empty_like(d)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_routed(x: Tensor, cos: np.ndarray, sin: np.ndarray, rows: slice, cos_alt: np.ndarray,
                sin_alt: np.ndarray, G) -> Tensor:
    """Rotary rotation where the tokens in ``rows`` choose between two tables.

    Routed row ``i`` becomes ``G[i] * rope(x, cos, sin) + (1 - G[i]) * rope(x, cos_alt, sin_alt)``.
    With binary ``G`` this picks one rotation exactly. The gradient reaches
    ``x`` through both rotations and ``G`` through their difference.
    """
    G = _as_tensor(G, x.data)
    n = x.shape[-2]
    n_routed = len(range(*rows.indices(n)))
    if x.shape[-1] % 2 or cos.shape != (n, x.shape[-1] // 2) or sin.shape != cos.shape:
        raise ShapeError(f"rope_routed: shape mismatch {x.shape} vs table {cos.shape}")
    if G.shape != (n_routed,) or cos_alt.shape != (n_routed, x.shape[-1] // 2) or sin_alt.shape != cos_alt.shape:
        raise ShapeError(f"rope_routed: {n_routed} routed rows vs G {G.shape}, table {cos_alt.shape}")
    _check("rope_routed", x.data, G.data)
    dt = x.dtype
    cos, sin = cos.astype(dt, copy=False), sin.astype(dt, copy=False)
    cos_r, sin_r = cos[rows], sin[rows]
    cos_alt, sin_alt = cos_alt.astype(dt, copy=False), sin_alt.astype(dt, copy=False)
    out = _rotate_pairs(x.data, cos, sin)
    a = out[..., rows, :].copy()
    b = _rotate_pairs(x.data[..., rows, :], cos_alt, sin_alt)
    g = G.data[:, None]
    out[..., rows, :] = g * a + (1 - g) * b

    def grad_fn(grad):
        gx = _rotate_pairs(grad, cos, sin, inverse=True)
        gr = grad[..., rows, :]
        gx[..., rows, :] = _rotate_pairs(g * gr, cos_r, sin_r, inverse=True) + _rotate_pairs(
            (1 - g) * gr, cos_alt, sin_alt, inverse=True
        )
        dG = (gr * (a - b)).sum(axis=tuple(range(gr.ndim - 2)) + (gr.ndim - 1,))
        return gx, dG

    return _emit("rope_routed", (x, G), out, grad_fn)


def ste_threshold(p: Tensor, straight_through: bool = True) -> Tensor:
    """Hard decision ``p >= 0.5`` with an identity backward.

    With ``straight_through=False`` the backward is the exact derivative of
    the step function (zero), which is what finite differences see away from
    the threshold.
    """
    _check("ste_threshold", p.data)
    out = (p.data >= 0.5).astype(p.dtype)
    if straight_through:
        return _emit("ste", (p,), out, lambda g: (g,))
    return _emit("step", (p,), out, lambda g: (np.zeros_like(g),))


# ---------------------------------------------------------------- differentiation


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every leaf of ``tape``."""
    if loss.tape is not tape:
        raise ValueError("backward: loss is not recorded on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for _, node, ids, grad_fn in reversed(tape.records):
        g = grads.get(node)
        if g is None:
            continue
        del grads[node]
        contributions = grad_fn(g)
        for nid, c in zip(ids, contributions):
            if nid is None or c is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + c
            else:
                grads[nid] = c
    return {leaf: grads[leaf] for leaf in tape.leaves if leaf in grads}


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor. The error per coordinate is
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``. ``coords`` restricts the
    comparison to a subset of flat indices.
    """
    if not eps > 0:
        raise ValueError("finite_diff_check: eps must be positive")
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x)
    loss = f(leaf)
    g_ad = backward(tape, loss).get(leaf.node, np.zeros_like(x)).reshape(-1)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = float(f(Tensor(x)).data)
        flat[i] = old - eps
        down = float(f(Tensor(x)).data)
        flat[i] = old
        g_fd = (up - down) / (2 * eps)
        err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
        worst = max(worst, err)
    return worst


def params_fd_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    per_param: int = 2,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, float]]:
    """Finite-difference check over a sample of coordinates of a parameter dict.

    ``per_param`` coordinates are drawn from every array (all of them when the
    array is smaller). Returns the overall max relative error and the per-name
    maxima.
    """
    if not eps > 0:
        raise ValueError("params_fd_check: eps must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    bound = tape.watch(params)
    grads = backward(tape, loss_fn(bound))
    per_name: dict[str, float] = {}
    for name, value in params.items():
        g_ad = grads.get(bound[name].node, np.zeros_like(value)).reshape(-1)
        flat = value.reshape(-1)
        k = min(per_param, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        worst = 0.0
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            up = float(loss_fn({n: Tensor(v) for n, v in params.items()}).data)
            flat[i] = old - eps
            down = float(loss_fn({n: Tensor(v) for n, v in params.items()}).data)
            flat[i] = old
            g_fd = (up - down) / (2 * eps)
            err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, err)
        per_name[name] = worst
    return (max(per_name.values()) if per_name else 0.0), per_name


def sinusoidal(t: float, dim: int, dtype=np.float64, scale: float = 1000.0) -> np.ndarray:
    """Standard sinusoidal embedding of a scalar, shape ``(1, dim)``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = scale * t * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb.astype(dtype)[None, :]
