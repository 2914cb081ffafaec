"""Dense tensors plus a reverse-mode differentiation tape.

Every higher layer of the toolkit (gate units, network assemblies, training)
computes exclusively through the operations in this module.  The design is
define-by-run: each training step builds a fresh :class:`Tape`, registers the
parameters it wants gradients for via :meth:`Tape.watch`, runs the forward
pass, and calls :func:`backward` once on a scalar root.  Tensors whose inputs
are all untracked never touch the tape, so frozen parameters cost nothing.

Values are float32 by default.  Operations preserve the dtype of their
inputs, which lets the finite-difference oracle run in float64 where rounding
would otherwise swamp the comparison.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ShapeError

Array = np.ndarray

ACTIVATION_KINDS = ("sigmoid", "tanh", "relu")
PADDING_MODES = ("same", "valid")

# Multiply-accumulate bookkeeping for the conv/matmul kernels.  Counts are
# derived from the array shapes actually fed to the inner products, so the
# depthwise-separable cost check measures the executed work, not a formula.
_mac_count = 0


def reset_mac_count() -> None:
    global _mac_count
    _mac_count = 0


def mac_count() -> int:
    return _mac_count


def _count_macs(n: int) -> None:
    global _mac_count
    _mac_count += int(n)


class Tensor:
    """A dense value: shape metadata plus a row-major float array.

    ``tape``/``node_id`` are set only while the tensor participates in a
    tracked computation.  Tensors are treated as immutable once created.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError(f"tensors must be non-empty, got shape {arr.shape}")
        self.data = arr
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"


def _wrap(arr: Array) -> Tensor:
    """Wrap an op result without the constructor's dtype cast."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.tape = None
    t.node_id = None
    return t


class _Node:
    __slots__ = ("op", "inputs", "grad_fn", "shape")

    def __init__(self, op, inputs, grad_fn, shape):
        self.op = op
        self.inputs = inputs  # tuple of parent node ids, None for untracked parents
        self.grad_fn = grad_fn  # upstream grad -> tuple of parent grads (None allowed)
        self.shape = shape


class Tape:
    """Append-only record of tracked operations.

    Node ids are list indices, and an operation's inputs are always recorded
    before the operation itself, so the list is topologically ordered and a
    single reverse sweep implements backpropagation.  One tape belongs to one
    training step; it is single-writer by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf and return a tracked view sharing its data."""
        if t.tracked:
            if t.tape is not self:
                raise ContractError("tensor already tracked on a different tape")
            return t
        out = _wrap(t.data)
        out.tape = self
        out.node_id = self._emit("leaf", (), None, t.data.shape)
        return out

    def _emit(self, op, input_ids, grad_fn, shape) -> int:
        self.nodes.append(_Node(op, input_ids, grad_fn, shape))
        return len(self.nodes) - 1


def _record(op: str, parents: Sequence[Tensor], out: Array,
            grad_fn: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    """Wrap ``out``; register the op on the parents' tape if any parent is tracked."""
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and tape is not p.tape:
                raise ContractError(f"{op}: inputs tracked on different tapes")
            tape = p.tape
    result = _wrap(out)
    if tape is not None:
        ids = tuple(p.node_id for p in parents)
        result.tape = tape
        result.node_id = tape._emit(op, ids, grad_fn, out.shape)
    return result


def lift(parents: Sequence[Tensor], out_data: Array, grad_fn, op: str = "custom") -> Tensor:
    """Public extension point: record a custom op with an explicit gradient rule.

    ``grad_fn`` receives the upstream gradient array and must return one
    gradient (or None) per parent, each matching that parent's shape.
    """
    return _record(op, parents, np.asarray(out_data), grad_fn)


def backward(tape: Tape, root: Tensor) -> dict[int, Array]:
    """Reverse sweep from a scalar root; returns node id -> gradient array.

    Gradients accumulate additively over fan-out.  Every returned gradient has
    the shape of its node's forward value.
    """
    if not root.tracked or root.tape is not tape:
        raise ContractError("backward: root is not tracked on this tape")
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar-valued, got shape {root.shape}")
    grads: dict[int, Array] = {root.node_id: np.ones_like(root.data)}
    for nid in range(root.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.grad_fn is None:
            continue
        for pid, pg in zip(node.inputs, node.grad_fn(g)):
            if pid is None or pg is None:
                continue
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    return grads


def grad_for(grads: dict[int, Array], t: Tensor) -> Array:
    """Gradient for a tracked tensor, zeros if the root never reached it."""
    if not t.tracked:
        raise ContractError("grad_for: tensor is not tracked")
    g = grads.get(t.node_id)
    return np.zeros_like(t.data) if g is None else g


# ---------------------------------------------------------------------------
# constructors

def zeros(shape, dtype=np.float32) -> Tensor:
    return _wrap(np.zeros(shape, dtype=dtype))


def zeros_like(t: Tensor) -> Tensor:
    return _wrap(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return _wrap(np.ones_like(t.data))


def full_like(t: Tensor, value: float) -> Tensor:
    return _wrap(np.full_like(t.data, value))


# ---------------------------------------------------------------------------
# core operations

def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} x {b.shape}")
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    out = A @ B
    _count_macs(A.shape[0] * A.shape[1] * B.shape[1])
    need_a, need_b = a.tracked, b.tracked

    def grad(g: Array):
        ga = g @ B.T if need_a else None
        gb = A.T @ g if need_b else None
        return ga, gb

    return _record("matmul", (a, b), out, grad)


def _binary(op: str, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes must match exactly, got {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    if op == "add":
        out = A + B
        grad = lambda g: (g, g)
    elif op == "sub":
        out = A - B
        grad = lambda g: (g, -g)
    elif op == "mul":
        out = A * B
        grad = lambda g: (g * B, g * A)
    else:
        raise ContractError(f"unknown elementwise op {op!r}")
    return _record(op, (a, b), out, grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Pointwise add/sub/mul on identically shaped tensors (no broadcasting)."""
    if op not in ("add", "sub", "mul"):
        raise ContractError(f"elementwise op must be add|sub|mul, got {op!r}")
    return _binary(op, a, b)


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = t.data * c
    return _record("scale", (t,), out, lambda g: (g * c,))


def bias_add(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Add a 1-d bias along ``axis`` of x; the one sanctioned broadcast.

    The bias gradient sums over every other axis.
    """
    if b.data.ndim != 1:
        raise ShapeError(f"bias_add: bias must be 1-d, got {b.shape}")
    if axis < 0 or axis >= x.data.ndim:
        raise ShapeError(f"bias_add: axis {axis} out of range for shape {x.shape}")
    if x.shape[axis] != b.shape[0]:
        raise ShapeError(f"bias_add: axis {axis} of {x.shape} != bias length {b.shape[0]}")
    expand = [1] * x.data.ndim
    expand[axis] = b.shape[0]
    out = x.data + b.data.reshape(expand)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def grad(g: Array):
        return g, g.sum(axis=reduce_axes)

    return _record("bias_add", (x, b), out, grad)


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    # Two-branch form keeps exp() off large magnitudes in either direction.
    out = np.where(X >= 0, 1.0 / (1.0 + np.exp(-np.abs(X))),
                   np.exp(-np.abs(X)) / (1.0 + np.exp(-np.abs(X))))
    out = out.astype(X.dtype, copy=False)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    X = x.data
    out = np.maximum(X, 0)
    mask = X > 0
    return _record("relu", (x,), out, lambda g: (g * mask,))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    raise ConfigError(f"unknown activation kind {kind!r}; expected one of {ACTIVATION_KINDS}")


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    A, B = a.data, b.data
    if A.ndim != B.ndim:
        raise ShapeError(f"concat: ranks differ, {a.shape} vs {b.shape}")
    if axis < 0 or axis >= A.ndim:
        raise ShapeError(f"concat: axis {axis} out of range for shapes {a.shape}, {b.shape}")
    for i in range(A.ndim):
        if i != axis and A.shape[i] != B.shape[i]:
            raise ShapeError(f"concat: shapes {a.shape} and {b.shape} disagree off axis {axis}")
    out = np.concatenate([A, B], axis=axis)
    na = A.shape[axis]

    def grad(g: Array):
        ga = np.take(g, range(na), axis=axis)
        gb = np.take(g, range(na, g.shape[axis]), axis=axis)
        return ga, gb

    return _record("concat", (a, b), out, grad)


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != t.size:
        raise ShapeError(f"reshape: cannot view {t.shape} as {shape}")
    orig = t.shape
    out = t.data.reshape(shape)
    return _record("reshape", (t,), out, lambda g: (g.reshape(orig),))


def flatten(t: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    if t.data.ndim < 2:
        raise ShapeError(f"flatten expects rank >= 2, got {t.shape}")
    return reshape(t, (t.shape[0], t.size // t.shape[0]))


def sum_all(t: Tensor) -> Tensor:
    out = t.data.sum(dtype=t.data.dtype).reshape(1)
    shape = t.shape

    def grad(g: Array):
        return (np.full(shape, g.reshape(())[()], dtype=g.dtype),)

    return _record("sum", (t,), out, grad)


def mean_all(t: Tensor) -> Tensor:
    return scale(sum_all(t), 1.0 / t.size)


# ---------------------------------------------------------------------------
# convolution family

def _pad_amount(kernel: int, padding: str) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        if kernel % 2 == 0:
            raise ConfigError(f"same padding needs an odd kernel, got {kernel}")
        return (kernel - 1) // 2
    raise ConfigError(f"padding must be one of {PADDING_MODES}, got {padding!r}")


def conv_output_hw(h: int, w: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    """Spatial output dims: floor((dim + 2*pad - kernel)/stride) + 1."""
    p = _pad_amount(kernel, padding)
    if kernel > h + 2 * p or kernel > w + 2 * p:
        raise ShapeError(f"kernel {kernel} exceeds padded input {h + 2 * p}x{w + 2 * p}")
    return (h + 2 * p - kernel) // stride + 1, (w + 2 * p - kernel) // stride + 1


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim == 4:
        return x, False
    raise ShapeError(f"conv input must be CxHxW or BxCxHxW, got {x.shape}")


def _windows(xp: Array, kh: int, kw: int, stride: int) -> Array:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # [B,C,H',W',kh,kw]


def _scatter_windows(dwin: Array, xp_shape, kh, kw, stride) -> Array:
    """Adjoint of _windows: add window gradients back into the padded input."""
    dxp = np.zeros(xp_shape, dtype=dwin.dtype)
    hb, wb = dwin.shape[2], dwin.shape[3]
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * hb:stride, j:j + stride * wb:stride] += dwin[:, :, :, :, i, j]
    return dxp


def conv2d(x: Tensor, filters: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of a CxHxW (or BxCxHxW) input with NxCxKxK filters."""
    xb, squeeze = _as_batched(x)
    F = filters.data
    if F.ndim != 4:
        raise ShapeError(f"filters must be NxCxKhxKw, got {filters.shape}")
    B, C, H, W = xb.shape
    N, FC, kh, kw = F.shape
    if FC != C:
        raise ShapeError(f"filter channels {FC} != input channels {C}")
    p = _pad_amount(max(kh, kw), padding)
    ho, wo = conv_output_hw(H, W, max(kh, kw), stride, padding)
    xp = np.pad(xb.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = _windows(xp, kh, kw, stride)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * ho * wo, C * kh * kw)
    fmat = F.reshape(N, C * kh * kw)
    out = (cols @ fmat.T).reshape(B, ho, wo, N).transpose(0, 3, 1, 2)
    _count_macs(B * ho * wo * N * C * kh * kw)
    need_x, need_f = xb.tracked, filters.tracked

    def grad(g: Array):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * ho * wo, N)
        gf = (gmat.T @ cols).reshape(F.shape) if need_f else None
        gx = None
        if need_x:
            dcols = gmat @ fmat
            dwin = dcols.reshape(B, ho, wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = _scatter_windows(dwin, xp.shape, kh, kw, stride)
            gx = dxp[:, :, p:p + H, p:p + W] if p else dxp
        return gx, gf

    res = _record("conv2d", (xb, filters), out, grad)
    return reshape(res, res.shape[1:]) if squeeze else res


def depthwise_separable_conv2d(x: Tensor, depth_filters: Tensor, point_filters: Tensor,
                               stride: int = 1, padding: str = "valid") -> Tensor:
    """Per-channel KxK filtering followed by 1x1 channel mixing.

    Equals conv2d with the rank-1 filter bank full[n,c] = point[n,c] * depth[c].
    """
    xb, squeeze = _as_batched(x)
    D, P = depth_filters.data, point_filters.data
    if D.ndim != 3:
        raise ShapeError(f"depth filters must be CxKhxKw, got {depth_filters.shape}")
    if P.ndim != 4 or P.shape[2:] != (1, 1):
        raise ShapeError(f"point filters must be NxCx1x1, got {point_filters.shape}")
    B, C, H, W = xb.shape
    if D.shape[0] != C:
        raise ShapeError(f"depth filter channels {D.shape[0]} != input channels {C}")
    if P.shape[1] != C:
        raise ShapeError(f"point filter channels {P.shape[1]} != input channels {C}")
    kh, kw = D.shape[1], D.shape[2]
    N = P.shape[0]
    p = _pad_amount(max(kh, kw), padding)
    ho, wo = conv_output_hw(H, W, max(kh, kw), stride, padding)
    xp = np.pad(xb.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = _windows(xp, kh, kw, stride)  # [B,C,H',W',kh,kw]
    mid = np.einsum("bcijkl,ckl->bcij", win, D)
    pw = P[:, :, 0, 0]  # [N,C]
    out = np.einsum("nc,bcij->bnij", pw, mid)
    _count_macs(B * ho * wo * C * kh * kw)  # depthwise step
    _count_macs(B * ho * wo * N * C)        # pointwise step
    need_x, need_d, need_p = xb.tracked, depth_filters.tracked, point_filters.tracked

    def grad(g: Array):
        gp = np.einsum("bnij,bcij->nc", g, mid).reshape(P.shape) if need_p else None
        gmid = np.einsum("nc,bnij->bcij", pw, g) if (need_x or need_d) else None
        gd = np.einsum("bcij,bcijkl->ckl", gmid, win) if need_d else None
        gx = None
        if need_x:
            dwin = gmid[:, :, :, :, None, None] * D[None, :, None, None, :, :]
            dxp = _scatter_windows(dwin, xp.shape, kh, kw, stride)
            gx = dxp[:, :, p:p + H, p:p + W] if p else dxp
        return gx, gd, gp

    res = _record("dwsep_conv2d", (xb, depth_filters, point_filters), out, grad)
    return reshape(res, res.shape[1:]) if squeeze else res


def separable_cost_ratio(n_filters: int, kernel: int) -> float:
    """Multiply-accumulate cost of the factorized conv relative to the standard one."""
    return 1.0 / n_filters + 1.0 / (kernel * kernel)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide the pool size."""
    X = x.data
    if X.ndim != 4:
        raise ShapeError(f"max_pool2d expects BxCxHxW, got {x.shape}")
    B, C, H, W = X.shape
    if H % size or W % size:
        raise ConfigError(f"pool size {size} does not divide spatial dims {H}x{W}")
    ho, wo = H // size, W // size
    tiles = X.reshape(B, C, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    tiles = tiles.reshape(B, C, ho, wo, size * size)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def grad(g: Array):
        dt = np.zeros((B, C, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(dt, idx[..., None], g[..., None], axis=-1)
        dt = dt.reshape(B, C, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (dt.reshape(B, C, H, W),)

    return _record("max_pool2d", (x,), out, grad)


# ---------------------------------------------------------------------------
# verification oracle

def finite_difference_check(f: Callable[[Tensor], Tensor], params, step: float = 1e-3) -> float:
    """Max relative disagreement between the tape gradient and central differences.

    ``f`` maps a parameter tensor to a scalar tensor.  The analytic side runs
    once on a fresh tape; the numeric side evaluates ``f`` untracked at
    coordinate-wise perturbations.  Relative error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-8).

    The check runs in the dtype of ``params``; use float64 inputs when the
    quantity under test needs more headroom than float32 evaluation noise.
    """
    if step <= 0:
        raise ContractError(f"finite_difference_check: step must be positive, got {step}")
    base = np.array(params.data if isinstance(params, Tensor) else params, copy=True)
    tape = Tape()
    xt = tape.watch(Tensor(base, dtype=base.dtype))
    y = f(xt)
    if y.size != 1:
        raise ContractError("finite_difference_check: f must return a scalar")
    analytic = grad_for(backward(tape, y), xt).ravel()

    flat = base.ravel()
    numeric = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(base, dtype=base.dtype)).data.reshape(()))
        flat[i] = orig - step
        lo = float(f(Tensor(base, dtype=base.dtype)).data.reshape(()))
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)

    a = analytic.astype(np.float64)
    rel = np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
