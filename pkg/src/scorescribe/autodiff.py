"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small op set: exactly what a convolutional-recurrent
transcription model needs (conv2d, maxpool2d, batch_norm, relu, sigmoid,
tanh, affine, log_softmax) plus the reshaping plumbing to wire them
together (reshape, transpose, narrow, concat, stack).

Tensors wrap a numpy array in float32 (training) or float64 (gradient
checking). Graphs are functional: op outputs are frozen after creation and
never mutated; leaf tensors (parameters) may be updated in place between
graphs. There is no broadcasting: every op either returns its documented
shape or raises ShapeError.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class GradCheckError(RuntimeError):
    """A gradient check could not be evaluated (bad step size, non-finite values)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block. Use for inference paths."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array with an optional gradient slot.

    ``requires_grad`` marks a leaf whose gradient should be accumulated by
    :meth:`backward`. Reading ``grad`` before any backward pass (or on a leaf
    not reachable from the root) yields zeros of the same shape.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        """Reverse-topological gradient accumulation from a scalar root.

        Visits each graph node exactly once. Repeated use of a tensor sums
        its gradient contributions.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward root must be a scalar, got shape {self.shape}")
        topo = _toposort(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._grad = g if node._grad is None else node._grad + g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative post-order; recursion would overflow on long LSTM graphs.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make_op(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)  # 0-d arithmetic yields numpy scalars
    if not data.flags.owndata:
        data = data.copy()
    data.flags.writeable = False
    out.data = data
    out._grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _check_same_dtype(op: str, *tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make_op(a.data * np.asarray(c, dtype=a.dtype), (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    shape = a.shape
    return _make_op(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(shape, g, dtype=g.dtype),),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0
    return _make_op(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _make_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make_op(t, (a,), lambda g: (g * (1.0 - t * t),))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make_op(
        a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),)
    )


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for rank {a.data.ndim}")
    inverse = tuple(np.argsort(axes))
    return _make_op(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    extent = a.shape[axis]
    if start < 0 or length < 1 or start + length > extent:
        raise ShapeError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} of extent {extent}"
        )
    index = tuple(
        slice(start, start + length) if d == axis else slice(None)
        for d in range(a.data.ndim)
    )
    full_shape = a.shape

    def backward(g):
        dx = np.zeros(full_shape, dtype=g.dtype)
        dx[index] = g
        return (dx,)

    return _make_op(a.data[index].copy(), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    _check_same_dtype("concat", *tensors)
    ranks = {t.data.ndim for t in tensors}
    if len(ranks) != 1:
        raise ShapeError("concat: rank mismatch")
    for d in range(tensors[0].data.ndim):
        if d != axis and len({t.shape[d] for t in tensors}) != 1:
            raise ShapeError(f"concat: extent mismatch on axis {d}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            g.take(indices=range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return _make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack: empty input list")
    _check_same_dtype("stack", *tensors)
    if len({t.shape for t in tensors}) != 1:
        raise ShapeError("stack: all inputs must share a shape")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# linear algebra


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map: ``out = x @ weight.T + bias``.

    x is [B, N], weight [M, N], bias [M]; result is [B, M].
    """
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"affine: expected 2-d input and weight, got {x.shape} and {weight.shape}"
        )
    B, N = x.shape
    M, Nw = weight.shape
    if N != Nw:
        raise ShapeError(f"affine: input features {N} (dim 1) != weight features {Nw}")
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (M,):
            raise ShapeError(f"affine: bias shape {bias.shape} != ({M},)")
        _check_same_dtype("affine", x, weight, bias)
        parents.append(bias)
    else:
        _check_same_dtype("affine", x, weight)

    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make_op(out, tuple(parents), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax along the last axis."""
    if x.shape[-1] < 1:
        raise ShapeError("log_softmax: empty class axis")
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - logz

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make_op(y, (x,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    B, C, Hp, Wp = xp.shape
    ho = (Hp - kh) // sh + 1
    wo = (Wp - kw) // sw + 1
    cols = np.empty((B, C, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(B, C * kh * kw, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, xp_shape, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int):
    B, C, _, _ = xp_shape
    dc = dcols.reshape(B, C, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dc[:, :, i, j]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-d cross-correlation (no kernel flip).

    x is [B, Cin, H, W], weight [Cout, Cin, kh, kw], bias [Cout].
    Output spatial extent is (H + 2*pad - k) // stride + 1 per axis.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d [B,C,H,W], got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d [Cout,Cin,kh,kw], got {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if C != Cin:
        raise ShapeError(f"conv2d: input has {C} channels (dim 1) but weight expects {Cin}")
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {H + 2 * ph}x{W + 2 * pw}"
        )
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (Cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
        _check_same_dtype("conv2d", x, weight, bias)
        parents.append(bias)
    else:
        _check_same_dtype("conv2d", x, weight)

    xd = x.data
    if ph or pw:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = xd
    cols, ho, wo = _im2col(xp, kh, kw, sh, sw)
    w2 = weight.data.reshape(Cout, -1)
    out = np.matmul(w2, cols)  # [B, Cout, ho*wo]
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(B, Cout, ho, wo)
    xp_shape = xp.shape

    def backward(g):
        go = g.reshape(B, Cout, ho * wo)
        # im2col is recomputed here: cheaper than keeping every column
        # matrix alive across a deep unrolled graph.
        if ph or pw:
            xpb = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        else:
            xpb = x.data
        cols_b, _, _ = _im2col(xpb, kh, kw, sh, sw)
        dw = np.matmul(go, cols_b.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(w2.T, go)
        dxp = _col2im(dcols, xp_shape, kh, kw, sh, sw, ho, wo)
        dx = dxp[:, :, ph : ph + H, pw : pw + W] if (ph or pw) else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(go.sum(axis=(0, 2)))
        return tuple(grads)

    return _make_op(out, tuple(parents), backward)


def maxpool2d(x: Tensor, window=(2, 2), stride=None) -> Tensor:
    """Non-overlapping max pooling; stride must equal the window.

    Trailing rows/columns that do not fill a window are dropped (floor
    division). On ties the gradient routes to the first maximal cell in
    row-major window order.
    """
    wh, ww = _pair(window)
    sh, sw = (wh, ww) if stride is None else _pair(stride)
    if (sh, sw) != (wh, ww):
        raise ShapeError("maxpool2d: only stride == window is supported")
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be 4-d [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H < wh or W < ww:
        raise ShapeError(f"maxpool2d: spatial extent {H}x{W} smaller than window {wh}x{ww}")
    ho, wo = H // wh, W // ww
    cropped = x.data[:, :, : ho * wh, : wo * ww]
    windows = cropped.reshape(B, C, ho, wh, wo, ww).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(B, C, ho, wo, wh * ww)
    idx = flat.argmax(axis=-1)  # first max wins: row-major tie-break
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros((B, C, ho, wo, wh * ww), dtype=g.dtype)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dcrop = dflat.reshape(B, C, ho, wo, wh, ww).transpose(0, 1, 2, 4, 3, 5)
        dcrop = dcrop.reshape(B, C, ho * wh, wo * ww)
        if (ho * wh, wo * ww) == (H, W):
            return (dcrop,)
        dx = np.zeros((B, C, H, W), dtype=g.dtype)
        dx[:, :, : ho * wh, : wo * ww] = dcrop
        return (dx,)

    return _make_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# batch normalization

BN_EPS = 1e-5


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch_norm eval mode."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(
            mean=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
            initialized=False,
        )

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.initialized)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    state: RunningStats,
    momentum: float = 0.9,
) -> Tensor:
    """Channel-wise batch normalization over (B, H, W).

    Train mode normalizes with batch statistics and folds them into
    ``state`` (``running = momentum * running + (1 - momentum) * batch``);
    eval mode normalizes with the running statistics and requires them to
    have been initialized by at least one train step.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: input must be 4-d [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({C},)"
        )
    _check_same_dtype("batch_norm", x, gamma, beta)
    xd = x.data
    gd = gamma.data

    if mode == "train":
        m = B * H * W
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        state.mean = (momentum * state.mean + (1.0 - momentum) * mu).astype(state.mean.dtype)
        state.var = (momentum * state.var + (1.0 - momentum) * var).astype(state.var.dtype)
        state.initialized = True

        def backward(g):
            dxhat = g * gd[None, :, None, None]
            sum_dxhat = dxhat.sum(axis=(0, 2, 3))
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
            dx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - sum_dxhat[None, :, None, None]
                - xhat * sum_dxhat_xhat[None, :, None, None]
            )
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return dx, dgamma, dbeta

    else:
        if not state.initialized:
            raise ValueError("batch_norm: eval mode with uninitialized running stats")
        inv = 1.0 / np.sqrt(state.var.astype(xd.dtype) + BN_EPS)
        xhat = (xd - state.mean.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]

        def backward(g):
            dx = g * (gd * inv)[None, :, None, None]
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return dx, dgamma, dbeta

    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]
    return _make_op(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_coord: tuple


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"[{status}] max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


# Coordinates whose gradient magnitude falls below this floor are compared
# quasi-absolutely; pure relative error is meaningless at roundoff scale.
GRAD_CHECK_FLOOR = 1e-2


def grad_check(fn, inputs, h: float = 1e-5, tol: float = 1e-4, names=None) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` must deterministically build a scalar-rooted graph from the given
    tensors. Every input with ``requires_grad`` is checked coordinate by
    coordinate with a symmetric step of ``h``; use float64 inputs, the
    documented tolerances assume it.
    """
    if not h > 0:
        raise GradCheckError(f"grad_check: step h must be positive, got {h}")
    inputs = list(inputs)
    if names is None:
        names = [f"input{i}" for i in range(len(inputs))]

    for t in inputs:
        t.zero_grad()
    root = fn(*inputs)
    if root.size != 1:
        raise ShapeError(f"grad_check: fn must return a scalar, got shape {root.shape}")
    root.backward()
    analytic = [t.grad.copy() if t.requires_grad else None for t in inputs]

    report = GradCheckReport(tol=tol)
    for t, name, a in zip(inputs, names, analytic):
        if not t.requires_grad:
            continue
        if not np.isfinite(a).all():
            coord = np.unravel_index(int(np.argmin(np.isfinite(a))), a.shape)
            raise GradCheckError(f"grad_check: non-finite analytic gradient at {name}{coord}")
        worst = 0.0
        worst_coord = ()
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = fn(*inputs).item()
            flat[k] = orig - h
            f_minus = fn(*inputs).item()
            flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                coord = np.unravel_index(k, t.shape)
                raise GradCheckError(f"grad_check: non-finite loss while perturbing {name}{coord}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            ak = a.reshape(-1)[k]
            rel = abs(ak - numeric) / max(abs(ak) + abs(numeric), GRAD_CHECK_FLOOR)
            if rel > worst:
                worst = rel
                worst_coord = np.unravel_index(k, t.shape)
        report.entries.append(GradCheckEntry(name=name, max_rel_err=worst, worst_coord=worst_coord))
    return report
