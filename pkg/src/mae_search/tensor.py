"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operations the MAE network and its losses need are provided. Each
op computes its forward value with numpy (float64) and, when any input
requires a gradient, records a closure that maps the output gradient to the
input gradients. ``Tensor.backward`` walks the recorded graph once in reverse
topological order and accumulates into the ``grad`` slot of leaf tensors.

Arrays with a leading batch axis (N x C x H x W) are accepted by every
spatial op; the single-sample C x H x W form is promoted internally.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Op parameters do not describe a valid computation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """A float64 array with an optional gradient slot and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor ({op or 'leaf'})")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}{', op=' + self.op if self.op else ''})"

    # arithmetic sugar for the few same-shape / scalar cases we allow
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        Only scalar outputs may be differentiated without an explicit seed.
        Repeated calls add to existing leaf gradients.
        """
        if not self.requires_grad:
            raise ValueError("backward on a tensor that is detached from any parameter")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise DimensionError("seed gradient shape differs from tensor shape")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out.op = op
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _promote(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    shape = x.shape
    return _result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    p = d >= 0
    out[p] = 1.0 / (1.0 + np.exp(-d[p]))
    e = np.exp(d[~p])
    out[~p] = e / (1.0 + e)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def mul_mask(x: Tensor, mask) -> Tensor:
    """Multiply every channel by a binary spatial mask.

    ``mask`` is 1 x H x W for a C x H x W input, or N x 1 x H x W for a
    batch. The mask is a constant; no gradient flows into it.
    """
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=DTYPE)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be 0 or 1")
    if x.ndim == 3:
        if m.ndim == 2:
            m = m[None]
        if m.shape != (1,) + x.shape[1:]:
            raise DimensionError(f"mask {m.shape} does not match input spatial {x.shape[1:]}")
    elif x.ndim == 4:
        if m.ndim == 3:
            m = m[:, None]
        if m.shape != (x.shape[0], 1) + x.shape[2:]:
            raise DimensionError(f"mask {m.shape} does not match input {x.shape}")
    else:
        raise DimensionError(f"mul_mask expects a spatial tensor, got {x.shape}")
    return _result(x.data * m, (x,), lambda g: (g * m,), "mul_mask")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    axis = 0 if parts[0].ndim in (1, 3) else 1
    lead = parts[0].shape[:axis]
    spatial = parts[0].shape[axis + 1 :]
    for p in parts:
        if p.ndim != parts[0].ndim or p.shape[:axis] != lead or p.shape[axis + 1 :] != spatial:
            raise DimensionError("concat_channels parts disagree outside the channel axis")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        ]

    return _result(
        np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat_channels"
    )


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    axis = 0 if x.ndim in (1, 3) else 1
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"channel slice [{start}:{stop}) outside {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(x.data[index].copy(), (x,), backward, "slice_channels")


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial maximum; ties route gradient to the lowest linear index."""
    d, squeeze = _promote(x)
    n, c, h, w = d.shape
    if h * w == 0:
        raise DimensionError("global_max_pool over an empty spatial extent")
    flat = d.reshape(n, c, h * w)
    arg = flat.argmax(axis=2)  # argmax returns the first occurrence
    out = np.take_along_axis(flat, arg[..., None], axis=2)[..., 0]

    def backward(g):
        g2 = g[None] if squeeze else g
        grad = np.zeros((n, c, h * w))
        np.put_along_axis(grad, arg[..., None], g2[..., None], axis=2)
        grad = grad.reshape(n, c, h, w)
        return (grad[0] if squeeze else grad,)

    return _result(out[0] if squeeze else out, (x,), backward, "global_max_pool")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``w @ x + b`` for a vector or a batch of row vectors."""
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise DimensionError(f"linear weight {w.shape} / bias {b.shape} inconsistent")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    def backward(g):
        if xd.ndim == 1:
            return g @ wd, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _result(out, (x, w, b), backward, "linear")


def matmul_const(x: Tensor, table: np.ndarray) -> Tensor:
    """``x @ table.T`` where ``table`` is a non-differentiable array."""
    t = np.asarray(table, dtype=DTYPE)
    if x.shape[-1] != t.shape[1]:
        raise DimensionError(f"matmul_const {x.shape} vs table {t.shape}")
    return _result(x.data @ t.T, (x,), lambda g: (g @ t,), "matmul_const")


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row (or of a vector)."""
    d = x.data
    r = np.sqrt((d * d).sum(axis=-1))
    if np.any(r == 0):
        raise ValueError("degenerate embedding: zero vector has no direction")

    def backward(g):
        return (np.asarray(g)[..., None] * d / r[..., None],)

    return _result(r, (x,), backward, "row_norm")


def l2_normalize(x: Tensor) -> Tensor:
    d = x.data
    r = np.sqrt((d * d).sum(axis=-1, keepdims=True))
    if np.any(r == 0):
        raise ValueError("degenerate embedding: zero vector has no direction")
    u = d / r

    def backward(g):
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / r,)

    return _result(u, (x,), backward, "l2_normalize")


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy of rows of ``logits`` against integer targets."""
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects N x classes logits")
    t = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if t.shape != (n,) or n == 0:
        raise DimensionError("cross_entropy needs one target per row and at least one row")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), t]).mean()
    prob = np.exp(z - lse[:, None])

    def backward(g):
        d = prob.copy()
        d[np.arange(n), t] -= 1.0
        return (d * (float(g) / n),)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


def binary_cross_entropy(p: Tensor, targets, eps: float = 1e-12) -> Tensor:
    """Mean BCE of probabilities ``p`` against 0/1 targets; ``p`` is clipped to [eps, 1-eps]."""
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != p.shape:
        raise DimensionError("binary_cross_entropy targets must match scores")
    if p.data.size == 0:
        raise ValueError("binary_cross_entropy on an empty batch")
    q = np.clip(p.data, eps, 1.0 - eps)
    n = q.size
    loss = -(y * np.log(q) + (1 - y) * np.log(1 - q)).mean()
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def backward(g):
        return (float(g) / n * (q - y) / (q * (1 - q)) * inside,)

    return _result(np.asarray(loss), (p,), backward, "binary_cross_entropy")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``w`` (C_out x C_in x kh x kw)."""
    xd, squeeze = _promote(x)
    if w.ndim != 4:
        raise DimensionError(f"conv weight must be 4-d, got {w.shape}")
    c_out, c_in, kh, kw = w.shape
    n, c, h, wd_ = xd.shape
    if c != c_in:
        raise DimensionError(f"conv input has {c} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv bias shape {bias.shape} != ({c_out},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError("conv kernels must have odd extents")
    if pad < 0 or stride < 1:
        raise ConfigurationError("pad must be >= 0 and stride >= 1")
    span_h, span_w = h + 2 * pad - kh, wd_ + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigurationError(
            f"output extent not integral for input {h}x{wd_}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1
    wdat = w.data

    if kh == 1 and kw == 1 and pad == 0:
        xs = np.ascontiguousarray(xd[:, :, ::stride, ::stride]).reshape(n, c, ho * wo)
        w2 = wdat[:, :, 0, 0]
        out = np.matmul(w2, xs) + bias.data[None, :, None]
        out = out.reshape(n, c_out, ho, wo)

        def backward(g):
            g4 = (g[None] if squeeze else g).reshape(n, c_out, ho * wo)
            dw = np.tensordot(g4, xs, axes=([0, 2], [0, 2]))[:, :, None, None]
            dxs = np.matmul(w2.T, g4).reshape(n, c, ho, wo)
            if stride == 1:
                dx = dxs
            else:
                dx = np.zeros_like(xd)
                dx[:, :, ::stride, ::stride] = dxs
            return (dx[0] if squeeze else dx), dw, g4.sum(axis=(0, 2))

        return _result(out[0] if squeeze else out, (x, w, bias), backward, "conv2d")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    # im2col laid out as n x (c, i, j) x (output positions) so the product is already NCHW
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wm = wdat.reshape(c_out, -1)
    out = np.matmul(wm, cols).reshape(n, c_out, ho, wo) + bias.data[None, :, None, None]
    need_dx = x.requires_grad

    def backward(g):
        g4 = g[None] if squeeze else g
        gm = g4.reshape(n, c_out, ho * wo)
        dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wdat.shape)
        db = gm.sum(axis=(0, 2))
        if not need_dx:
            return None, dw, db
        dcols = np.matmul(wm.T, gm).reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[
                    :, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride
                ] += dcols[:, :, i, j]
        dx = dxp[:, :, pad : pad + h, pad : pad + wd_] if pad else dxp
        return (dx[0] if squeeze else dx), dw, db

    return _result(out[0] if squeeze else out, (x, w, bias), backward, "conv2d")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; spatial extents must be divisible by k."""
    xd, squeeze = _promote(x)
    n, c, h, w = xd.shape
    if k < 1 or h % k or w % k:
        raise ConfigurationError(f"avg_pool2d({k}) on {h}x{w} is not integral")
    out = xd.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        g4 = g[None] if squeeze else g
        dx = np.repeat(np.repeat(g4, k, axis=2), k, axis=3) / (k * k)
        return (dx[0] if squeeze else dx,)

    return _result(out[0] if squeeze else out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigurationError("batch-norm epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ConfigurationError("batch-norm momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running variance must be non-negative")

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> BatchNormState:
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: Tensor, state: BatchNormState) -> Tensor:
    xd, squeeze = _promote(x)
    n, c, h, w = xd.shape
    if c != state.channels:
        raise DimensionError(f"batchnorm expects {state.channels} channels, got {c}")
    if h * w == 0 or n == 0:
        raise DimensionError("batchnorm over an empty extent")
    gamma, beta = state.gamma.data, state.beta.data
    bshape = (1, c, 1, 1)

    if state.training:
        count = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        count = None
        mu, var = state.running_mean, state.running_var

    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)

    def backward(g):
        g4 = g[None] if squeeze else g
        dgamma = (g4 * xhat).sum(axis=(0, 2, 3))
        dbeta = g4.sum(axis=(0, 2, 3))
        dxhat = g4 * gamma.reshape(bshape)
        if count is None:
            dx = dxhat * inv.reshape(bshape)
        else:
            dx = (
                inv.reshape(bshape)
                / count
                * (
                    count * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        return (dx[0] if squeeze else dx), dgamma, dbeta

    return _result(
        out[0] if squeeze else out, (x, state.gamma, state.beta), backward, "batchnorm2d"
    )


# ---------------------------------------------------------------------------
# RoIAlign


def _bilinear_matrix(start: float, bin_size: float, bins: int, extent: int) -> np.ndarray:
    """Rows of interpolation weights sampling one point per bin at the bin centre."""
    pos = start + (np.arange(bins) + 0.5) * bin_size
    pos = np.clip(pos, 0.0, extent - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, extent - 1)
    frac = pos - lo
    m = np.zeros((bins, extent))
    rows = np.arange(bins)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def roi_align(
    feature: Tensor,
    boxes: Sequence,
    image_size: tuple[int, int],
    out: tuple[int, int] = (14, 14),
) -> Tensor:
    """Bilinear crop of ``feature`` (C x H x W) for every box; returns N x C x oh x ow.

    Boxes are ``(x1, y1, x2, y2)`` in image pixels and are clipped to the
    image before being mapped to feature coordinates with the half-pixel
    offset. One sample point is taken at the centre of every output bin.
    """
    if feature.ndim != 3:
        raise DimensionError("roi_align expects a single C x H x W feature map")
    c, fh, fw = feature.shape
    img_h, img_w = image_size
    sy, sx = fh / img_h, fw / img_w
    oh, ow = out
    ays, axs = [], []
    for box in boxes:
        x1, y1, x2, y2 = (float(v) for v in _box_coords(box))
        x1, x2 = np.clip([x1, x2], 0, img_w)
        y1, y2 = np.clip([y1, y2], 0, img_h)
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"degenerate box after clipping: {(x1, y1, x2, y2)}")
        ays.append(_bilinear_matrix(y1 * sy - 0.5, (y2 - y1) * sy / oh, oh, fh))
        axs.append(_bilinear_matrix(x1 * sx - 0.5, (x2 - x1) * sx / ow, ow, fw))
    if not ays:
        return Tensor(np.zeros((0, c, oh, ow)))
    ay = np.stack(ays)  # n, oh, fh
    ax = np.stack(axs)  # n, ow, fw
    fd = feature.data
    axt = ax.transpose(0, 2, 1)[:, None]  # n, 1, fw, ow
    res = np.matmul(ay[:, None], np.matmul(fd[None], axt))  # n, c, oh, ow

    def backward(g):
        tmp = np.matmul(ay.transpose(0, 2, 1)[:, None], g)  # n, c, fh, ow
        return (np.matmul(tmp, ax[:, None]).sum(axis=0),)

    return _result(res, (feature,), backward, "roi_align")


def roi_align_crop(feature: Tensor, box, image_size, out=(14, 14)) -> Tensor:
    """Single-box form of :func:`roi_align`, returning C x oh x ow."""
    return index_batch(roi_align(feature, [box], image_size, out), 0)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def take_rows(x: Tensor, rows) -> Tensor:
    """Select rows (first-axis entries) of ``x``; repeated rows accumulate gradient."""
    idx = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), backward, "take_rows")


def index_batch(x: Tensor, i: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _result(x.data[i].copy(), (x,), backward, "index_batch")


def _box_coords(box):
    if hasattr(box, "x1"):
        return box.x1, box.y1, box.x2, box.y2
    return box


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ParamSet:
    """Named trainable tensors plus named batch-norm states."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    norms: dict[str, BatchNormState] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> dict[str, Tensor]:
        """Every differentiable tensor, including batch-norm affine terms, in stable order."""
        out = dict(self.tensors)
        for name, bn in self.norms.items():
            out[f"{name}.gamma"] = bn.gamma
            out[f"{name}.beta"] = bn.beta
        return out

    def zero_grad(self) -> None:
        for t in self.trainable().values():
            t.grad = None

    def set_training(self, flag: bool) -> None:
        for bn in self.norms.values():
            bn.training = flag
