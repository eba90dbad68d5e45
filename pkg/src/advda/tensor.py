"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is exactly what small convolutional classifiers, input-gradient
attacks, and logit-space alignment losses need: affine and convolution
layers, max/global-average pooling, relu/elu, inverted dropout, softmax
cross-entropy, elementwise arithmetic, and the L1/L2/mean/sum reductions the
losses are built from.

Values are recorded define-by-run: every op appends a node to the implicit
graph (parents created strictly earlier), and ``backward`` on a scalar walks
the nodes in reverse topological order. Ops never write into their inputs,
and forward/backward are pure given an explicit RNG, so evaluating separate
graphs from separate threads is safe.

Subgradient conventions at kinks are fixed for determinism: relu'(0) = 0,
d|x|/dx = 0 at 0, d‖x‖₂/dx = 0 at the origin, and maxpool ties go to the
first element in row-major window order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

from advda import kernels

DTYPE = np.float64
PRECISION = "float64"


class ShapeError(ValueError):
    """Operand shapes do not match the op's contract; names the node."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite contains NaN or Inf."""


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains non-finite values")


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the recorded edge back into the graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions do the work
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scalar_add(self, other)

    def __radd__(self, other):
        return scalar_add(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scalar_add(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def custom_op(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward_fn: Callable[[np.ndarray], None] | None,
    name: str | None = None,
) -> Tensor:
    """Record one graph node. ``backward_fn`` receives the output gradient and
    must accumulate into the parents via ``accumulate_grad``."""
    parents = tuple(parents)
    out = Tensor(data, name=name)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; fills ``.grad`` on every tensor
    that requires grad and contributed to it. Leaves that do not contribute
    keep ``grad=None`` (read as zero)."""
    if loss.data.shape != ():
        raise ShapeError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
            + (f" at node {loss.name!r}" if loss.name else "")
        )
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=DTYPE)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def gradients(loss: Tensor, wrt: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward and return a gradient map for the named tensors; entries
    that did not influence the loss come back as zeros of the right shape."""
    backward(loss)
    return {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in wrt.items()
    }


def _want(*parents: Tensor) -> bool:
    return _grad_enabled and any(p.requires_grad for p in parents)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bwd(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return custom_op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bwd(g):
        accumulate_grad(a, g)
        accumulate_grad(b, -g)

    return custom_op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bwd(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return custom_op(a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: accumulate_grad(a, -g))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom_op(a.data * c, (a,), lambda g: accumulate_grad(a, g * c))


def scalar_add(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom_op(a.data + c, (a,), lambda g: accumulate_grad(a, g))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bwd(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return custom_op(a.data @ b.data, (a, b), bwd)


def xt_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Transpose-multiply: aᵀ @ b for a (m, p) and b (m, q)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"xt_matmul: incompatible shapes {a.shape}ᵀ @ {b.shape}")

    def bwd(g):
        accumulate_grad(a, b.data @ g.T)
        accumulate_grad(b, a.data @ g)

    return custom_op(a.data.T @ b.data, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    """Fully connected layer: x (n, f) @ w (f, u) + b (u,)."""
    where = name or "affine"
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"{where}: input {x.shape} does not match weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"{where}: bias {b.shape} does not match weights {w.shape}")

    def bwd(g):
        accumulate_grad(x, g @ w.data.T)
        accumulate_grad(w, x.data.T @ g)
        accumulate_grad(b, g.sum(axis=0))

    return custom_op(x.data @ w.data + b.data, (x, w, b), bwd, name=name)


# ---------------------------------------------------------------------------
# nonlinearities and dropout


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # relu'(0) = 0
    return custom_op(np.where(mask, a.data, 0.0), (a,), lambda g: accumulate_grad(a, g * mask))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, alpha * np.expm1(a.data))

    def bwd(g):
        accumulate_grad(a, np.where(pos, g, g * (out + alpha)))

    return custom_op(out, (a,), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scales by 1/(1-rate) at train time, identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an RNG")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return custom_op(a.data * mask, (a,), lambda g: accumulate_grad(a, g * mask))


# ---------------------------------------------------------------------------
# convolution and pooling


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor,
    stride: int = 1,
    padding: str = "valid",
    name: str | None = None,
) -> Tensor:
    """2-D convolution, NCHW layout, zero padding 'same' or 'valid'."""
    where = name or "conv2d"
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{where}: expected 4-d input and weights, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"{where}: input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"{where}: bias {b.shape} does not match {w.shape[0]} filters")
    if stride not in (1, 2):
        raise ValueError(f"{where}: stride must be 1 or 2, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"{where}: padding must be 'same' or 'valid', got {padding!r}")

    kh, kw = w.shape[2], w.shape[3]
    if padding == "same":
        pt, pb = _same_pad(x.shape[2], kh, stride)
        pl, pr = _same_pad(x.shape[3], kw, stride)
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        pt = pl = 0
        if x.shape[2] < kh or x.shape[3] < kw:
            raise ShapeError(f"{where}: input {x.shape} smaller than kernel {kh}x{kw}")
        xp = x.data

    y = kernels.conv2d_forward(xp, w.data, stride) + b.data[None, :, None, None]

    def bwd(g):
        g = np.ascontiguousarray(g)
        gxp, gw = kernels.conv2d_backward(xp, w.data, g, stride)
        if padding == "same":
            h, wd = x.shape[2], x.shape[3]
            gxp = gxp[:, :, pt : pt + h, pl : pl + wd]
        accumulate_grad(x, gxp)
        accumulate_grad(w, gw)
        accumulate_grad(b, g.sum(axis=(0, 2, 3)))

    return custom_op(y, (x, w, b), bwd, name=name)


def maxpool2d(x: Tensor, size: int, stride: int | None = None, name: str | None = None) -> Tensor:
    where = name or "maxpool2d"
    if x.ndim != 4:
        raise ShapeError(f"{where}: expected 4-d input, got {x.shape}")
    stride = size if stride is None else stride
    if x.shape[2] < size or x.shape[3] < size:
        raise ShapeError(f"{where}: input {x.shape} smaller than window {size}x{size}")
    y, ay, ax = kernels.maxpool_forward(x.data, size, size, stride)

    def bwd(g):
        accumulate_grad(
            x, kernels.maxpool_backward(np.ascontiguousarray(g), ay, ax, x.shape[2], x.shape[3])
        )

    return custom_op(y, (x,), bwd, name=name)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    area = x.shape[2] * x.shape[3]

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g[:, :, None, None], x.shape) / area)

    return custom_op(x.data.mean(axis=(2, 3)), (x,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)
    return custom_op(data, (x,), lambda g: accumulate_grad(x, g.reshape(x.shape)))


def flatten_rows(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack two blocks along the leading axis."""
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_rows: trailing shapes differ, {a.shape} vs {b.shape}")
    na = a.shape[0]

    def bwd(g):
        accumulate_grad(a, g[:na].copy())
        accumulate_grad(b, g[na:].copy())

    return custom_op(np.concatenate([a.data, b.data], axis=0), (a, b), bwd)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice rows [start, stop) of the leading axis."""
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"rows: [{start}, {stop}) out of range for {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        accumulate_grad(x, gx)

    return custom_op(x.data[start:stop].copy(), (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def _expand(g: np.ndarray, axis: int | None, shape: tuple[int, ...]) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    def bwd(g):
        accumulate_grad(x, np.ascontiguousarray(_expand(g, axis, x.shape)))

    return custom_op(x.data.sum(axis=axis), (x,), bwd)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    cnt = x.data.size if axis is None else x.shape[axis]

    def bwd(g):
        accumulate_grad(x, _expand(g, axis, x.shape) / cnt)

    return custom_op(x.data.mean(axis=axis), (x,), bwd)


def l1_norm(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum of absolute values (entrywise L1); subgradient 0 at 0."""
    sgn = np.sign(x.data)

    def bwd(g):
        accumulate_grad(x, _expand(g, axis, x.shape) * sgn)

    return custom_op(np.abs(x.data).sum(axis=axis), (x,), bwd)


def l2_norm(x: Tensor, axis: int | None = None) -> Tensor:
    nrm = np.sqrt((x.data * x.data).sum(axis=axis))

    def bwd(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        accumulate_grad(x, _expand(g / safe, axis, x.shape) * x.data * _expand(nrm > 0, axis, x.shape))

    return custom_op(nrm, (x,), bwd)


def demean(x: Tensor) -> Tensor:
    """Subtract each column's mean over rows (feature centering for a 2-d batch)."""
    if x.ndim != 2:
        raise ShapeError(f"demean: expected 2-d input, got {x.shape}")

    def bwd(g):
        accumulate_grad(x, g - g.mean(axis=0, keepdims=True))

    return custom_op(x.data - x.data.mean(axis=0, keepdims=True), (x,), bwd)


# ---------------------------------------------------------------------------
# classification loss


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (forward only)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-example cross-entropy of softmax(logits) against integer labels.

    Returns a vector (n,); reduce with ``tmean``/``tsum`` as needed.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (n, k) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} do not match {n} rows")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: labels must be integers in [0, {k})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    losses = -logp[np.arange(n), labels]
    probs = ez / sez

    def bwd(g):
        gx = probs * g[:, None]
        gx[np.arange(n), labels] -= g
        accumulate_grad(logits, gx)

    return custom_op(losses, (logits,), bwd)
