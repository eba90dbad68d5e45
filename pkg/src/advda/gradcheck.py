"""Finite-difference gradient verification for every op and composite loss.

The checker is the independent oracle for the whole autodiff engine: each op
gets ≥20 random small instances, and the reverse-mode gradient must match
central differences at relative tolerance 1e-4. Samplers keep inputs away
from subgradient kinks (relu/L1 at 0, maxpool ties) by construction, since
finite differences are meaningless there.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from advda import tensor as T
from advda.tensor import NonFiniteError, Tensor

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
KINK_MARGIN = 1e-3


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_diff_grad: non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(auto: np.ndarray, fd: np.ndarray) -> float:
    """max |auto − fd| / max(1, |fd|), elementwise."""
    denom = np.maximum(1.0, np.abs(fd))
    return float((np.abs(auto - fd) / denom).max())


def _away_from_zero(rng: np.random.Generator, shape, scale=1.0, margin=KINK_MARGIN):
    """Sample values whose magnitude stays clear of 0 (relu/L1 kinks)."""
    x = rng.uniform(margin, scale, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _pool_safe(rng: np.random.Generator, n, c, h, w, size, stride, margin=KINK_MARGIN):
    """Sample an image batch whose pooling windows have a unique max with slack."""
    for _ in range(200):
        x = rng.uniform(-1.0, 1.0, size=(n, c, h, w))
        win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(2, 3))
        win = win[:, :, ::stride, ::stride].reshape(n, c, -1, size * size)
        top2 = np.sort(win, axis=-1)[..., -2:]
        if (top2[..., 1] - top2[..., 0] > 2 * margin).all():
            return x
    raise RuntimeError("could not sample a tie-free pooling input")


@dataclass
class OpReport:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def check_case(
    build: Callable[[Tensor], Tensor],
    x0: np.ndarray,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
) -> float:
    """Compare reverse-mode and central-difference gradients of a scalar graph.

    ``build`` must be a deterministic function of its input tensor (any
    auxiliary randomness fixed beforehand).
    """
    xt = Tensor(np.array(x0, dtype=np.float64), requires_grad=True)
    loss = build(xt)
    T.backward(loss)
    auto = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    fd = finite_diff_grad(lambda a: float(build(Tensor(a)).data), np.array(x0), h=h)
    return max_rel_err(auto, fd)


# ---------------------------------------------------------------------------
# the op suite


def _scalarize(t: Tensor) -> Tensor:
    """Deterministic projection to a scalar: weighted sum with fixed weights."""
    flat = T.reshape(t, (t.data.size,)) if t.data.shape != () else t
    if t.data.shape == ():
        return t
    w = Tensor(np.linspace(0.3, 1.7, t.data.size))
    return T.tsum(T.mul(flat, w))


def _case_unary(op, sampler):
    def make(rng):
        x0 = sampler(rng)
        return (lambda xt: _scalarize(op(xt))), x0

    return make


def _case_binary_left(op, sampler):
    def make(rng):
        x0 = sampler(rng)
        other = Tensor(rng.normal(size=x0.shape))
        return (lambda xt: _scalarize(op(xt, other))), x0

    return make


def _img(rng, n=2, c=2, h=6, w=6):
    return rng.normal(size=(n, c, h, w))


def _conv_case(stride, padding):
    def make(rng):
        x0 = _img(rng, n=2, c=2, h=5, w=6)
        wt = Tensor(rng.normal(size=(3, 2, 3, 3)))
        bt = Tensor(rng.normal(size=(3,)))
        return (lambda xt: _scalarize(T.conv2d(xt, wt, bt, stride=stride, padding=padding))), x0

    return make


def _conv_weight_case(rng):
    x = Tensor(_img(rng, n=2, c=2, h=6, w=5))
    b = Tensor(rng.normal(size=(3,)))
    w0 = rng.normal(size=(3, 2, 3, 3))
    return (lambda wt: _scalarize(T.conv2d(x, wt, b, stride=2, padding="same"))), w0


def _matmul_case(rng):
    x0 = rng.normal(size=(3, 4))
    other = Tensor(rng.normal(size=(4, 2)))
    return (lambda xt: _scalarize(T.matmul(xt, other))), x0


def _affine_case(rng):
    x0 = rng.normal(size=(4, 5))
    wt = Tensor(rng.normal(size=(5, 3)))
    bt = Tensor(rng.normal(size=(3,)))
    return (lambda xt: _scalarize(T.affine(xt, wt, bt))), x0


def _affine_weight_case(rng):
    xt = Tensor(rng.normal(size=(4, 5)))
    bt = Tensor(rng.normal(size=(3,)))
    w0 = rng.normal(size=(5, 3))
    return (lambda wt: _scalarize(T.affine(xt, wt, bt))), w0


def _affine_bias_case(rng):
    xt = Tensor(rng.normal(size=(4, 5)))
    wt = Tensor(rng.normal(size=(5, 3)))
    b0 = rng.normal(size=(3,))
    return (lambda bt: _scalarize(T.affine(xt, wt, bt))), b0


def _maxpool_case(rng):
    x0 = _pool_safe(rng, 2, 2, 6, 6, size=2, stride=2)
    return (lambda xt: _scalarize(T.maxpool2d(xt, 2, 2))), x0


def _maxpool_overlap_case(rng):
    x0 = _pool_safe(rng, 1, 2, 7, 7, size=3, stride=2)
    return (lambda xt: _scalarize(T.maxpool2d(xt, 3, 2))), x0


def _dropout_case(rng):
    x0 = rng.normal(size=(3, 8))
    seed = int(rng.integers(1 << 31))

    def build(xt):
        # fixed mask: the RNG is reseeded identically on every evaluation
        return _scalarize(T.dropout(xt, 0.4, np.random.default_rng(seed), train=True))

    return build, x0


def _sce_case(rng):
    x0 = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    return (lambda xt: T.tmean(T.softmax_cross_entropy(xt, labels))), x0


def _rows_case(rng):
    x0 = rng.normal(size=(6, 3))
    return (lambda xt: _scalarize(T.rows(xt, 2, 5))), x0


def _l1_axis_case(rng):
    x0 = _away_from_zero(rng, (4, 5))
    return (lambda xt: _scalarize(T.l1_norm(xt, axis=1))), x0


def _l2_axis_case(rng):
    x0 = rng.normal(size=(4, 5)) + 0.1
    return (lambda xt: _scalarize(T.l2_norm(xt, axis=1))), x0


def _logits_clear_of(rng, shape, centers, margin=KINK_MARGIN):
    """Logit blocks whose coordinates stay `margin` away from every center
    coordinate (the L1 distance kinks)."""
    for _ in range(200):
        x = rng.normal(size=shape)
        gaps = np.abs(x[:, None, :] - centers[None, :, :])
        if gaps.min() > margin:
            return x
    raise RuntimeError("could not sample logits clear of the center kinks")


def _cov(block):
    c = block - block.mean(axis=0, keepdims=True)
    return c.T @ c / (len(block) - 1)


def _coral_case(rng):
    from advda.losses import coral_loss

    m, k = 5, 3
    x0 = rng.normal(size=(2 * m, k))
    # keep the covariance differences off the entrywise-L1 kink
    while np.abs(_cov(x0[:m]) - _cov(x0[m:])).min() < KINK_MARGIN:
        x0 = rng.normal(size=(2 * m, k))
    return (lambda xt: coral_loss(_batch_from(xt, rng, m))), x0


def _batch_from(xt: Tensor, rng, m):
    from advda.losses import DomainBatch

    labels = _FIXED_LABELS[:m]
    return DomainBatch(clean_logits=T.rows(xt, 0, m), adv_logits=T.rows(xt, m, 2 * m),
                       labels=labels)


_FIXED_LABELS = np.array([0, 1, 2, 0, 1, 2, 0, 1], dtype=np.int64)


def _mmd_case(rng):
    from advda.losses import mmd_loss

    m, k = 5, 3
    x0 = rng.normal(size=(2 * m, k))
    # keep the mean differences off the L1 kink
    while np.abs(x0[:m].mean(axis=0) - x0[m:].mean(axis=0)).min() < KINK_MARGIN:
        x0 = rng.normal(size=(2 * m, k))
    return (lambda xt: mmd_loss(_batch_from(xt, rng, m))), x0


def _margin_case(rng):
    from advda.losses import CenterSet, margin_loss

    n, k = 6, 3
    centers = CenterSet(centers=rng.normal(size=(k, k)))
    x0 = _logits_clear_of(rng, (n, k), centers.centers)
    labels = _FIXED_LABELS[:n]
    return (lambda xt: margin_loss(xt, labels, centers)), x0


def _total_case(rng):
    from advda.losses import CenterSet, atda_total_loss

    m, k = 4, 3
    centers = CenterSet(centers=rng.normal(size=(k, k)))
    for _ in range(200):
        x0 = _logits_clear_of(rng, (2 * m, k), centers.centers)
        cov_gap = np.abs(_cov(x0[:m]) - _cov(x0[m:])).min()
        mean_gap = np.abs(x0[:m].mean(axis=0) - x0[m:].mean(axis=0)).min()
        if cov_gap > KINK_MARGIN and mean_gap > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not sample a kink-free total-loss instance")

    def build(xt):
        total, _ = atda_total_loss(_batch_from(xt, rng, m), centers, lam=1.0 / 3.0)
        return total

    return build, x0


COMPOSITE_CHECKS: dict[str, Callable] = {
    "loss-covariance-alignment": _coral_case,
    "loss-mean-alignment": _mmd_case,
    "loss-margin": _margin_case,
    "loss-total-objective": _total_case,
}


DEFAULT_CHECKS: dict[str, Callable] = {
    "add": _case_binary_left(T.add, lambda rng: rng.normal(size=(3, 4))),
    "sub": _case_binary_left(T.sub, lambda rng: rng.normal(size=(3, 4))),
    "mul": _case_binary_left(T.mul, lambda rng: rng.normal(size=(3, 4))),
    "neg": _case_unary(T.neg, lambda rng: rng.normal(size=(3, 4))),
    "scalar-mul": _case_unary(lambda t: T.scalar_mul(t, 2.5), lambda rng: rng.normal(size=(7,))),
    "scalar-add": _case_unary(lambda t: T.scalar_add(t, -1.5), lambda rng: rng.normal(size=(7,))),
    "matmul": _matmul_case,
    "transpose-multiply": _case_binary_left(T.xt_matmul, lambda rng: rng.normal(size=(5, 3))),
    "affine": _affine_case,
    "affine-weight": _affine_weight_case,
    "affine-bias": _affine_bias_case,
    "conv2d-s1-valid": _conv_case(1, "valid"),
    "conv2d-s1-same": _conv_case(1, "same"),
    "conv2d-s2-valid": _conv_case(2, "valid"),
    "conv2d-s2-same": _conv_case(2, "same"),
    "conv2d-weight": _conv_weight_case,
    "maxpool2d": _maxpool_case,
    "maxpool2d-overlap": _maxpool_overlap_case,
    "global-average-pool": _case_unary(T.global_avg_pool, _img),
    "relu": _case_unary(T.relu, lambda rng: _away_from_zero(rng, (3, 5))),
    "elu": _case_unary(T.elu, lambda rng: rng.normal(size=(3, 5))),
    "dropout": _dropout_case,
    "softmax-cross-entropy": _sce_case,
    "reshape": _case_unary(lambda t: T.reshape(t, (2, 6)), lambda rng: rng.normal(size=(3, 4))),
    "rows": _rows_case,
    "sum": _case_unary(T.tsum, lambda rng: rng.normal(size=(3, 4))),
    "sum-axis0": _case_unary(lambda t: T.tsum(t, axis=0), lambda rng: rng.normal(size=(3, 4))),
    "mean": _case_unary(T.tmean, lambda rng: rng.normal(size=(3, 4))),
    "mean-axis0": _case_unary(lambda t: T.tmean(t, axis=0), lambda rng: rng.normal(size=(3, 4))),
    "l1-norm": _case_unary(T.l1_norm, lambda rng: _away_from_zero(rng, (3, 4))),
    "l1-norm-rows": _l1_axis_case,
    "l2-norm": _case_unary(T.l2_norm, lambda rng: rng.normal(size=(3, 4)) + 0.1),
    "l2-norm-rows": _l2_axis_case,
    "demean": _case_unary(T.demean, lambda rng: rng.normal(size=(5, 3))),
    "concat-rows": _case_binary_left(T.concat_rows, lambda rng: rng.normal(size=(3, 4))),
}
DEFAULT_CHECKS.update(COMPOSITE_CHECKS)


def run_suite(
    checks: dict[str, Callable] | None = None,
    trials: int = 20,
    seed: int = 0,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
) -> list[OpReport]:
    """Run ``trials`` random instances per op; report the worst relative error."""
    checks = DEFAULT_CHECKS if checks is None else checks
    reports = []
    for name, factory in checks.items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = 0.0
        for _ in range(trials):
            build, x0 = factory(rng)
            worst = max(worst, check_case(build, x0, h=h, tol=tol))
        reports.append(OpReport(name=name, max_rel_err=worst, tol=tol))
    return reports
