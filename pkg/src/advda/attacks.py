"""ℓ∞-bounded adversarial example generation.

Five attacks: single-step sign-of-gradient (fgsm), its predicted-label
variant that avoids label leaking (fgsm-variant), iterated projection with
optional random start (pgd / noisy-pgd), random-then-gradient step (rfgsm),
and the momentum iterative method (mim).

Shared contracts:
  * inputs and outputs are plain numpy image batches in [0, 1]; the input
    array and the model are never mutated;
  * every output satisfies ‖x_adv − x‖∞ ≤ ε and stays in [0, 1];
  * gradients are taken in eval mode (dropout off) so attacks are
    deterministic given (model, input, spec, seed).

Iterated attacks project onto the ε-ball around the ORIGINAL input after
every step and then clip to [0, 1]; the transcription that clips around the
iterate itself is degenerate and deliberately not implemented. The rfgsm
gradient is evaluated at the randomly perturbed point.
"""

from __future__ import annotations

import contextlib
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from advda import tensor as T
from advda.models import Model
from advda.tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

ATTACK_KINDS = ("fgsm", "fgsm-variant", "pgd", "noisy-pgd", "rfgsm", "mim")

# instrumentation: public entry points bump these so tests can assert, e.g.,
# that normal training never crafts adversaries
CALL_COUNTS: Counter = Counter()


@dataclass(frozen=True)
class AttackSpec:
    """Attack kind plus hyperparameters; ``with_defaults`` fills the standard
    settings (pgd: k=20, α=ε/10; rfgsm: α=ε/2; mim: k=10, α=ε/5, μ=1.0;
    noisy-pgd: k=10, α=ε/4)."""

    kind: str
    epsilon: float
    steps: int = 1
    alpha: float | None = None
    mu: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; choose from {ATTACK_KINDS}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1] pixel units, got {self.epsilon}")
        if self.kind in ("pgd", "noisy-pgd", "mim") and self.steps < 1:
            raise ValueError(f"{self.kind} needs steps >= 1, got {self.steps}")

    @staticmethod
    def with_defaults(kind: str, epsilon: float, seed: int = 0, **overrides) -> "AttackSpec":
        table = {
            "fgsm": {},
            "fgsm-variant": {},
            "pgd": {"steps": 20, "alpha": epsilon / 10.0},
            "noisy-pgd": {"steps": 10, "alpha": epsilon / 4.0},
            "rfgsm": {"alpha": epsilon / 2.0},
            "mim": {"steps": 10, "alpha": epsilon / 5.0, "mu": 1.0},
        }
        if kind not in table:
            raise ValueError(f"unknown attack kind {kind!r}")
        params = {**table[kind], **overrides}
        return AttackSpec(kind=kind, epsilon=epsilon, seed=seed, **params)


@contextlib.contextmanager
def _frozen_params(model: Model):
    """Keep the crafting pass from recording gradients into the model: the
    training step's backward must see only its own parameter gradients."""
    flags = [(p, p.requires_grad) for p in model.params.values()]
    for p, _ in flags:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, was in flags:
            p.requires_grad = was


def _loss_grad(model: Model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """∇ₓ of the summed cross-entropy; rows are the per-example gradients."""
    xt = Tensor(x, requires_grad=True, name="attack-input")
    with _frozen_params(model):
        ce = T.softmax_cross_entropy(model.apply(xt, mode="eval"), labels)
        T.backward(T.tsum(ce))
    g = xt.grad
    if g is None or not np.isfinite(g).all():
        raise NonFiniteError("attack: non-finite input gradient")
    return g


def _clip01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def _project(x: np.ndarray, origin: np.ndarray, epsilon: float) -> np.ndarray:
    return _clip01(np.clip(x, origin - epsilon, origin + epsilon))


def fgsm(model: Model, x: np.ndarray, y_true: np.ndarray, epsilon: float) -> np.ndarray:
    """x + ε·sign(∇ₓJ(x, y_true)), clipped to [0, 1]."""
    CALL_COUNTS["fgsm"] += 1
    x = np.asarray(x, dtype=np.float64)
    return _clip01(x + epsilon * np.sign(_loss_grad(model, x, y_true)))


def fgsm_variant(model: Model, x: np.ndarray, epsilon: float) -> np.ndarray:
    """fgsm against the model's own predicted labels (argmax of the logits),
    which avoids leaking the true label into the perturbation."""
    CALL_COUNTS["fgsm-variant"] += 1
    x = np.asarray(x, dtype=np.float64)
    with T.no_grad():
        y_target = model.apply(x, mode="eval").data.argmax(axis=1)
    return _clip01(x + epsilon * np.sign(_loss_grad(model, x, y_target)))


def pgd(
    model: Model,
    x: np.ndarray,
    y_true: np.ndarray,
    spec: AttackSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Iterated sign-gradient ascent with per-step projection; covers both
    'pgd' (start at x) and 'noisy-pgd' (uniform random start in the ball)."""
    if spec.kind not in ("pgd", "noisy-pgd"):
        raise ValueError(f"pgd called with spec kind {spec.kind!r}")
    CALL_COUNTS[spec.kind] += 1
    x = np.asarray(x, dtype=np.float64)
    alpha = spec.epsilon / 10.0 if spec.alpha is None else spec.alpha
    adv = x.copy()
    if spec.kind == "noisy-pgd" and spec.epsilon > 0:
        rng = np.random.default_rng(spec.seed) if rng is None else rng
        adv = _clip01(x + rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape))
    for _ in range(spec.steps):
        adv = adv + alpha * np.sign(_loss_grad(model, adv, y_true))
        adv = _project(adv, x, spec.epsilon)
    return adv


def rfgsm(
    model: Model,
    x: np.ndarray,
    y_true: np.ndarray,
    epsilon: float,
    alpha: float | None = None,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Random sign step of size α, then an (ε−α) gradient sign step evaluated
    at the perturbed point."""
    CALL_COUNTS["rfgsm"] += 1
    x = np.asarray(x, dtype=np.float64)
    alpha = epsilon / 2.0 if alpha is None else alpha
    if alpha > epsilon:
        raise ValueError(f"rfgsm needs alpha <= epsilon, got alpha={alpha}, epsilon={epsilon}")
    rng = np.random.default_rng(seed) if rng is None else rng
    xp = x + alpha * np.sign(rng.standard_normal(x.shape))
    return _clip01(xp + (epsilon - alpha) * np.sign(_loss_grad(model, xp, y_true)))


def mim(model: Model, x: np.ndarray, y_true: np.ndarray, spec: AttackSpec,
        _trace: list | None = None) -> np.ndarray:
    """Momentum iterative method: accumulate per-example L1-normalized
    gradients with decay μ, step by α·sign, project every step."""
    if spec.kind != "mim":
        raise ValueError(f"mim called with spec kind {spec.kind!r}")
    CALL_COUNTS["mim"] += 1
    x = np.asarray(x, dtype=np.float64)
    alpha = spec.epsilon / 5.0 if spec.alpha is None else spec.alpha
    adv = x.copy()
    g = np.zeros_like(x)
    for step in range(spec.steps):
        grad = _loss_grad(model, adv, y_true)
        norms = np.abs(grad).reshape(len(grad), -1).sum(axis=1)
        zero = norms == 0.0
        if zero.any():
            log.warning("mim: zero gradient L1 norm for %d example(s) at step %d; "
                        "momentum keeps its previous value", int(zero.sum()), step)
        safe = np.where(zero, 1.0, norms).reshape(-1, *([1] * (x.ndim - 1)))
        unit = np.where(zero.reshape(-1, *([1] * (x.ndim - 1))), 0.0, grad / safe)
        g = spec.mu * g + unit
        if _trace is not None:
            _trace.append(g.copy())
        adv = adv + alpha * np.sign(g)
        adv = _project(adv, x, spec.epsilon)
    return adv


def run_attack(
    model: Model,
    x: np.ndarray,
    y_true: np.ndarray | None,
    spec: AttackSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Dispatch on ``spec.kind``. ``y_true`` may be None only for the
    predicted-label fgsm variant."""
    if spec.kind == "fgsm":
        return fgsm(model, x, y_true, spec.epsilon)
    if spec.kind == "fgsm-variant":
        return fgsm_variant(model, x, spec.epsilon)
    if spec.kind in ("pgd", "noisy-pgd"):
        return pgd(model, x, y_true, spec, rng=rng)
    if spec.kind == "rfgsm":
        return rfgsm(model, x, y_true, spec.epsilon, spec.alpha, rng=rng, seed=spec.seed)
    if spec.kind == "mim":
        return mim(model, x, y_true, spec)
    raise ValueError(f"unknown attack kind {spec.kind!r}")


def verify_linf_ball(clean: np.ndarray, adv: np.ndarray, epsilon: float,
                     tol: float = 1e-12) -> None:
    """Raise if any adversarial example leaves the ε-ball or the [0,1] box."""
    gap = float(np.abs(adv - clean).max())
    if gap > epsilon + tol:
        raise ValueError(f"ball containment violated: ‖x_adv − x‖∞ = {gap} > ε = {epsilon}")
    if adv.min() < 0.0 or adv.max() > 1.0:
        raise ValueError(f"range violated: values in [{adv.min()}, {adv.max()}]")
