"""Logit-space domain-adaptation losses and the combined training objective.

Components, all over a batch of m clean examples and their m adversarial
counterparts (same labels):

  * covariance alignment: (1/k²)·‖C_clean − C_adv‖_ℓ1, entrywise L1 of the
    difference of sample covariance matrices of the logits;
  * mean alignment: (1/k)·‖mean(Φ_clean) − mean(Φ_adv)‖₁;
  * margin loss over running class centers: softplus of (L1 distance to the
    own-class center minus L1 distance to each other center), averaged with
    1/((k−1)·N) over both domains — centers are constants inside the loss;
  * running center update: c_j ← c_j − α·Δc_j with
    Δc_j = Σ 1[y=j](c_j − φ(x)) / (1 + Σ 1[y=j]).

The combined objective is mean cross-entropy on each domain plus λ times the
three alignment terms. The returned component dict holds each term's
contribution to the total (the λ weight already applied), so the components
always sum to the total. A zero λ skips the alignment terms entirely, which
makes a λ=0 run's numeric path identical to plain adversarial training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from advda import tensor as T
from advda.tensor import ShapeError, Tensor, check_finite, custom_op, accumulate_grad


@dataclass
class CenterSet:
    """One logit-space center per class, plus the center learning rate."""

    centers: np.ndarray  # (k, k): row j is the center of class j
    rate: float = 0.1

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] != self.centers.shape[1]:
            raise ShapeError(f"centers must be (k, k), got {self.centers.shape}")
        check_finite(self.centers, "class centers")

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @staticmethod
    def zeros(k: int, rate: float = 0.1) -> "CenterSet":
        return CenterSet(centers=np.zeros((k, k)), rate=rate)

    @staticmethod
    def random(k: int, rate: float, rng: np.random.Generator) -> "CenterSet":
        return CenterSet(centers=rng.standard_normal((k, k)), rate=rate)


@dataclass
class DomainBatch:
    """Clean and adversarial logits with the shared true labels."""

    clean_logits: Tensor
    adv_logits: Tensor
    labels: np.ndarray

    def __post_init__(self):
        if self.clean_logits.shape != self.adv_logits.shape:
            raise ShapeError(
                f"logit blocks must match: {self.clean_logits.shape} vs {self.adv_logits.shape}"
            )
        if self.clean_logits.ndim != 2:
            raise ShapeError(f"logits must be (m, k), got {self.clean_logits.shape}")
        self.labels = np.asarray(self.labels)
        m, k = self.clean_logits.shape
        if self.labels.shape != (m,):
            raise ShapeError(f"labels {self.labels.shape} do not match {m} rows")
        if self.labels.min() < 0 or self.labels.max() >= k:
            raise ValueError(f"labels must lie in [0, {k})")

    @property
    def m(self) -> int:
        return self.clean_logits.shape[0]

    @property
    def k(self) -> int:
        return self.clean_logits.shape[1]


def _covariance(logits: Tensor, ddof: int) -> Tensor:
    m = logits.shape[0]
    centered = T.demean(logits)
    return T.scalar_mul(T.xt_matmul(centered, centered), 1.0 / (m - ddof))


def coral_loss(batch: DomainBatch, ddof: int = 1) -> Tensor:
    """Entrywise-L1 distance of the two logit covariance matrices, scaled by
    1/k². ``ddof=1`` selects the 1/(m−1) sample-covariance estimator; 0
    switches to 1/m for sensitivity checks."""
    if batch.m < 2:
        raise ValueError(f"covariance needs at least 2 samples per domain, got {batch.m}")
    diff = T.sub(_covariance(batch.clean_logits, ddof), _covariance(batch.adv_logits, ddof))
    return T.scalar_mul(T.l1_norm(diff), 1.0 / batch.k**2)


def mmd_loss(batch: DomainBatch) -> Tensor:
    """L1 distance of the mean logit vectors, scaled by 1/k."""
    diff = T.sub(T.tmean(batch.clean_logits, axis=0), T.tmean(batch.adv_logits, axis=0))
    return T.scalar_mul(T.l1_norm(diff), 1.0 / batch.k)


def uda_loss(batch: DomainBatch, ddof: int = 1) -> Tensor:
    return T.add(coral_loss(batch, ddof=ddof), mmd_loss(batch))


def mmd_distance(phi_a: np.ndarray, phi_b: np.ndarray) -> float:
    """The mean-alignment metric on plain logit arrays (evaluation use)."""
    if phi_a.ndim != 2 or phi_b.ndim != 2 or phi_a.shape[1] != phi_b.shape[1]:
        raise ShapeError(f"logit sets must share width: {phi_a.shape} vs {phi_b.shape}")
    k = phi_a.shape[1]
    return float(np.abs(phi_a.mean(axis=0) - phi_b.mean(axis=0)).sum() / k)


def _softplus(t: np.ndarray) -> np.ndarray:
    return np.where(t > 0, t + np.log1p(np.exp(-np.abs(t))), np.log1p(np.exp(t)))


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def margin_loss(logits: Tensor, labels: np.ndarray, centers: CenterSet | None) -> Tensor:
    """Softplus margin between own-center and other-center L1 distances,
    summed over all samples (both domains concatenated) and all negative
    centers, normalized by 1/((k−1)·N). Gradients flow to the logits only;
    the centers are constants here (their update rule is separate)."""
    if centers is None:
        raise ValueError("margin loss needs an initialized CenterSet")
    if logits.ndim != 2:
        raise ShapeError(f"margin loss expects (N, k) logits, got {logits.shape}")
    n, k = logits.shape
    if centers.num_classes != k:
        raise ShapeError(f"centers are for {centers.num_classes} classes, logits have {k}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels {labels.shape} do not match {n} rows")

    phi = logits.data
    c = centers.centers
    diffs = phi[:, None, :] - c[None, :, :]        # (N, k, k)
    dists = np.abs(diffs).sum(axis=2)              # (N, k) L1 distance to each center
    rows = np.arange(n)
    d_own = dists[rows, labels]
    margins = d_own[:, None] - dists               # (N, k)
    negmask = np.ones((n, k))
    negmask[rows, labels] = 0.0
    scale = 1.0 / ((k - 1) * n)
    value = (_softplus(margins) * negmask).sum() * scale

    def bwd(g):
        sig = _sigmoid(margins) * negmask
        coef = -sig
        coef[rows, labels] = sig.sum(axis=1)
        gphi = np.einsum("nk,nkj->nj", coef, np.sign(diffs)) * (float(g) * scale)
        accumulate_grad(logits, gphi)

    return custom_op(np.float64(value), (logits,), bwd)


def update_centers(centers: CenterSet, logits: np.ndarray, labels: np.ndarray) -> CenterSet:
    """One running-average step of the class centers; classes absent from the
    batch are unchanged. Pure: returns a new CenterSet."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    check_finite(logits, "logits for center update")
    k = centers.num_classes
    new = centers.centers.copy()
    for j in range(k):
        mask = labels == j
        count = int(mask.sum())
        delta = (new[j] * count - logits[mask].sum(axis=0)) / (1.0 + count)
        new[j] = new[j] - centers.rate * delta
    return CenterSet(centers=new, rate=centers.rate)


def atda_total_loss(
    batch: DomainBatch,
    centers: CenterSet | None,
    lam: float,
    *,
    include_uda: bool = True,
    include_sda: bool = True,
    coral_ddof: int = 1,
    blend: float | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Mean cross-entropy on both domains plus λ-weighted alignment terms.

    Returns the scalar loss tensor and the per-term contributions
    (ce_clean, ce_adv, coral, mmd, margin); skipped terms log 0.0 and the
    contributions always sum to the total. λ=0 short-circuits the alignment
    terms so the computation is identical to the two-term objective.

    ``blend`` switches the classification part to the single-loss weighting
    w·CE(clean) + (1−w)·CE(adv) instead of the default equal-weight sum.
    """
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if blend is not None and not 0.0 <= blend <= 1.0:
        raise ValueError(f"blend weight must be in [0, 1], got {blend}")
    ce_clean = T.tmean(T.softmax_cross_entropy(batch.clean_logits, batch.labels))
    ce_adv = T.tmean(T.softmax_cross_entropy(batch.adv_logits, batch.labels))
    if blend is not None:
        ce_clean = T.scalar_mul(ce_clean, blend)
        ce_adv = T.scalar_mul(ce_adv, 1.0 - blend)
    total = T.add(ce_clean, ce_adv)
    components = {
        "ce_clean": float(ce_clean.data),
        "ce_adv": float(ce_adv.data),
        "coral": 0.0,
        "mmd": 0.0,
        "margin": 0.0,
    }
    if lam > 0 and include_uda:
        coral = T.scalar_mul(coral_loss(batch, ddof=coral_ddof), lam)
        mmd = T.scalar_mul(mmd_loss(batch), lam)
        total = T.add(total, T.add(coral, mmd))
        components["coral"] = float(coral.data)
        components["mmd"] = float(mmd.data)
    if lam > 0 and include_sda:
        all_logits = T.concat_rows(batch.clean_logits, batch.adv_logits)
        all_labels = np.concatenate([batch.labels, batch.labels])
        margin = T.scalar_mul(margin_loss(all_logits, all_labels, centers), lam)
        total = T.add(total, margin)
        components["margin"] = float(margin.data)
    components["total"] = float(total.data)
    return total, components
