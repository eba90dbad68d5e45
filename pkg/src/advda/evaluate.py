"""Measurement suite: defense accuracy, loss smoothness, and logit geometry.

White-box numbers attack the defended model directly; black-box numbers
transfer adversaries crafted on a holdout model. Both use the true labels
(the predicted-label attack variant is a training-time device). Black-box
adversaries are a function of (holdout model, seed) only, so every defended
model is scored against identical transferred inputs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from advda import tensor as T
from advda.attacks import AttackSpec, _frozen_params, run_attack
from advda.data import Dataset
from advda.losses import mmd_distance
from advda.models import Model
from advda.tensor import NonFiniteError, Tensor

EVAL_ATTACK_KINDS = ("fgsm", "pgd", "rfgsm", "mim")


def clean_accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
                   batch_size: int = 512) -> tuple[int, int]:
    """(correct, total) under eval-mode argmax prediction."""
    correct = 0
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            z = model.apply(images[i : i + batch_size], mode="eval").data
            correct += int((z.argmax(axis=1) == labels[i : i + batch_size]).sum())
    return correct, len(images)


def model_logits(model: Model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.apply(images[i : i + batch_size], mode="eval").data)
    return np.concatenate(out, axis=0)


def craft_adversaries(
    source: Model,
    images: np.ndarray,
    labels: np.ndarray,
    kind: str,
    epsilon: float,
    seed: int,
    overrides: dict | None = None,
    batch_size: int = 512,
) -> np.ndarray:
    """Craft a full adversarial set batch by batch; the RNG for randomized
    attacks depends only on (seed, kind), never on the model being scored."""
    spec = AttackSpec.with_defaults(kind, epsilon, **{"seed": seed, **(overrides or {})})
    rng = np.random.default_rng([spec.seed, zlib.crc32(kind.encode())])
    out = []
    for i in range(0, len(images), batch_size):
        out.append(run_attack(source, images[i : i + batch_size],
                              labels[i : i + batch_size], spec, rng=rng))
    return np.concatenate(out, axis=0)


@dataclass
class AccuracyReport:
    clean: float
    white: dict[str, float]
    black: dict[str, float]
    n: int
    counts: dict[str, int]
    epsilon: float
    config_fingerprint: str = ""
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "clean": self.clean,
            "white_box": self.white,
            "black_box": self.black,
            "n": self.n,
            "counts": self.counts,
            "epsilon": self.epsilon,
            "config_fingerprint": self.config_fingerprint,
            "warnings": self.warnings,
        }

    @staticmethod
    def csv_header() -> str:
        cols = ["defense", "clean"]
        cols += [f"{k}_white" for k in EVAL_ATTACK_KINDS]
        cols += [f"{k}_black" for k in EVAL_ATTACK_KINDS]
        return ",".join(cols)

    def csv_row(self, defense: str) -> str:
        # percentages to one decimal, mirroring the published table layout
        cells = [defense, f"{100.0 * self.clean:.1f}"]
        cells += [f"{100.0 * self.white[k]:.1f}" for k in EVAL_ATTACK_KINDS]
        cells += [f"{100.0 * self.black[k]:.1f}" for k in EVAL_ATTACK_KINDS]
        return ",".join(cells)


def defense_accuracy(
    defended: Model,
    holdout: Model,
    test_data: Dataset,
    epsilon: float,
    seed: int = 0,
    attack_overrides: dict | None = None,
    batch_size: int = 512,
    config_fingerprint: str = "",
    trained_epsilon: float | None = None,
) -> AccuracyReport:
    """Clean plus per-attack white-box and black-box accuracy of ``defended``."""
    overrides = attack_overrides or {}
    warnings: list[str] = []
    if trained_epsilon is not None and trained_epsilon != epsilon:
        warnings.append(
            f"evaluation epsilon {epsilon} differs from training epsilon {trained_epsilon}"
        )
    images, labels = test_data.images, test_data.labels
    correct, n = clean_accuracy(defended, images, labels, batch_size)
    counts = {"clean": correct}
    white, black = {}, {}
    for kind in EVAL_ATTACK_KINDS:
        adv_w = craft_adversaries(defended, images, labels, kind, epsilon, seed,
                                  overrides.get(kind), batch_size)
        cw, _ = clean_accuracy(defended, adv_w, labels, batch_size)
        white[kind] = cw / n
        counts[f"{kind}_white"] = cw
        adv_b = craft_adversaries(holdout, images, labels, kind, epsilon, seed,
                                  overrides.get(kind), batch_size)
        cb, _ = clean_accuracy(defended, adv_b, labels, batch_size)
        black[kind] = cb / n
        counts[f"{kind}_black"] = cb
    return AccuracyReport(clean=correct / n, white=white, black=black, n=n,
                          counts=counts, epsilon=epsilon,
                          config_fingerprint=config_fingerprint, warnings=warnings)


def local_loss_sensitivity(model: Model, test_data: Dataset, batch_size: int = 512) -> float:
    """Mean L2 norm of the per-example input gradient of the cross-entropy,
    over the clean test set, in eval mode."""
    images, labels = test_data.images, test_data.labels
    if len(images) == 0:
        raise ValueError("local loss sensitivity needs a nonempty test set")
    total = 0.0
    for i in range(0, len(images), batch_size):
        x = Tensor(images[i : i + batch_size], requires_grad=True)
        with _frozen_params(model):
            ce = T.softmax_cross_entropy(model.apply(x, mode="eval"),
                                         labels[i : i + batch_size])
            T.backward(T.tsum(ce))  # rows of x.grad are the per-example gradients
        g = x.grad.reshape(len(x.data), -1)
        finite = np.isfinite(g).all(axis=1)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0]) + i
            raise NonFiniteError(f"non-finite input gradient at example index {bad}")
        total += float(np.sqrt((g * g).sum(axis=1)).sum())
    return total / len(images)


def mmd_distance_report(
    model: Model,
    test_data: Dataset,
    epsilon: float,
    seed: int = 0,
    attack_overrides: dict | None = None,
    batch_size: int = 512,
) -> dict[str, float]:
    """Mean-alignment distance between clean-test logits and white-box
    fgsm / pgd adversarial-test logits."""
    overrides = attack_overrides or {}
    images, labels = test_data.images, test_data.labels
    phi_clean = model_logits(model, images, batch_size)
    report = {}
    for kind in ("fgsm", "pgd"):
        adv = craft_adversaries(model, images, labels, kind, epsilon, seed,
                                overrides.get(kind), batch_size)
        report[kind] = mmd_distance(phi_clean, model_logits(model, adv, batch_size))
    return report


def export_logits(
    model: Model,
    named_sets: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]],
    out_dir,
    batch_size: int = 512,
) -> dict[str, str]:
    """One CSV per named set (columns id,label,logit_0..logit_{k-1}).

    ``named_sets`` maps a name to (images, labels, ids); adversarial sets
    should reuse the ids of the clean examples they perturb so rows pair up.
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = model.num_classes
    header = "id,label," + ",".join(f"logit_{j}" for j in range(k))
    paths = {}
    for name, (images, labels, ids) in named_sets.items():
        z = model_logits(model, images, batch_size)
        path = out_dir / f"logits_{name}.csv"
        with open(path, "w") as f:
            f.write(header + "\n")
            for i in range(len(images)):
                vals = ",".join(repr(float(v)) for v in z[i])
                f.write(f"{int(ids[i])},{int(labels[i])},{vals}\n")
        paths[name] = str(path)
    return paths
