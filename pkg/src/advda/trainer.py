"""Training regimes and parameter optimization.

Regimes: nt (clean cross-entropy only), sat/eat (adversarial training on the
predicted-label fgsm variant, eat drawing the source model per minibatch
uniformly from {current, static-A, static-B}), atda (sat plus λ-weighted
logit alignment), the ablations sat-uda / sat-sda, and pat / patda
(noisy-pgd adversaries, k=10, α=ε/4).

Each minibatch runs, in order: craft adversaries from the CURRENT model,
one forward pass over clean∪adversarial rows, running center update from
those logits, then the regime loss and one Adam step. The center update at
step t therefore uses step t's logits, and step t's loss sees the
post-update centers.

RNG discipline: independent named streams are derived from the experiment
seed for batching, attack randomness, dropout masks, and the eat source
choice, so regimes that do not consume a stream leave the others untouched
(a λ=0 domain-adaptation run is bit-identical to plain sat).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from advda import tensor as T
from advda.attacks import AttackSpec, fgsm_variant, pgd
from advda.data import Dataset, epoch_batches
from advda.losses import CenterSet, DomainBatch, atda_total_loss, update_centers
from advda.models import Model, build_model, preset, save_checkpoint
from advda.tensor import Tensor

REGIME_KINDS = ("nt", "sat", "eat", "atda", "sat-uda", "sat-sda", "pat", "patda")

LOG_COLUMNS = ("step", "L_C_clean", "L_C_adv", "coral", "mmd", "margin", "total")


@dataclass(frozen=True)
class Regime:
    """What a training regime uses: its adversary and its loss terms."""

    kind: str

    def __post_init__(self):
        if self.kind not in REGIME_KINDS:
            raise ValueError(f"unknown regime {self.kind!r}; choose from {REGIME_KINDS}")

    @property
    def uses_attack(self) -> bool:
        return self.kind != "nt"

    @property
    def attack_kind(self) -> str | None:
        if self.kind in ("sat", "eat", "atda", "sat-uda", "sat-sda"):
            return "fgsm-variant"
        if self.kind in ("pat", "patda"):
            return "noisy-pgd"
        return None

    @property
    def include_uda(self) -> bool:
        return self.kind in ("atda", "patda", "sat-uda")

    @property
    def include_sda(self) -> bool:
        return self.kind in ("atda", "patda", "sat-sda")

    @property
    def uses_da(self) -> bool:
        return self.include_uda or self.include_sda

    @property
    def needs_static_models(self) -> bool:
        return self.kind == "eat"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = components
        super().__init__(f"non-finite loss at step {step}: {components}")


class Adam:
    """Standard bias-corrected Adam over a named parameter registry."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for key, p in self.params.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[key] / b1c
            vhat = self.v[key] / b2c
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam) -> Adam:
    """Functional wrapper over ``Adam.step`` for one update."""
    state.step(grads)
    return state


def stream_seed(seed: int, tag: str) -> int:
    """A stable per-purpose child seed; tags keep the streams disjoint."""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])


@dataclass
class RngStreams:
    seed: int
    attack: np.random.Generator = field(init=False)
    dropout: np.random.Generator = field(init=False)
    eat: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.attack = np.random.default_rng(stream_seed(self.seed, "attack"))
        self.dropout = np.random.default_rng(stream_seed(self.seed, "dropout"))
        self.eat = np.random.default_rng(stream_seed(self.seed, "eat"))

    @property
    def data_seed(self) -> int:
        return stream_seed(self.seed, "data")


def choose_eat_source(current: Model, static_models: tuple[Model, Model],
                      rng: np.random.Generator) -> Model:
    """Uniform per-minibatch choice among the current and two static models."""
    return (current, static_models[0], static_models[1])[int(rng.integers(3))]


def make_training_adversaries(
    regime: Regime,
    model: Model,
    static_models: tuple[Model, Model] | None,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    rngs: RngStreams,
    attack_overrides: dict | None = None,
) -> np.ndarray:
    """Craft this minibatch's adversarial examples from the current model
    state (or, for eat, from a uniformly chosen source model)."""
    if not regime.uses_attack:
        raise ValueError(f"regime {regime.kind!r} uses no adversarial examples")
    overrides = (attack_overrides or {}).get(regime.attack_kind, {})
    if regime.attack_kind == "fgsm-variant":
        source = model
        if regime.kind == "eat":
            if static_models is None or len(static_models) != 2:
                raise ValueError("eat needs exactly two static pre-trained models")
            source = choose_eat_source(model, static_models, rngs.eat)
        return fgsm_variant(source, x, epsilon)
    spec = AttackSpec.with_defaults("noisy-pgd", epsilon, **overrides)
    return pgd(model, x, y, spec, rng=rngs.attack)


@dataclass
class TrainResult:
    model: Model
    centers: CenterSet
    log_rows: list[dict]
    epochs_run: int
    stopped_early: bool = False
    val_accuracy: list[float] = field(default_factory=list)


def _clean_accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
                    batch_size: int = 512) -> float:
    correct = 0
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            z = model.apply(images[i : i + batch_size], mode="eval").data
            correct += int((z.argmax(axis=1) == labels[i : i + batch_size]).sum())
    return correct / len(images)


def train(
    *,
    regime: Regime | str,
    arch,
    train_data: Dataset,
    epochs: int,
    batch_size: int,
    seed: int,
    epsilon: float,
    lam: float = 1.0 / 3.0,
    center_rate: float = 0.1,
    center_init: str = "zeros",
    coral_ddof: int = 1,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    adam_eps: float = 1e-8,
    static_models: tuple[Model, Model] | None = None,
    attack_overrides: dict | None = None,
    sat_loss_blend: float | None = None,
    early_stop_patience: int = 0,
    early_stop_val_fraction: float = 0.1,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
) -> TrainResult:
    """Run one experiment; deterministic given every argument.

    ``arch`` is a preset name or an ArchSpec. Images must already be
    normalized to [0, 1]. Raises TrainingDiverged if the loss goes
    non-finite.
    """
    regime = Regime(regime) if isinstance(regime, str) else regime
    if regime.needs_static_models and (static_models is None or len(static_models) != 2):
        raise ValueError("eat needs exactly two static pre-trained models")
    if isinstance(arch, str):
        arch = preset(arch, k=train_data.num_classes, input_shape=train_data.image_shape)
    if arch.input_shape != tuple(train_data.image_shape):
        raise ValueError(f"architecture expects input {arch.input_shape}, "
                         f"dataset provides {train_data.image_shape}")
    if arch.num_classes != train_data.num_classes:
        raise ValueError(f"architecture has {arch.num_classes} classes, "
                         f"dataset has {train_data.num_classes}")
    model = build_model(arch, seed=seed)
    rngs = RngStreams(seed)
    k = train_data.num_classes
    if center_init == "zeros":
        centers = CenterSet.zeros(k, rate=center_rate)
    elif center_init == "normal":
        centers = CenterSet.random(k, center_rate,
                                   np.random.default_rng(stream_seed(seed, "centers")))
    else:
        raise ValueError(f"center_init must be 'zeros' or 'normal', got {center_init!r}")
    adam = Adam(model.params, lr=lr, beta1=beta1, beta2=beta2, eps=adam_eps)

    images, labels = train_data.images, train_data.labels
    val_images = val_labels = None
    if early_stop_patience > 0:
        order = np.arange(len(images))
        np.random.default_rng(stream_seed(seed, "val-split")).shuffle(order)
        n_val = max(1, int(round(early_stop_val_fraction * len(images))))
        val_idx, train_idx = order[:n_val], order[n_val:]
        val_images, val_labels = images[val_idx], labels[val_idx]
        images, labels = images[train_idx], labels[train_idx]

    # gate the center machinery on the margin term actually being in the loss
    sda_active = regime.include_sda and lam > 0

    log_rows: list[dict] = []
    val_history: list[float] = []
    best_val = -1.0
    stale = 0
    step = 0
    epochs_run = 0
    stopped_early = False
    for epoch in range(epochs):
        for idx in epoch_batches(len(images), batch_size, seed=rngs.data_seed,
                                 epoch=epoch, shuffle=True, drop_last=True):
            x, y = images[idx], labels[idx]
            step += 1
            if regime.uses_attack:
                x_adv = make_training_adversaries(
                    regime, model, static_models, x, y, epsilon, rngs, attack_overrides)
                both = np.concatenate([x, x_adv])
                logits_all = model.apply(both, mode="train", rng=rngs.dropout)
                m = len(x)
                batch = DomainBatch(
                    clean_logits=T.rows(logits_all, 0, m),
                    adv_logits=T.rows(logits_all, m, 2 * m),
                    labels=y,
                )
                if sda_active:
                    centers = update_centers(centers, logits_all.data,
                                             np.concatenate([y, y]))
                loss, comps = atda_total_loss(
                    batch, centers, lam if regime.uses_da else 0.0,
                    include_uda=regime.include_uda, include_sda=regime.include_sda,
                    coral_ddof=coral_ddof, blend=sat_loss_blend)
            else:
                logits = model.apply(x, mode="train", rng=rngs.dropout)
                ce = T.tmean(T.softmax_cross_entropy(logits, y))
                loss = ce
                comps = {"ce_clean": float(ce.data), "ce_adv": 0.0, "coral": 0.0,
                         "mmd": 0.0, "margin": 0.0, "total": float(ce.data)}
            row = {
                "step": step,
                "L_C_clean": comps["ce_clean"],
                "L_C_adv": comps["ce_adv"],
                "coral": comps["coral"],
                "mmd": comps["mmd"],
                "margin": comps["margin"],
                "total": comps["total"],
            }
            if not np.isfinite(comps["total"]):
                raise TrainingDiverged(step, row)
            log_rows.append(row)
            for p in model.params.values():
                p.zero_grad()
            grads = T.gradients(loss, model.params)
            adam.step(grads)
        epochs_run = epoch + 1
        if checkpoint_dir is not None and checkpoint_every > 0 and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(model, f"{checkpoint_dir}/checkpoint_epoch{epoch + 1:03d}.advda")
        if early_stop_patience > 0:
            acc = _clean_accuracy(model, val_images, val_labels)
            val_history.append(acc)
            if acc > best_val:
                best_val = acc
                stale = 0
            else:
                stale += 1
                if stale >= early_stop_patience:
                    stopped_early = True
                    break
    return TrainResult(model=model, centers=centers, log_rows=log_rows,
                       epochs_run=epochs_run, stopped_early=stopped_early,
                       val_accuracy=val_history)


def write_training_log(rows: list[dict], path) -> None:
    """CSV with full-precision floats so identical runs produce identical bytes."""
    with open(path, "w") as f:
        f.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(
                str(row["step"]) if col == "step" else repr(float(row[col]))
                for col in LOG_COLUMNS) + "\n")


def pretrain_static_models(
    train_data: Dataset,
    seeds: tuple[int, int],
    out_dir,
    arch_names: tuple[str, str] = ("fmnist-pretrained-a", "fmnist-pretrained-b"),
    epochs: int = 20,
    batch_size: int = 64,
    lr: float = 0.001,
) -> tuple[str, str]:
    """Normal-train the two static source models and save their checkpoints."""
    paths = []
    for arch_name, seed in zip(arch_names, seeds):
        result = train(regime="nt", arch=arch_name, train_data=train_data,
                       epochs=epochs, batch_size=batch_size, seed=seed,
                       epsilon=0.0, lr=lr)
        path = f"{out_dir}/static_{arch_name}_seed{seed}.advda"
        save_checkpoint(result.model, path, extra_meta={"regime": "nt"})
        paths.append(path)
    return tuple(paths)
