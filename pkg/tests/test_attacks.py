import logging

import numpy as np
import pytest

from advda import tensor as T
from advda.attacks import (CALL_COUNTS, AttackSpec, fgsm, fgsm_variant, mim, pgd,
                           rfgsm, run_attack, verify_linf_ball)
from advda.gradcheck import finite_diff_grad
from advda.models import ArchSpec, build_model, fc, predict
from advda.tensor import Tensor
from tests.conftest import small_batch


def _contained(x, adv, eps):
    verify_linf_ball(x, adv, eps)


def test_fgsm_zero_epsilon_is_identity(small_model, rng):
    x, y = small_batch(rng)
    adv = fgsm(small_model, x, y, 0.0)
    assert np.array_equal(adv, x)


def test_fgsm_steps_lie_on_sign_lattice(small_model, rng):
    x, y = small_batch(rng)
    eps = 0.07
    adv = fgsm(small_model, x, y, eps)
    delta = adv - x
    interior = (x > eps) & (x < 1.0 - eps)  # away from the [0,1] clip
    lattice = np.isclose(np.abs(delta), eps) | (delta == 0.0)
    assert lattice[interior].all()
    _contained(x, adv, eps)


def test_fgsm_linear_model_matches_oracle_sign(rng):
    arch = ArchSpec(layers=(fc(3),), input_shape=(1, 1, 4), num_classes=3)
    model = build_model(arch, seed=3)
    w = rng.normal(size=(4, 3))
    model.params["layer0/fc.w"].data = w
    model.params["layer0/fc.b"].data = np.zeros(3)
    x = rng.random((1, 1, 1, 4))
    y = np.array([1])

    def J(a):
        z = a.reshape(1, 4) @ w
        zx = z - z.max()
        return float(np.log(np.exp(zx).sum()) - zx[0, 1])

    fd = finite_diff_grad(J, x, h=1e-6)
    # closed form: grad = W (softmax - onehot); compare the sign field
    p = np.exp(x.reshape(4) @ w)
    p = p / p.sum()
    p[1] -= 1.0
    closed = (w @ p).reshape(1, 1, 1, 4)
    assert np.array_equal(np.sign(fd), np.sign(closed))
    eps = 0.05
    adv = fgsm(model, x, y, eps)
    assert np.allclose(adv, np.clip(x + eps * np.sign(closed), 0, 1), atol=1e-9)


def test_variant_equals_fgsm_when_prediction_correct(small_model, rng):
    x, _ = small_batch(rng, n=6)
    y_pred, _ = predict(small_model, x)
    assert np.array_equal(fgsm_variant(small_model, x, 0.08),
                          fgsm(small_model, x, y_pred, 0.08))


def test_variant_zero_epsilon(small_model, rng):
    x, _ = small_batch(rng)
    assert np.array_equal(fgsm_variant(small_model, x, 0.0), x)


def test_variant_ball_containment_many_trials(small_model):
    rng = np.random.default_rng(77)
    for _ in range(100):
        x, _ = small_batch(rng, n=2)
        eps = float(rng.uniform(0.0, 0.3))
        adv = fgsm_variant(small_model, x, eps)
        _contained(x, adv, eps)


def test_pgd_single_step_collapses_to_fgsm(small_model, rng):
    x, y = small_batch(rng)
    eps = 0.1
    spec = AttackSpec(kind="pgd", epsilon=eps, steps=1, alpha=eps)
    assert np.array_equal(pgd(small_model, x, y, spec), fgsm(small_model, x, y, eps))


def test_pgd_containment_all_iteration_counts(small_model, rng):
    x, y = small_batch(rng)
    for steps in (1, 3, 20):
        spec = AttackSpec.with_defaults("pgd", 0.1, steps=steps)
        adv = pgd(small_model, x, y, spec)
        _contained(x, adv, 0.1)


def test_noisy_pgd_random_start_within_ball(small_model, rng):
    x, y = small_batch(rng)
    spec = AttackSpec.with_defaults("noisy-pgd", 0.1, seed=5)
    adv = pgd(small_model, x, y, spec, rng=np.random.default_rng(5))
    _contained(x, adv, 0.1)
    # same seed reproduces, different seed differs
    a = pgd(small_model, x, y, spec, rng=np.random.default_rng(8))
    b = pgd(small_model, x, y, spec, rng=np.random.default_rng(8))
    c = pgd(small_model, x, y, spec, rng=np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_pgd_dominates_fgsm_loss(small_model):
    # the iterated attack should find at least as much loss as one step
    rng = np.random.default_rng(123)
    wins = 0
    trials = 100
    for _ in range(trials):
        x, y = small_batch(rng, n=2)
        adv_f = fgsm(small_model, x, y, 0.1)
        adv_p = pgd(small_model, x, y, AttackSpec.with_defaults("pgd", 0.1))

        def loss(a):
            with T.no_grad():
                z = small_model.apply(a)
            ce = T.softmax_cross_entropy(Tensor(z.data), y)
            return float(ce.data.sum())

        wins += loss(adv_p) >= loss(adv_f) - 1e-12
    assert wins >= 90


def test_rfgsm_zero_alpha_collapses_to_fgsm(small_model, rng):
    x, y = small_batch(rng)
    out = rfgsm(small_model, x, y, 0.1, alpha=0.0, rng=np.random.default_rng(3))
    assert np.array_equal(out, fgsm(small_model, x, y, 0.1))


def test_rfgsm_containment_and_seed_contract(small_model, rng):
    x, y = small_batch(rng)
    a = rfgsm(small_model, x, y, 0.12, rng=np.random.default_rng(4))
    b = rfgsm(small_model, x, y, 0.12, rng=np.random.default_rng(4))
    c = rfgsm(small_model, x, y, 0.12, rng=np.random.default_rng(5))
    _contained(x, a, 0.12)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rfgsm_rejects_alpha_above_epsilon(small_model, rng):
    x, y = small_batch(rng)
    with pytest.raises(ValueError, match="alpha"):
        rfgsm(small_model, x, y, 0.1, alpha=0.2)


def test_mim_single_step_collapses_to_fgsm(small_model, rng):
    x, y = small_batch(rng)
    eps = 0.1
    spec = AttackSpec(kind="mim", epsilon=eps, steps=1, alpha=eps, mu=0.0)
    assert np.array_equal(mim(small_model, x, y, spec), fgsm(small_model, x, y, eps))


def test_mim_containment(small_model, rng):
    x, y = small_batch(rng)
    spec = AttackSpec.with_defaults("mim", 0.1)
    _contained(x, mim(small_model, x, y, spec), 0.1)


def test_mim_momentum_accumulates_unit_l1_gradients(rng):
    # linear logits: the normalized gradient is identical every step, so with
    # mu=1 the momentum's per-example L1 norm is exactly 2 after two steps
    arch = ArchSpec(layers=(fc(3),), input_shape=(1, 1, 4), num_classes=3)
    model = build_model(arch, seed=3)
    x = rng.random((2, 1, 1, 4)) * 0.2 + 0.4
    y = np.array([0, 1])
    trace = []
    spec = AttackSpec(kind="mim", epsilon=1e-6, steps=2, alpha=1e-7, mu=1.0)
    mim(model, x, y, spec, _trace=trace)
    norms = np.abs(trace[1]).reshape(2, -1).sum(axis=1)
    assert np.allclose(norms, 2.0, atol=1e-6)


def test_mim_zero_gradient_warns_and_continues(caplog, rng):
    arch = ArchSpec(layers=(fc(2),), input_shape=(1, 1, 3), num_classes=2)
    model = build_model(arch, seed=0)
    model.params["layer0/fc.w"].data = np.zeros((3, 2))
    model.params["layer0/fc.b"].data = np.zeros(2)
    x = rng.random((2, 1, 1, 3))
    y = np.array([0, 1])
    spec = AttackSpec(kind="mim", epsilon=0.1, steps=2, alpha=0.05)
    with caplog.at_level(logging.WARNING, logger="advda.attacks"):
        adv = mim(model, x, y, spec)
    assert "zero gradient" in caplog.text
    assert np.array_equal(adv, x)  # momentum stays zero, sign(0) = 0


def test_attacks_leave_param_gradients_untouched(small_model, rng):
    # crafting must not deposit its internal gradients on the model: a later
    # training backward would silently accumulate on top of them
    x, y = small_batch(rng)
    for p in small_model.params.values():
        p.zero_grad()
    fgsm(small_model, x, y, 0.1)
    fgsm_variant(small_model, x, 0.1)
    pgd(small_model, x, y, AttackSpec.with_defaults("pgd", 0.1, steps=3))
    mim(small_model, x, y, AttackSpec.with_defaults("mim", 0.1, steps=2))
    rfgsm(small_model, x, y, 0.1, rng=np.random.default_rng(0))
    assert all(p.grad is None for p in small_model.params.values())
    assert all(p.requires_grad for p in small_model.params.values())


def test_sat_training_actually_learns(blob_train):
    # regression: adversarial-regime updates must not be contaminated by the
    # attack's crafting gradients (that collapses the model to one class)
    from advda.evaluate import clean_accuracy
    from advda.trainer import train

    result = train(regime="sat", arch="small", train_data=blob_train, epochs=30,
                   batch_size=32, seed=1, epsilon=0.1)
    correct, n = clean_accuracy(result.model, blob_train.images, blob_train.labels)
    assert correct / n > 0.9


def test_attacks_do_not_mutate_inputs(small_model, rng):
    x, y = small_batch(rng)
    x_copy = x.copy()
    params = {k: v.data.copy() for k, v in small_model.params.items()}
    fgsm(small_model, x, y, 0.1)
    pgd(small_model, x, y, AttackSpec.with_defaults("pgd", 0.1))
    rfgsm(small_model, x, y, 0.1, rng=np.random.default_rng(0))
    mim(small_model, x, y, AttackSpec.with_defaults("mim", 0.1))
    fgsm_variant(small_model, x, 0.1)
    assert np.array_equal(x, x_copy)
    for k in params:
        assert np.array_equal(small_model.params[k].data, params[k])


def test_attack_gradients_taken_in_eval_mode(rng):
    # a dropout layer must not fire during attack crafting: repeated calls
    # with no RNG provided are deterministic
    from advda.models import build_model, preset

    model = build_model(preset("fmnist-pretrained-b", k=3, input_shape=(1, 12, 12)), seed=2)
    x = rng.random((2, 1, 12, 12))
    y = np.array([0, 1])
    assert np.array_equal(fgsm(model, x, y, 0.05), fgsm(model, x, y, 0.05))


def test_attack_spec_defaults_match_standard_settings():
    pgd_spec = AttackSpec.with_defaults("pgd", 0.2)
    assert (pgd_spec.steps, pgd_spec.alpha) == (20, 0.2 / 10)
    npgd = AttackSpec.with_defaults("noisy-pgd", 0.2)
    assert (npgd.steps, npgd.alpha) == (10, 0.2 / 4)
    r = AttackSpec.with_defaults("rfgsm", 0.2)
    assert r.alpha == 0.1
    m = AttackSpec.with_defaults("mim", 0.2)
    assert (m.steps, m.alpha, m.mu) == (10, 0.2 / 5, 1.0)


def test_attack_spec_validation():
    with pytest.raises(ValueError, match="kind"):
        AttackSpec(kind="cw", epsilon=0.1)
    with pytest.raises(ValueError, match="epsilon"):
        AttackSpec(kind="fgsm", epsilon=1.5)
    with pytest.raises(ValueError, match="steps"):
        AttackSpec(kind="pgd", epsilon=0.1, steps=0)


def test_run_attack_dispatch_and_counters(small_model, rng):
    x, y = small_batch(rng)
    before = dict(CALL_COUNTS)
    run_attack(small_model, x, y, AttackSpec.with_defaults("fgsm", 0.05))
    run_attack(small_model, x, None, AttackSpec.with_defaults("fgsm-variant", 0.05))
    run_attack(small_model, x, y, AttackSpec.with_defaults("rfgsm", 0.05),
               rng=np.random.default_rng(0))
    assert CALL_COUNTS["fgsm"] == before.get("fgsm", 0) + 1
    assert CALL_COUNTS["fgsm-variant"] == before.get("fgsm-variant", 0) + 1
    assert CALL_COUNTS["rfgsm"] == before.get("rfgsm", 0) + 1
