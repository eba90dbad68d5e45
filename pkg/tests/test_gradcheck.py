import numpy as np

from advda import tensor as T
from advda.gradcheck import DEFAULT_CHECKS, run_suite
from advda.tensor import accumulate_grad, custom_op


def test_full_suite_passes():
    reports = run_suite(trials=5, seed=3)
    bad = [(r.name, r.max_rel_err) for r in reports if not r.passed]
    assert not bad, f"gradient check failures: {bad}"


def test_suite_covers_every_op_kind():
    names = set(DEFAULT_CHECKS)
    for required in ("affine", "conv2d-s1-valid", "conv2d-s2-same", "maxpool2d",
                     "global-average-pool", "relu", "elu", "dropout",
                     "softmax-cross-entropy", "add", "sub", "mul", "scalar-mul",
                     "l1-norm", "l2-norm", "mean", "transpose-multiply",
                     "loss-covariance-alignment", "loss-mean-alignment",
                     "loss-margin", "loss-total-objective"):
        assert required in names


def test_injected_wrong_backward_is_reported_by_name():
    def broken_relu(t):
        mask = t.data > 0
        # wrong rule on purpose: gradient 2x too large
        return custom_op(np.where(mask, t.data, 0.0), (t,),
                         lambda g: accumulate_grad(t, 2.0 * g * mask))

    def case(rng):
        x0 = rng.uniform(0.5, 1.5, size=(3, 3))
        return (lambda xt: T.tsum(broken_relu(xt))), x0

    reports = run_suite(checks={"broken-relu": case}, trials=3)
    assert len(reports) == 1
    assert reports[0].name == "broken-relu"
    assert not reports[0].passed


def test_reports_carry_max_relative_error():
    reports = run_suite(checks={"relu": DEFAULT_CHECKS["relu"]}, trials=3)
    assert reports[0].max_rel_err >= 0.0
    assert reports[0].tol == 1e-4


def test_suite_is_deterministic():
    a = run_suite(checks={"mul": DEFAULT_CHECKS["mul"]}, trials=4, seed=9)
    b = run_suite(checks={"mul": DEFAULT_CHECKS["mul"]}, trials=4, seed=9)
    assert a[0].max_rel_err == b[0].max_rel_err
