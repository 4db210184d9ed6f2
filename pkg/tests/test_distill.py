import math
from collections import OrderedDict

import numpy as np
import pytest

from featdistill import distill as D
from featdistill.nn import RESIDUAL, ConfigurationError, ModelSpec, build_model, build_regressor
from featdistill.tensor import (
    DimensionError,
    Tensor,
    backward,
    grad_check,
    kl_divergence_softened,
    mul,
    record,
    softmax_cross_entropy,
    tsum,
)

from oracles import boundary_pairs, brute_partial_l2, mp_margin


# ---------------------------------------------------------------------------
# closed-form margin


def test_standard_normal_margin_is_half_normal_mean():
    assert abs(D.margin_closed_form(0.0, 1.0) - (-math.sqrt(2 / math.pi))) < 1e-12
    assert abs(D.margin_closed_form(0.0, 1.0) - (-0.7978845608)) < 1e-9


@pytest.mark.parametrize("mu", [-5.0, -2.0, -0.3, 0.0, 0.7, 2.0, 4.5, 7.9])
@pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0])
def test_closed_form_matches_high_precision(mu, sigma):
    assert D.margin_closed_form(mu, sigma) == pytest.approx(mp_margin(mu, sigma), rel=1e-11)


@pytest.mark.parametrize("t", [8.0, 8.5, 10.0, 15.0, 25.0, 40.0])
def test_tail_branch_matches_high_precision(t):
    got = D.margin_closed_form(t, 1.0)
    assert got == pytest.approx(mp_margin(t, 1.0), rel=1e-13)
    assert -1.0 / t < got < 0


def test_branch_is_continuous_at_threshold():
    t = D.ASYMPTOTIC_THRESHOLD
    # adjacent doubles, so any gap is the branches disagreeing rather than the slope
    lo, hi = D.margin_closed_form(t, 1.0), D.margin_closed_form(np.nextafter(t, np.inf), 1.0)
    assert abs(lo - hi) < 1e-12 * abs(lo)


def test_scale_equivariance():
    assert D.margin_closed_form(0.0, 2.0) / D.margin_closed_form(0.0, 1.0) == 2.0
    assert D.margin_closed_form(2.0, 4.0) == pytest.approx(2 * D.margin_closed_form(1.0, 2.0), rel=1e-14)


def test_margin_is_negative_and_below_mean_for_negative_mu():
    for mu in np.linspace(-6, 30, 50):
        m = D.margin_closed_form(float(mu), 1.3)
        assert m < 0
        assert m <= min(mu, 0)


@pytest.mark.parametrize("sigma", [0.0, -1.0, float("nan"), float("inf")])
def test_bad_sigma_rejected(sigma):
    with pytest.raises(D.ParameterError):
        D.margin_closed_form(0.0, sigma)


def test_params_object_accepted():
    p = D.TruncatedGaussianParams(1.0, 2.0)
    assert D.margin_closed_form(p) == D.margin_closed_form(1.0, 2.0)


# ---------------------------------------------------------------------------
# margin specs and estimation


def test_margin_spec_text_round_trip(tmp_path):
    spec = D.MarginSpec(OrderedDict(a=[-0.1, -1 / 3], b=[0.0, -2.5, -1e-300]), D.CLOSED_FORM)
    path = tmp_path / "m.txt"
    spec.save(path)
    back = D.MarginSpec.load(path)
    assert back.source == D.CLOSED_FORM
    for k in spec.margins:
        assert back[k].tobytes() == spec[k].tobytes()
    assert path.read_text().splitlines()[2] == "a\t0\t-0.1"


def test_margin_spec_rejects_positive_and_non_finite():
    with pytest.raises(D.ParameterError):
        D.MarginSpec(OrderedDict(a=[0.5]))
    with pytest.raises(D.ParameterError):
        D.MarginSpec(OrderedDict(a=[float("nan")]))


def test_accumulator_averages_negatives_per_channel():
    acc = D.MarginAccumulator()
    x1 = np.array([-1.0, 2.0, -3.0, 0.0]).reshape(1, 1, 2, 2)
    x2 = np.array([-2.0, 5.0]).reshape(1, 1, 1, 2)
    acc.update({"t": x1})
    acc.update({"t": x2})
    np.testing.assert_array_equal(acc.result()["t"], [-2.0])


def test_accumulator_warns_on_channel_without_negatives():
    acc = D.MarginAccumulator()
    acc.update({"t": np.stack([np.ones((2, 2)), -np.ones((2, 2))])[None]})
    with pytest.warns(D.MarginWarning):
        res = acc.result()
    np.testing.assert_array_equal(res["t"], [0.0, -1.0])


def test_margins_from_bn_uses_beta_and_abs_gamma():
    model = build_model(ModelSpec(groups=(2, 3), input_shape=(1, 6, 6)), 0)
    bn = model.groups[0][0].bn1
    bn.gamma.data[...] = [2.0, -0.5]
    bn.beta.data[...] = [0.3, -1.0]
    spec = D.margins_from_bn(model)
    assert spec.source == D.CLOSED_FORM
    np.testing.assert_array_equal(
        spec["group0"], [D.margin_closed_form(0.3, 2.0), D.margin_closed_form(-1.0, 0.5)]
    )
    with pytest.raises(ConfigurationError):
        D.margins_from_bn(build_model(ModelSpec(groups=(2,), input_shape=(1, 6, 6), block_kind=RESIDUAL), 0))


def test_margin_empirical_leaves_teacher_untouched():
    model = build_model(ModelSpec(groups=(2, 3), input_shape=(1, 6, 6)), 0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    x = Tensor(np.random.default_rng(0).normal(size=(8, 1, 6, 6)))
    spec = D.margin_empirical(model, [x, (x, None)])
    assert list(spec.margins) == ["group0", "group1"]
    assert all(np.all(m < 0) for m in spec.margins.values())
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    with pytest.raises(ValueError):
        D.margin_empirical(model, [])


# ---------------------------------------------------------------------------
# transforms and distances


def test_margin_relu_is_constant_target():
    f = Tensor(np.array([-3.0, -0.1, 0.5]).reshape(1, 3, 1, 1), requires_grad=True)
    out = D.margin_relu(f, [-1.0, -1.0, -1.0])
    np.testing.assert_array_equal(out.data.ravel(), [-1.0, -0.1, 0.5])
    assert not out.requires_grad


def test_partial_l2_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for i in range(1000):
        t, s = boundary_pairs(rng, (1 + i % 2, 2, 2, 3))
        assert D.partial_l2(t, Tensor(s)).item() == brute_partial_l2(t, s)


def test_partial_l2_dead_zone_gradient():
    t = np.array([-1.0, -1.0, -1.0, 0.0, 0.0, 1.0, 2.0]).reshape(1, 7, 1, 1)
    s = np.array([-2.0, -1.0, -0.5, -1.0, 0.5, 3.0, -1.0]).reshape(1, 7, 1, 1)
    x = Tensor(s, requires_grad=True)
    with record():
        g = backward(D.partial_l2(t, x))[x].ravel()
    dead = (s <= t) & (t <= 0)
    np.testing.assert_array_equal(g[dead.ravel()], 0.0)
    np.testing.assert_array_equal(g[~dead.ravel()], 2 * (s - t).ravel()[~dead.ravel()])


def test_partial_l2_gradient_matches_finite_differences_off_boundary():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(2, 3, 2, 2))
    s = rng.normal(size=(2, 3, 2, 2))
    assert np.abs(s - t).min() > 1e-3
    assert grad_check(lambda x: D.partial_l2(t, x), s).max_rel_error < 1e-6


def test_partial_l2_shape_mismatch():
    with pytest.raises(DimensionError):
        D.partial_l2(np.zeros((1, 2, 2, 2)), Tensor(np.zeros((1, 2, 2, 3))))


def test_default_layer_weights_halve_toward_shallow_taps():
    assert D.default_layer_weights(3) == [0.25, 0.5, 1.0]
    assert D.default_layer_weights(1) == [1.0]


def test_total_loss_arithmetic():
    assert D.total_loss(Tensor(1.0), Tensor(2.0), 1e-3).item() == pytest.approx(1.002, abs=1e-15)
    assert D.total_loss(Tensor(1.25), Tensor(7.0), 0.0).item() == 1.25
    with pytest.raises(ConfigurationError):
        D.total_loss(Tensor(1.0), Tensor(1.0), -1.0)


def test_total_loss_gradient_is_linear():
    w = Tensor(np.array([0.4, -0.2]), requires_grad=True)
    a, b = np.array([1.0, 2.0]), np.array([3.0, -1.0])

    def grads(fn):
        with record():
            return backward(fn())[w]

    task = lambda: tsum(mul(w, Tensor(a)))
    dist = lambda: tsum(mul(mul(w, w), Tensor(b)))
    total = grads(lambda: D.total_loss(task(), dist(), 0.25))
    np.testing.assert_allclose(total, grads(task) + 0.25 * grads(dist), rtol=1e-14)


def _toy_taps(seed):
    rng = np.random.default_rng(seed)
    teacher = OrderedDict(g0=Tensor(rng.normal(size=(4, 3, 4, 4))), g1=Tensor(rng.normal(size=(4, 5, 2, 2))))
    student = OrderedDict(
        g0=Tensor(rng.normal(size=(4, 2, 4, 4)), requires_grad=True),
        g1=Tensor(rng.normal(size=(4, 3, 2, 2)), requires_grad=True),
    )
    regs = OrderedDict(g0=build_regressor(2, 3, 1), g1=build_regressor(3, 5, 2))
    margins = D.MarginSpec(OrderedDict(g0=-rng.uniform(0.2, 1, 3), g1=-rng.uniform(0.2, 1, 5)))
    return teacher, student, regs, margins


def test_proposed_loss_is_weighted_sum_of_per_tap_terms():
    teacher, student, regs, margins = _toy_taps(0)
    total = D.proposed_distill_loss(teacher, student, regs, margins).item()
    expect = 0.0
    for name, w in zip(teacher, [0.5, 1.0]):
        target = np.maximum(teacher[name].data, margins[name].reshape(1, -1, 1, 1))
        expect += w * brute_partial_l2(target, regs[name](student[name]).data)
    assert total == pytest.approx(expect, rel=1e-12)


def test_proposed_loss_gradient_reaches_student_and_regressor_only():
    teacher, student, regs, margins = _toy_taps(1)
    for t in teacher.values():
        t.requires_grad = True
    with record():
        g = backward(D.proposed_distill_loss(teacher, student, regs, margins))
    for t in teacher.values():
        assert t not in g
    for s in student.values():
        assert np.abs(g[s]).sum() > 0
    for r in regs.values():
        assert all(p in g for p in r.parameters())


def test_proposed_loss_errors():
    teacher, student, regs, margins = _toy_taps(2)
    with pytest.raises(ConfigurationError):
        D.proposed_distill_loss(teacher, student, OrderedDict(g0=regs["g0"]), margins)
    with pytest.raises(ConfigurationError):
        D.proposed_distill_loss(teacher, student, regs, D.MarginSpec(OrderedDict(g0=margins["g0"])))
    with pytest.raises(ConfigurationError):
        D.proposed_distill_loss(teacher, student, regs, margins, layer_weights=[1.0])


def test_fitnets_loss_is_plain_l2():
    teacher, student, regs, _ = _toy_taps(3)
    got = D.fitnets_l2_loss(teacher, student, regs, layer_weights=[1.0, 1.0]).item()
    expect = sum(((regs[n](student[n]).data - teacher[n].data) ** 2).sum() for n in teacher)
    assert got == pytest.approx(expect, rel=1e-12)


def test_kd_loss_combines_ce_and_scaled_kl():
    rng = np.random.default_rng(4)
    t, s, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
    expect = softmax_cross_entropy(Tensor(s), y).item() + 0.5 * 16 * kl_divergence_softened(t, Tensor(s), 4.0).item()
    assert D.kd_loss(t, Tensor(s), y, 4.0, 0.5).item() == pytest.approx(expect, rel=1e-13)


@pytest.mark.parametrize(
    "kw,field",
    [
        (dict(alpha=-1.0), "alpha"),
        (dict(temperature=0.0), "temperature"),
        (dict(method="at"), "method"),
        (dict(layer_weights=(1.0, 0.0)), "layer_weights"),
        (dict(teacher_bn_mode="frozen"), "teacher_bn_mode"),
        (dict(tap_position="middle"), "tap_position"),
        (dict(margin_source="guess"), "margin_source"),
    ],
)
def test_distill_config_validation_names_field(kw, field):
    with pytest.raises(ConfigurationError, match=f"^{field}:"):
        D.DistillConfig(**kw)
