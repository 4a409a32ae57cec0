from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refml import autodiff as ad
from refml.autodiff import GradMode
from refml.data import SyntheticConfig, generate_synthetic
from refml.evaluation import accuracy
from refml.fedproto import (
    GlobalState, HyperParams, adaptive_interpolate, aggregate, fedavg_local, fedprox_local,
    fine_tune, interpolate, meta_update_predictor, model_loss, ones_like, run_experiment,
    run_methods, run_round, setup_clients, update_encoder,
)
from refml.model import ArchitectureSpec, ParamSet, build

ARCH = ArchitectureSpec(input_length=64, num_classes=3, conv_units=((4, 3, 2), (4, 3, 2)),
                        hidden_dim=8)
DATA = generate_synthetic(SyntheticConfig(num_classes=3, windows_per_class=8, input_length=64,
                                          conditions=((1.0, 0.3, 1.0), (1.2, 0.4, 0.9),
                                                      (1.4, 0.5, 1.1))))
HP = HyperParams(rounds=2, encoder_steps=1, finetune_steps=2)


def scalar(name: str, v: float) -> ParamSet:
    return ParamSet({name: np.array([v])})


def half_square(name: str, c: float = 1.0, m: float = 0.0):
    def loss(p):
        d = ad.sub(p[name], ad.constant(np.array([m])))
        return ad.scale(ad.reduce_sum(ad.mul(d, d)), 0.5 * c)
    return loss


def _state(train_ids=(0, 1), test_ids=(2,), k=1, seed=0):
    init = build(ARCH, seed)
    clients = setup_clients([DATA[i] for i in train_ids], [DATA[i] for i in test_ids], init,
                            3, k, 2, seed)
    return GlobalState(0, init, clients, 3, k, 2, seed)


# ---------------------------------------------------------------- interpolation


def test_interpolate_extremes_bit_exact():
    g, loc = build(ARCH, 1), build(ARCH, 2)
    assert interpolate(ones_like(g), g, loc) == g
    assert interpolate(g.map(np.zeros_like), g, loc) == loc


def test_interpolate_scalar_blend():
    out = interpolate({"encoder.w": np.array([0.25])}, scalar("encoder.w", 2.0), scalar("encoder.w", 0.0))
    assert out["encoder.w"][0] == 0.5


def test_adaptive_interpolate_hand_oracle():
    # W' = 0.5*2 + 0.5*0 = 1, dL/dW' = 1, dW'/da = 2, a_new = 0.5 - 0.1*2 = 0.3
    w, a = adaptive_interpolate(scalar("encoder.w", 0.0), scalar("encoder.w", 0.5),
                                scalar("encoder.w", 2.0), half_square("encoder.w"), 0.1)
    assert a["encoder.w"][0] == pytest.approx(0.3, abs=1e-15)
    assert w["encoder.w"][0] == pytest.approx(0.6, abs=1e-15)


def test_adaptive_interpolate_shape_mismatch():
    with pytest.raises(ValueError):
        adaptive_interpolate(scalar("encoder.w", 0.0), scalar("encoder.v", 0.5),
                             scalar("encoder.w", 2.0), half_square("encoder.w"), 0.1)


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0, 1), g=st.floats(-5, 5), loc=st.floats(-5, 5), m=st.floats(-5, 5),
       delta=st.sampled_from([0.0, 1.0, 1e3, 1e6]))
def test_interp_weights_stay_in_unit_interval(a, g, loc, m, delta):
    _, new = adaptive_interpolate(scalar("encoder.w", loc), scalar("encoder.w", a),
                                  scalar("encoder.w", g), half_square("encoder.w", m=m), delta)
    assert 0.0 <= new["encoder.w"][0] <= 1.0


# ---------------------------------------------------------------- partitioned updates


def test_update_encoder_hand_oracle():
    p = ParamSet({"encoder.a": np.array([1.0]), "encoder.b": np.array([-2.0]),
                  "predictor.w": np.array([4.0])})

    def loss(n):  # L = a^2 + 3b + a*w
        return ad.add(ad.add(ad.reduce_sum(ad.mul(n["encoder.a"], n["encoder.a"])),
                             ad.scale(ad.reduce_sum(n["encoder.b"]), 3.0)),
                      ad.reduce_sum(ad.mul(n["encoder.a"], n["predictor.w"])))

    out = update_encoder(p, loss, 0.1, 1)
    assert out["encoder.a"][0] == pytest.approx(1.0 - 0.1 * (2 * 1.0 + 4.0))
    assert out["encoder.b"][0] == pytest.approx(-2.0 - 0.1 * 3.0)
    assert out["predictor.w"][0] == 4.0


def test_partition_contracts_on_model():
    gs = _state()
    p = gs.global_params
    ep = gs.training[0]
    loss = model_loss(ARCH, ep.data.windows)
    enc = update_encoder(p, loss, 0.1, 2)
    assert all(np.array_equal(enc[k], p[k]) for k in p.predictor_names)
    assert any(not np.array_equal(enc[k], p[k]) for k in p.encoder_names)
    meta = meta_update_predictor(p, model_loss(ARCH, ep.support), model_loss(ARCH, ep.query),
                                 0.1, 0.1)
    assert all(np.array_equal(meta[k], p[k]) for k in p.encoder_names)
    assert any(not np.array_equal(meta[k], p[k]) for k in p.predictor_names)


def test_update_encoder_flat_loss_is_noop():
    p = build(ARCH, 0)

    def const(n):
        total = ad.constant(1.0)
        for k in p.encoder_names:
            total = ad.add(total, ad.scale(ad.reduce_sum(n[k]), 0.0))
        return total

    assert update_encoder(p, const, 0.5, 3) == p


@pytest.mark.parametrize("mode", [GradMode.SECOND, GradMode.FIRST])
def test_meta_update_quadratic(mode):
    rng = np.random.default_rng(4)
    for _ in range(25):
        c, m, alpha, w, beta = rng.uniform(0.1, 3), rng.normal(), rng.uniform(0, 0.5), rng.normal(), 0.1
        p = ParamSet({"encoder.e": np.array([0.7]), "predictor.w": np.array([w])})
        loss = half_square("predictor.w", c, m)
        out = meta_update_predictor(p, loss, loss, alpha, beta, mode)
        wp = w - alpha * c * (w - m)
        g = c * (wp - m) * ((1 - alpha * c) if mode is GradMode.SECOND else 1.0)
        assert abs(out["predictor.w"][0] - (w - beta * g)) < 1e-12
        assert out["encoder.e"][0] == 0.7


def test_meta_update_alpha_zero_is_plain_step():
    p = ParamSet({"predictor.w": np.array([1.5])})
    out = meta_update_predictor(p, half_square("predictor.w", 2.0), half_square("predictor.w", 2.0, 1.0),
                                0.0, 0.25)
    assert out["predictor.w"][0] == pytest.approx(1.5 - 0.25 * 2.0 * 0.5)


def test_meta_update_modes_differ():
    p = ParamSet({"predictor.w": np.array([1.0])})
    loss = half_square("predictor.w", 2.0)
    a = meta_update_predictor(p, loss, loss, 0.1, 0.1, GradMode.SECOND)
    b = meta_update_predictor(p, loss, loss, 0.1, 0.1, GradMode.FIRST)
    assert a["predictor.w"][0] != b["predictor.w"][0]


def test_non_finite_loss_raises():
    p = ParamSet({"predictor.w": np.array([np.inf])})
    with pytest.raises(ad.NonFiniteError):
        fine_tune(p, half_square("predictor.w"), 0.1, 1)


# ---------------------------------------------------------------- fine-tune and baselines


def test_fine_tune_linear_softmax_hand_step():
    # logits = w * x with x = 1, label 0, two classes; dL/dw = softmax(w) - onehot
    p = ParamSet({"predictor.w": np.array([0.0, 0.0])})

    def loss(n):
        return ad.cross_entropy(n["predictor.w"], 0)

    out = fine_tune(p, loss, 0.5, 1)
    np.testing.assert_allclose(out["predictor.w"], [0.25, -0.25], atol=1e-15)


def test_fine_tune_loss_non_increasing_on_convex_toy():
    x = np.array([[1.0, 2.0], [-1.0, -1.5]])
    y = np.array([0, 1])
    p = ParamSet({"predictor.w": np.zeros((2, 2))})

    def loss(n):
        return ad.softmax_cross_entropy(ad.matmul(ad.constant(x), n["predictor.w"]), y)

    values = []
    for _ in range(20):
        values.append(float(loss({"predictor.w": ad.constant(p["predictor.w"])}).value))
        p = fine_tune(p, loss, 0.1, 1)
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_fedavg_equals_fine_tune_and_prox_reductions():
    gs = _state()
    loss = model_loss(ARCH, gs.training[0].data.windows)
    p = gs.global_params
    assert fedavg_local(p, loss, 0.05, 2) == fine_tune(p, loss, 0.05, 2)
    assert fedprox_local(p, p, loss, 0.05, 0.0, 2) == fedavg_local(p, loss, 0.05, 2)
    # at W == W_global the proximal term has zero gradient on the first step
    assert fedprox_local(p, p, loss, 0.05, 5.0, 1) == fedavg_local(p, loss, 0.05, 1)


def test_fedprox_scalar_hand_step():
    zero = lambda n: ad.scale(ad.reduce_sum(n["encoder.w"]), 0.0)  # noqa: E731
    out = fedprox_local(scalar("encoder.w", 1.0), scalar("encoder.w", 0.0), zero, 0.1, 2.0, 1)
    assert out["encoder.w"][0] == pytest.approx(0.8, abs=1e-15)


def test_fedavg_scalar_hand_step():
    out = fedavg_local(scalar("encoder.w", 3.0), half_square("encoder.w", 2.0, 1.0), 0.1, 1)
    assert out["encoder.w"][0] == pytest.approx(3.0 - 0.1 * 2.0 * 2.0)


# ---------------------------------------------------------------- aggregation


def test_aggregate_examples():
    z, two, four = scalar("encoder.w", 0.0), scalar("encoder.w", 2.0), scalar("encoder.w", 4.0)
    assert aggregate([(z, 5), (two, 5)])["encoder.w"][0] == 1.0
    assert aggregate([(z, 1), (four, 3)])["encoder.w"][0] == 3.0
    p = build(ARCH, 0)
    assert aggregate([(p, 7)]) == p
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([(z, 1), (scalar("encoder.v", 1.0), 1)])


def test_aggregate_within_client_range():
    models = [(build(ARCH, s), c) for s, c in ((0, 3), (1, 5), (2, 1))]
    out = aggregate(models)
    for k in out:
        stack = np.stack([m[k] for m, _ in models])
        assert np.all(out[k] >= stack.min(axis=0)) and np.all(out[k] <= stack.max(axis=0))


def test_hyperparams_validation():
    with pytest.raises(ValueError, match="alpha"):
        HyperParams(alpha=1.5)
    with pytest.raises(ValueError):
        HyperParams(encoder_steps=0)
    assert HyperParams().zero_rates().eta == 0.0


# ---------------------------------------------------------------- rounds


def test_zero_rate_round_is_noop():
    gs = _state()
    hp = HP.zero_rates()
    for method in ("REFML", "REFML-no-AI", "FedAvg", "FedProx"):
        assert run_round(gs, hp, method).global_params == gs.global_params


def test_single_client_aggregation_is_identity():
    gs = _state(train_ids=(0,))
    hp = replace(HP.zero_rates(), eta=0.1)
    new = run_round(gs, hp, "REFML")
    assert new.global_params == new.training[0].local_params
    assert new.global_params != gs.global_params


def test_testing_clients_never_touch_global():
    with_test, without = _state(), _state()
    without = replace(without, clients=without.training)
    for method in ("REFML", "FedProx"):
        a, b = with_test, without
        for _ in range(2):
            a, b = run_round(a, HP, method), run_round(b, HP, method)
        assert a.global_params == b.global_params


def test_parallel_clients_bit_identical():
    gs = _state()
    assert run_round(gs, HP, "REFML", jobs=3).global_params == run_round(gs, HP, "REFML").global_params


def test_zero_rounds_scores_initial_model():
    res = run_experiment([DATA[0]], [DATA[2]], "FedAvg", replace(HP, rounds=0), ARCH, 3, 1, 2, 5)
    gs = _state(train_ids=(0,), seed=5)
    assert res.accuracy == accuracy(build(ARCH, 5), gs.testing[0].query)


def test_run_methods_deterministic_and_shared():
    args = ([DATA[0], DATA[1]], [DATA[2]], ["FedAvg", "FedAvg-FT", "REFML"], HP, ARCH, 3, 1, 2, 0)
    a, b = run_methods(*args), run_methods(*args)
    for m in a:
        assert a[m].accuracies == b[m].accuracies
        assert all(x == y for x, y in zip(a[m].test_params, b[m].test_params))
    assert a["FedAvg"].global_params == a["FedAvg-FT"].global_params
    single = run_experiment(*args[:2], "FedAvg-FT", *args[3:])
    assert single.accuracies == a["FedAvg-FT"].accuracies


def test_reported_accuracy_matches_final_params():
    res = run_experiment([DATA[0]], [DATA[2]], "REFML", HP, ARCH, 3, 1, 2, 0)
    assert res.accuracy == accuracy(res.test_params[0], res.test_clients[0].query)


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        run_round(_state(), HP, "FedNova")
