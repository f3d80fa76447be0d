"""Forward passes of the four learned variants and the linearized smoother."""

import math

import numpy as np
import pytest

from ssdkf import autodiff as ad
from ssdkf.baselines import kalman_filter_classic, rts_smoother_classic
from ssdkf.engine import run
from ssdkf.gaussian import EmissionModel, Gaussian, condition, log_density
from ssdkf.neural import DIAG_FLOOR, ExpertPrior, Model, init_params
from ssdkf.recurrent import recurrent_filter_forward, recurrent_smoother_forward
from ssdkf.recursive import filter_forward, forecast, predictive_nll
from ssdkf.simulators import LinearSimConfig, linear_dynamics, linear_emission, simulate_linear
from ssdkf.smoothers import linearized_smooth, parameterized_smoother_forward, train_smoother
from ssdkf.training import TrainConfig, train

from conftest import small_emission, small_model

VARIANTS = {
    "recursive_filter": (lambda: small_model("recursive"), filter_forward),
    "recursive_smoother": (lambda: small_model("recursive", two_sided=True), parameterized_smoother_forward),
    "recurrent_filter": (lambda: small_model("recurrent"), recurrent_filter_forward),
    "recurrent_smoother": (lambda: small_model("recurrent", two_sided=True), recurrent_smoother_forward),
}


def linear_setup(K=300, seed=1):
    cfg = LinearSimConfig(K=K, seed=seed)
    F, _ = linear_dynamics(cfg)
    em = EmissionModel(*linear_emission(cfg))
    model = Model("recursive", 6, 2, init_params(0, "recursive", 6, 2, 16, 16), 16, 16, prior=ExpertPrior(mode="fixed", matrix=F))
    return simulate_linear(cfg), F, em, model


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_loss_equals_predictive_log_density(name, toy_data):
    make, forward = VARIANTS[name]
    fo = forward(toy_data, make(), small_emission())
    dens = sum(log_density(fo.predictive(k), toy_data[k]) for k in range(len(toy_data)))
    expected = -2.0 * dens - len(toy_data) * 2 * math.log(2 * math.pi)
    assert fo.total_loss == pytest.approx(expected, abs=1e-6)
    assert predictive_nll(fo) == pytest.approx(-dens, abs=1e-6)


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_posterior_not_wider_than_prior(name, toy_data):
    make, forward = VARIANTS[name]
    fo = forward(toy_data, make(), small_emission())
    for k in range(len(toy_data)):
        assert np.all(np.linalg.eigvalsh(fo.prior_cov[k] - fo.post_cov[k]) > -1e-10)


def test_bridge_to_classical_filter():
    t, F, em, model = linear_setup(K=1000)
    fo = filter_forward(t, model, em)
    Q = fo.Q[0]
    kf = kalman_filter_classic(t, F, Q, em, Gaussian(np.zeros(6), Q))
    for a, b in ((fo.prior_mean, kf.prior_mean), (fo.post_mean, kf.post_mean), (fo.post_cov, kf.post_cov)):
        np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)
    np.testing.assert_allclose(fo.loss_terms, kf.loss_terms, atol=1e-10)
    np.testing.assert_allclose(linearized_smooth(fo).mean, rts_smoother_classic(kf, F, Q).mean, atol=1e-8, rtol=0)


def test_fresh_start_prior_is_decoded_initial_belief(toy_data):
    m = small_model("recursive")
    fo = filter_forward(toy_data, m, small_emission())
    np.testing.assert_allclose(fo.prior_mean[0], fo.e[0], atol=1e-15)
    np.testing.assert_allclose(fo.prior_cov[0], fo.Q[0], atol=1e-15)


def test_filter_is_causal(toy_data):
    m, em = small_model("recursive"), small_emission()
    full = filter_forward(toy_data, m, em)
    for cut in (1, 4, 7):
        part = filter_forward(toy_data[:cut], m, em)
        np.testing.assert_array_equal(part.post_mean, full.post_mean[:cut])
        np.testing.assert_array_equal(part.loss_terms, full.loss_terms[:cut])


def test_two_sided_is_not_causal(toy_data):
    m, em = small_model("recursive", two_sided=True), small_emission()
    full = parameterized_smoother_forward(toy_data, m, em)
    part = parameterized_smoother_forward(toy_data[:4], m, em)
    assert not np.allclose(part.post_mean, full.post_mean[:4])


def test_forecast_first_step_is_next_prior(toy_data):
    m, em = small_model("recursive"), small_emission()
    fo = filter_forward(toy_data[:-1], m, em)
    ext = filter_forward(toy_data, m, em)
    steps = forecast(fo, m, em, 3)
    np.testing.assert_allclose(steps[0].mean, ext.prior_mean[-1], atol=1e-12)
    np.testing.assert_allclose(steps[0].cov, ext.prior_cov[-1], atol=1e-12)
    assert len(steps) == 3 and np.trace(steps[2].cov) > 0


def test_recurrent_equals_recursive_with_zero_transition(toy_data):
    em = small_emission()
    rnn = small_model("recurrent")
    n = 3
    params = dict(rnn.params)
    params["dec.W2"] = np.vstack([np.zeros((n * n, rnn.mlp_dim)), rnn.params["dec.W2"]])
    params["dec.b2"] = np.concatenate([np.zeros(n * n), rnn.params["dec.b2"]])
    rec = Model("recursive", n, 2, params, rnn.hidden_dim, rnn.mlp_dim, prior=ExpertPrior())
    a = recurrent_filter_forward(toy_data, rnn, em)
    b = filter_forward(toy_data, rec, em)
    np.testing.assert_allclose(a.post_mean, b.post_mean, atol=1e-14)
    np.testing.assert_allclose(a.prior_cov, b.prior_cov, atol=1e-14)
    np.testing.assert_allclose(a.loss_terms, b.loss_terms, atol=1e-12)


def test_untrained_recurrent_prior_is_constant(toy_data):
    m = Model("recurrent", 3, 2, init_params(0, "recurrent", 3, 2, 8, 8), 8, 8)
    fo = recurrent_filter_forward(toy_data, m, small_emission())
    assert not np.any(fo.prior_mean)
    np.testing.assert_array_equal(fo.prior_cov, np.broadcast_to(fo.prior_cov[0], fo.prior_cov.shape))


def test_two_sided_recurrent_time_reversal(toy_data):
    # swap the encoders and the halves of the first decoder layer, reverse time
    m, em = small_model("recurrent", two_sided=True), small_emission()
    d = m.hidden_dim
    swapped = dict(m.params)
    for k in list(m.params):
        if k.startswith("gru."):
            swapped[k], swapped["gru_bwd." + k[4:]] = m.params["gru_bwd." + k[4:]], m.params[k]
    W1 = m.params["dec.W1"]
    swapped["dec.W1"] = np.concatenate([W1[:, d:], W1[:, :d]], axis=1)
    a = recurrent_smoother_forward(toy_data, m, em)
    b = recurrent_smoother_forward(toy_data[::-1], m.with_params(swapped), em)
    np.testing.assert_allclose(a.post_mean, b.post_mean[::-1], atol=1e-13)
    mid = len(toy_data) // 2
    np.testing.assert_allclose(a.post_cov[mid], b.post_cov[-1 - mid], atol=1e-13)


def test_parameterized_smoother_untrained_is_kalman_filter():
    t, F, em, _ = linear_setup(K=200)
    m = Model("recursive", 6, 2, init_params(0, "recursive", 6, 2, 16, 16, two_sided=True), 16, 16, two_sided=True, prior=ExpertPrior(mode="fixed", matrix=F))
    fo = parameterized_smoother_forward(t, m, em)
    Q = fo.Q[0]
    kf = kalman_filter_classic(t, F, Q, em, Gaussian(np.zeros(6), Q))
    np.testing.assert_allclose(fo.post_mean, kf.post_mean, atol=1e-10)
    np.testing.assert_allclose(fo.loss_terms, kf.loss_terms, atol=1e-10)


def test_parameterized_smoother_with_silent_backward_encoder(toy_data):
    # zero backward weights keep h_bwd at 0, so only the forward half of W1 matters
    two = small_model("recursive", two_sided=True)
    params = {k: (np.zeros_like(v) if k.startswith("gru_bwd.") else v) for k, v in two.params.items()}
    one_params = {k: v for k, v in params.items() if not k.startswith("gru_bwd.")}
    one_params["dec.W1"] = params["dec.W1"][:, : two.hidden_dim]
    one = Model("recursive", 3, 2, one_params, two.hidden_dim, two.mlp_dim, prior=two.prior)
    a = parameterized_smoother_forward(toy_data, two.with_params(params), small_emission())
    b = filter_forward(toy_data, one, small_emission())
    np.testing.assert_allclose(a.prior_mean, b.prior_mean, atol=1e-14)


@pytest.mark.parametrize("name", ["recursive_filter", "recursive_smoother"])
def test_gradients_of_full_loss(name, toy_data):
    make, _ = VARIANTS[name]
    m, em = make(), small_emission()
    err = ad.check_gradients(lambda p: run(m, em, toy_data[None], params=p, record=False).loss, m.params)
    assert err < 1e-4


def test_recurrent_gradients(toy_data):
    m, em = small_model("recurrent"), small_emission()
    err = ad.check_gradients(lambda p: run(m, em, toy_data[None], params=p, record=False).loss, m.params)
    assert err < 1e-4


def test_forward_is_deterministic(toy_data):
    m, em = small_model("recursive", two_sided=True), small_emission()
    a = parameterized_smoother_forward(toy_data, m, em)
    b = parameterized_smoother_forward(toy_data, m, em)
    np.testing.assert_array_equal(a.post_mean, b.post_mean)


def test_shape_errors(toy_data):
    m = small_model("recursive")
    with pytest.raises(ValueError):
        filter_forward(toy_data[:, :1], m, small_emission())
    with pytest.raises(ValueError):
        filter_forward(toy_data, m, small_emission(4, 2))
    with pytest.raises(ValueError):
        parameterized_smoother_forward(toy_data, m, small_emission())
    with pytest.raises(ValueError):
        recurrent_filter_forward(toy_data, m, small_emission())


# linearized smoother


def test_linearized_smoother_leaves_last_step():
    t, F, em, model = linear_setup(K=50)
    fo = filter_forward(t, model, em)
    sm = linearized_smooth(fo)
    np.testing.assert_array_equal(sm.mean[-1], fo.post_mean[-1])
    np.testing.assert_array_equal(sm.cov[-1], fo.post_cov[-1])
    assert sm.gains.shape == (49, 6, 6)


def test_linearized_smoother_single_step():
    t, F, em, model = linear_setup(K=1)
    fo = filter_forward(t, model, em)
    sm = linearized_smooth(fo)
    np.testing.assert_array_equal(sm.mean, fo.post_mean)
    assert sm.gains.shape == (0, 6, 6)


def test_linearized_smoother_shrinks_uncertainty():
    t, F, em, model = linear_setup(K=200)
    fo = filter_forward(t, model, em)
    sm = linearized_smooth(fo)
    for k in range(len(t)):
        assert np.trace(sm.cov[k]) <= np.trace(fo.post_cov[k]) + 1e-12
        np.testing.assert_array_equal(sm.cov[k], sm.cov[k].T)
        assert np.linalg.eigvalsh(sm.cov[k]).min() > -1e-12


def test_mean_reference_switch():
    t, F, em, model = linear_setup(K=60)
    fo = filter_forward(t, model, em)
    a, b = linearized_smooth(fo, "prior"), linearized_smooth(fo, "posterior")
    np.testing.assert_array_equal(a.cov, b.cov)
    assert not np.allclose(a.mean[:-1], b.mean[:-1])
    with pytest.raises(ValueError):
        linearized_smooth(fo, "middle")


def test_single_observation_is_one_update():
    m, em = small_model("recursive"), small_emission()
    y = np.array([[0.4, -1.1]])
    fo = filter_forward(y, m, em)
    expected, _ = condition(Gaussian(fo.e[0], fo.Q[0]), em, y[0])
    np.testing.assert_allclose(fo.post_mean[0], expected.mean, atol=1e-14)
    np.testing.assert_allclose(fo.post_cov[0], expected.cov, atol=1e-14)


def test_scalar_random_walk_matches_kalman_filter():
    rng = np.random.default_rng(5)
    y = np.cumsum(rng.standard_normal(300))[:, None] + 0.5 * rng.standard_normal((300, 1))
    em = EmissionModel([[1.0]], [[0.25]])
    m = Model("recursive", 1, 1, init_params(0, "recursive", 1, 1, 8, 8), 8, 8, prior=ExpertPrior(mode="fixed", matrix=np.eye(1)))
    fo = filter_forward(y, m, em)
    Q = fo.Q[0]
    kf = kalman_filter_classic(y, np.eye(1), Q, em, Gaussian(np.zeros(1), Q))
    np.testing.assert_allclose(fo.post_mean, kf.post_mean, atol=1e-10)
    np.testing.assert_allclose(fo.post_cov, kf.post_cov, atol=1e-10)


def test_loss_term_small_cases():
    # untrained recurrent prior N(0, q) with R = 1 - q gives a unit innovation covariance
    m = Model("recurrent", 1, 1, init_params(0, "recurrent", 1, 1, 4, 4), 4, 4)
    q = (math.log(2.0) + DIAG_FLOOR) ** 2
    em = EmissionModel([[1.0]], [[1.0 - q]])
    assert recurrent_filter_forward(np.array([[0.0]]), m, em).loss_terms[0] == pytest.approx(0.0, abs=1e-12)
    assert recurrent_filter_forward(np.array([[1.0]]), m, em).loss_terms[0] == pytest.approx(1.0, abs=1e-12)


def test_forecast_with_true_linear_transition():
    t, F, em, model = linear_setup(K=100)
    fo = filter_forward(t, model, em)
    steps = forecast(fo, model, em, 5)
    for s, g in enumerate(steps, start=1):
        np.testing.assert_allclose(g.mean, np.linalg.matrix_power(F, s) @ fo.post_mean[-1], atol=1e-9)
    traces = [np.trace(g.cov) for g in steps]
    assert all(b >= a for a, b in zip(traces, traces[1:]))
    with pytest.raises(ValueError):
        forecast(fo, model, em, 0)


def test_smoother_training_no_op_and_determinism(toy_data):
    m, em = small_model("recursive", two_sided=True), small_emission()
    y = np.concatenate([toy_data] * 4)
    res = train_smoother(m, em, [y], TrainConfig(iterations=0))
    for k in m.params:
        np.testing.assert_array_equal(res.model.params[k], m.params[k])
    cfg = TrainConfig(iterations=3, chunk_len=8, streams=2)
    a, b = train_smoother(m, em, [y], cfg), train_smoother(m, em, [y], cfg)
    for k in m.params:
        np.testing.assert_array_equal(a.model.params[k], b.model.params[k])
    with pytest.raises(ValueError):
        train_smoother(small_model("recursive"), em, [y], cfg)


def test_recurrent_training_no_op(toy_data):
    m, em = small_model("recurrent"), small_emission()
    res = train(m, em, [toy_data], TrainConfig(iterations=0))
    for k in m.params:
        np.testing.assert_array_equal(res.model.params[k], m.params[k])
