import numpy as np
import pytest

from ssdkf.neural import (
    DIAG_FLOOR,
    ExpertPrior,
    Model,
    decode_state,
    decode_transition,
    gru_step,
    init_params,
    linear_taylor_prior,
    load_checkpoint,
    lorenz_prior,
    save_checkpoint,
)
from ssdkf.simulators import lorenz_field

from conftest import small_model


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_gru_step_against_textbook_cell():
    p = init_params(3, "recursive", 2, 2, hidden_dim=4, mlp_dim=4)
    rng = np.random.default_rng(0)
    h, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
    yh = np.concatenate([y, h], axis=1)
    z = sigmoid(yh @ p["gru.W_z"].T + p["gru.b_z"])
    r = sigmoid(yh @ p["gru.W_r"].T + p["gru.b_r"])
    cand = np.tanh(np.concatenate([y, r * h], axis=1) @ p["gru.W_h"].T + p["gru.b_h"])
    expected = (1 - z) * h + z * cand
    np.testing.assert_allclose(gru_step(h, y, p), expected, atol=1e-14)


def test_gru_rejects_wrong_dims():
    p = init_params(0, "recursive", 2, 2, hidden_dim=4, mlp_dim=4)
    with pytest.raises(ValueError, match="gru_step"):
        gru_step(np.zeros((1, 5)), np.zeros((1, 2)), p)


def test_init_is_uniform_and_zero_headed():
    p = init_params(0, "recursive", 6, 2)
    assert p["gru.W_z"].shape == (64, 66)
    assert np.abs(p["gru.W_z"]).max() <= 1 / np.sqrt(66)
    assert p["dec.W2"].shape == (36 + 6 + 21, 64)
    assert not p["dec.W2"].any() and not p["dec.b2"].any()
    assert init_params(0, "recurrent", 6, 2)["dec.b2"].shape == (6 + 21,)
    two = init_params(0, "recursive", 3, 3, two_sided=True)
    assert two["dec.W1"].shape == (64, 128) and "gru_bwd.W_h" in two


def test_init_deterministic_per_seed():
    a, b, c = (init_params(s, "recursive", 3, 3) for s in (7, 7, 8))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["gru.W_h"], c["gru.W_h"])


def test_untrained_decoder_gives_prior_transition():
    F0 = np.array([[1.0, 1.0], [0.0, 1.0]])
    p = init_params(0, "recursive", 2, 1, hidden_dim=8, mlp_dim=8)
    h = np.random.default_rng(0).standard_normal((3, 8))
    for offset in (0.0, -2.0):
        F, e, Q, L, dF = decode_transition(h, p, ExpertPrior(mode="fixed", matrix=F0), np.zeros((3, 2, 1)), 2, offset)
        np.testing.assert_array_equal(F, np.broadcast_to(F0, (3, 2, 2)))
        assert not np.any(e) and not np.any(dF)
        q = (np.log1p(np.exp(offset)) + DIAG_FLOOR) ** 2
        np.testing.assert_allclose(Q, np.broadcast_to(q * np.eye(2), (3, 2, 2)))


def test_cholesky_head_layout():
    # raw outputs: diag first, then the strict lower triangle row by row
    n = 3
    p = init_params(0, "recurrent", n, 1, hidden_dim=2, mlp_dim=2)
    raw = np.array([0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0])  # x (3) + L raw (6)
    p["dec.b2"] = raw
    x, L = decode_state(np.zeros((1, 2)), None, p, n)
    d = np.log1p(np.exp([1.0, 2.0, 3.0])) + DIAG_FLOOR
    np.testing.assert_allclose(L[0], [[d[0], 0, 0], [4.0, d[1], 0], [5.0, 6.0, d[2]]])
    np.testing.assert_array_equal(x[0, :, 0], [0.0, 0.0, 0.0])


def test_lorenz_generator_reproduces_vector_field():
    prior = lorenz_prior()
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = 10 * rng.standard_normal(3)
        A = prior.generator(x[:, None])
        np.testing.assert_allclose(A @ x, lorenz_field(x), atol=1e-10)


def test_lorenz_generator_at_ones():
    A = lorenz_prior().generator(np.ones((3, 1)))
    np.testing.assert_allclose(A, [[-10.0, 10.0, 0.0], [27.0, -1.0, 0.0], [1.0, 0.0, -8.0 / 3.0]])


def test_lorenz_base_is_second_order_series():
    prior = lorenz_prior(dt=0.05, order=2)
    x = np.array([[1.5], [-2.0], [20.0]])
    dA = 0.05 * prior.generator(x)
    np.testing.assert_allclose(prior.base(x), np.eye(3) + dA + dA @ dA / 2, atol=1e-14)


def test_linear_taylor_prior_blocks():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    prior = linear_taylor_prior(A, dt=2.0, order=1, blocks=2)
    expected = np.kron(np.eye(2), np.eye(2) + 2.0 * A)
    np.testing.assert_array_equal(prior.matrix, expected)


def test_prior_validation():
    with pytest.raises(ValueError):
        ExpertPrior(mode="fixed")
    with pytest.raises(ValueError):
        ExpertPrior(mode="banana")
    with pytest.raises(ValueError):
        Model("sideways", 2, 1, {})


def test_checkpoint_round_trip(tmp_path):
    m = small_model("recursive", two_sided=True, prior=lorenz_prior(), n=3, m=3)
    m.input_shift = np.array([1.0, 2.0, 3.0])
    m.input_scale = np.array([0.5, 0.25, 2.0])
    path = tmp_path / "ck.json"
    save_checkpoint(m, path, meta={"note": "x"})
    back = load_checkpoint(path)
    assert back.kind == m.kind and back.two_sided and back.hidden_dim == m.hidden_dim
    assert set(back.params) == set(m.params)
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    np.testing.assert_array_equal(back.prior.coeffs, m.prior.coeffs)
    np.testing.assert_array_equal(back.input_scale, m.input_scale)
    assert back.prior.mode == "state" and back.prior.order == 2


def test_checkpoint_version_check(tmp_path):
    import json

    m = small_model()
    path = tmp_path / "ck.json"
    save_checkpoint(m, path)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_gru_zero_weights_fixed_point_and_carry_gate():
    p = {k: np.zeros_like(v) for k, v in init_params(0, "recursive", 2, 2, hidden_dim=4, mlp_dim=4).items()}
    assert not gru_step(np.zeros((1, 4)), np.ones((1, 2)), p).any()
    p = init_params(1, "recursive", 2, 2, hidden_dim=4, mlp_dim=4)
    p["gru.b_z"] = np.full(4, -50.0)  # update gate shut: the state is carried over
    h = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_allclose(gru_step(h, np.ones((3, 2)), p), h, atol=1e-12)


def test_transition_without_prior_is_decoded_residual():
    p = init_params(0, "recursive", 2, 1, hidden_dim=4, mlp_dim=4)
    p["dec.b2"] = np.arange(p["dec.b2"].size, dtype=float)
    F, e, Q, L, dF = decode_transition(np.zeros((1, 4)), p, ExpertPrior(), np.zeros((1, 2, 1)), 2)
    np.testing.assert_array_equal(F, dF)
    np.testing.assert_array_equal(F[0], [[0.0, 1.0], [2.0, 3.0]])
    np.testing.assert_array_equal(e[0, :, 0], [4.0, 5.0])


def test_untrained_state_head_is_constant():
    n = 3
    p = init_params(0, "recurrent", n, 2, hidden_dim=8, mlp_dim=8)
    h = np.random.default_rng(0).standard_normal((5, 8))
    x, L = decode_state(h, None, p, n)
    assert not np.any(x)
    d = np.log1p(np.exp(0.0)) + DIAG_FLOOR
    np.testing.assert_allclose(L, np.broadcast_to(d * np.eye(n), (5, n, n)))


def test_decoder_input_width_follows_sidedness():
    one = init_params(0, "recurrent", 3, 2, hidden_dim=8, mlp_dim=8)
    two = init_params(0, "recurrent", 3, 2, hidden_dim=8, mlp_dim=8, two_sided=True)
    assert one["dec.W1"].shape == (8, 8) and two["dec.W1"].shape == (8, 16)
    h = np.zeros((2, 8))
    assert decode_state(h, h, two, 3)[0].shape == (2, 3, 1)
    with pytest.raises(ValueError):
        decode_state(h, None, two, 3)


def test_decoded_covariance_is_positive_definite_without_jitter():
    n = 4
    p = init_params(0, "recurrent", n, 2, hidden_dim=8, mlp_dim=8)
    rng = np.random.default_rng(3)
    # far larger outputs push |off-diagonal| / floor past 1e7, where L L^T is PD only in exact arithmetic
    for scale in (0.1, 1.0, 3.0):
        p["dec.W2"] = scale * rng.standard_normal(p["dec.W2"].shape)
        _, L = decode_state(rng.standard_normal((20, 8)), None, p, n)
        for Lk in L:
            np.linalg.cholesky(Lk @ Lk.T)  # raises if not PD
            assert np.diag(Lk).min() >= DIAG_FLOOR
