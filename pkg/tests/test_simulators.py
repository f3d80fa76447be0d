import numpy as np
import pytest
from scipy.linalg import expm

from ssdkf.simulators import (
    DatasetFormatError,
    LinearSimConfig,
    LorenzSimConfig,
    Trajectory,
    linear_dynamics,
    linear_generator,
    load_dataset,
    rk4_integrate,
    save_dataset,
    simulate_linear,
    simulate_lorenz,
)


def test_linear_transition_is_matrix_exponential():
    cfg = LinearSimConfig()
    F, Q = linear_dynamics(cfg)
    block = expm(linear_generator(cfg.c, cfg.tau) * cfg.dt)
    np.testing.assert_allclose(F[:3, :3], block, atol=1e-13)
    np.testing.assert_allclose(F[3:, 3:], block, atol=1e-13)
    assert not F[:3, 3:].any() and not F[3:, :3].any()
    np.testing.assert_allclose(np.diag(Q), 0.01 * np.array([1 / 3, 1, 3, 1 / 3, 1, 3]))


def test_linear_is_deterministic_per_seed():
    a, b = simulate_linear(LinearSimConfig(K=200, seed=5)), simulate_linear(LinearSimConfig(K=200, seed=5))
    c = simulate_linear(LinearSimConfig(K=200, seed=6))
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.x, b.x)
    assert not np.array_equal(a.y, c.y)


def test_linear_starts_at_rest_and_follows_dynamics():
    cfg = LinearSimConfig(K=50, seed=1, q_scale=0.0)
    t = simulate_linear(cfg)
    assert not t.x.any()
    np.testing.assert_allclose(t.y.std(), 0.5, rtol=0.25)


def test_measurement_noise_stream_is_independent():
    quiet = simulate_linear(LinearSimConfig(K=300, seed=2, r_scale=0.01))
    loud = simulate_linear(LinearSimConfig(K=300, seed=2, r_scale=1.0))
    np.testing.assert_array_equal(quiet.x, loud.x)
    H = np.zeros((2, 6))
    H[0, 0] = H[1, 3] = 1.0
    np.testing.assert_allclose(10 * (quiet.y - quiet.x @ H.T), loud.y - loud.x @ H.T, atol=1e-12)
    a = simulate_lorenz(LorenzSimConfig(K=50, seed=2, r_scale=0.01, sample_dt=0.01, integrate_dt=1e-3, burn_in=10))
    b = simulate_lorenz(LorenzSimConfig(K=50, seed=2, r_scale=4.0, sample_dt=0.01, integrate_dt=1e-3, burn_in=10))
    np.testing.assert_array_equal(a.x, b.x)


def test_compiled_lorenz_matches_python_integrator():
    cfg = LorenzSimConfig(K=20, seed=3, burn_in=5, integrate_dt=1e-4)
    t = simulate_lorenz(cfg)
    x = tuple(np.random.default_rng(np.random.SeedSequence(3).spawn(2)[0]).standard_normal(3))
    x = rk4_integrate(x, cfg.integrate_dt, cfg.substeps * cfg.burn_in)
    for k in range(cfg.K):
        np.testing.assert_array_equal(t.x[k], x)
        x = rk4_integrate(x, cfg.integrate_dt, cfg.substeps)


def test_lorenz_stays_on_attractor():
    t = simulate_lorenz(LorenzSimConfig(K=2000, seed=0, integrate_dt=1e-4))
    assert np.abs(t.x[:, :2]).max() < 30 and 0 < t.x[:, 2].min() and t.x[:, 2].max() < 60
    assert t.dt == 0.05


def test_lorenz_config_validation():
    with pytest.raises(ValueError):
        LorenzSimConfig(sample_dt=0.05, integrate_dt=0.03)
    with pytest.raises(ValueError):
        LorenzSimConfig(K=0)
    with pytest.raises(ValueError):
        LinearSimConfig(r_scale=-1.0)


def test_csv_round_trip_is_exact(tmp_path):
    t = simulate_linear(LinearSimConfig(K=64, seed=9))
    path = tmp_path / "d.csv"
    save_dataset(t, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.y, t.y)
    np.testing.assert_array_equal(back.x, t.x)
    assert back.dt == t.dt and back.seed == 9
    save_dataset(back, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_bytes() == path.read_bytes()


def test_csv_without_truth(tmp_path):
    path = tmp_path / "y.csv"
    path.write_text("t,y1\n0,1.5\n0.5,2.5\n")
    t = load_dataset(path)
    assert t.x is None and t.dt == 0.5
    np.testing.assert_array_equal(t.y[:, 0], [1.5, 2.5])


@pytest.mark.parametrize(
    "text,where",
    [
        ("t,y1,y2\n0,1,2\n1,3\n", "line 3"),
        ("t,y1\n0,1\n1,abc\n", "line 3"),
        ("# ssdkf dataset dt=1 seed=0\nt,z1\n0,1\n", "line 2"),
        ("t,y1\n", "no data"),
        ("", "line 1"),
    ],
)
def test_csv_format_errors_name_the_line(tmp_path, text, where):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DatasetFormatError, match=where):
        load_dataset(path)


def test_trajectory_rejects_nonfinite_and_mismatch():
    with pytest.raises(ValueError):
        Trajectory(1.0, np.array([[np.nan]]))
    with pytest.raises(ValueError):
        Trajectory(1.0, np.zeros((3, 1)), np.zeros((2, 2)))


def test_linear_measures_both_positions():
    t = simulate_linear(LinearSimConfig(K=100, seed=4, r_scale=1e-20))
    np.testing.assert_allclose(t.y, t.x[:, [0, 3]], atol=1e-8)


def test_lorenz_origin_is_fixed():
    t = simulate_lorenz(LorenzSimConfig(K=30, seed=0, x0=(0.0, 0.0, 0.0), burn_in=5))
    assert not t.x.any()


def test_lorenz_desk_scale_statistics():
    t = simulate_lorenz(LorenzSimConfig(K=32768, seed=0))
    assert np.abs(t.x).max() < 60
    per_dim = np.mean((t.y - t.x) ** 2, axis=0)
    np.testing.assert_allclose(per_dim, 0.25, rtol=0.03)
