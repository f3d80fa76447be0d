import numpy as np
import pytest

from ssdkf.gaussian import EmissionModel
from ssdkf.neural import ExpertPrior, Model, init_params, lorenz_prior


def small_model(kind="recursive", two_sided=False, n=3, m=2, seed=0, prior=None, hidden=8, mlp=8, decoder_scale=0.1):
    """Tiny model with a random (non-zero) last decoder layer, for gradient and identity checks."""
    params = init_params(seed, kind, n, m, hidden, mlp, two_sided)
    rng = np.random.default_rng(seed + 1)
    params["dec.W2"] = decoder_scale * rng.standard_normal(params["dec.W2"].shape)
    params["dec.b2"] = decoder_scale * rng.standard_normal(params["dec.b2"].shape)
    if prior is None:
        prior = ExpertPrior(mode="fixed", matrix=np.eye(n)) if kind == "recursive" else ExpertPrior()
    return Model(kind, n, m, params, hidden_dim=hidden, mlp_dim=mlp, two_sided=two_sided, prior=prior, seed=seed)


def small_emission(n=3, m=2):
    H = np.eye(m, n)
    return EmissionModel(H, 0.3 * np.eye(m))


@pytest.fixture
def toy_data():
    rng = np.random.default_rng(42)
    return np.cumsum(0.3 * rng.standard_normal((8, 2)), axis=0)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
