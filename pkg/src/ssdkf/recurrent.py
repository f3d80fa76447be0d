"""Direct parameterization: the network outputs the belief itself.

The prior for ``x_k`` is ``N(e_k, L_k L_k^T)`` read straight off the
decoder, with no transition applied to the previous posterior. This is the
recursive model with the transition matrix pinned to zero.
"""

from __future__ import annotations

import numpy as np

from .engine import run
from .gaussian import EmissionModel
from .neural import Model
from .recursive import FilterOutput, output_from_pass

__all__ = ["recurrent_filter_forward", "recurrent_smoother_forward"]


def _check(model: Model, two_sided: bool):
    if model.kind != "recurrent":
        raise ValueError("expected a recurrent model")
    if model.two_sided != two_sided:
        raise ValueError("model sidedness does not match the requested pass")


def _as_obs(y_seq) -> np.ndarray:
    y = np.asarray(getattr(y_seq, "y", y_seq), dtype=float)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError(f"expected a (K+1, M) observation array, got shape {y.shape}")
    return y


def recurrent_filter_forward(y_seq, model: Model, em: EmissionModel) -> FilterOutput:
    _check(model, two_sided=False)
    return output_from_pass(run(model, em, _as_obs(y_seq)[None]), em)


def recurrent_smoother_forward(y_seq, model: Model, em: EmissionModel) -> FilterOutput:
    _check(model, two_sided=True)
    return output_from_pass(run(model, em, _as_obs(y_seq)[None]), em)
