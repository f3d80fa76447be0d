"""Experiment plumbing shared by the command line and the acceptance runs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .baselines import (
    bias_variance_diagnostic,
    extended_kalman_smoother,
    fit_Q_supervised,
    kalman_filter_classic,
)
from .config import ExperimentConfig, split_sizes
from .gaussian import EmissionModel
from .neural import ExpertPrior, Model, init_params, linear_taylor_prior, lorenz_prior
from .recursive import FilterOutput, filter_forward, predictive_nll
from .simulators import (
    LinearSimConfig,
    LorenzSimConfig,
    Trajectory,
    linear_dynamics,
    linear_emission,
    linear_generator,
    lorenz_emission,
    simulate_linear,
    simulate_lorenz,
)
from .smoothers import linearized_smooth
from .training import TrainResult, train

__all__ = [
    "Estimates",
    "baseline_estimates",
    "build_model",
    "diagnose",
    "emission_for",
    "estimate",
    "expert_prior",
    "fit_model",
    "make_datasets",
    "metrics",
    "split_seed",
]


def split_seed(seed: int, split: int) -> int:
    """Distinct simulation seed per (run seed, split index)."""
    return 3 * seed + split


def _sim(preset: str, K: int, seed: int) -> Trajectory:
    if preset == "linear":
        return simulate_linear(LinearSimConfig(K=K, seed=seed))
    return simulate_lorenz(LorenzSimConfig(K=K, seed=seed))


def make_datasets(preset: str, scale: float, seed: int) -> dict[str, Trajectory]:
    sizes = split_sizes(preset, scale)
    return {name: _sim(preset, sizes[name], split_seed(seed, i)) for i, name in enumerate(sizes)}


def emission_for(preset: str) -> EmissionModel:
    H, R = linear_emission(LinearSimConfig()) if preset == "linear" else lorenz_emission(LorenzSimConfig())
    return EmissionModel(H, R)


def expert_prior(preset: str, name: str) -> ExpertPrior:
    if name == "none":
        return ExpertPrior()
    order = {"taylor1": 1, "taylor2": 2}[name]
    if preset == "linear":
        cfg = LinearSimConfig()
        return linear_taylor_prior(linear_generator(cfg.c, cfg.tau), cfg.dt, order, blocks=2)
    cfg = LorenzSimConfig()
    return lorenz_prior(cfg.sigma, cfg.rho, cfg.beta, cfg.sample_dt, order)


def build_model(cfg: ExperimentConfig, train_y: np.ndarray) -> Model:
    em = emission_for(cfg.preset)
    n, m = em.state_dim, em.obs_dim
    params = init_params(cfg.seed, cfg.model, n, m, cfg.hidden_dim, cfg.mlp_dim, cfg.two_sided)
    scale = train_y.std(axis=0)
    return Model(
        kind=cfg.model,
        state_dim=n,
        obs_dim=m,
        params=params,
        hidden_dim=cfg.hidden_dim,
        mlp_dim=cfg.mlp_dim,
        two_sided=cfg.two_sided,
        prior=expert_prior(cfg.preset, cfg.prior_name),
        input_shift=train_y.mean(axis=0),
        input_scale=np.where(scale > 0, scale, 1.0),
        diag_offset=cfg.offset,
        seed=cfg.seed,
    )


def fit_model(cfg: ExperimentConfig, train_t: Trajectory, val_t: Trajectory | None, model: Model | None = None) -> TrainResult:
    model = build_model(cfg, train_t.y) if model is None else model
    val = [val_t.y] if val_t is not None else None
    return train(model, emission_for(cfg.preset), [train_t.y], cfg.train, val)


@dataclass
class Estimates:
    """Per-step state estimates of one sequence plus the matching predictive NLL."""

    mean: np.ndarray
    cov: np.ndarray
    nll: float  # summed over steps
    predicted_obs: np.ndarray  # H x_k|<k (or leave-one-out for two-sided models)


def _from_filter(fo: FilterOutput, mean, cov) -> Estimates:
    return Estimates(mean=mean, cov=cov, nll=predictive_nll(fo), predicted_obs=fo.prior_mean @ fo.H.T)


def estimate(model: Model, em: EmissionModel, y: np.ndarray, mode: str, mean_ref: str = "prior") -> Estimates:
    if mode == "parameterized_smooth":
        if not model.two_sided:
            raise ValueError("parameterized_smooth needs a two-sided checkpoint")
    elif model.two_sided:
        raise ValueError(f"mode {mode} needs a one-sided checkpoint")
    if mode == "linearized_smooth" and model.kind != "recursive":
        raise ValueError("linearized_smooth needs a recursive checkpoint")
    fo = filter_forward(y, model, em)
    if mode == "linearized_smooth":
        sm = linearized_smooth(fo, mean_ref)
        return _from_filter(fo, sm.mean, sm.cov)
    return _from_filter(fo, fo.post_mean, fo.post_cov)


def metrics(est: Estimates, t: Trajectory, em: EmissionModel, burn_in: int = 0) -> dict[str, float]:
    """Latent and emission-space MSE (per dimension), predictive NLL per step and the raw-measurement MSE."""
    if t.x is None:
        raise ValueError("evaluation needs ground-truth states")
    if t.x.shape[1] != em.state_dim or t.y.shape[1] != em.obs_dim:
        raise ValueError("dataset dimensions do not match the emission model")
    if burn_in >= len(t):
        raise ValueError("burn-in leaves no steps to evaluate")
    s = slice(burn_in, None)
    hx = t.x[s] @ em.H.T
    steps = len(t) - burn_in
    out = {
        "latent_mse": float(np.mean((est.mean[s] - t.x[s]) ** 2)),
        "emission_mse": float(np.mean((est.mean[s] @ em.H.T - hx) ** 2)),
        "predictive_nll": est.nll / len(t) if math.isfinite(est.nll) else float("nan"),
        "raw_mse": float(np.mean((t.y[s] - hx) ** 2)),
        "steps": float(steps),
    }
    return out


def baseline_estimates(name: str, preset: str, t: Trajectory, train_t: Trajectory | None = None, fit_iterations: int = 300) -> Estimates:
    """``optimal_kf`` (linear only), ``supervised_kf`` (linear, Taylor-1 transition with fitted noise) or ``eks`` (Lorenz)."""
    em = emission_for(preset)
    if name == "raw":
        pinv = np.linalg.pinv(em.H)
        return Estimates(t.y @ pinv.T, np.zeros((len(t), em.state_dim, em.state_dim)), float("nan"), t.y.copy())
    if name == "optimal_kf":
        if preset != "linear":
            raise ValueError("the optimal filter is only known for the linear preset")
        F, Q = linear_dynamics(LinearSimConfig())
        fo = kalman_filter_classic(t, F, Q, em)
        return _from_filter(fo, fo.post_mean, fo.post_cov)
    if train_t is None or train_t.x is None:
        raise ValueError(f"baseline {name} needs training data with ground truth")
    if name == "supervised_kf":
        if preset != "linear":
            raise ValueError("supervised_kf is defined for the linear preset")
        F = expert_prior("linear", "taylor1").matrix
        Q = fit_Q_supervised([train_t], F, em, iterations=fit_iterations, q_init=0.01 * np.eye(em.state_dim))
        fo = kalman_filter_classic(t, F, Q, em)
        return _from_filter(fo, fo.post_mean, fo.post_cov)
    if name == "eks":
        if preset != "lorenz":
            raise ValueError("eks is defined for the lorenz preset")
        prior = expert_prior("lorenz", "taylor2")
        Q = fit_Q_supervised([train_t], prior, em, iterations=fit_iterations)
        sm = extended_kalman_smoother(t, prior, em, Q)
        return Estimates(sm.mean, sm.cov, float("nan"), sm.mean @ em.H.T)
    raise ValueError(f"unknown baseline {name!r}")


def diagnose(model: Model, em: EmissionModel, t: Trajectory):
    """Bias-variance report of a one-sided model's predictions against the optimal filter (linear preset)."""
    if model.two_sided:
        raise ValueError("the decomposition needs one-step predictions from a one-sided model")
    fo = filter_forward(t, model, em)
    F, Q = linear_dynamics(LinearSimConfig())
    opt = kalman_filter_classic(t, F, Q, em)
    hx = t.x @ em.H.T if t.x is not None else None
    return bias_variance_diagnostic(fo.prior_mean @ em.H.T, opt.prior_mean @ em.H.T, t.y, em, hx)
