"""Experiment presets and the TOML run configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .training import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "PRESETS", "SPLITS", "load_config", "split_sizes"]


class ConfigError(ValueError):
    pass


SPLITS = ("train", "val", "test")

# Full-size sequence lengths per split; ``--scale`` multiplies these only.
PRESETS: dict[str, dict] = {
    "linear": {
        "sizes": {"train": 131072, "val": 16384, "test": 32768},
        "prior": "taylor1",
        "recursive": {"diag_offset": -2.0, "learning_rate": 3e-4, "residual_penalty": 1.0},
        "recurrent": {"diag_offset": 0.0, "learning_rate": 1e-3, "residual_penalty": 0.0},
    },
    "lorenz": {
        "sizes": {"train": 131072, "val": 16384, "test": 32768},
        "prior": "taylor2",
        "recursive": {"diag_offset": 0.0, "learning_rate": 1e-3, "residual_penalty": 0.0},
        "recurrent": {"diag_offset": 0.0, "learning_rate": 1e-3, "residual_penalty": 0.0},
    },
}

MODELS = ("recursive", "recurrent")
SMOOTHERS = ("none", "linearized", "parameterized")
PRIORS = ("none", "taylor1", "taylor2")
MODES = ("filter", "linearized_smooth", "parameterized_smooth")


def split_sizes(preset: str, scale: float) -> dict[str, int]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if not (scale > 0 and math.isfinite(scale)):
        raise ConfigError("scale must be a positive number")
    return {k: max(1, int(round(v * scale))) for k, v in PRESETS[preset]["sizes"].items()}


@dataclass
class ExperimentConfig:
    preset: str = "linear"
    seed: int = 0
    scale: float = 1.0
    model: str = "recursive"
    smoother: str = "none"
    smoother_mean_ref: str = "prior"
    prior: str | None = None  # preset default when None
    hidden_dim: int = 64
    mlp_dim: int = 64
    diag_offset: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    mode: str | None = None  # evaluation mode, derived from smoother when None
    burn_in: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}")
        if self.smoother not in SMOOTHERS:
            raise ConfigError(f"smoother must be one of {SMOOTHERS}")
        if self.smoother_mean_ref not in ("prior", "posterior"):
            raise ConfigError("smoother_mean_ref must be 'prior' or 'posterior'")
        if self.prior is not None and self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}")
        if self.mode is not None and self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.model == "recurrent" and self.smoother == "linearized":
            raise ConfigError("linearized smoothing needs the recursive model")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be >= 0")

    @property
    def two_sided(self) -> bool:
        return self.smoother == "parameterized"

    @property
    def prior_name(self) -> str:
        if self.model == "recurrent":
            return "none"
        return self.prior if self.prior is not None else PRESETS[self.preset]["prior"]

    @property
    def offset(self) -> float:
        if self.diag_offset is not None:
            return self.diag_offset
        return PRESETS[self.preset][self.model]["diag_offset"]

    @property
    def eval_mode(self) -> str:
        if self.mode is not None:
            return self.mode
        return {"none": "filter", "linearized": "linearized_smooth", "parameterized": "parameterized_smooth"}[self.smoother]


_SECTIONS = {
    "simulate": {"preset", "seed", "scale"},
    "model": {"model", "smoother", "smoother_mean_ref", "prior", "hidden_dim", "mlp_dim", "diag_offset"},
    "train": {f.name for f in fields(TrainConfig)},
    "evaluate": {"mode", "burn_in"},
}


def from_dict(doc: dict) -> ExperimentConfig:
    for section, body in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(body) - _SECTIONS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    sim, mod, tr, ev = (doc.get(s, {}) for s in ("simulate", "model", "train", "evaluate"))
    preset = sim.get("preset", "linear")
    kind = mod.get("model", "recursive")
    if preset in PRESETS and kind in MODELS:
        defaults = PRESETS[preset][kind]
        train_kw = {
            "learning_rate": defaults["learning_rate"],
            "residual_penalty": defaults["residual_penalty"],
            "iterations": 600,
            "streams": 16,
            "eval_every": 50,
            "schedule": "cosine",
        }
    else:
        train_kw = {}
    train_kw.update(tr)
    try:
        train_cfg = TrainConfig(**train_kw)
        return ExperimentConfig(
            preset=preset,
            seed=int(sim.get("seed", 0)),
            scale=float(sim.get("scale", 1.0)),
            train=train_cfg,
            mode=ev.get("mode"),
            burn_in=int(ev.get("burn_in", 0)),
            **mod,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, preset: str | None = None) -> ExperimentConfig:
    """Read a TOML run file; ``preset`` replaces ``[simulate] preset`` before its defaults are applied."""
    doc: dict = {}
    if path is not None:
        doc = _read_toml(path)
    if preset is not None:
        doc.setdefault("simulate", {})
        if not isinstance(doc["simulate"], dict):
            raise ConfigError("[simulate] must be a table")
        doc["simulate"]["preset"] = preset
    return from_dict(doc)


def _read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return doc


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Apply command-line overrides that are not ``None``."""
    kw = {k: v for k, v in kw.items() if v is not None}
    if "seed" in kw:
        kw["train"] = replace(cfg.train, seed=kw["seed"])
    try:
        return replace(cfg, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
