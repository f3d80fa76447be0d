"""Ground-truth data: linear Newtonian tracking and the Lorenz system.

Both simulators draw their randomness from two independent streams spawned
from one seed, one for the latent process (initial state and process
noise) and one for measurement noise, so changing ``R`` never changes the
latent path.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .gaussian import taylor_matrix_exp

__all__ = [
    "DatasetFormatError",
    "LinearSimConfig",
    "LorenzSimConfig",
    "Trajectory",
    "linear_dynamics",
    "linear_emission",
    "load_dataset",
    "lorenz_emission",
    "lorenz_field",
    "rk4_integrate",
    "save_dataset",
    "simulate_linear",
    "simulate_lorenz",
]


class DatasetFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    """One observed run ``y`` of shape ``(K, M)`` with optional latents ``x`` ``(K, N)``."""

    dt: float
    y: np.ndarray
    x: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.x is not None:
            self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
            if len(self.x) != len(self.y):
                raise ValueError(f"x has {len(self.x)} rows but y has {len(self.y)}")
        if not np.all(np.isfinite(self.y)) or (self.x is not None and not np.all(np.isfinite(self.x))):
            raise ValueError("trajectory contains non-finite values")

    def __len__(self):
        return len(self.y)


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    process, measurement = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(process), np.random.default_rng(measurement)


# linear tracking


@dataclass
class LinearSimConfig:
    c: float = 0.06
    tau: float = 0.17
    dt: float = 1.0
    q_scale: float = 0.1**2
    r_scale: float = 0.5**2
    K: int = 131072
    seed: int = 0

    def __post_init__(self):
        if self.q_scale < 0 or self.r_scale < 0 or self.dt <= 0 or self.K < 1:
            raise ValueError("scales must be non-negative, dt positive and K >= 1")


def linear_generator(c: float, tau: float) -> np.ndarray:
    """Continuous-time generator for one axis with state (position, velocity, acceleration)."""
    return np.array([[0.0, 1.0, 0.0], [0.0, -c, 1.0], [0.0, -tau * c, 0.0]])


def linear_dynamics(cfg: LinearSimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Exact discrete ``(F, Q)`` for the two-axis system (20-term series for the exponential)."""
    e_A = taylor_matrix_exp(linear_generator(cfg.c, cfg.tau), cfg.dt, 20)
    q_bar = cfg.q_scale * np.diag([1.0 / 3.0, 1.0, 3.0])
    eye2 = np.eye(2)
    return np.kron(eye2, e_A), np.kron(eye2, q_bar)


def linear_emission(cfg: LinearSimConfig) -> tuple[np.ndarray, np.ndarray]:
    H = np.zeros((2, 6))
    H[0, 0] = 1.0
    H[1, 3] = 1.0
    return H, cfg.r_scale * np.eye(2)


def simulate_linear(cfg: LinearSimConfig) -> Trajectory:
    F, Q = linear_dynamics(cfg)
    H, R = linear_emission(cfg)
    proc, meas = _streams(cfg.seed)
    q_chol = np.linalg.cholesky(Q) if cfg.q_scale > 0 else np.zeros_like(Q)
    noise = proc.standard_normal((cfg.K, 6)) @ q_chol.T
    x = np.empty((cfg.K, 6))
    state = np.zeros(6)
    for k in range(cfg.K):
        x[k] = state
        state = F @ state + noise[k]
    y = x @ H.T + meas.standard_normal((cfg.K, 2)) * math.sqrt(cfg.r_scale)
    return Trajectory(dt=cfg.dt, y=y, x=x, seed=cfg.seed)


# Lorenz


@dataclass
class LorenzSimConfig:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    integrate_dt: float = 1e-5
    sample_dt: float = 0.05
    r_scale: float = 0.5**2
    K: int = 131072
    seed: int = 0
    burn_in: int = 1000
    x0: tuple[float, float, float] | None = field(default=None)

    def __post_init__(self):
        ratio = self.sample_dt / self.integrate_dt
        if self.integrate_dt <= 0 or abs(ratio - round(ratio)) > 1e-6 * ratio:
            raise ValueError("sample_dt must be an integer multiple of integrate_dt")
        if self.K < 1 or self.r_scale < 0:
            raise ValueError("K must be >= 1 and r_scale non-negative")

    @property
    def substeps(self) -> int:
        return int(round(self.sample_dt / self.integrate_dt))


def lorenz_field(x, sigma=10.0, rho=28.0, beta=8.0 / 3.0) -> np.ndarray:
    x1, x2, x3 = x
    return np.array([sigma * (x2 - x1), x1 * (rho - x3) - x2, x1 * x2 - beta * x3])


def rk4_integrate(x, h: float, steps: int, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    """``steps`` fixed RK4 steps of size ``h`` on the Lorenz field (scalar floats for speed)."""
    x1, x2, x3 = (float(v) for v in x)
    s, r, b = float(sigma), float(rho), float(beta)
    hh = 0.5 * h
    h6 = h / 6.0
    for _ in range(steps):
        k1a, k1b, k1c = s * (x2 - x1), x1 * (r - x3) - x2, x1 * x2 - b * x3
        a1, a2, a3 = x1 + hh * k1a, x2 + hh * k1b, x3 + hh * k1c
        k2a, k2b, k2c = s * (a2 - a1), a1 * (r - a3) - a2, a1 * a2 - b * a3
        a1, a2, a3 = x1 + hh * k2a, x2 + hh * k2b, x3 + hh * k2c
        k3a, k3b, k3c = s * (a2 - a1), a1 * (r - a3) - a2, a1 * a2 - b * a3
        a1, a2, a3 = x1 + h * k3a, x2 + h * k3b, x3 + h * k3c
        k4a, k4b, k4c = s * (a2 - a1), a1 * (r - a3) - a2, a1 * a2 - b * a3
        x1 += h6 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
        x2 += h6 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)
        x3 += h6 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
    return x1, x2, x3


@numba.njit(cache=True)
def _lorenz_path(x1, x2, x3, h, n_sub, skip, count, s, r, b):
    """Compiled twin of :func:`rk4_integrate`: ``skip`` samples discarded, then ``count`` recorded."""
    out = np.empty((count, 3))
    hh = 0.5 * h
    h6 = h / 6.0
    for k in range(skip + count):
        if k >= skip:
            out[k - skip, 0] = x1
            out[k - skip, 1] = x2
            out[k - skip, 2] = x3
        for _ in range(n_sub):
            k1a, k1b, k1c = s * (x2 - x1), x1 * (r - x3) - x2, x1 * x2 - b * x3
            a1, a2, a3 = x1 + hh * k1a, x2 + hh * k1b, x3 + hh * k1c
            k2a, k2b, k2c = s * (a2 - a1), a1 * (r - a3) - a2, a1 * a2 - b * a3
            a1, a2, a3 = x1 + hh * k2a, x2 + hh * k2b, x3 + hh * k2c
            k3a, k3b, k3c = s * (a2 - a1), a1 * (r - a3) - a2, a1 * a2 - b * a3
            a1, a2, a3 = x1 + h * k3a, x2 + h * k3b, x3 + h * k3c
            k4a, k4b, k4c = s * (a2 - a1), a1 * (r - a3) - a2, a1 * a2 - b * a3
            x1 += h6 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
            x2 += h6 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)
            x3 += h6 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
    return out


def lorenz_emission(cfg: LorenzSimConfig) -> tuple[np.ndarray, np.ndarray]:
    return np.eye(3), cfg.r_scale * np.eye(3)


def simulate_lorenz(cfg: LorenzSimConfig) -> Trajectory:
    """Sample the Lorenz attractor every ``sample_dt`` and add measurement noise.

    The initial state is ``N(0, I)`` (or ``cfg.x0``), run for ``burn_in``
    samples before recording.
    """
    proc, meas = _streams(cfg.seed)
    x1, x2, x3 = (float(v) for v in (proc.standard_normal(3) if cfg.x0 is None else cfg.x0))
    x = _lorenz_path(x1, x2, x3, cfg.integrate_dt, cfg.substeps, cfg.burn_in, cfg.K, cfg.sigma, cfg.rho, cfg.beta)
    bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
    if bad.size:
        raise FloatingPointError(f"Lorenz integration diverged at sample {bad[0]}")
    y = x + meas.standard_normal((cfg.K, 3)) * math.sqrt(cfg.r_scale)
    return Trajectory(dt=cfg.sample_dt, y=y, x=x, seed=cfg.seed)


# CSV I/O

_META = re.compile(r"^#\s*ssdkf dataset dt=(\S+) seed=(-?\d+)\s*$")


def _fmt(v: float) -> str:
    return format(v, ".17g")


def save_dataset(t: Trajectory, path) -> None:
    """CSV with header ``t,y1..yM[,x1..xN]`` preceded by a ``#`` metadata line."""
    m = t.y.shape[1]
    header = ["t"] + [f"y{i + 1}" for i in range(m)]
    if t.x is not None:
        header += [f"x{i + 1}" for i in range(t.x.shape[1])]
    with open(path, "w", newline="") as fh:
        fh.write(f"# ssdkf dataset dt={_fmt(t.dt)} seed={t.seed}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for k in range(len(t)):
            row = [_fmt(k * t.dt)] + [_fmt(v) for v in t.y[k]]
            if t.x is not None:
                row += [_fmt(v) for v in t.x[k]]
            writer.writerow(row)


def load_dataset(path) -> Trajectory:
    dt, seed = None, 0
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    start = 0
    if lines and lines[0].startswith("#"):
        match = _META.match(lines[0])
        if match:
            dt, seed = float(match.group(1)), int(match.group(2))
        start = 1
    if start >= len(lines):
        raise DatasetFormatError(f"{path}: line {start + 1}: missing header")
    header = lines[start].split(",")
    n_y = sum(1 for h in header if re.fullmatch(r"y\d+", h))
    n_x = sum(1 for h in header if re.fullmatch(r"x\d+", h))
    expected = ["t"] + [f"y{i + 1}" for i in range(n_y)] + [f"x{i + 1}" for i in range(n_x)]
    if header != expected or n_y == 0:
        raise DatasetFormatError(f"{path}: line {start + 1}: unexpected header {lines[start]!r}")
    rows = []
    for lineno, line in enumerate(lines[start + 1 :], start=start + 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise DatasetFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise DatasetFormatError(f"{path}: line {lineno}: non-numeric field") from None
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    data = np.array(rows)
    if dt is None:
        dt = float(data[1, 0] - data[0, 0]) if len(data) > 1 else 1.0
    x = data[:, 1 + n_y :] if n_x else None
    return Trajectory(dt=dt, y=data[:, 1 : 1 + n_y], x=x, seed=seed)
