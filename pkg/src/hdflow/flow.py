"""Rectified flow over fixed-length latent segments and the ODE integrators that sample it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neural as nn
from .core import RngStream

INTEGRATORS = ("euler", "rk4", "dopri")
DOPRI_MIN_STEP, DOPRI_MAX_STEP = 1e-4, 0.25


class StepUnderflowError(FloatingPointError):
    def __init__(self, msg: str, u: float, state: np.ndarray):
        super().__init__(msg)
        self.u = u
        self.state = state


@dataclass
class FlowConfig:
    integrator: str = "rk4"
    steps: int = 20
    rtol: float = 1e-6
    atol: float = 1e-6

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.steps < 1 or self.rtol <= 0 or self.atol <= 0:
            raise ValueError("steps must be >= 1 and tolerances > 0")


@dataclass
class OdeStats:
    nfe: int = 0
    accepted: int = 0
    rejected: int = 0


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _dopri(f, x, cfg: FlowConfig, stats: OdeStats):
    u, h = 0.0, 1.0 / cfg.steps
    k1 = f(x, u)
    stats.nfe += 1
    err_prev = 1.0
    safety, a_exp, b_exp = 0.9, 0.7 / 5, 0.4 / 5
    while u < 1.0 - 1e-12:
        h = min(h, 1.0 - u)
        ks = [k1]
        for i in range(1, 7):
            xi = x + h * sum(a * k for a, k in zip(_A[i], ks))
            ks.append(f(xi, u + _C[i] * h))
        stats.nfe += 6
        x5 = x + h * sum(b * k for b, k in zip(_B5, ks))
        x4 = x + h * sum(b * k for b, k in zip(_B4, ks))
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(x), np.abs(x5))
        err = float(np.sqrt(np.mean(((x5 - x4) / scale) ** 2)))
        if not np.isfinite(err):
            raise StepUnderflowError("non-finite error estimate", u, x)
        if err <= 1.0:
            u += h
            x = x5
            k1 = ks[6]  # first-same-as-last
            stats.accepted += 1
            fac = safety * max(err, 1e-10) ** -a_exp * err_prev**b_exp
            err_prev = max(err, 1e-4)
            h = float(np.clip(h * min(5.0, max(0.2, fac)), DOPRI_MIN_STEP, DOPRI_MAX_STEP))
        else:
            stats.rejected += 1
            if h <= DOPRI_MIN_STEP * (1 + 1e-12):
                raise StepUnderflowError(f"step size underflow at u={u:.6g}", u, x)
            fac = safety * err**-a_exp
            h = float(np.clip(h * max(0.2, fac), DOPRI_MIN_STEP, DOPRI_MAX_STEP))
    return x


def integrate_ode(v, x0, cfg: FlowConfig) -> tuple[np.ndarray, OdeStats]:
    """Integrate ``dx/du = v(x, u)`` from ``u = 0`` to ``1``."""
    x = np.asarray(x0, dtype=np.float64).copy()
    stats = OdeStats()
    if cfg.integrator == "dopri":
        return _dopri(v, x, cfg, stats), stats
    h = 1.0 / cfg.steps
    for i in range(cfg.steps):
        u = i * h
        if cfg.integrator == "euler":
            x = x + h * v(x, u)
            stats.nfe += 1
        else:
            k1 = v(x, u)
            k2 = v(x + 0.5 * h * k1, u + 0.5 * h)
            k3 = v(x + 0.5 * h * k2, u + 0.5 * h)
            k4 = v(x + h * k3, u + h)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            stats.nfe += 4
        stats.accepted += 1
    return x, stats


def flow_loss_grad(net: nn.ConditionalMlp, tau1: np.ndarray, c: np.ndarray, rng: RngStream,
                   p_uncond: float = 0.0) -> tuple[float, np.ndarray]:
    """Flow-matching loss on a batch: regress ``tau1 - tau0`` along the straight path."""
    n = tau1.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    tau0 = rng.normal(size=tau1.shape)
    u = rng.uniform(size=n)
    null = rng.uniform(size=n) < p_uncond if p_uncond > 0 else np.zeros(n, dtype=bool)
    x = (1.0 - u[:, None]) * tau0 + u[:, None] * tau1
    return net.regression_grad(x, u, c, null, tau1 - tau0)


def flow_loss(net_fn, tau1, tau0, u, c) -> float:
    """Flow-matching loss for explicit draws; ``net_fn(x, u, c)`` is any field."""
    tau1, tau0 = np.atleast_2d(tau1), np.atleast_2d(tau0)
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    x = (1.0 - u) * tau0 + u * tau1
    r = net_fn(x, u[:, 0], c) - (tau1 - tau0)
    return float(np.mean(np.sum(r * r, axis=1)))


def sample_flow(net: nn.ConditionalMlp, c, cfg: FlowConfig, rng: RngStream) -> tuple[np.ndarray, OdeStats]:
    """Integrate the learned field from a standard-normal draw."""
    c = np.asarray(c, dtype=np.float64)
    x0 = rng.normal(size=net.x_dim)
    return integrate_ode(lambda x, u: net(x, u, c), x0, cfg)


def generate_segment(net: nn.ConditionalMlp, z_prev, z_next, cfg: FlowConfig, rng: RngStream, d_z: int):
    """Segment of latent states (``(S, d_z)``) with first and last slots snapped to the context."""
    z_prev = np.asarray(z_prev, dtype=np.float64)
    z_next = np.asarray(z_next, dtype=np.float64)
    x, stats = sample_flow(net, np.concatenate([z_prev, z_next]), cfg, rng)
    seg = x.reshape(-1, d_z)
    seg[0] = z_prev
    seg[-1] = z_next
    return seg, stats
