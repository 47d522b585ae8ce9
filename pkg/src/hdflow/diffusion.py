"""Denoising diffusion over flat latent vectors with classifier-free and energy guidance.

Diffusion steps are 1-based: ``l = 1..L`` with ``alpha_bar(0) = 1``. A sampler
run visits a strided subset of steps; each update goes from ``l`` to the
previous visited step ``l_prev`` using the closed-form Gaussian posterior of
the respaced chain (identical to the single-step posterior when
``l_prev = l - 1``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import neural as nn
from .core import PcaBasis, RngStream, knn, pca_basis, project_affine

log = logging.getLogger(__name__)

TWEEDIE_MIN_ALPHA_BAR = 1e-8


class SamplingError(FloatingPointError):
    """Non-finite iterate inside a sampler; ``step`` is the diffusion step index."""

    def __init__(self, msg: str, step: int):
        super().__init__(f"{msg} (step {step})")
        self.step = step


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 1 or len(b) == 0 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "_abar", np.concatenate([[1.0], np.cumprod(1.0 - b)]))

    @property
    def L(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[l-1]`` for ``l = 1..L``."""
        return self._abar[1:]

    @property
    def posterior_var(self) -> np.ndarray:
        a = self._abar
        return self.beta * (1.0 - a[:-1]) / (1.0 - a[1:])

    def abar(self, l) -> np.ndarray:
        """``alpha_bar`` at step(s) ``l`` in ``0..L``."""
        return self._abar[np.asarray(l)]

    def check_step(self, l: int) -> None:
        if not 1 <= int(l) <= self.L:
            raise ValueError(f"diffusion step {l} outside 1..{self.L}")


def make_schedule(L: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if L < 1:
        raise ValueError("need at least one diffusion step")
    if L == 1:
        return NoiseSchedule(np.array([beta_start]))
    return NoiseSchedule(np.linspace(beta_start, beta_end, L))


def strided_steps(L: int, n: int) -> np.ndarray:
    """``n`` evenly spaced steps in ``1..L``, descending, always ending at the smallest."""
    if not 1 <= n <= L:
        raise ValueError(f"sample_steps={n} must lie in 1..{L}")
    steps = np.unique(np.round(np.arange(1, n + 1) * L / n).astype(int))
    return steps[::-1]


def forward_diffuse(x0, l: int, eps, sched: NoiseSchedule) -> np.ndarray:
    sched.check_step(l)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != {x0.shape}")
    a = sched.abar(l)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def single_step_diffuse(x_prev, l: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """One transition ``q(x_l | x_{l-1})``."""
    b = sched.beta[l - 1]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * eps


def reverse_moments(x, eps_hat, l: int, sched: NoiseSchedule, l_prev: int | None = None):
    """Mean and scalar variance of the reverse transition from ``l`` to ``l_prev``."""
    sched.check_step(l)
    l_prev = l - 1 if l_prev is None else int(l_prev)
    if not 0 <= l_prev < l:
        raise ValueError(f"l_prev={l_prev} must lie in 0..{l - 1}")
    a_t, a_p = sched.abar(l), sched.abar(l_prev)
    alpha = a_t / a_p
    beta = 1.0 - alpha
    mu = (np.asarray(x) - beta / np.sqrt(1.0 - a_t) * np.asarray(eps_hat)) / np.sqrt(alpha)
    var = beta * (1.0 - a_p) / (1.0 - a_t)
    return mu, float(var)


def tweedie(x, eps_hat, l: int, sched: NoiseSchedule) -> np.ndarray:
    sched.check_step(l)
    a = sched.abar(l)
    if a < TWEEDIE_MIN_ALPHA_BAR:
        raise ValueError(f"alpha_bar({l})={a:.3g} too small for a denoised estimate")
    return (np.asarray(x) - np.sqrt(1.0 - a) * np.asarray(eps_hat)) / np.sqrt(a)


def net_time(l, sched: NoiseSchedule):
    return np.asarray(l, dtype=np.float64) / sched.L


def tweedie_denoise(net: nn.ConditionalMlp, x, l: int, c, sched: NoiseSchedule) -> np.ndarray:
    return tweedie(x, net(x, net_time(l, sched), c), l, sched)


def cfg_combine(eps_c, eps_null, w_cfg: float) -> np.ndarray:
    # exact at w = 0 and w = 1
    if w_cfg == 1.0:
        return np.asarray(eps_c, dtype=np.float64).copy()
    if w_cfg == 0.0:
        return np.asarray(eps_null, dtype=np.float64).copy()
    return eps_null + w_cfg * (eps_c - eps_null)


def cfg_epsilon(net: nn.ConditionalMlp, x, l: int, c, w_cfg: float, sched: NoiseSchedule) -> tuple[np.ndarray, int]:
    """Guided noise estimate and the number of network evaluations used."""
    t = net_time(l, sched)
    if w_cfg == 1.0:
        return net(x, t, c, False), 1
    if w_cfg == 0.0:
        return net(x, t, c, True), 1
    x2 = np.atleast_2d(x)
    n = x2.shape[0]
    both = net(np.concatenate([x2, x2]), t, np.concatenate([np.broadcast_to(c, (n, len(c)))] * 2),
               np.concatenate([np.zeros(n), np.ones(n)]))
    out = cfg_combine(both[:n], both[n:], w_cfg)
    return out.reshape(np.shape(x)), 2


def ddpm_loss_grad(net: nn.ConditionalMlp, x0: np.ndarray, c: np.ndarray, sched: NoiseSchedule, rng: RngStream,
                   p_uncond: float = 0.1) -> tuple[float, np.ndarray]:
    """Noise-prediction loss on a batch with random steps and context drop-out."""
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    l = rng.integers(1, sched.L + 1, size=n)
    eps = rng.normal(size=x0.shape)
    null = rng.uniform(size=n) < p_uncond
    a = sched.abar(l)[:, None]
    xl = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
    return net.regression_grad(xl, net_time(l, sched), c, null, eps)


# --- energy model -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnergyModel:
    """Scalar energy ``E(x | c)`` as an MLP over ``[x, c]``."""

    params: nn.ParamSet

    @classmethod
    def create(cls, x_dim: int, c_dim: int, hidden: tuple[int, ...], rng: RngStream) -> "EnergyModel":
        return cls(nn.init_params(nn.MlpSpec((x_dim + c_dim, *hidden, 1)), rng))

    def _in(self, x, c):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        c = np.broadcast_to(np.asarray(c, dtype=np.float64), (x.shape[0], np.shape(c)[-1]))
        return np.concatenate([x, c], axis=1)

    def energy(self, x, c) -> np.ndarray:
        return nn.forward(self.params, self._in(x, c))[:, 0]

    def grad_x(self, x, c) -> np.ndarray:
        """Exact input gradient of the energy, same shape as ``x``."""
        xin = self._in(x, c)
        _, cache = nn.forward_cache(self.params, xin)
        _, gx = nn.backward(self.params, cache, np.ones((xin.shape[0], 1)))
        d = np.shape(x)[-1]
        return gx[:, :d].reshape(np.shape(x))


def ebm_loss(ebm: EnergyModel, pos, neg, c) -> float:
    pos, neg = np.atleast_2d(pos), np.atleast_2d(neg)
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ValueError("ebm_loss needs non-empty positive and negative sets")
    margin = ebm.energy(pos, c) - ebm.energy(neg, c)
    return float(np.mean(np.logaddexp(0.0, margin)))


def ebm_loss_grad(ebm: EnergyModel, pos, neg, c) -> tuple[float, np.ndarray]:
    n = pos.shape[0]
    xin = np.concatenate([ebm._in(pos, c), ebm._in(neg, c)])
    e, cache = nn.forward_cache(ebm.params, xin)
    margin = e[:n, 0] - e[n:, 0]
    s = np.exp(-np.logaddexp(0.0, -margin))  # sigmoid(margin)
    dy = np.concatenate([s, -s])[:, None] / n
    g, _ = nn.backward(ebm.params, cache, dy, need_input_grad=False)
    return float(np.mean(np.logaddexp(0.0, margin))), g


# --- guided sampling ----------------------------------------------------------


@dataclass
class GuidanceConfig:
    w_cfg: float = 2.0
    w_ebm: float = 0.1
    ebm_sign: float = -1.0  # -1 moves the mean down the energy gradient
    projection_window: tuple[int, int] | None = (333, 667)  # diffusion steps, inclusive; None = off
    k_neighbors: int = 10
    variance_retention: float = 0.99
    sample_steps: int = 100

    def __post_init__(self):
        if self.w_cfg < 0 or self.w_ebm < 0:
            raise ValueError("guidance scales must be non-negative")
        if self.projection_window is not None:
            lo, hi = (int(v) for v in self.projection_window)
            if not 1 <= lo <= hi:
                raise ValueError(f"invalid projection window {self.projection_window}")
            self.projection_window = (lo, hi)
        if self.sample_steps < 1 or self.k_neighbors < 1:
            raise ValueError("sample_steps and k_neighbors must be positive")

    def in_window(self, l: int) -> bool:
        if self.projection_window is None:
            return False
        lo, hi = self.projection_window
        return lo <= l <= hi


@dataclass
class Counters:
    """Network evaluations and wall-clock per planner stage."""

    nfe: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def add(self, key: str, n: int = 1) -> None:
        self.nfe[key] = self.nfe.get(key, 0) + n

    def add_time(self, key: str, s: float) -> None:
        self.seconds[key] = self.seconds.get(key, 0.0) + s


class ManifoldIndex:
    """Clean successful sequences used for local-PCA projection of sampler iterates."""

    def __init__(self, sequences):
        seq = np.asarray(sequences, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[0] == 0:
            raise ValueError("manifold index needs a non-empty (n, D) array")
        self.sequences = seq
        self.norms = np.linalg.norm(seq, axis=1)

    def __len__(self) -> int:
        return self.sequences.shape[0]

    @property
    def dim(self) -> int:
        return self.sequences.shape[1]

    def neighbors(self, query, k: int) -> np.ndarray:
        if k > len(self):
            raise ValueError(f"k={k} exceeds index size {len(self)}")
        return self.sequences[knn(query, self.sequences, k, "cosine", self.norms)]

    def local_basis(self, query, k: int, retention: float, l: int, sched: NoiseSchedule, eps) -> PcaBasis:
        nb = self.neighbors(query, k)
        if l > 0:
            a = sched.abar(l)
            nb = np.sqrt(a) * nb + np.sqrt(1.0 - a) * eps  # one noise draw shared by all neighbours
        return pca_basis(nb, retention)


def manifold_project_step(index: ManifoldIndex, x_temp, l_prev: int, c, net: nn.ConditionalMlp,
                          gcfg: GuidanceConfig, sched: NoiseSchedule, rng: RngStream,
                          counters: Counters | None = None) -> np.ndarray:
    """Project an iterate at step ``l_prev`` onto the local tangent plane of diffused neighbours."""
    if not gcfg.in_window(l_prev) or l_prev < 1:
        return x_temp
    x_temp = np.asarray(x_temp, dtype=np.float64)
    z0_hat = tweedie_denoise(net, x_temp, l_prev, c, sched)
    if counters is not None:
        counters.add("hl_proj")
    eps = rng.normal(size=x_temp.shape)
    try:
        basis = index.local_basis(z0_hat, gcfg.k_neighbors, gcfg.variance_retention, l_prev, sched, eps)
    except ValueError as exc:  # zero-norm Tweedie estimate
        log.warning("projection skipped at step %d: %s", l_prev, exc)
        return x_temp
    if basis.rank == 0:
        log.warning("rank-0 neighbour basis at step %d; projecting to neighbour mean", l_prev)
        if counters is not None:
            counters.events.append(("rank0_projection", l_prev))
    return project_affine(x_temp, basis)


def guided_step(net: nn.ConditionalMlp, ebm: EnergyModel | None, x, l: int, l_prev: int, c,
                gcfg: GuidanceConfig, sched: NoiseSchedule, noise, counters: Counters | None = None) -> np.ndarray:
    eps_hat, nfe = cfg_epsilon(net, x, l, c, gcfg.w_cfg, sched)
    mu, var = reverse_moments(x, eps_hat, l, sched, l_prev)
    if ebm is not None and gcfg.w_ebm != 0.0:
        mu = mu + gcfg.ebm_sign * gcfg.w_ebm * var * ebm.grad_x(x, c)
        if counters is not None:
            counters.add("hl_ebm")
    if counters is not None:
        counters.add("hl", nfe)
    return mu + np.sqrt(var) * noise


def sample(net: nn.ConditionalMlp, c, gcfg: GuidanceConfig, sched: NoiseSchedule, rng: RngStream,
           ebm: EnergyModel | None = None, index: ManifoldIndex | None = None,
           counters: Counters | None = None, x_init=None) -> np.ndarray:
    """Strided ancestral sampling of one vector of dimension ``net.x_dim``."""
    steps = strided_steps(sched.L, gcfg.sample_steps)
    x = rng.normal(size=net.x_dim) if x_init is None else np.asarray(x_init, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    for j, l in enumerate(steps):
        l_prev = int(steps[j + 1]) if j + 1 < len(steps) else 0
        noise = rng.normal(size=x.shape)
        x = guided_step(net, ebm, x, int(l), l_prev, c, gcfg, sched, noise, counters)
        if index is not None:
            x = manifold_project_step(index, x, l_prev, c, net, gcfg, sched, rng, counters)
        if not np.all(np.isfinite(x)):
            raise SamplingError("non-finite sampler iterate", int(l))
    return x


def reference_sample(net: nn.ConditionalMlp, c, sched: NoiseSchedule, rng: RngStream, sample_steps: int) -> np.ndarray:
    """Plain conditional ancestral sampler with the same noise-draw order as :func:`sample`."""
    steps = strided_steps(sched.L, sample_steps)
    x = rng.normal(size=net.x_dim)
    for j, l in enumerate(steps):
        l_prev = int(steps[j + 1]) if j + 1 < len(steps) else 0
        noise = rng.normal(size=x.shape)
        a_t, a_p = sched.abar(l), sched.abar(l_prev)
        alpha = a_t / a_p
        beta = 1.0 - alpha
        eps = net(x, net_time(l, sched), c)
        mean = (x - beta / np.sqrt(1.0 - a_t) * eps) / np.sqrt(alpha)
        x = mean + np.sqrt(beta * (1.0 - a_p) / (1.0 - a_t)) * noise
    return x
