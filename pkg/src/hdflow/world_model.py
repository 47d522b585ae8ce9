"""Stage 1: recurrent state-space world model with contrastive and inverse-dynamics heads.

Shapes: a batch of ``B`` observation sequences padded to ``N`` steps has
``obs`` of shape ``(B, N, 2)`` and a validity ``mask`` of shape ``(B, N)``.
Index ``i`` of the latent sequence corresponds to observation ``i``; the
recurrent state before the first observation is ``h = 0, z = 0``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import neural as nn
from .core import RngStream
from .maze import Demonstration, MazeSpec

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
GOAL_SETTLE_STEPS = 20  # filter steps on the resting goal observation
NETS = ("encoder", "recurrent", "prior_head", "posterior_head", "decoder", "proj_head", "idm")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class WmLossWeights:
    wm: float = 1.0
    idm: float = 0.1
    contrastive: float = 0.1
    temperature: float = 0.1
    negatives_per_anchor: int = 16


@dataclass
class WorldModelConfig:
    d_z: int = 8
    d_h: int = 32
    d_e: int = 32
    hidden: int = 64
    proj_dim: int = 16
    obs_scale: float = 2.0  # normalised units per cell
    kl_free_nats: float = 0.0  # 0 disables free nats
    anchor_stride: int = 10  # contrastive anchors every this many steps
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    grad_clip: float = 10.0
    weights: WmLossWeights = field(default_factory=WmLossWeights)


@dataclass(eq=False)
class WorldModelParams:
    encoder: nn.ParamSet
    recurrent: nn.ParamSet
    prior_head: nn.ParamSet
    posterior_head: nn.ParamSet
    decoder: nn.ParamSet
    proj_head: nn.ParamSet
    idm: nn.ParamSet
    obs_center: np.ndarray
    obs_scale: float

    @property
    def d_z(self) -> int:
        return self.prior_head.spec.n_out // 2

    @property
    def d_h(self) -> int:
        return self.prior_head.spec.n_in

    def nets(self) -> dict[str, nn.ParamSet]:
        return {k: getattr(self, k) for k in NETS}

    def replace_nets(self, nets: dict[str, nn.ParamSet]) -> "WorldModelParams":
        kw = self.nets()
        kw.update(nets)
        return WorldModelParams(**kw, obs_center=self.obs_center, obs_scale=self.obs_scale)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in NETS:
            h.update(name.encode())
            h.update(getattr(self, name).checksum().encode())
        h.update(np.asarray(self.obs_center, dtype="<f8").tobytes())
        h.update(np.float64(self.obs_scale).tobytes())
        return h.hexdigest()

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_center) * self.obs_scale


def init_world_model(cfg: WorldModelConfig, maze: MazeSpec, rng: RngStream) -> WorldModelParams:
    dz, dh, de, hid = cfg.d_z, cfg.d_h, cfg.d_e, cfg.hidden
    specs = {
        "encoder": nn.MlpSpec((2, hid, de)),
        "recurrent": nn.MlpSpec((dh + dz, 2 * dh)),
        "prior_head": nn.MlpSpec((dh, hid, 2 * dz)),
        "posterior_head": nn.MlpSpec((dh + de, hid, 2 * dz)),
        "decoder": nn.MlpSpec((dh + dz, hid, 2)),
        "proj_head": nn.MlpSpec((dz, hid, cfg.proj_dim)),
        "idm": nn.MlpSpec((2 * dz, hid, hid, 2)),
    }
    nets = {k: nn.init_params(s, rng.child(i)) for i, (k, s) in enumerate(specs.items())}
    return WorldModelParams(
        **nets,
        obs_center=maze.extent() / 2.0,
        obs_scale=cfg.obs_scale / maze.cell_size,
    )


@dataclass
class GaussianDiag:
    mean: np.ndarray
    log_std: np.ndarray


def encode(wm: WorldModelParams, o) -> np.ndarray:
    """Observation embedding ``e``; accepts a single observation or a batch."""
    o = np.asarray(o, dtype=np.float64)
    if o.shape[-1] != wm.encoder.spec.n_in:
        raise ValueError(f"observation dim {o.shape[-1]} != {wm.encoder.spec.n_in}")
    return nn.forward(wm.encoder, wm.normalize(o))


def kl_diag(q: GaussianDiag, p: GaussianDiag) -> np.ndarray:
    """KL(q || p) summed over the last axis."""
    vq = np.exp(2 * q.log_std)
    vp = np.exp(2 * p.log_std)
    return np.sum(p.log_std - q.log_std + (vq + (q.mean - p.mean) ** 2) / (2 * vp) - 0.5, axis=-1)


def _cell(rec: nn.ParamSet, h, z):
    x = np.concatenate([h, z], axis=-1)
    out, cache = nn.forward_cache(rec, x)
    dh = h.shape[-1]
    g = expit(out[:, dh:])
    cand = np.tanh(out[:, :dh])
    return (1 - g) * h + g * cand, (cache, g, cand, h)


def _cell_backward(rec: nn.ParamSet, cc, dh_new):
    cache, g, cand, h_prev = cc
    da = dh_new * g * (1 - cand * cand)
    dgp = dh_new * (cand - h_prev) * g * (1 - g)
    grad, dx = nn.backward(rec, cache, np.concatenate([da, dgp], axis=1))
    d = h_prev.shape[1]
    return grad, dh_new * (1 - g) + dx[:, :d], dx[:, d:]


def _split_gauss(out: np.ndarray, dz: int):
    raw = out[..., dz:]
    return out[..., :dz], np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)


@dataclass
class Rollout:
    h: np.ndarray  # (B, N, d_h)
    z: np.ndarray  # (B, N, d_z) sampled (or mean when eps = 0)
    posterior: GaussianDiag
    prior: GaussianDiag
    eps: np.ndarray
    _caches: dict = field(default_factory=dict, repr=False)


def _rollout(wm: WorldModelParams, obs: np.ndarray, eps: np.ndarray) -> Rollout:
    B, N, _ = obs.shape
    dz, dh = wm.d_z, wm.d_h
    e, enc_cache = nn.forward_cache(wm.encoder, wm.normalize(obs).reshape(B * N, -1))
    e = e.reshape(B, N, -1)
    h = np.zeros((B, dh))
    z = np.zeros((B, dz))
    H = np.empty((B, N, dh))
    Z = np.empty((B, N, dz))
    MU = np.empty((B, N, dz))
    LS = np.empty((B, N, dz))
    OK = np.empty((B, N, dz), dtype=bool)
    cell_caches, post_caches = [], []
    for i in range(N):
        h, cc = _cell(wm.recurrent, h, z)
        po, pc = nn.forward_cache(wm.posterior_head, np.concatenate([h, e[:, i]], axis=1))
        mu, ls, ok = _split_gauss(po, dz)
        z = mu + np.exp(ls) * eps[:, i]
        H[:, i], Z[:, i], MU[:, i], LS[:, i], OK[:, i] = h, z, mu, ls, ok
        cell_caches.append(cc)
        post_caches.append(pc)
    pr, prior_cache = nn.forward_cache(wm.prior_head, H.reshape(B * N, dh))
    pmu, pls, pok = _split_gauss(pr.reshape(B, N, -1), dz)
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(H))):
        raise DivergenceError("non-finite activations in world-model rollout")
    caches = dict(enc=enc_cache, cells=cell_caches, posts=post_caches, prior=prior_cache, pok=pok, ok=OK, e=e)
    return Rollout(H, Z, GaussianDiag(MU, LS), GaussianDiag(pmu, pls), eps, caches)


def rssm_rollout_posterior(wm: WorldModelParams, obs, rng: RngStream | None = None, eps=None) -> Rollout:
    """Filter a sequence (``(T, 2)``) or padded batch (``(B, N, 2)``).

    Noise comes from ``eps`` if given, else from ``rng``; with neither the
    posterior means are used (``eps = 0``).
    """
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    if eps is None:
        shape = obs.shape[:2] + (wm.d_z,)
        eps = rng.normal(size=shape) if rng is not None else np.zeros(shape)
    eps = np.asarray(eps, dtype=np.float64).reshape(obs.shape[:2] + (wm.d_z,))
    ro = _rollout(wm, obs, eps)
    if single:
        ro = Rollout(
            ro.h[0], ro.z[0],
            GaussianDiag(ro.posterior.mean[0], ro.posterior.log_std[0]),
            GaussianDiag(ro.prior.mean[0], ro.prior.log_std[0]),
            ro.eps[0], ro._caches,
        )
    return ro


def decode(wm: WorldModelParams, h, z) -> np.ndarray:
    return nn.forward(wm.decoder, np.concatenate([h, z], axis=-1))


def decode_position(wm: WorldModelParams, h, z) -> np.ndarray:
    """Decoder output mapped back to world coordinates."""
    return decode(wm, np.atleast_2d(h), np.atleast_2d(z)) / wm.obs_scale + wm.obs_center


def elbo_loss(wm: WorldModelParams, obs, rollout: Rollout) -> float:
    """Negative ELBO of one sequence: sum over steps of squared error plus KL."""
    on = wm.normalize(obs)
    recon = np.sum((on - decode(wm, rollout.h, rollout.z)) ** 2)
    return float(recon + np.sum(kl_diag(rollout.posterior, rollout.prior)))


# --- contrastive objective ---------------------------------------------------


def _cos_and_grads(u: np.ndarray, v: np.ndarray):
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    c = np.sum(u * v, axis=-1, keepdims=True) / (nu * nv)
    du = v / (nu * nv) - c * u / nu**2
    dv = u / (nu * nv) - c * v / nv**2
    return c[..., 0], du, dv


def info_nce(fa: np.ndarray, fg: np.ndarray, fn: np.ndarray, temperature: float):
    """InfoNCE over projected embeddings, positive included in the denominator.

    ``fa``, ``fg``: ``(A, p)``; ``fn``: ``(A, N, p)``. Returns the mean loss and
    its gradients w.r.t. the three inputs.
    """
    A = fa.shape[0]
    cp, dpa, dpg = _cos_and_grads(fa, fg)
    cn, dna, dnn = _cos_and_grads(fa[:, None, :], fn)
    logits = np.concatenate([cp[:, None], cn], axis=1) / temperature
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[:, 0]))
    w = np.exp(logits - lse[:, None])  # softmax weights
    gpos = (w[:, 0] - 1.0) / (temperature * A)
    gneg = w[:, 1:] / (temperature * A)
    d_fa = gpos[:, None] * dpa + np.sum(gneg[:, :, None] * dna, axis=1)
    d_fg = gpos[:, None] * dpg
    d_fn = gneg[:, :, None] * dnn
    return loss, d_fa, d_fg, d_fn


def contrastive_loss(wm: WorldModelParams, anchors, negatives, weights: WmLossWeights) -> float:
    """InfoNCE of ``anchors = [(z_k, z_G), ...]`` against ``negatives`` (``(A, N, d_z)`` or a shared pool)."""
    if len(anchors) == 0:
        raise ValueError("need at least one anchor")
    za = np.array([a for a, _ in anchors], dtype=np.float64)
    zg = np.array([g for _, g in anchors], dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if neg.size == 0:
        raise ValueError("empty negative pool")
    if neg.ndim == 2:
        neg = np.broadcast_to(neg, (len(za),) + neg.shape)
    f = lambda x: nn.forward(wm.proj_head, x)  # noqa: E731
    fn = f(neg.reshape(-1, neg.shape[-1])).reshape(neg.shape[:2] + (-1,))
    return info_nce(f(za), f(zg), fn, weights.temperature)[0]


# --- inverse dynamics --------------------------------------------------------


def idm_predict(wm: WorldModelParams, z_t, z_next) -> np.ndarray:
    return nn.forward(wm.idm, np.concatenate([z_t, z_next], axis=-1))


def idm_loss(wm: WorldModelParams, z_t, z_next, actions) -> float:
    pred = idm_predict(wm, np.atleast_2d(z_t), np.atleast_2d(z_next))
    return float(np.mean(np.sum((np.atleast_2d(actions) - pred) ** 2, axis=-1)))


# --- batched training objective ---------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray  # (B, N, 2)
    actions: np.ndarray  # (B, N-1, 2)
    mask: np.ndarray  # (B, N) valid observations
    lengths: np.ndarray  # T per sequence
    success: np.ndarray  # (B,)


def make_batch(demos: list[Demonstration]) -> Batch:
    N = max(d.T for d in demos) + 1
    B = len(demos)
    obs = np.zeros((B, N, 2))
    act = np.zeros((B, N - 1, 2))
    mask = np.zeros((B, N), dtype=bool)
    for b, d in enumerate(demos):
        n = d.T + 1
        obs[b, :n] = d.observations
        obs[b, n:] = d.observations[-1]
        act[b, : d.T] = d.actions
        mask[b, :n] = True
    lengths = np.array([d.T for d in demos])
    return Batch(obs, act, mask, lengths, np.array([d.success for d in demos]))


def _anchor_index(batch: Batch, stride: int):
    """(seq, step) pairs for anchors and their goal steps, successful sequences only."""
    rows, steps, goals = [], [], []
    for b in np.flatnonzero(batch.success):
        T = batch.lengths[b]
        for i in range(0, T, stride):
            rows.append(b)
            steps.append(i)
            goals.append(T)
    return np.array(rows, dtype=int), np.array(steps, dtype=int), np.array(goals, dtype=int)


def loss_and_grads(wm: WorldModelParams, batch: Batch, cfg: WorldModelConfig, rng: RngStream):
    """Weighted objective, its per-term values, and gradients for every network."""
    w = cfg.weights
    B, N, _ = batch.obs.shape
    dz, dh = wm.d_z, wm.d_h
    eps = rng.normal(size=(B, N, dz))
    ro = _rollout(wm, batch.obs, eps)
    c = ro._caches
    m = batch.mask.astype(np.float64)
    M = m.sum()
    grads = {k: np.zeros(v.spec.n_params) for k, v in wm.nets().items()}
    dZ = np.zeros((B, N, dz))
    dH = np.zeros((B, N, dh))
    dMU = np.zeros((B, N, dz))
    dLS = np.zeros((B, N, dz))
    terms = {}

    # reconstruction + KL
    on = wm.normalize(batch.obs)
    dec_in = np.concatenate([ro.h, ro.z], axis=-1).reshape(B * N, -1)
    o_hat, dec_cache = nn.forward_cache(wm.decoder, dec_in)
    o_hat = o_hat.reshape(B, N, -1)
    resid = on - o_hat
    recon = np.sum(resid**2, axis=-1)
    kl = kl_diag(ro.posterior, ro.prior)
    terms["recon"] = float(np.sum(recon * m) / M)
    terms["kl"] = float(np.sum(kl * m) / M)
    kl_active = kl >= cfg.kl_free_nats if cfg.kl_free_nats > 0 else np.ones_like(kl, dtype=bool)
    kl_eff = np.where(kl_active, kl, cfg.kl_free_nats)
    terms["wm"] = float(np.sum((recon + kl_eff) * m) / M)
    total = w.wm * terms["wm"]
    if w.wm != 0.0:
        scale = w.wm * m / M
        g_dec, d_in = nn.backward(wm.decoder, dec_cache, (-2.0 * resid * scale[..., None]).reshape(B * N, -1))
        grads["decoder"] += g_dec
        d_in = d_in.reshape(B, N, -1)
        dH += d_in[..., :dh]
        dZ += d_in[..., dh:]
        q, p = ro.posterior, ro.prior
        vq, vp = np.exp(2 * q.log_std), np.exp(2 * p.log_std)
        diff = q.mean - p.mean
        ks = (scale * kl_active)[..., None]
        dMU += ks * diff / vp
        dLS += ks * (vq / vp - 1.0)
        d_pmu = -ks * diff / vp
        d_pls = ks * (1.0 - (vq + diff**2) / vp) * c["pok"]
        g_pr, d_h_pr = nn.backward(wm.prior_head, c["prior"], np.concatenate([d_pmu, d_pls], -1).reshape(B * N, -1))
        grads["prior_head"] += g_pr
        dH += d_h_pr.reshape(B, N, dh)

    mu = ro.posterior.mean
    # inverse dynamics on consecutive posterior means
    tm = batch.mask[:, 1:]
    n_tr = tm.sum()
    x_idm = np.concatenate([mu[:, :-1], mu[:, 1:]], axis=-1).reshape(-1, 2 * dz)
    pred, idm_cache = nn.forward_cache(wm.idm, x_idm)
    pred = pred.reshape(B, N - 1, 2)
    r_idm = (batch.actions - pred) * tm[..., None]
    terms["idm"] = float(np.sum(r_idm**2) / n_tr)
    total += w.idm * terms["idm"]
    if w.idm != 0.0:
        g_idm, d_x = nn.backward(wm.idm, idm_cache, (-2.0 * w.idm / n_tr * r_idm).reshape(-1, 2))
        grads["idm"] += g_idm
        d_x = d_x.reshape(B, N - 1, 2 * dz)
        dMU[:, :-1] += d_x[..., :dz]
        dMU[:, 1:] += d_x[..., dz:]

    # contrastive: successful anchors vs latents of failed sequences
    terms["contrastive"] = 0.0
    if w.contrastive != 0.0:
        rows, steps, gsteps = _anchor_index(batch, cfg.anchor_stride)
        fail_rows, fail_steps = np.nonzero(batch.mask & ~batch.success[:, None])
        if len(rows) and len(fail_rows):
            A, K = len(rows), w.negatives_per_anchor
            pick = rng.integers(0, len(fail_rows), size=(A, K))
            nr, ns = fail_rows[pick], fail_steps[pick]
            allz = np.concatenate([mu[rows, steps], mu[rows, gsteps], mu[nr, ns].reshape(A * K, dz)])
            fz, pcache = nn.forward_cache(wm.proj_head, allz)
            fa, fg, fn = fz[:A], fz[A : 2 * A], fz[2 * A :].reshape(A, K, -1)
            loss_c, d_fa, d_fg, d_fn = info_nce(fa, fg, fn, w.temperature)
            terms["contrastive"] = loss_c
            total += w.contrastive * loss_c
            d_fz = w.contrastive * np.concatenate([d_fa, d_fg, d_fn.reshape(A * K, -1)])
            g_p, d_z = nn.backward(wm.proj_head, pcache, d_fz)
            grads["proj_head"] += g_p
            np.add.at(dMU, (rows, steps), d_z[:A])
            np.add.at(dMU, (rows, gsteps), d_z[A : 2 * A])
            np.add.at(dMU, (nr.ravel(), ns.ravel()), d_z[2 * A :])
        elif not len(fail_rows):
            log.debug("batch has no failed sequences; contrastive term skipped")

    # backprop through time
    ls, ok, e = ro.posterior.log_std, c["ok"], c["e"]
    de = np.zeros_like(e)
    dz_carry = np.zeros((B, dz))
    dh_carry = np.zeros((B, dh))
    for i in range(N - 1, -1, -1):
        dz_i = dZ[:, i] + dz_carry
        dmu = dMU[:, i] + dz_i
        dls = (dLS[:, i] + dz_i * np.exp(ls[:, i]) * eps[:, i]) * ok[:, i]
        g_post, d_pin = nn.backward(wm.posterior_head, c["posts"][i], np.concatenate([dmu, dls], axis=1))
        grads["posterior_head"] += g_post
        de[:, i] = d_pin[:, dh:]
        dh_i = dH[:, i] + d_pin[:, :dh] + dh_carry
        g_rec, dh_carry, dz_carry = _cell_backward(wm.recurrent, c["cells"][i], dh_i)
        grads["recurrent"] += g_rec
    g_enc, _ = nn.backward(wm.encoder, c["enc"], de.reshape(B * N, -1), need_input_grad=False)
    grads["encoder"] += g_enc
    terms["total"] = float(total)
    return float(total), terms, grads


def _stratified_batches(demos, batch_size: int, rng: RngStream):
    succ = [i for i, d in enumerate(demos) if d.success]
    fail = [i for i, d in enumerate(demos) if not d.success]
    n_batches = max(1, int(np.ceil(len(demos) / batch_size)))
    ps = rng.permutation(len(succ))
    pf = rng.permutation(len(fail)) if fail else np.array([], dtype=int)
    s_chunks = np.array_split(ps, n_batches)
    f_chunks = np.array_split(pf, n_batches)
    for sc, fc in zip(s_chunks, f_chunks):
        idx = [succ[i] for i in sc] + [fail[i] for i in fc]
        if idx:
            yield sorted(idx)


def train_world_model(demos: list[Demonstration], maze: MazeSpec, cfg: WorldModelConfig, rng: RngStream):
    """Adam on the weighted stage-1 objective. Returns ``(params, curves)``.

    ``curves`` holds one dict of epoch-mean loss terms per epoch.
    """
    if cfg.weights.contrastive > 0 and not any(not d.success for d in demos):
        raise ValueError("contrastive training needs failed demonstrations")
    wm = init_world_model(cfg, maze, rng.child(0))
    opts = {k: nn.AdamState.for_params(p, lr=cfg.lr) for k, p in wm.nets().items()}
    curves = []
    step_rng = rng.child(1)
    for epoch in range(cfg.epochs):
        acc: dict[str, list[float]] = {}
        for idx in _stratified_batches(demos, cfg.batch_size, step_rng):
            batch = make_batch([demos[i] for i in idx])
            total, terms, grads = loss_and_grads(wm, batch, cfg, step_rng)
            if not np.isfinite(total):
                raise DivergenceError(f"non-finite world-model loss at epoch {epoch + 1}: {terms}")
            gnorm = np.sqrt(sum(float(g @ g) for g in grads.values()))
            clip = min(1.0, cfg.grad_clip / (gnorm + 1e-12)) if cfg.grad_clip > 0 else 1.0
            new = {}
            for k, p in wm.nets().items():
                opts[k], new[k] = nn.adam_step(opts[k], p, grads[k] * clip)
            wm = wm.replace_nets(new)
            for k, v in terms.items():
                acc.setdefault(k, []).append(v)
        row = {k: float(np.mean(v)) for k, v in acc.items()}
        row["epoch"] = epoch + 1
        curves.append(row)
        log.info("wm epoch %d %s", epoch + 1, {k: round(v, 5) for k, v in row.items()})
    return wm, curves


# --- frozen export -----------------------------------------------------------


@dataclass
class LatentRecord:
    z: np.ndarray  # (T+1, d_z) posterior means
    h: np.ndarray  # (T+1, d_h)
    actions: np.ndarray  # (T, 2)
    success: bool
    goal: np.ndarray
    z_goal: np.ndarray  # encoded goal observation, as used at deployment
    seed: int = 0
    maze_id: str = "maze8"

    @property
    def T(self) -> int:
        return int(self.actions.shape[0])


def export_latent_dataset(wm: WorldModelParams, demos: list[Demonstration], goal_settle_steps: int = GOAL_SETTLE_STEPS) -> list[LatentRecord]:
    """Posterior-mean latents for every demonstration (no sampling)."""
    out = []
    for d in demos:
        ro = rssm_rollout_posterior(wm, d.observations)
        zg = encode_goal(wm, d.goal, goal_settle_steps)
        out.append(LatentRecord(ro.posterior.mean.copy(), ro.h.copy(), d.actions.copy(), d.success,
                                np.asarray(d.goal, dtype=np.float64), zg, d.seed, d.maze_id))
    return out


class LatentFilter:
    """Online posterior-mean filter matching :func:`export_latent_dataset`."""

    def __init__(self, wm: WorldModelParams):
        self.wm = wm
        self.h = np.zeros((1, wm.d_h))
        self.z = np.zeros((1, wm.d_z))
        self.steps = 0

    def observe(self, o) -> np.ndarray:
        wm = self.wm
        self.h, _ = _cell(wm.recurrent, self.h, self.z)
        e = encode(wm, np.asarray(o, dtype=np.float64)[None])
        po = nn.forward(wm.posterior_head, np.concatenate([self.h, e], axis=1))
        self.z = po[:, : wm.d_z]
        self.steps += 1
        return self.z[0].copy()


def encode_goal(wm: WorldModelParams, o_goal, settle_steps: int = GOAL_SETTLE_STEPS) -> np.ndarray:
    """Goal latent: filter the goal observation held still for ``settle_steps`` steps."""
    f = LatentFilter(wm)
    z = None
    for _ in range(max(1, settle_steps)):
        z = f.observe(o_goal)
    return z


def contrastive_separation(wm: WorldModelParams, records: list[LatentRecord], stride: int = 10) -> float:
    """Mean cos-sim of projected anchors to the goal latent, successful minus failed."""
    succ = [r for r in records if r.success]
    goal = np.mean([r.z[-1] for r in succ], axis=0)
    fg = nn.forward(wm.proj_head, goal[None])[0]

    def mean_sim(recs, last_excluded):
        zs = np.concatenate([r.z[: r.T if last_excluded else r.T + 1 : stride] for r in recs])
        f = nn.forward(wm.proj_head, zs)
        return float(np.mean(f @ fg / (np.linalg.norm(f, axis=1) * np.linalg.norm(fg))))

    fail = [r for r in records if not r.success]
    return mean_sim(succ, True) - mean_sim(fail, False)


def config_dict(cfg: WorldModelConfig) -> dict:
    return asdict(cfg)
