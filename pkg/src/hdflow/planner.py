"""Stage 2: hierarchical planner training and closed-loop deployment.

Planners work in standardised latent coordinates (per-dimension mean and
standard deviation of the exported latents); the inverse-dynamics model and
the environment see raw latents. Segments hold ``H + 1`` latent states, both
endpoints included, so they span the ``H`` actions between consecutive
subgoals.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffusion as dm
from . import flow as fl
from . import neural as nn
from .core import RngStream, pca_basis, project_affine
from .maze import Action, MazeSpec, env_reset, env_step, is_success
from .world_model import LatentFilter, LatentRecord, WorldModelParams, decode_position, encode_goal, idm_predict

log = logging.getLogger(__name__)

VARIANTS = ("hdflow", "hf", "hd", "fd")
# flow fields are integrated in continuous time, so their time features stay smooth over [0, 1]
FLOW_EMBEDDING = nn.TimeEmbedding(32, 30.0)


class IncompatibleComponentsError(ValueError):
    """Components were built on different world models."""


@dataclass
class PlannerConfig:
    H: int = 10
    K: int = 5
    replan_every: int = 5
    max_env_steps: int = 200
    variant: str = "hdflow"
    lambda_hl: float = 1.0
    lambda_ll: float = 1.0
    lambda_ebm: float = 0.1
    lambda_proj: float = 0.05
    iterations: int = 12000
    batch_size: int = 64
    lr: float = 1e-3
    hidden: tuple[int, ...] = (256, 256)
    ebm_hidden: tuple[int, ...] = (128, 128)
    p_uncond: float = 0.1
    start_stride: int = 1  # offsets between augmented training windows, in env steps
    proj_every: int = 20  # iterations between projection-loss updates
    proj_warmup: float = 0.5  # fraction of iterations before the projection term switches on
    proj_batch: int = 4
    proj_sample_steps: int = 10
    log_every: int = 200  # iterations per logged epoch
    closed_loop_idm: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.ebm_hidden = tuple(int(h) for h in self.ebm_hidden)
        if self.H < 2 or self.K < 1 or self.replan_every < 1:
            raise ValueError("need H >= 2, K >= 1, replan_every >= 1")
        if self.replan_every > self.H:
            raise ValueError("replan_every cannot exceed the segment's H actions")
        if min(self.lambda_hl, self.lambda_ll, self.lambda_ebm, self.lambda_proj) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class LatentNorm:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, records: list[LatentRecord]) -> "LatentNorm":
        z = np.concatenate([r.z for r in records])
        return cls(z.mean(axis=0), np.maximum(z.std(axis=0), 1e-6))

    def to(self, z):
        return (np.asarray(z) - self.mean) / self.std

    def back(self, z):
        return np.asarray(z) * self.std + self.mean


# --- datasets ---------------------------------------------------------------


@dataclass
class SubgoalDataset:
    sequences: np.ndarray  # (n, K_max, d_z), padded with zeros
    mask: np.ndarray  # (n, K_max)
    contexts: np.ndarray  # (n, 2 d_z)
    success: np.ndarray
    K: np.ndarray
    skipped: int


def build_subgoal_dataset(records: list[LatentRecord], H: int) -> SubgoalDataset:
    """One variable-length subgoal sequence per record: ``K = T // H`` subgoals at ``k H``."""
    keep = [r for r in records if r.T >= H]
    if not keep:
        raise ValueError("no record is long enough for one subgoal")
    d = keep[0].z.shape[1]
    Ks = np.array([r.T // H for r in keep])
    km = int(Ks.max())
    seq = np.zeros((len(keep), km, d))
    mask = np.zeros((len(keep), km), dtype=bool)
    ctx = np.zeros((len(keep), 2 * d))
    for i, r in enumerate(keep):
        idx = H * np.arange(1, Ks[i] + 1)
        seq[i, : Ks[i]] = r.z[idx]
        mask[i, : Ks[i]] = True
        ctx[i] = np.concatenate([r.z[0], r.z[-1]])
    return SubgoalDataset(seq, mask, ctx, np.array([r.success for r in keep]), Ks, len(records) - len(keep))


def build_flow_pairs(records: list[LatentRecord], H: int):
    """Non-overlapping ``H + 1``-state segments of successful records with their endpoint contexts."""
    pairs, skipped = [], 0
    for r in records:
        if not r.success:
            continue
        if r.T < H:
            skipped += 1
            continue
        for k in range(1, r.T // H + 1):
            tau = r.z[(k - 1) * H : k * H + 1]
            pairs.append((tau.copy(), (tau[0].copy(), tau[-1].copy())))
    return pairs, skipped


def _windows(z: np.ndarray, starts: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """``z[min(s + o, T)]`` for every start and offset: shape ``(len(starts), len(offsets), d)``."""
    T = z.shape[0] - 1
    return z[np.minimum(starts[:, None] + offsets[None, :], T)]


def augmented_sets(records: list[LatentRecord], norm: LatentNorm, H: int, K: int, stride: int, kind: str):
    """Fixed-shape training windows starting at every ``stride``-th step (normalised).

    ``kind`` is ``"subgoals"`` (K states at s + kH), ``"segment"`` (H + 1 states
    from s) or ``"dense"`` (K H + 1 states from s). Indices past the end repeat
    the final latent. Returns ``(X, C)`` with contexts ``(z_s, z_goal)`` for
    subgoal/dense windows (``z_goal`` is the record's encoded goal
    observation, as at deployment) and ``(z_s, z_{s+H})`` for segments.
    """
    offs = {
        "subgoals": H * np.arange(1, K + 1),
        "segment": np.arange(H + 1),
        "dense": np.arange(K * H + 1),
    }[kind]
    xs, cs = [], []
    for r in records:
        z = norm.to(r.z)
        starts = np.arange(0, r.T, stride)
        if len(starts) == 0:
            continue
        w = _windows(z, starts, offs)
        xs.append(w.reshape(len(starts), -1))
        end = w[:, -1] if kind == "segment" else np.broadcast_to(norm.to(r.z_goal), (len(starts), z.shape[1]))
        cs.append(np.concatenate([z[starts], end], axis=1))
    if not xs:
        raise ValueError("no training windows")
    return np.concatenate(xs), np.concatenate(cs)


# --- planner object ---------------------------------------------------------


@dataclass(eq=False)
class Planner:
    variant: str
    pcfg: PlannerConfig
    gcfg: dm.GuidanceConfig
    fcfg: fl.FlowConfig
    sched: dm.NoiseSchedule
    norm: LatentNorm
    d_z: int
    hl: nn.ConditionalMlp
    ll: nn.ConditionalMlp | None
    ebm: dm.EnergyModel | None
    index: dm.ManifoldIndex | None
    wm_checksum: str

    @property
    def segment_states(self) -> int:
        return self.pcfg.H + 1

    def _plain_gcfg(self) -> dm.GuidanceConfig:
        return replace(self.gcfg, w_ebm=0.0, projection_window=None)

    def plan(self, z_curr, z_goal, rng: RngStream, counters: dm.Counters | None = None):
        """Latent states to track from ``z_curr`` (raw coordinates) and the chosen subgoal."""
        counters = counters if counters is not None else dm.Counters()
        zc, zg = self.norm.to(z_curr), self.norm.to(z_goal)
        c = np.concatenate([zc, zg])
        t0 = time.perf_counter()
        if self.variant == "fd":
            x = dm.sample(self.hl, c, self._plain_gcfg(), self.sched, rng.child(0), counters=counters)
            counters.add_time("hl", time.perf_counter() - t0)
            dense = x.reshape(-1, self.d_z)
            dense[0] = zc
            sub = dense[min(self.pcfg.H, len(dense) - 1)]
            return self.norm.back(dense[: self.segment_states]), self.norm.back(sub)
        if self.variant == "hf":
            x, st = fl.sample_flow(self.hl, c, self.fcfg, rng.child(0))
            counters.add("hl", st.nfe)
        else:
            x = dm.sample(self.hl, c, self.gcfg, self.sched, rng.child(0), ebm=self.ebm, index=self.index,
                          counters=counters)
        sub = x.reshape(-1, self.d_z)[0]
        t1 = time.perf_counter()
        counters.add_time("hl", t1 - t0)
        if self.variant == "hd":
            llc = replace(self._plain_gcfg(), w_cfg=self.gcfg.w_cfg, sample_steps=self.gcfg.sample_steps)
            ll_counter = dm.Counters()
            y = dm.sample(self.ll, np.concatenate([zc, sub]), llc, self.sched, rng.child(1), counters=ll_counter)
            counters.add("ll", ll_counter.nfe.get("hl", 0))
            seg = y.reshape(-1, self.d_z)
            seg[0], seg[-1] = zc, sub
        else:
            seg, st = fl.generate_segment(self.ll, zc, sub, self.fcfg, rng.child(1), self.d_z)
            counters.add("ll", st.nfe)
        counters.add_time("ll", time.perf_counter() - t1)
        return self.norm.back(seg), self.norm.back(sub)


# --- training ---------------------------------------------------------------


def _check_records(records: list[LatentRecord]):
    if not records:
        raise ValueError("empty latent dataset")
    succ = [r for r in records if r.success]
    if not succ:
        raise ValueError("latent dataset has no successful records")
    return succ, [r for r in records if not r.success]


def projection_loss_grad(net: nn.ConditionalMlp, index: dm.ManifoldIndex, contexts: np.ndarray,
                         sched: dm.NoiseSchedule, rng: RngStream, sample_steps: int, k: int,
                         retention: float) -> tuple[float, np.ndarray]:
    """Mean squared distance of sampled sequences from the clean-neighbour PCA plane.

    Sampling runs with guidance off. The gradient flows only through the
    last noise prediction (the final denoising step equals its Tweedie
    estimate); the earlier iterates and the local basis are held fixed.
    """
    steps = dm.strided_steps(sched.L, sample_steps)
    gcfg = dm.GuidanceConfig(w_cfg=1.0, w_ebm=0.0, projection_window=None, sample_steps=sample_steps)
    n = contexts.shape[0]
    xs = []
    for i in range(n):
        r = rng.child(i)
        x = r.normal(size=net.x_dim)
        for j, l in enumerate(steps[:-1]):
            x = dm.guided_step(net, None, x, int(l), int(steps[j + 1]), contexts[i], gcfg, sched, r.normal(size=x.shape))
        xs.append(x)
    xs = np.array(xs)
    l1 = int(steps[-1])
    a = sched.abar(l1)
    out, cache = nn.forward_cache(net.params, net.inputs(xs, dm.net_time(l1, sched), contexts, np.zeros(n)))
    x0 = (xs - np.sqrt(1 - a) * out) / np.sqrt(a)
    resid = np.empty_like(x0)
    for i in range(n):
        basis = pca_basis(index.neighbors(x0[i], k), retention)
        resid[i] = x0[i] - project_affine(x0[i], basis)
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    d_out = -np.sqrt(1 - a) / np.sqrt(a) * 2.0 * resid / n
    g, _ = nn.backward(net.params, cache, d_out, need_input_grad=False)
    return loss, g


def projection_loss(sequences, index: dm.ManifoldIndex, k: int, retention: float) -> float:
    """Mean squared residual of ``sequences`` against their clean-neighbour PCA planes."""
    seq = np.atleast_2d(sequences)
    res = []
    for x in seq:
        basis = pca_basis(index.neighbors(x, k), retention)
        res.append(np.sum((x - project_affine(x, basis)) ** 2))
    return float(np.mean(res))


def train_planner(records: list[LatentRecord], wm_checksum: str, pcfg: PlannerConfig, gcfg: dm.GuidanceConfig,
                  fcfg: fl.FlowConfig, rng: RngStream, sched: dm.NoiseSchedule | None = None):
    """Train every stage-2 network of ``pcfg.variant``. Returns ``(planner, curves)``."""
    sched = sched or dm.make_schedule()
    succ, fail = _check_records(records)
    d_z = records[0].z.shape[1]
    norm = LatentNorm.fit(records)
    H, K, v = pcfg.H, pcfg.K, pcfg.variant
    dense = v == "fd"
    hl_kind = "dense" if dense else "subgoals"
    Xh, Ch = augmented_sets(succ, norm, H, K, pcfg.start_stride, hl_kind)
    use_ebm = v in ("hdflow", "hd") and pcfg.lambda_ebm > 0 and gcfg.w_ebm >= 0 and bool(fail)
    use_proj = v in ("hdflow", "hd") and pcfg.lambda_proj > 0
    if v in ("hdflow", "hd") and pcfg.lambda_ebm > 0 and not fail:
        log.warning("no failed records; energy model not trained")
    Xf = augmented_sets(fail, norm, H, K, pcfg.start_stride, hl_kind)[0] if use_ebm else None
    Xl, Cl = (None, None) if dense else augmented_sets(succ, norm, H, K, pcfg.start_stride, "segment")

    hl_emb = FLOW_EMBEDDING if v == "hf" else nn.TimeEmbedding()
    ll_emb = nn.TimeEmbedding() if v == "hd" else FLOW_EMBEDDING
    hl = nn.ConditionalMlp.create(Xh.shape[1], 2 * d_z, pcfg.hidden, rng.child(0), hl_emb)
    ll = None if dense else nn.ConditionalMlp.create(Xl.shape[1], 2 * d_z, pcfg.hidden, rng.child(1), ll_emb)
    ebm = dm.EnergyModel.create(Xh.shape[1], 2 * d_z, pcfg.ebm_hidden, rng.child(2)) if use_ebm else None
    index = None if dense or v == "hf" else dm.ManifoldIndex(np.unique(Xh, axis=0))

    nets = {"hl": hl.params}
    if ll is not None:
        nets["ll"] = ll.params
    if ebm is not None:
        nets["ebm"] = ebm.params
    opts = {k: nn.AdamState.for_params(p, lr=pcfg.lr) for k, p in nets.items()}
    r = rng.child(3)
    rp = rng.child(4)  # separate stream so the projection term leaves the other batches unchanged
    curves, acc = [], {}
    B = pcfg.batch_size
    for it in range(pcfg.iterations):
        grads, terms = {}, {}
        i = r.integers(0, len(Xh), size=B)
        if pcfg.lambda_hl > 0:
            if v == "hf":
                loss, g = fl.flow_loss_grad(hl, Xh[i], Ch[i], r)
            else:
                loss, g = dm.ddpm_loss_grad(hl, Xh[i], Ch[i], sched, r, pcfg.p_uncond)
            terms["hl"] = loss
            grads["hl"] = pcfg.lambda_hl * g
        if ll is not None and pcfg.lambda_ll > 0:
            j = r.integers(0, len(Xl), size=B)
            if v == "hd":
                loss, g = dm.ddpm_loss_grad(ll, Xl[j], Cl[j], sched, r, pcfg.p_uncond)
            else:
                loss, g = fl.flow_loss_grad(ll, Xl[j], Cl[j], r)
            terms["ll"] = loss
            grads["ll"] = pcfg.lambda_ll * g
        if ebm is not None:
            jn = r.integers(0, len(Xf), size=B)
            loss, g = dm.ebm_loss_grad(ebm, Xh[i], Xf[jn], Ch[i])
            terms["ebm"] = loss
            grads["ebm"] = pcfg.lambda_ebm * g
        if use_proj and it >= pcfg.proj_warmup * pcfg.iterations and it % pcfg.proj_every == 0:
            jp = rp.integers(0, len(Ch), size=pcfg.proj_batch)
            loss, g = projection_loss_grad(hl, index, Ch[jp], sched, rp.child(it), pcfg.proj_sample_steps,
                                           gcfg.k_neighbors, gcfg.variance_retention)
            terms["proj"] = loss
            grads["hl"] = grads.get("hl", 0.0) + pcfg.lambda_proj * g
        for name, val in terms.items():
            if not np.isfinite(val):
                raise FloatingPointError(f"non-finite {name} loss at iteration {it}")
            acc.setdefault(name, []).append(val)
        for name, g in grads.items():
            opts[name], nets[name] = nn.adam_step(opts[name], nets[name], g)
        hl = hl.with_params(nets["hl"])
        if ll is not None:
            ll = ll.with_params(nets["ll"])
        if ebm is not None:
            ebm = dm.EnergyModel(nets["ebm"])
        if (it + 1) % pcfg.log_every == 0 or it + 1 == pcfg.iterations:
            row = {k: float(np.mean(vals)) for k, vals in acc.items()}
            row["iteration"] = it + 1
            curves.append(row)
            log.info("planner %s %s", v, {k: round(x, 5) for k, x in row.items()})
            acc = {}
    planner = Planner(v, pcfg, gcfg, fcfg, sched, norm, d_z, hl, ll, ebm, index, wm_checksum)
    return planner, curves


# --- deployment -------------------------------------------------------------


def actions_from_segment(wm: WorldModelParams, seg) -> list[Action]:
    seg = np.asarray(seg, dtype=np.float64)
    raw = idm_predict(wm, seg[:-1], seg[1:])
    return [Action(a) for a in np.clip(raw, -1.0, 1.0)]


@dataclass
class EpisodeResult:
    episode: int
    success: bool
    steps: int
    hl_ms: float
    ll_ms: float
    hl_nfe: int
    ll_nfe: int
    replans: int
    diagnostic: str = ""
    trace: list = field(default_factory=list)


class RandomPolicy:
    """Baseline that ignores the latents and emits uniform random actions."""

    def chunk(self, z, zg, wm, rng, counters, n):
        return [Action(rng.uniform(-1, 1, size=2)) for _ in range(n)], None


class PlannerPolicy:
    def __init__(self, planner: Planner):
        self.planner = planner

    def chunk(self, z, zg, wm, rng, counters, n):
        seg, sub = self.planner.plan(z, zg, rng, counters)
        return seg, sub


def mpc_rollout(maze: MazeSpec, wm: WorldModelParams, policy, pcfg: PlannerConfig, rng: RngStream,
                episode: int = 0, record_trace: bool = False) -> EpisodeResult:
    state, goal = env_reset(maze, rng.child(0))
    filt = LatentFilter(wm)
    z = filt.observe(state.position)
    zg = encode_goal(wm, goal)
    counters = dm.Counters()
    trace, replans, diag = [], 0, ""
    plan_rng = rng.child(1)
    limit = min(pcfg.max_env_steps, maze.max_episode_length)
    done = is_success(maze, state, goal)
    if record_trace:
        trace.append({"t": 0, "position": state.position.tolist(), "action": None, "latent": z.tolist(),
                      "subgoal": None, "subgoal_position": None, "goal": np.asarray(goal).tolist()})
    while not done and state.t < limit:
        try:
            plan, sub = policy.chunk(z, zg, wm, plan_rng.child(replans), counters, pcfg.replan_every)
        except (FloatingPointError, ValueError) as exc:
            diag = f"planner failure at step {state.t}: {exc}"
            log.warning(diag)
            break
        replans += 1
        for i in range(pcfg.replan_every):
            if isinstance(plan, list):
                a = plan[i]
            else:
                src = z if pcfg.closed_loop_idm else plan[i]
                a = Action(np.clip(idm_predict(wm, src[None], plan[i + 1][None])[0], -1.0, 1.0))
            state = env_step(maze, state, a)
            z = filt.observe(state.position)
            if record_trace:
                trace.append({
                    "t": state.t, "position": state.position.tolist(), "action": a.velocity.tolist(),
                    "latent": z.tolist(), "subgoal": None if sub is None else np.asarray(sub).tolist(),
                    "subgoal_position": None if sub is None else decode_position(wm, filt.h, sub)[0].tolist(),
                    "goal": np.asarray(goal).tolist(),
                })
            done = is_success(maze, state, goal)
            if done or state.t >= limit:
                break
    return EpisodeResult(
        episode, bool(done), int(state.t),
        1000 * counters.seconds.get("hl", 0.0), 1000 * counters.seconds.get("ll", 0.0),
        int(counters.nfe.get("hl", 0)), int(counters.nfe.get("ll", 0)), replans, diag, trace,
    )


@dataclass
class EvalReport:
    episodes: int
    successes: int
    success_rate: float
    mean_steps_to_success: float
    hl_ms: float
    ll_ms: float
    hl_nfe: int
    ll_nfe: int
    replans: int
    rows: list = field(default_factory=list)

    @property
    def ms_per_step(self) -> float:
        steps = sum(r.steps for r in self.rows)
        return (self.hl_ms + self.ll_ms) / max(steps, 1)


def evaluate(maze: MazeSpec, wm: WorldModelParams, policy, pcfg: PlannerConfig, n_episodes: int, rng: RngStream,
             record_trace: bool = False) -> EvalReport:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if isinstance(policy, PlannerPolicy) and policy.planner.wm_checksum != wm.checksum():
        raise IncompatibleComponentsError("planner was trained on latents of a different world model")
    rows = [mpc_rollout(maze, wm, policy, pcfg, rng.child(e), e, record_trace) for e in range(n_episodes)]
    succ = [r for r in rows if r.success]
    return EvalReport(
        n_episodes, len(succ), len(succ) / n_episodes,
        float(np.mean([r.steps for r in succ])) if succ else float("nan"),
        sum(r.hl_ms for r in rows), sum(r.ll_ms for r in rows),
        sum(r.hl_nfe for r in rows), sum(r.ll_nfe for r in rows), sum(r.replans for r in rows), rows,
    )
