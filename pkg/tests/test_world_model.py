import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdflow import neural as nn
from hdflow import world_model as W
from hdflow.core import RngStream
from hdflow.maze import Demonstration, MazeSpec, generate_dataset
from oracles import rel_err

SPEC = MazeSpec()
SMALL = W.WorldModelConfig(d_h=6, d_z=3, d_e=5, hidden=7, proj_dim=4, anchor_stride=3,
                           weights=W.WmLossWeights(negatives_per_anchor=3))


def _jitter(wm, seed=9):
    nets = {k: p.with_values(p.values + 0.1 * RngStream(seed + i).normal(size=p.values.shape))
            for i, (k, p) in enumerate(wm.nets().items())}
    return wm.replace_nets(nets)


def _zero(wm):
    return wm.replace_nets({k: nn.zeros_params(p.spec) for k, p in wm.nets().items()})


@pytest.fixture(scope="module")
def short_demos():
    demos = generate_dataset(SPEC, 3, 2, RngStream(1))
    return [Demonstration(d.observations[:8], d.actions[:7], d.success, d.goal, d.seed) for d in demos]


def test_encode_pure_zero_and_injective():
    wm = W.init_world_model(SMALL, SPEC, RngStream(0))
    o = np.array([1.2, 3.4])
    assert np.array_equal(W.encode(wm, o), W.encode(wm, o))
    assert not W.encode(_zero(wm), o).any()
    r = RngStream(1)
    for _ in range(100):
        a, b = r.uniform(0, 8, size=2), r.uniform(0, 8, size=2)
        assert not np.array_equal(W.encode(wm, a), W.encode(wm, b))
    with pytest.raises(ValueError):
        W.encode(wm, np.zeros(3))


def test_zero_params_single_step_rollout():
    wm = _zero(W.init_world_model(SMALL, SPEC, RngStream(0)))
    ro = W.rssm_rollout_posterior(wm, np.array([[1.0, 1.0]]), eps=np.zeros((1, SMALL.d_z)))
    assert not ro.h.any()
    assert not ro.prior.mean.any() and not ro.posterior.mean.any()
    assert not ro.prior.log_std.any() and not ro.posterior.log_std.any()


def test_rollout_seeded_and_replayable():
    wm = _jitter(W.init_world_model(SMALL, SPEC, RngStream(0)))
    obs = RngStream(2).uniform(0, 8, size=(5, 2))
    a = W.rssm_rollout_posterior(wm, obs, RngStream(3))
    b = W.rssm_rollout_posterior(wm, obs, RngStream(3))
    assert np.array_equal(a.z, b.z)
    eps = (a.z - a.posterior.mean) / np.exp(a.posterior.log_std)
    c = W.rssm_rollout_posterior(wm, obs, eps=eps)
    assert np.allclose(c.z, a.z, atol=1e-12) and np.allclose(c.h, a.h, atol=1e-12)


def test_log_std_clamped():
    wm = W.init_world_model(SMALL, SPEC, RngStream(0))
    big = wm.replace_nets({"posterior_head": wm.posterior_head.with_values(wm.posterior_head.values * 1e4)})
    ro = W.rssm_rollout_posterior(big, RngStream(1).uniform(0, 8, size=(6, 2)), RngStream(2))
    ls = ro.posterior.log_std
    assert ls.min() >= W.LOG_STD_MIN and ls.max() <= W.LOG_STD_MAX


def test_kl_closed_form():
    d = 4
    q = W.GaussianDiag(np.zeros(d), np.zeros(d))
    p = W.GaussianDiag(np.ones(d), np.zeros(d))
    assert abs(W.kl_diag(q, p) - 0.5 * d) < 1e-12
    assert W.kl_diag(q, q) == 0.0


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-2, 1), min_size=4, max_size=4))
def test_kl_non_negative(mu, ls):
    q = W.GaussianDiag(np.array(mu[:2]), np.array(ls[:2]))
    p = W.GaussianDiag(np.array(mu[2:]), np.array(ls[2:]))
    assert W.kl_diag(q, p) >= -1e-12


def test_elbo_zero_when_decoder_perfect_and_posterior_equals_prior():
    wm = _zero(W.init_world_model(SMALL, SPEC, RngStream(0)))
    obs = np.tile(wm.obs_center, (3, 1))  # normalised observation is 0, decoder outputs 0
    ro = W.rssm_rollout_posterior(wm, obs, eps=np.zeros((3, SMALL.d_z)))
    assert W.elbo_loss(wm, obs, ro) == 0.0


def _info_nce_oracle(fa, fg, fn, tau):
    out = []
    for a in range(len(fa)):
        def cos(u, v):
            return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
        pos = math.exp(cos(fa[a], fg[a]) / tau)
        den = pos + sum(math.exp(cos(fa[a], n) / tau) for n in fn[a])
        out.append(-math.log(pos / den))
    return sum(out) / len(out)


def test_info_nce_equal_similarity_is_log_two():
    v = np.array([[1.0, 0.0]])
    loss = W.info_nce(v, v, v[None], 0.1)[0]
    assert abs(loss - math.log(2)) < 1e-12


def test_info_nce_confident_limit():
    fa = np.array([[1.0, 0.0]])
    loss = W.info_nce(fa, fa, np.array([[[-1.0, 0.0]]]), 1e-3)[0]
    assert loss < 1e-12


def test_info_nce_matches_formula_oracle_and_gradients():
    r = RngStream(4)
    fa, fg, fn = r.normal(size=(3, 5)), r.normal(size=(3, 5)), r.normal(size=(3, 4, 5))
    loss, d_fa, d_fg, d_fn = W.info_nce(fa, fg, fn, 0.3)
    assert abs(loss - _info_nce_oracle(fa, fg, fn, 0.3)) < 1e-10
    h = 1e-6
    for arr, grad in ((fa, d_fa), (fg, d_fg), (fn, d_fn)):
        i = (0,) * arr.ndim
        arr[i] += h
        up = W.info_nce(fa, fg, fn, 0.3)[0]
        arr[i] -= 2 * h
        dn = W.info_nce(fa, fg, fn, 0.3)[0]
        arr[i] += h
        assert abs((up - dn) / (2 * h) - grad[i]) < 1e-7


def test_contrastive_loss_requires_negatives():
    wm = W.init_world_model(SMALL, SPEC, RngStream(0))
    with pytest.raises(ValueError):
        W.contrastive_loss(wm, [(np.zeros(3), np.ones(3))], np.zeros((0, 3)), SMALL.weights)


def test_idm_loss_exact_and_zero_params():
    wm = W.init_world_model(SMALL, SPEC, RngStream(0))
    r = RngStream(5)
    z0, z1 = r.normal(size=(6, 3)), r.normal(size=(6, 3))
    assert W.idm_loss(wm, z0, z1, W.idm_predict(wm, z0, z1)) == 0.0
    a = r.uniform(-1, 1, size=(6, 2))
    assert abs(W.idm_loss(_zero(wm), z0, z1, a) - np.mean(np.sum(a**2, axis=1))) < 1e-12


def test_idm_learns_linear_system():
    # identity latent, dynamics o' = o + 0.25 a: the action is a linear function of the pair
    cfg = replace(SMALL, d_z=2, hidden=32)
    wm = W.init_world_model(cfg, SPEC, RngStream(0))
    r = RngStream(6)

    def pairs(n):
        o, a = r.uniform(-1, 1, size=(n, 2)), r.uniform(-1, 1, size=(n, 2))
        return o, o + 0.25 * a, a

    p, opt = wm.idm, nn.AdamState.for_params(wm.idm, lr=3e-3)
    for _ in range(3000):
        o, o2, a = pairs(64)
        out, cache = nn.forward_cache(p, np.concatenate([o, o2], 1))
        g, _ = nn.backward(p, cache, -2.0 * (a - out) / 64, need_input_grad=False)
        opt, p = nn.adam_step(opt, p, g)
    o, o2, a = pairs(500)
    assert W.idm_loss(wm.replace_nets({"idm": p}), o, o2, a) / 2 < 1e-3


def test_training_gradients_match_finite_differences(short_demos):
    wm = _jitter(W.init_world_model(SMALL, SPEC, RngStream(2)))
    batch = W.make_batch(short_demos)
    _, _, g = W.loss_and_grads(wm, batch, SMALL, RngStream(5))
    r = RngStream(3)
    for k, p in wm.nets().items():
        for j in r.integers(0, p.values.size, size=4):
            h = 1e-6
            vals = []
            for s in (1, -1):
                v = p.values.copy()
                v[j] += s * h
                vals.append(W.loss_and_grads(wm.replace_nets({k: p.with_values(v)}), batch, SMALL, RngStream(5))[0])
            fd = (vals[0] - vals[1]) / (2 * h)
            assert abs(fd - g[k][j]) <= 1e-3 * max(abs(fd) + abs(g[k][j]), 1e-6), k


def test_zero_weights_remove_gradient_terms(short_demos):
    cfg = replace(SMALL, weights=replace(SMALL.weights, idm=0.0, contrastive=0.0))
    wm = _jitter(W.init_world_model(cfg, SPEC, RngStream(2)))
    batch = W.make_batch(short_demos)
    total, terms, g = W.loss_and_grads(wm, batch, cfg, RngStream(5))
    assert not g["idm"].any() and not g["proj_head"].any()
    assert total == terms["wm"]
    # the gradient of the remaining objective ignores the idm and projection parameters entirely
    other = wm.replace_nets({"idm": _zero(wm).idm, "proj_head": _zero(wm).proj_head})
    _, _, g2 = W.loss_and_grads(other, batch, cfg, RngStream(5))
    assert all(np.array_equal(g[k], g2[k]) for k in W.NETS)


def test_training_requires_failures():
    demos = generate_dataset(SPEC, 2, 0, RngStream(0))
    with pytest.raises(ValueError):
        W.train_world_model(demos, SPEC, replace(SMALL, epochs=1), RngStream(0))


def test_reconstruction_improves(stage1):
    first, last = stage1.curves[0]["recon"], stage1.curves[-1]["recon"]
    assert len(stage1.curves) == stage1.wm_cfg.epochs
    assert last < 0.25 * first


def test_contrastive_separation_positive(stage1):
    assert W.contrastive_separation(stage1.wm, stage1.records) > 0


def test_export_deterministic_and_lengths(stage1):
    again = W.export_latent_dataset(stage1.wm, stage1.demos)
    for a, b, d in zip(stage1.records, again, stage1.demos):
        assert a.z.tobytes() == b.z.tobytes() and a.z_goal.tobytes() == b.z_goal.tobytes()
        assert a.T == d.T and len(a.z) == d.T + 1 and a.success == d.success


def test_online_filter_matches_export(stage1):
    rec, demo = stage1.records[0], stage1.demos[0]
    f = W.LatentFilter(stage1.wm)
    online = np.array([f.observe(o) for o in demo.observations])
    assert np.allclose(online, rec.z, atol=1e-12)
