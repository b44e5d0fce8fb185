import math

import numpy as np
import pytest
from scipy.integrate import quad

from rlpipe import sac
from rlpipe.errors import TrainingDivergedError
from rlpipe.nn import Mlp
from rlpipe.sysid import ACTION_HIGH, ACTION_LOW

from oracles import check_all_gradients, plain_mlp, squashed_mean


def _batch(rng, n):
    return sac.Batch(rng.normal(size=(n, 8)), rng.uniform(ACTION_LOW, ACTION_HIGH, size=(n, 3)),
                     rng.normal(-1, 0.3, size=n), rng.normal(size=(n, 8)),
                     (rng.random(n) < 0.2).astype(float))


def _zero_actor_params(hyper=None):
    p = sac.PolicyParams.initialize(np.random.default_rng(0), hyper)
    for arr in p.actor.params:
        arr[...] = 0.0
    return p


def test_deterministic_zero_actor_gives_midpoints():
    a, _ = sac.sample_action(_zero_actor_params(), np.zeros(8), deterministic=True)
    np.testing.assert_allclose(a, (0.15, 0.0, 0.0), atol=1e-15)


def test_stochastic_actions_strictly_inside(rng):
    p = sac.PolicyParams.initialize(rng)
    p.actor.biases[-1][3:] = 2.0  # widest allowed spread
    a, logp = sac.sample_action(p, rng.normal(size=(20_000, 8)), rng=rng)
    assert np.all(a > ACTION_LOW) and np.all(a < ACTION_HIGH)
    assert np.all(np.isfinite(logp))


def test_monte_carlo_mean(rng):
    p = _zero_actor_params()
    mu = np.array([0.3, -0.4, 0.1])
    log_std = np.array([-0.5, 0.0, -1.0])
    p.actor.biases[-1][:] = np.concatenate([mu, log_std])
    a, _ = sac.sample_action(p, np.zeros((100_000, 8)), rng=rng)
    se = a.std(axis=0) / math.sqrt(len(a))
    for d in range(3):
        expect = squashed_mean(mu[d], log_std[d], ACTION_LOW[d], ACTION_HIGH[d])
        assert abs(a[:, d].mean() - expect) < 3 * se[d]


@pytest.mark.parametrize("mu,log_std,dim", [(0.0, 0.0, 0), (0.7, -1.0, 0), (-1.2, 0.5, 1), (0.3, -2.5, 2)])
def test_log_prob_integrates_to_one(mu, log_std, dim):
    lo, hi = ACTION_LOW[dim], ACTION_HIGH[dim]
    mass, _ = quad(lambda a: sac.squashed_density_1d(a, mu, log_std, lo, hi), lo, hi, limit=400, points=[
        (hi + lo) / 2 + (hi - lo) / 2 * math.tanh(mu)])
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_log_prob_matches_density():
    """The sampling log-prob equals the sum of per-dimension physical densities."""
    p = _zero_actor_params()
    rng = np.random.default_rng(3)
    p.actor.biases[-1][:] = rng.normal(0, 0.5, size=6)
    a, logp = sac.sample_action(p, np.zeros(8), rng=rng)
    mu, log_std = p.actor.biases[-1][:3], p.actor.biases[-1][3:]
    dens = [sac.squashed_density_1d(a[d], mu[d], log_std[d], ACTION_LOW[d], ACTION_HIGH[d]) for d in range(3)]
    assert logp == pytest.approx(sum(math.log(v) for v in dens), rel=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_gradients(seed):
    c_err, a_err, t_err = check_all_gradients(seed)
    assert c_err < 1e-3 and a_err < 1e-3 and t_err < 1e-3


def test_critic_loss_against_independent_targets(rng):
    critics = [Mlp([11, 6, 5, 1], rng) for _ in range(2)]
    obs = rng.normal(size=(10, 8))
    unit = rng.uniform(-1, 1, size=(10, 3))
    y = rng.normal(size=10)
    x = np.concatenate([obs, unit], axis=1)
    expect = 0.0
    for c in critics:
        q = plain_mlp(c, x)[:, 0]
        expect += 0.5 * sum((q[i] - y[i]) ** 2 for i in range(10)) / 10
    loss, _ = sac.critic_loss_and_grads(critics, obs, unit, y)
    assert loss == pytest.approx(expect, abs=1e-10)


def test_critic_target_formula(rng, small_hyper):
    p = sac.PolicyParams.initialize(rng, small_hyper)
    b = _batch(rng, 6)
    eps = rng.normal(size=(6, 3))
    y = sac.critic_targets(p, b, eps, 0.3, 0.99)
    for i in range(6):
        out = p.actor(b.next_obs[i])
        mu, ls = out[:3], np.clip(out[3:], -20, 2)
        t = np.tanh(mu + np.exp(ls) * eps[i])
        logp = sum(-0.5 * eps[i, d] ** 2 - ls[d] - 0.5 * math.log(2 * math.pi)
                   - math.log(1 - t[d] ** 2 + 1e-6) - math.log(sac.ACTION_HALF[d]) for d in range(3))
        x = np.concatenate([b.next_obs[i], t])
        q = min(p.target_critics[0](x)[0], p.target_critics[1](x)[0])
        assert y[i] == pytest.approx(b.rewards[i] + 0.99 * (1 - b.terminals[i]) * (q - 0.3 * logp), rel=1e-10)


@pytest.mark.parametrize("tau", [0.0, 1.0, 0.0045])
def test_polyak_extremes(rng, tau):
    src, tgt = Mlp([3, 4, 1], rng), Mlp([3, 4, 1], rng)
    before = [a.copy() for a in tgt.params]
    sac.polyak(tgt, src, tau)
    for new, old, s in zip(tgt.params, before, src.params):
        np.testing.assert_array_equal(new, (1 - tau) * old + tau * s)


@pytest.mark.parametrize("tau", [0.0, 1.0])
def test_update_target_extremes(tau):
    hyper = sac.SacHyper(batch_size=16, critic_hidden=(8, 8), tau=tau)
    rng = np.random.default_rng(1)
    p = sac.PolicyParams.initialize(rng, hyper)
    before = [a.copy() for t in p.target_critics for a in t.params]
    sac.sac_update(p, sac.SacOptimizers(p, hyper.learning_rate), _batch(rng, 16), hyper, rng)
    after = [a for t in p.target_critics for a in t.params]
    reference = before if tau == 0.0 else [a for c in p.critics for a in c.params]
    for x, y in zip(after, reference):
        np.testing.assert_array_equal(x, y)


def test_update_is_deterministic(small_hyper):
    results = []
    for _ in range(2):
        rng = np.random.default_rng(9)
        p = sac.PolicyParams.initialize(rng, small_hyper)
        opt = sac.SacOptimizers(p, small_hyper.learning_rate)
        for _ in range(3):
            sac.sac_update(p, opt, _batch(rng, 32), small_hyper, rng)
        results.append(p.arrays())
    for a, b in zip(*results):
        np.testing.assert_array_equal(a, b)


def test_non_finite_loss_raises(small_hyper, rng):
    p = sac.PolicyParams.initialize(rng, small_hyper)
    b = _batch(rng, 32)
    b = b._replace(rewards=np.full(32, np.nan))
    with pytest.raises(TrainingDivergedError) as exc:
        sac.sac_update(p, sac.SacOptimizers(p, 1e-3), b, small_hyper, rng)
    assert exc.value.loss_name == "critic_loss"


def test_checkpoint_roundtrip_is_byte_stable(tmp_path, small_hyper, rng):
    p = sac.PolicyParams.initialize(rng, small_hyper)
    opt = sac.SacOptimizers(p, small_hyper.learning_rate)
    sac.sac_update(p, opt, _batch(rng, 32), small_hyper, rng)
    ck = sac.Checkpoint(p, small_hyper, step=5, optimizers=opt.state_dict())
    ck.save(tmp_path / "a.ckpt")
    back = sac.Checkpoint.load(tmp_path / "a.ckpt")
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for x, y in zip(p.arrays(), back.params.arrays()):
        np.testing.assert_array_equal(x, y)
