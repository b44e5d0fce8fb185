import math

import numpy as np
import pytest
from scipy.stats import chisquare

from rlpipe import dynamics as dyn
from rlpipe.dynamics import RewardWeights, Tolerances
from rlpipe.errors import InvalidInputError
from rlpipe.replay import ReplayBuffer, encode_goal, her_relabel

from oracles import random_episode

TOL = Tolerances(0.3, math.radians(17))
W = RewardWeights()


def test_push_counts_and_whole_episode_eviction(truth_model):
    buf = ReplayBuffer(capacity=10)
    buf.push_episode(random_episode(truth_model, 10, 0))
    assert len(buf) == 10
    buf = ReplayBuffer(capacity=10)
    buf.push_episode(random_episode(truth_model, 6, 0))
    buf.push_episode(random_episode(truth_model, 6, 1))
    assert len(buf) == 6 and buf.n_episodes == 1


def test_size_never_exceeds_capacity(truth_model):
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(capacity=50, initial_allocation=8)
    stored = []
    for k in range(40):
        n = int(rng.integers(1, 20))
        buf.push_episode(random_episode(truth_model, n, k))
        stored.append(n)
        while sum(stored) > 50:
            stored.pop(0)
        assert len(buf) == sum(stored) <= 50
        assert [len(s) for s in buf.episode_slots()] == stored


def test_malformed_episode_rejected(truth_model):
    ep = random_episode(truth_model, 4, 0)
    with pytest.raises(InvalidInputError):
        ReplayBuffer(10).push_episode(ep[:-1])
    with pytest.raises(InvalidInputError):
        her_relabel([], 4, TOL)


def test_relabel_to_successor_is_success(truth_model):
    ep = random_episode(truth_model, 2, 3)
    relabelled = her_relabel(ep[1:], 1, TOL, W, seed=0)  # one-step episode: the only future is itself
    copy = relabelled[1]
    assert copy.goal == ep[1].achieved_state
    assert copy.success and copy.done
    assert copy.reward == dyn.reward(copy.action, copy.prev_action, True, W)


def test_k_zero_is_identity(truth_model):
    ep = random_episode(truth_model, 5, 0)
    assert her_relabel(ep, 0, TOL) == ep


def test_relabelled_rewards_match_environment_oracle(truth_model):
    ep = random_episode(truth_model, 40, 7)
    out = her_relabel(ep, 4, TOL, W, seed=1)
    assert out[:40] == ep and len(out) == 200
    achieved = [t.achieved_state for t in ep]
    for row, t in enumerate(out[40:]):
        src = row // 4
        assert t.goal in achieved[src:]
        ok = dyn.is_success(t.achieved_state, t.goal, TOL)
        assert t.success == ok
        assert t.reward == dyn.reward(t.action, t.prev_action, ok, W)
        np.testing.assert_array_equal(t.observation[4:], encode_goal([t.goal])[0])


def test_sample_single_transition(truth_model):
    buf = ReplayBuffer(5)
    ep = random_episode(truth_model, 1, 0)
    buf.push_episode(ep)
    batch = buf.sample(1, np.random.default_rng(0), TOL, W, her_k=0)
    np.testing.assert_array_equal(batch.obs[0], ep[0].observation)
    np.testing.assert_array_equal(batch.actions[0], ep[0].action)
    assert batch.rewards[0] == ep[0].reward
    assert buf.sample(2, np.random.default_rng(0), TOL) is None


def test_sample_deterministic(truth_model):
    buf = ReplayBuffer(1000)
    for k in range(5):
        buf.push_episode(random_episode(truth_model, 30, k))
    a = buf.sample(64, np.random.default_rng(4), TOL)
    b = buf.sample(64, np.random.default_rng(4), TOL)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_sample_uniform_frequency(truth_model):
    buf = ReplayBuffer(100)
    for k in range(4):
        buf.push_episode(random_episode(truth_model, 25, k))
    rng = np.random.default_rng(2)
    slots = np.concatenate([buf.sample_slots(100, rng) for _ in range(1000)])
    counts = np.bincount(slots, minlength=100)
    assert np.all(np.abs(counts - 1000) < 3 * math.sqrt(1000 * 0.99) * 1.5)
    assert chisquare(counts).pvalue > 1e-3


def test_sampled_relabels_use_future_steps(truth_model):
    buf = ReplayBuffer(10_000)
    for k in range(100):
        buf.push_episode(random_episode(truth_model, 50, k))
    batch, info = buf.sample(4000, np.random.default_rng(0), TOL, W, her_k=4, with_info=True)
    frac = info["relabelled"].mean()
    assert abs(frac - 0.8) < 0.03
    assert np.all(info["future_t"] >= info["t"])
    np.testing.assert_array_equal(batch.terminals, info["success"].astype(float))
