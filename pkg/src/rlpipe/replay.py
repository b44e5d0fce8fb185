"""Episode-structured replay storage with hindsight goal relabelling.

Episodes are written contiguously into a ring and evicted whole, oldest
first, so the "future" lookups of hindsight relabelling always land inside
the same stored episode. Relabelling happens when a batch is drawn: stored
goals and rewards are never overwritten.
"""
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from rlpipe import kernels
from rlpipe.dynamics import R_MAX, RewardWeights
from rlpipe.errors import InvalidInputError
from rlpipe.sac import Batch

_FIELDS = {
    "obs": 8,
    "actions": 3,
    "prev_actions": 3,
    "next_obs": 8,
    "achieved": 3,
    "goals": 3,
}


@dataclass(frozen=True)
class Transition:
    observation: np.ndarray
    action: np.ndarray
    prev_action: np.ndarray
    reward: float
    next_observation: np.ndarray
    achieved_state: tuple  # noise-free pose after the step
    goal: tuple
    done: bool
    success: bool


def encode_goal(goals, r_max=R_MAX):
    """Goal half of the observation for an (n, 3) array of goals."""
    g = np.asarray(goals, dtype=np.float64)
    return np.stack([g[:, 0] / r_max, g[:, 1] / r_max, np.sin(g[:, 2]), np.cos(g[:, 2])], axis=1)


def relabel_rewards(achieved, goals, actions, prev_actions, tol, weights=RewardWeights()):
    """Recompute (rewards, success) for rows of (achieved state, goal, action, previous action)."""
    return kernels.relabel_batch(achieved, goals, actions, prev_actions, tol[0], tol[1],
                                 np.asarray(weights[0], dtype=np.float64),
                                 np.asarray(weights[1], dtype=np.float64))


def _validate_episode(episode):
    if len(episode) == 0:
        raise InvalidInputError("episode is empty")
    dones = [bool(t.done) for t in episode]
    if not dones[-1] or any(dones[:-1]):
        raise InvalidInputError("episode must contain exactly one done flag, on its final transition")


def her_relabel(episode, k, tol, weights=RewardWeights(), seed=None, r_max=R_MAX):
    """Materialise ``k`` "future"-strategy copies of every transition.

    Each copy takes as goal the achieved state of a uniformly chosen step at
    or after its own; reward, success and done are recomputed against that
    goal. The originals come first, unchanged.
    """
    _validate_episode(episode)
    if k == 0:
        return list(episode)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(episode)
    achieved = np.array([t.achieved_state for t in episode], dtype=np.float64)
    src = np.repeat(np.arange(n), k)
    future = src + np.floor(rng.random(src.size) * (n - src)).astype(np.int64)
    goals = achieved[future]
    actions = np.array([episode[i].action for i in src], dtype=np.float64)
    prev = np.array([episode[i].prev_action for i in src], dtype=np.float64)
    rewards, success = relabel_rewards(achieved[src], goals, actions, prev, tol, weights)
    enc = encode_goal(goals, r_max)
    out = list(episode)
    for row, i in enumerate(src):
        t = episode[i]
        obs = np.array(t.observation, dtype=np.float64)
        nxt = np.array(t.next_observation, dtype=np.float64)
        obs[4:] = enc[row]
        nxt[4:] = enc[row]
        out.append(replace(t, observation=obs, next_observation=nxt, goal=tuple(goals[row]),
                           reward=float(rewards[row]), success=bool(success[row]),
                           done=bool(success[row])))
    return out


class ReplayBuffer:
    def __init__(self, capacity=1_000_000, initial_allocation=65_536):
        if capacity < 1:
            raise InvalidInputError("capacity must be positive")
        self.capacity = int(capacity)
        self._alloc = min(self.capacity, int(initial_allocation))
        self._data = {k: np.zeros((self._alloc, w)) for k, w in _FIELDS.items()}
        self._rewards = np.zeros(self._alloc)
        self._success = np.zeros(self._alloc, dtype=bool)
        self._ep_start = np.zeros(self._alloc, dtype=np.int64)
        self._ep_len = np.zeros(self._alloc, dtype=np.int64)
        self._t_in_ep = np.zeros(self._alloc, dtype=np.int64)
        self._episodes = deque()  # (start slot, length), oldest first
        self._head = 0  # next slot to write
        self._wrapped = False
        self.size = 0

    def __len__(self):
        return self.size

    @property
    def n_episodes(self):
        return len(self._episodes)

    def _grow(self, needed):
        new_alloc = min(self.capacity, max(2 * self._alloc, needed))
        for k, arr in self._data.items():
            grown = np.zeros((new_alloc, arr.shape[1]))
            grown[: self._alloc] = arr
            self._data[k] = grown
        for name in ("_rewards", "_success", "_ep_start", "_ep_len", "_t_in_ep"):
            arr = getattr(self, name)
            grown = np.zeros(new_alloc, dtype=arr.dtype)
            grown[: self._alloc] = arr
            setattr(self, name, grown)
        self._alloc = new_alloc

    def push_episode(self, episode):
        """Store a list of :class:`Transition` (one done flag, at the end)."""
        _validate_episode(episode)
        arrays = {
            "obs": [t.observation for t in episode],
            "actions": [t.action for t in episode],
            "prev_actions": [t.prev_action for t in episode],
            "next_obs": [t.next_observation for t in episode],
            "achieved": [t.achieved_state for t in episode],
            "goals": [t.goal for t in episode],
        }
        self.push_arrays({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()},
                         np.array([t.reward for t in episode], dtype=np.float64),
                         np.array([t.success for t in episode], dtype=bool))

    def push_arrays(self, arrays, rewards, success):
        n = len(rewards)
        if n == 0:
            raise InvalidInputError("episode is empty")
        if n > self.capacity:
            raise InvalidInputError(f"episode of length {n} exceeds buffer capacity {self.capacity}")
        while self.size + n > self.capacity:
            _, length = self._episodes.popleft()
            self.size -= length
        if not self._wrapped and self._head + n > self._alloc and self._alloc < self.capacity:
            self._grow(self._head + n)
        slots = (self._head + np.arange(n)) % self.capacity
        if not self._wrapped and self._head + n >= self.capacity:
            self._wrapped = True
        for k, arr in arrays.items():
            self._data[k][slots] = arr
        self._rewards[slots] = rewards
        self._success[slots] = success
        self._ep_start[slots] = self._head
        self._ep_len[slots] = n
        self._t_in_ep[slots] = np.arange(n)
        self._episodes.append((self._head, n))
        self._head = int((self._head + n) % self.capacity)
        self.size += n

    def episode_slots(self):
        """Slot indices of every stored episode, oldest first."""
        return [(start + np.arange(length)) % self.capacity for start, length in self._episodes]

    def transition(self, slot):
        d = self._data
        return Transition(d["obs"][slot].copy(), d["actions"][slot].copy(), d["prev_actions"][slot].copy(),
                          float(self._rewards[slot]), d["next_obs"][slot].copy(),
                          tuple(d["achieved"][slot]), tuple(d["goals"][slot]),
                          bool(self._t_in_ep[slot] == self._ep_len[slot] - 1), bool(self._success[slot]))

    def sample_slots(self, n, rng):
        """Uniform (with replacement) slot indices over stored transitions."""
        if self.size < n or self.size == 0:
            return None
        oldest = self._episodes[0][0]
        return (oldest + rng.integers(0, self.size, size=n)) % self.capacity

    def sample(self, n, rng, tol, weights=RewardWeights(), her_k=4, r_max=R_MAX, with_info=False):
        """Draw a relabelled training batch, or None if fewer than ``n`` are stored.

        With probability ``her_k / (her_k + 1)`` a row's goal is replaced by the
        achieved state of a uniformly chosen step at or after it in the same
        episode. Rewards and success flags of every row are recomputed against
        ``tol``; the success flag doubles as the bootstrap terminal.
        """
        slots = self.sample_slots(n, rng)
        if slots is None:
            return None
        d = self._data
        goals = d["goals"][slots].copy()
        t = self._t_in_ep[slots]
        length = self._ep_len[slots]
        relabel = rng.random(n) < her_k / (her_k + 1.0)
        offset = np.floor(rng.random(n) * (length - t)).astype(np.int64)
        future_t = t + offset
        future_slots = (self._ep_start[slots] + future_t) % self.capacity
        goals[relabel] = d["achieved"][future_slots[relabel]]
        rewards, success = relabel_rewards(d["achieved"][slots], goals, d["actions"][slots],
                                           d["prev_actions"][slots], tol, weights)
        obs = d["obs"][slots].copy()
        next_obs = d["next_obs"][slots].copy()
        enc = encode_goal(goals, r_max)
        obs[:, 4:] = enc
        next_obs[:, 4:] = enc
        batch = Batch(obs, d["actions"][slots].copy(), rewards, next_obs, success.astype(np.float64))
        if not with_info:
            return batch
        info = {
            "slots": slots,
            "relabelled": relabel,
            "t": t,
            "future_t": np.where(relabel, future_t, t),
            "goals": goals,
            "success": success,
            "achieved": d["achieved"][slots].copy(),
            "prev_actions": d["prev_actions"][slots].copy(),
            "episode_start": self._ep_start[slots].copy(),
        }
        return batch, info
