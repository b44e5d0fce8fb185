"""SAC + hindsight relabelling training loop and deterministic evaluation."""
import json
import logging
import math
from pathlib import Path

import numpy as np

from rlpipe import sac
from rlpipe.curriculum import CurriculumState, initial_tolerances
from rlpipe.dynamics import GoalEnv, Tolerances
from rlpipe.replay import ReplayBuffer

log = logging.getLogger(__name__)


def _generator_state(rng):
    return rng.bit_generator.state


def _restore_generator(state):
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


class Trainer:
    """Collects experience with the stochastic policy and runs one SAC update per step.

    Random streams for the environment, exploration, replay sampling and the
    update noise are split from ``seed`` so each is reproducible on its own.
    """

    def __init__(self, params, env_config, model, hyper=None, seed=0, curriculum=None,
                 use_curriculum=True, surrogate=None):
        self.params = params
        self.hyper = hyper or sac.SacHyper()
        self.env = GoalEnv(env_config, model, surrogate)
        self.optimizers = sac.SacOptimizers(params, self.hyper.learning_rate)
        streams = np.random.SeedSequence(seed).spawn(4)
        self.rng_env, self.rng_act, self.rng_sample, self.rng_update = (np.random.default_rng(s) for s in streams)
        self.buffer = ReplayBuffer(self.hyper.buffer_capacity,
                                   initial_allocation=min(self.hyper.buffer_capacity, 65_536))
        if curriculum is None and use_curriculum:
            curriculum = CurriculumState(initial_tolerances(env_config.region))
        self.curriculum = curriculum
        self.env_steps = 0
        self.updates = 0
        self.episodes = 0
        self.events = []
        self.recent = []  # (success, return, length) of finished episodes
        self.last_losses = {}
        self._episode = None
        self._obs = None
        self._return = 0.0

    @property
    def tolerances(self):
        if self.curriculum is not None:
            return self.curriculum.current
        return self.env.config.tolerances

    def _start_episode(self):
        self.env.tolerances = self.tolerances
        self._obs = self.env.reset(self.rng_env)
        self._episode = {k: [] for k in ("obs", "actions", "prev_actions", "next_obs", "achieved", "goals")}
        self._episode["rewards"] = []
        self._episode["success"] = []
        self._return = 0.0

    def _finish_episode(self, success):
        ep = self._episode
        arrays = {k: np.asarray(ep[k], dtype=np.float64) for k in
                  ("obs", "actions", "prev_actions", "next_obs", "achieved", "goals")}
        self.buffer.push_arrays(arrays, np.asarray(ep["rewards"]), np.asarray(ep["success"], dtype=bool))
        self.episodes += 1
        self.recent.append((bool(success), self._return, len(ep["rewards"])))
        if self.curriculum is not None:
            old = self.curriculum.current
            if self.curriculum.record(success):
                new = self.curriculum.current
                event = {
                    "step": self.env_steps,
                    "episode": self.episodes,
                    "old_eps_p": old.eps_p,
                    "new_eps_p": new.eps_p,
                    "old_eps_theta": old.eps_theta,
                    "new_eps_theta": new.eps_theta,
                    "promotions": self.curriculum.promotions,
                }
                self.events.append(event)
                log.info("curriculum promotion %s", json.dumps(event))
        self._episode = None

    def train(self, n_steps, progress_every=0):
        """Advance ``n_steps`` environment steps (an open episode carries over)."""
        hyper = self.hyper
        target = self.env_steps + int(n_steps)
        low, high = sac.ACTION_MID - sac.ACTION_HALF, sac.ACTION_MID + sac.ACTION_HALF
        while self.env_steps < target:
            if self._episode is None:
                self._start_episode()
            env = self.env
            if self.env_steps < hyper.learning_starts:
                action = self.rng_act.uniform(low, high)
            else:
                action, _ = sac.sample_action(self.params, self._obs, rng=self.rng_act)
            prev = env.prev_action
            res = env.step(action)
            ep = self._episode
            ep["obs"].append(self._obs)
            ep["actions"].append(action)
            ep["prev_actions"].append(prev)
            ep["next_obs"].append(res.observation)
            ep["achieved"].append(res.next_state)
            ep["goals"].append(env.goal)
            ep["rewards"].append(res.reward)
            ep["success"].append(res.success)
            self._return += res.reward
            self._obs = res.observation
            self.env_steps += 1

            if self.env_steps >= hyper.learning_starts:
                batch = self.buffer.sample(hyper.batch_size, self.rng_sample, self.tolerances,
                                           env.weights, hyper.her_k, env.config.r_max)
                if batch is not None:
                    _, self.last_losses = sac.sac_update(self.params, self.optimizers, batch, hyper,
                                                         self.rng_update)
                    self.updates += 1

            if res.success or env.truncated:
                self._finish_episode(res.success)
            if progress_every and self.env_steps % progress_every == 0:
                self._log_progress()
        return self

    def _log_progress(self):
        window = self.recent[-100:]
        rate = sum(s for s, _, _ in window) / max(len(window), 1)
        tol = self.tolerances
        log.info("step %d episodes %d success@100 %.2f eps_p %.3f eps_theta %.3f alpha %.4f critic %.4f",
                 self.env_steps, self.episodes, rate, tol[0], tol[1],
                 self.last_losses.get("alpha", float("nan")), self.last_losses.get("critic", float("nan")))

    def checkpoint(self, extra=None):
        return sac.Checkpoint(
            params=self.params.copy(),
            hyper=self.hyper,
            step=self.env_steps,
            rng_state={name: _generator_state(getattr(self, name))
                       for name in ("rng_env", "rng_act", "rng_sample", "rng_update")},
            optimizers=self.optimizers.state_dict(),
            curriculum=None if self.curriculum is None else self.curriculum.to_dict(),
            extra=dict(extra or {}),
        )

    def restore(self, ckpt):
        """Resume counters, optimizer moments, RNG streams and curriculum from a checkpoint."""
        self.env_steps = int(ckpt.step)
        if ckpt.optimizers:
            self.optimizers.load_state_dict(ckpt.optimizers)
        if ckpt.rng_state:
            for name, state in ckpt.rng_state.items():
                setattr(self, name, _restore_generator(state))
        if ckpt.curriculum and self.curriculum is not None:
            self.curriculum = CurriculumState.from_dict(ckpt.curriculum)


def episode_seed(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def run_episode(params, env, rng, trace=None):
    """Roll out the deterministic policy until success or the horizon."""
    obs = env.reset(rng)
    total = 0.0
    success = False
    while True:
        action, _ = sac.sample_action(params, obs, deterministic=True)
        res = env.step(action)
        total += res.reward
        obs = res.observation
        if trace is not None:
            e_p, e_th = _errors(env)
            trace.append({
                "t": round(res.elapsed_steps * 0.1, 10),
                "x": res.next_state.x, "y": res.next_state.y, "theta": res.next_state.theta,
                "a_x": float(action[0]), "a_y": float(action[1]), "a_theta": float(action[2]),
                "reward": res.reward, "e_p": e_p, "e_theta": e_th, "success": bool(res.success),
            })
        if res.success or env.truncated:
            success = bool(res.success)
            break
    e_p, e_th = _errors(env)
    return {"success": success, "return": total, "length": env.elapsed, "final_e_p": e_p, "final_e_theta": e_th}


def _errors(env):
    from rlpipe.dynamics import errors

    return errors(env.state, env.goal)


def evaluate(params, env_config, model, n_episodes=100, seed=0, tolerances=None, surrogate=None,
             trace_path=None):
    """Deterministic-mode evaluation; the policy is never modified.

    Episode ``i`` draws its start, goal and observation noise from
    ``default_rng([seed, i])`` so the same seeds give identical episodes in the
    core simulator and in a degenerate surrogate.
    """
    env = GoalEnv(env_config, model, surrogate)
    if tolerances is not None:
        env.tolerances = Tolerances(*tolerances)
    episodes = []
    traces = [] if trace_path is not None else None
    for i in range(int(n_episodes)):
        trace = [] if traces is not None else None
        result = run_episode(params, env, episode_seed(seed, i), trace)
        episodes.append(result)
        if trace is not None:
            for rec in trace:
                rec["episode"] = i
            traces.extend(trace)
    if trace_path is not None:
        write_jsonl(trace_path, traces)
    n = max(len(episodes), 1)
    return {
        "n_episodes": len(episodes),
        "success_rate": sum(e["success"] for e in episodes) / n,
        "mean_return": float(sum(e["return"] for e in episodes) / n),
        "mean_length": float(sum(e["length"] for e in episodes) / n),
        "tolerances": {"eps_p": env.tolerances.eps_p, "eps_theta": env.tolerances.eps_theta},
        "surrogate": None if env.surrogate is None else env.surrogate._asdict(),
        "episodes": episodes,
    }


def write_jsonl(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def finite_or_none(x):
    return x if isinstance(x, (int, float)) and math.isfinite(x) else None
