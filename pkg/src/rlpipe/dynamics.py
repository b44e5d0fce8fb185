"""Goal-conditioned planar kinematic simulator and its perturbed surrogate.

The policy acts at 10 Hz and the simulator integrates at 30 Hz, so every
action is held for three substeps. Body-frame velocities from the identified
model are rotated into the world frame by the current heading before each
explicit Euler substep.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from rlpipe import kernels
from rlpipe.errors import ConfigError, InvalidInputError, SimulationDivergedError
from rlpipe.sysid import ACTION_HIGH, ACTION_LOW, VelocityModel

log = logging.getLogger(__name__)

SIM_HZ = 30
POLICY_HZ = 10
SIM_DT = 1.0 / SIM_HZ
POLICY_DT = 1.0 / POLICY_HZ
N_SUBSTEPS = SIM_HZ // POLICY_HZ
R_MIN, R_MAX = -2.0, 2.0
OBS_NOISE_SIGMA = 0.01
HORIZON = 300
OBS_DIM = 8
ACTION_DIM = 3

wrap_angle = kernels.wrap_angle


class RobotState(NamedTuple):
    x: float
    y: float
    theta: float


class Goal(NamedTuple):
    x: float
    y: float
    theta: float


class Tolerances(NamedTuple):
    eps_p: float
    eps_theta: float


class RewardWeights(NamedTuple):
    """Diagonals of the action-magnitude (R) and action-variation (S) weights."""

    R: tuple = (0.0, 0.8, 0.8)
    S: tuple = (0.2, 0.2, 0.2)


class SurrogateConfig(NamedTuple):
    latency_steps: int = 0
    vel_time_constant: float = 0.0
    min_action_duration: int = 1
    extra_obs_noise: float = 0.0

    def validate(self):
        if self.latency_steps < 0 or int(self.latency_steps) != self.latency_steps:
            raise ConfigError(f"latency_steps must be a non-negative integer, got {self.latency_steps}")
        if not self.vel_time_constant >= 0:
            raise ConfigError(f"vel_time_constant must be >= 0, got {self.vel_time_constant}")
        if self.min_action_duration < 1 or int(self.min_action_duration) != self.min_action_duration:
            raise ConfigError(f"min_action_duration must be an integer >= 1, got {self.min_action_duration}")
        if not self.extra_obs_noise >= 0:
            raise ConfigError(f"extra_obs_noise must be >= 0, got {self.extra_obs_noise}")
        return self


# Perturbations used as the high-fidelity stand-in stage.
TRANSFER_SURROGATE = SurrogateConfig(latency_steps=3, vel_time_constant=0.2, min_action_duration=3)
FINAL_TOLERANCES = Tolerances(0.05, math.radians(1.0))
RELAXED_TOLERANCES = Tolerances(0.3, math.radians(17.0))


class StepResult(NamedTuple):
    next_state: RobotState
    observation: np.ndarray
    reward: float
    success: bool
    elapsed_steps: int


def errors(state, goal):
    """Position error (m) and shortest angular error in [0, pi] (rad)."""
    return kernels.errors_scalar(float(state[0]), float(state[1]), float(state[2]),
                                 float(goal[0]), float(goal[1]), float(goal[2]))


def is_success(state, goal, tol):
    e_p, e_th = errors(state, goal)
    return e_p < tol[0] and e_th < tol[1]


def reward(u, u_prev, at_goal, weights=RewardWeights()):
    """-(u'Ru + du'S du + lambda) with lambda = 0 at the goal, 1 otherwise."""
    return kernels.reward_scalar(float(u[0]), float(u[1]), float(u[2]),
                                 float(u_prev[0]), float(u_prev[1]), float(u_prev[2]),
                                 bool(at_goal), np.asarray(weights[0], dtype=np.float64),
                                 np.asarray(weights[1], dtype=np.float64))


def clamp_action(a):
    arr = np.asarray(a, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"non-finite action {arr.tolist()}")
    clipped = np.minimum(np.maximum(arr, ACTION_LOW), ACTION_HIGH)
    if np.any(clipped != arr):
        log.warning("action %s outside command ranges, clamped to %s", arr.tolist(), clipped.tolist())
    return clipped


def encode_observation(state, goal, r_max=R_MAX):
    x, y, th = state
    gx, gy, gth = goal
    return np.array([x / r_max, y / r_max, math.sin(th), math.cos(th),
                     gx / r_max, gy / r_max, math.sin(gth), math.cos(gth)])


def observe(state, goal, noise_sigma=OBS_NOISE_SIGMA, rng=None, r_max=R_MAX):
    """Noisy 8-vector observation; noise perturbs the robot pose only, the goal stays exact."""
    x, y, th = (float(v) for v in state)
    if noise_sigma > 0:
        if rng is None:
            raise InvalidInputError("observation noise requested without a random generator")
        nx, ny, nth = rng.normal(0.0, noise_sigma, size=3)
        x, y, th = x + nx, y + ny, th + nth
    return encode_observation((x, y, th), goal, r_max)


def sample_goal(rng, region=(R_MIN, R_MAX)):
    lo, hi = region
    gx, gy = rng.uniform(lo, hi, size=2)
    gth = rng.uniform(-math.pi, math.pi)
    return Goal(float(gx), float(gy), float(gth))


def reset(seed, start_noise_sigma=0.1, region=(R_MIN, R_MAX), obs_noise=OBS_NOISE_SIGMA):
    """Sample (start state, goal, observation) reproducibly from ``seed`` (int or Generator)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if start_noise_sigma > 0:
        x, y, th = rng.normal(0.0, start_noise_sigma, size=3)
        state = RobotState(float(x), float(y), wrap_angle(float(th)))
    else:
        state = RobotState(0.0, 0.0, 0.0)
    goal = sample_goal(rng, region)
    return state, goal, observe(state, goal, obs_noise, rng, r_max=max(abs(region[0]), abs(region[1])))


def _check_state(x, y, th):
    if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(th)):
        raise SimulationDivergedError(f"state became non-finite: ({x}, {y}, {th})")


def step(state, prev_action, action, goal, tol, weights, model, clock=0, rng=None, obs_noise=0.0):
    """Advance one policy period of the core simulator."""
    a = clamp_action(action)
    x, y, th = (float(v) for v in state)
    _check_state(x, y, th)
    x, y, th = kernels.core_advance(x, y, th, a[0], a[1], a[2], model.coeffs, kernels.MONOMIALS,
                                    SIM_DT, N_SUBSTEPS)
    _check_state(x, y, th)
    nxt = RobotState(x, y, th)
    ok = is_success(nxt, goal, tol)
    r = reward(a, prev_action, ok, weights)
    return StepResult(nxt, observe(nxt, goal, obs_noise, rng), r, ok, clock + 1)


class SurrogateLagState:
    """Internal state of the perturbed actuator: command FIFO, held command, velocity."""

    def __init__(self, cfg):
        cfg = SurrogateConfig(*cfg).validate()
        self.cfg = cfg
        self.fifo = np.zeros((int(cfg.latency_steps), 3))
        self.head = 0
        self.active = np.zeros(3)
        self.age = int(cfg.min_action_duration)
        self.vel = np.zeros(3)
        tau = float(cfg.vel_time_constant)
        # exact zero-order-hold discretisation of dv/dt = (target - v) / tau
        self.lag_alpha = 0.0 if tau == 0 else -math.expm1(-SIM_DT / tau)

    def reset(self):
        self.fifo[:] = 0.0
        self.head = 0
        self.active[:] = 0.0
        self.age = int(self.cfg.min_action_duration)
        self.vel[:] = 0.0


def surrogate_step(state, prev_action, action, goal, tol, weights, model, clock, cfg, internal,
                   rng=None, obs_noise=0.0):
    """Like :func:`step` but through latency, first-order lag and minimum command duration."""
    a = clamp_action(action)
    x, y, th = (float(v) for v in state)
    _check_state(x, y, th)
    x, y, th, internal.head, internal.age = kernels.surrogate_advance(
        x, y, th, a[0], a[1], a[2], model.coeffs, kernels.MONOMIALS, SIM_DT, N_SUBSTEPS,
        internal.fifo, internal.head, internal.active, internal.age, internal.vel,
        internal.lag_alpha, int(cfg.min_action_duration))
    _check_state(x, y, th)
    nxt = RobotState(x, y, th)
    ok = is_success(nxt, goal, tol)
    r = reward(a, prev_action, ok, weights)
    obs = observe(nxt, goal, obs_noise, rng)
    if cfg.extra_obs_noise > 0:
        noisy = RobotState(*(np.asarray(nxt) + rng.normal(0.0, cfg.extra_obs_noise, size=3)))
        obs = observe(noisy, goal, obs_noise, rng)
    return StepResult(nxt, obs, r, ok, clock + 1)


@dataclass
class EnvConfig:
    tolerances: tuple = RELAXED_TOLERANCES
    R: tuple = (0.0, 0.8, 0.8)
    S: tuple = (0.2, 0.2, 0.2)
    obs_noise: float = OBS_NOISE_SIGMA
    start_noise: float = 0.1
    horizon: int = HORIZON
    region: tuple = (R_MIN, R_MAX)
    surrogate: SurrogateConfig = None
    model_path: str = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tolerances = Tolerances(*map(float, self.tolerances))
        self.R = tuple(float(v) for v in self.R)
        self.S = tuple(float(v) for v in self.S)
        self.region = tuple(float(v) for v in self.region)
        if self.surrogate is not None:
            s = self.surrogate
            self.surrogate = (SurrogateConfig(**s) if isinstance(s, dict) else SurrogateConfig(*s)).validate()
        if min(self.tolerances) <= 0:
            raise ConfigError(f"tolerances must be positive, got {self.tolerances}")
        if len(self.R) != 3 or len(self.S) != 3 or min(self.R + self.S) < 0:
            raise ConfigError("R and S must be 3 non-negative diagonal entries")
        if self.horizon <= 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if not self.region[0] < self.region[1]:
            raise ConfigError(f"region must satisfy r_min < r_max, got {self.region}")

    @property
    def weights(self):
        return RewardWeights(self.R, self.S)

    @property
    def r_max(self):
        return max(abs(self.region[0]), abs(self.region[1]))

    def to_dict(self):
        d = asdict(self)
        d["tolerances"] = {"eps_p": self.tolerances.eps_p, "eps_theta": self.tolerances.eps_theta}
        d["R"], d["S"], d["region"] = list(self.R), list(self.S), list(self.region)
        d["surrogate"] = None if self.surrogate is None else self.surrogate._asdict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown environment config key(s): {', '.join(sorted(unknown))}")
        tol = d.get("tolerances")
        if isinstance(tol, dict):
            d["tolerances"] = (tol["eps_p"], tol["eps_theta"])
        try:
            return cls(**d)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"bad environment config: {exc}") from None

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"environment config not found: {path}") from None


class GoalEnv:
    """Stateful episode wrapper around :func:`step` / :func:`surrogate_step`.

    ``tolerances`` may be reassigned between episodes (the curriculum does).
    """

    def __init__(self, config, model, surrogate=None):
        self.config = config
        self.model = model
        self.surrogate = surrogate if surrogate is not None else config.surrogate
        self.tolerances = config.tolerances
        self.weights = config.weights
        self._lag = SurrogateLagState(self.surrogate) if self.surrogate is not None else None
        self.state = None
        self.goal = None
        self.prev_action = np.zeros(3)
        self.elapsed = 0
        self.rng = None

    def reset(self, rng):
        """Start a new episode; ``rng`` drives start noise, goal sampling and observation noise."""
        state, goal, _ = reset(rng, self.config.start_noise, self.config.region, obs_noise=0.0)
        return self.reset_to(state, goal, rng)

    def reset_to(self, state, goal, rng):
        self.rng = rng
        self.state = RobotState(*(float(v) for v in state))
        self.goal = Goal(*(float(v) for v in goal))
        self.prev_action = np.zeros(3)
        self.elapsed = 0
        if self._lag is not None:
            self._lag.reset()
        return self.observe()

    def observe(self):
        return observe(self.state, self.goal, self.config.obs_noise, self.rng, self.config.r_max)

    def step(self, action):
        if self._lag is None:
            res = step(self.state, self.prev_action, action, self.goal, self.tolerances, self.weights,
                       self.model, self.elapsed)
        else:
            res = surrogate_step(self.state, self.prev_action, action, self.goal, self.tolerances,
                                 self.weights, self.model, self.elapsed, self.surrogate, self._lag)
        self.state = res.next_state
        self.prev_action = clamp_action(action)
        self.elapsed = res.elapsed_steps
        obs = self.observe()
        if self._lag is not None and self.surrogate.extra_obs_noise > 0:
            noisy = np.asarray(self.state) + self.rng.normal(0.0, self.surrogate.extra_obs_noise, size=3)
            obs = observe(noisy, self.goal, self.config.obs_noise, self.rng, self.config.r_max)
        return res._replace(observation=obs)

    @property
    def truncated(self):
        return self.elapsed >= self.config.horizon


def load_model_for(config):
    if config.model_path is None:
        return VelocityModel.identity()
    return VelocityModel.load(config.model_path)
