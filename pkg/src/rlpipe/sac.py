"""Soft actor-critic: squashed-Gaussian actor, twin critics, learned temperature.

The critics see actions in the actor's unit box ``tanh(u)`` rather than in
physical units; :func:`to_unit` / :func:`from_unit` convert between the two.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from rlpipe.errors import ConfigError, InvalidInputError, TrainingDivergedError
from rlpipe.nn import Adam, Mlp
from rlpipe.sysid import ACTION_HIGH, ACTION_LOW

OBS_DIM = 8
ACTION_DIM = 3
ACTION_MID = (ACTION_HIGH + ACTION_LOW) / 2.0
ACTION_HALF = (ACTION_HIGH - ACTION_LOW) / 2.0
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
TANH_EPS = 1e-6
# saturated tanh rounds to +-1 in float64; keep emitted actions strictly inside their ranges
UNIT_LIMIT = 1.0 - 1e-12
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG_HALF_SUM = float(np.sum(np.log(ACTION_HALF)))

CHECKPOINT_FORMAT = "rlpipe-policy"
CHECKPOINT_VERSION = 1


@dataclass
class SacHyper:
    batch_size: int = 512
    tau: float = 0.0045
    gamma: float = 0.999
    learning_rate: float = 2e-4
    buffer_capacity: int = 1_000_000
    total_steps: int = 300_000
    entropy_target: float = -3.0
    actor_hidden: tuple = (16, 16)
    critic_hidden: tuple = (128, 128)
    learning_starts: int = 1_000
    her_k: int = 4
    init_log_temperature: float = 0.0

    def __post_init__(self):
        self.actor_hidden = tuple(int(v) for v in self.actor_hidden)
        self.critic_hidden = tuple(int(v) for v in self.critic_hidden)
        positive = ("batch_size", "gamma", "learning_rate", "buffer_capacity", "total_steps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.tau <= 1 or self.gamma > 1:
            raise ConfigError("tau must lie in [0, 1] and gamma must not exceed 1")
        if self.her_k < 0 or self.learning_starts < 0:
            raise ConfigError("her_k and learning_starts must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown SAC hyperparameter(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def to_unit(a):
    return (np.asarray(a, dtype=np.float64) - ACTION_MID) / ACTION_HALF


def from_unit(t):
    return ACTION_MID + ACTION_HALF * t


class PolicyParams:
    """Actor, twin critics, their Polyak targets and the log temperature."""

    def __init__(self, actor, critics, target_critics, log_temperature):
        self.actor = actor
        self.critics = list(critics)
        self.target_critics = list(target_critics)
        self.log_temperature = np.array([float(np.asarray(log_temperature).reshape(-1)[0])])

    @classmethod
    def initialize(cls, rng, hyper=None):
        hyper = hyper or SacHyper()
        actor = Mlp([OBS_DIM, *hyper.actor_hidden, 2 * ACTION_DIM], rng, final_scale=1e-2)
        critics = [Mlp([OBS_DIM + ACTION_DIM, *hyper.critic_hidden, 1], rng) for _ in range(2)]
        return cls(actor, critics, [c.copy() for c in critics], hyper.init_log_temperature)

    @property
    def alpha(self):
        return float(np.exp(self.log_temperature[0]))

    def copy(self):
        return PolicyParams(self.actor.copy(), [c.copy() for c in self.critics],
                            [c.copy() for c in self.target_critics], self.log_temperature.copy())

    def arrays(self):
        """Every parameter array, in a fixed order (for equality checks)."""
        out = list(self.actor.params)
        for net in self.critics + self.target_critics:
            out.extend(net.params)
        out.append(self.log_temperature)
        return out


class SacOptimizers:
    def __init__(self, params, lr):
        self.actor = Adam(params.actor.params, lr)
        self.critics = [Adam(c.params, lr) for c in params.critics]
        self.temperature = Adam([params.log_temperature], lr)

    def state_dict(self):
        return {
            "actor": self.actor.state_dict(),
            "critics": [o.state_dict() for o in self.critics],
            "temperature": self.temperature.state_dict(),
        }

    def load_state_dict(self, d):
        self.actor.load_state_dict(d["actor"])
        for o, s in zip(self.critics, d["critics"]):
            o.load_state_dict(s)
        self.temperature.load_state_dict(d["temperature"])


class Batch(NamedTuple):
    obs: np.ndarray
    actions: np.ndarray  # physical units
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray


# ------------------------------------------------------------------ policy head


def actor_heads(out):
    """Split actor output into (mean, clamped log-std, clamp pass-through mask)."""
    mu = out[..., :ACTION_DIM]
    raw = out[..., ACTION_DIM:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    mask = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
    return mu, log_std, mask


def squash(u):
    return np.clip(np.tanh(u), -UNIT_LIMIT, UNIT_LIMIT)


def squashed_log_prob(eps, t, log_std):
    """Log density of the affine-tanh squashed Gaussian at a reparameterised sample."""
    per_dim = -0.5 * eps * eps - log_std - _HALF_LOG_2PI - np.log(1.0 - t * t + TANH_EPS)
    return per_dim.sum(axis=-1) - _LOG_HALF_SUM


def squashed_density_1d(a, mu, log_std, low, high):
    """Density over one physical action interval (used to check normalisation)."""
    half = (high - low) / 2.0
    t = (np.asarray(a, dtype=np.float64) - (high + low) / 2.0) / half
    t = np.clip(t, -1 + 1e-15, 1 - 1e-15)
    u = np.arctanh(t)
    std = math.exp(log_std)
    eps = (u - mu) / std
    logp = -0.5 * eps * eps - log_std - _HALF_LOG_2PI - np.log(1.0 - t * t + TANH_EPS) - math.log(half)
    return np.exp(logp)


def sample_action(params, obs, deterministic=False, rng=None):
    """Return (physical action, log-probability) for one observation or a batch."""
    out = params.actor(np.asarray(obs, dtype=np.float64))
    mu, log_std, _ = actor_heads(out)
    if deterministic:
        eps = np.zeros_like(mu)
    else:
        if rng is None:
            raise InvalidInputError("stochastic sampling needs a random generator")
        eps = rng.standard_normal(mu.shape)
    t = squash(mu + np.exp(log_std) * eps)
    return from_unit(t), squashed_log_prob(eps, t, log_std)


# ------------------------------------------------------------------ losses


def critic_targets(params, batch, eps_next, alpha, gamma):
    """r + gamma * (1 - terminal) * (min target-Q(s', a') - alpha * log pi(a'|s'))."""
    out = params.actor(batch.next_obs)
    mu, log_std, _ = actor_heads(out)
    t = squash(mu + np.exp(log_std) * eps_next)
    logp = squashed_log_prob(eps_next, t, log_std)
    x = np.concatenate([batch.next_obs, t], axis=1)
    q1 = params.target_critics[0](x)[:, 0]
    q2 = params.target_critics[1](x)[:, 0]
    soft_v = np.minimum(q1, q2) - alpha * logp
    return batch.rewards + gamma * (1.0 - batch.terminals) * soft_v


def critic_loss_and_grads(critics, obs, unit_actions, targets):
    """0.5 * sum_i mean((Q_i(s, a) - y)^2) and the gradient for each critic."""
    x = np.concatenate([obs, unit_actions], axis=1)
    n = x.shape[0]
    loss = 0.0
    grads = []
    for critic in critics:
        q = critic.forward(x)[:, 0]
        diff = q - targets
        loss += 0.5 * float(np.mean(diff * diff))
        g, _ = critic.backward((diff / n)[:, None])
        grads.append(g)
    return loss, grads


def actor_loss_and_grads(actor, critics, obs, eps, alpha):
    """mean(alpha * log pi - min Q) with eps held fixed; returns (loss, grads, log_probs)."""
    out = actor.forward(obs)
    mu, log_std, mask = actor_heads(out)
    std = np.exp(log_std)
    t = squash(mu + std * eps)
    logp = squashed_log_prob(eps, t, log_std)
    x = np.concatenate([obs, t], axis=1)
    n = x.shape[0]
    q1 = critics[0].forward(x)[:, 0]
    q2 = critics[1].forward(x)[:, 0]
    use_first = q1 <= q2
    q_min = np.where(use_first, q1, q2)
    loss = float(np.mean(alpha * logp - q_min))

    _, gx1 = critics[0].backward(use_first[:, None].astype(np.float64), need_input_grad=True,
                                 need_param_grads=False)
    _, gx2 = critics[1].backward((~use_first)[:, None].astype(np.float64), need_input_grad=True,
                                 need_param_grads=False)
    dq_dt = (gx1 + gx2)[:, OBS_DIM:]
    one_minus_t2 = 1.0 - t * t
    k = 2.0 * t * one_minus_t2 / (one_minus_t2 + TANH_EPS)
    pre = alpha * k - dq_dt * one_minus_t2  # d(loss * n)/du
    g_mu = pre
    g_log_std = (pre * std * eps - alpha) * mask
    grads, _ = actor.backward(np.concatenate([g_mu, g_log_std], axis=1) / n)
    return loss, grads, logp


def temperature_loss_and_grad(log_temperature, log_probs, entropy_target):
    """-mean(log_alpha * (log pi + target)) with log pi treated as a constant."""
    shift = log_probs + entropy_target
    loss = -float(log_temperature[0] * np.mean(shift))
    return loss, np.array([-np.mean(shift)])


def polyak(target, source, tau):
    """target <- (1 - tau) * target + tau * source, in place."""
    for k in range(len(target.weights)):
        target.weights[k][...] = (1.0 - tau) * target.weights[k] + tau * source.weights[k]
        target.biases[k][...] = (1.0 - tau) * target.biases[k] + tau * source.biases[k]


def _require_finite(name, value, step):
    if not math.isfinite(value):
        raise TrainingDivergedError(name, value, step)


def sac_update(params, optimizers, batch, hyper, rng):
    """One gradient step on critics, actor and temperature, then Polyak targets.

    Mutates ``params`` and ``optimizers``; returns ``(params, losses)``.
    """
    n = batch.obs.shape[0]
    if n != hyper.batch_size:
        raise InvalidInputError(f"batch has {n} transitions, expected {hyper.batch_size}")
    step = optimizers.actor.t
    alpha = params.alpha
    eps_next = rng.standard_normal((n, ACTION_DIM))
    eps_now = rng.standard_normal((n, ACTION_DIM))

    y = critic_targets(params, batch, eps_next, alpha, hyper.gamma)
    critic_loss, critic_grads = critic_loss_and_grads(params.critics, batch.obs, to_unit(batch.actions), y)
    _require_finite("critic_loss", critic_loss, step)
    for critic, opt, g in zip(params.critics, optimizers.critics, critic_grads):
        opt.step(critic.params, g)

    actor_loss, actor_grads, logp = actor_loss_and_grads(params.actor, params.critics, batch.obs,
                                                         eps_now, alpha)
    _require_finite("actor_loss", actor_loss, step)
    optimizers.actor.step(params.actor.params, actor_grads)

    temp_loss, temp_grad = temperature_loss_and_grad(params.log_temperature, logp, hyper.entropy_target)
    _require_finite("temperature_loss", temp_loss, step)
    optimizers.temperature.step([params.log_temperature], [temp_grad])

    for target, critic in zip(params.target_critics, params.critics):
        polyak(target, critic, hyper.tau)

    losses = {
        "critic": critic_loss,
        "actor": actor_loss,
        "temperature": temp_loss,
        "alpha": alpha,
        "entropy": -float(np.mean(logp)),
        "target_mean": float(np.mean(y)),
    }
    return params, losses


# ------------------------------------------------------------------ checkpoints


def _net_dict(net):
    return {"sizes": list(net.sizes), "params": [p.tolist() for p in net.params]}


def _net_from(d, expected_sizes, what):
    if list(d["sizes"]) != list(expected_sizes):
        raise InvalidInputError(f"{what}: checkpoint layer sizes {d['sizes']} != expected {list(expected_sizes)}")
    net = Mlp(expected_sizes)
    net.set_params(d["params"])
    return net


@dataclass
class Checkpoint:
    params: PolicyParams
    hyper: SacHyper = field(default_factory=SacHyper)
    step: int = 0
    rng_state: dict = None
    optimizers: dict = None
    curriculum: dict = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        p = self.params
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "algorithm": "sac",
            "hyper": self.hyper.to_dict(),
            "step": int(self.step),
            "log_temperature": float(p.log_temperature[0]),
            "actor": _net_dict(p.actor),
            "critics": [_net_dict(c) for c in p.critics],
            "target_critics": [_net_dict(c) for c in p.target_critics],
            "rng_state": self.rng_state,
            "optimizers": self.optimizers,
            "curriculum": self.curriculum,
            "extra": self.extra,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d, hyper=None):
        if d.get("format") != CHECKPOINT_FORMAT:
            raise InvalidInputError("not a policy checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {d.get('version')!r}")
        stored = SacHyper.from_dict(d["hyper"])
        hyper = hyper or stored
        actor_sizes = [OBS_DIM, *hyper.actor_hidden, 2 * ACTION_DIM]
        critic_sizes = [OBS_DIM + ACTION_DIM, *hyper.critic_hidden, 1]
        actor = _net_from(d["actor"], actor_sizes, "actor")
        critics = [_net_from(c, critic_sizes, "critic") for c in d["critics"]]
        targets = [_net_from(c, critic_sizes, "target critic") for c in d["target_critics"]]
        if len(critics) != 2 or len(targets) != 2:
            raise InvalidInputError("checkpoint must hold exactly two critics and two targets")
        params = PolicyParams(actor, critics, targets, d["log_temperature"])
        return cls(params, stored, d.get("step", 0), d.get("rng_state"), d.get("optimizers"),
                   d.get("curriculum"), d.get("extra") or {})

    @classmethod
    def load(cls, path, hyper=None):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InvalidInputError(f"checkpoint not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"checkpoint {path} is not valid JSON: {exc}") from None
        return cls.from_dict(d, hyper)
