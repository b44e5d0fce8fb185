"""Sub-goal path following with the trained policy.

A dense planner path is thinned to sub-goals roughly one metre apart. Every
policy step the active sub-goal is re-expressed in the robot's own frame, so
the policy always sees itself at the origin of its training region.
"""
import csv
import json
import math
from pathlib import Path
from typing import NamedTuple

import numpy as np

from rlpipe import kernels, sac
from rlpipe.dynamics import (
    POLICY_DT,
    R_MAX,
    RELAXED_TOLERANCES,
    EnvConfig,
    Goal,
    GoalEnv,
    RobotState,
    Tolerances,
    errors,
    observe,
)
from rlpipe.errors import FollowFailedError, InvalidInputError
from rlpipe.sysid import ACTION_HIGH, ACTION_LOW

PATH_RESOLUTION = 0.05
SUBGOAL_SPACING = 1.0
SUBGOAL_TIMEOUT_S = 60.0
_ARC_SLACK = 1e-9


class SubGoalPlan(NamedTuple):
    goals: list
    tolerances: Tolerances = RELAXED_TOLERANCES


class RunMetrics(NamedTuple):
    path_length_m: float
    duration_s: float
    average_speed_mps: float
    subgoal_times: list
    start_pose: tuple

    def to_dict(self):
        return {
            "path_length_m": self.path_length_m,
            "duration_s": self.duration_s,
            "average_speed_mps": self.average_speed_mps,
            "subgoal_times": list(self.subgoal_times),
            "start_pose": list(self.start_pose),
        }


def _as_path(path):
    p = np.asarray(path, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise InvalidInputError(f"path must be an (n, 3) array of poses, got shape {p.shape}")
    if p.shape[0] < 2:
        raise InvalidInputError("path needs at least two poses")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("path contains non-finite coordinates")
    return p


def undersample(path, spacing=SUBGOAL_SPACING, tolerances=RELAXED_TOLERANCES):
    """Greedy arc-length thinning; the final pose is always the last sub-goal."""
    if not spacing > 0:
        raise InvalidInputError(f"spacing must be positive, got {spacing}")
    p = _as_path(path)
    seg = np.hypot(np.diff(p[:, 0]), np.diff(p[:, 1]))
    goals = []
    acc = 0.0
    last = p.shape[0] - 1
    for i in range(1, p.shape[0]):
        acc += seg[i - 1]
        if acc >= spacing - _ARC_SLACK or i == last:
            goals.append(Goal(*map(float, p[i])))
            acc = 0.0
    return SubGoalPlan(goals, Tolerances(*tolerances))


def relative_goal(state, goal, r_max=R_MAX):
    """Express ``goal`` in the robot frame, pulled in to ``r_max`` along its bearing if farther."""
    x, y, th = (float(v) for v in state)
    dx, dy = float(goal[0]) - x, float(goal[1]) - y
    c, s = math.cos(th), math.sin(th)
    rx = c * dx + s * dy
    ry = -s * dx + c * dy
    dist = math.hypot(rx, ry)
    if dist > r_max:
        rx, ry = rx * (r_max / dist), ry * (r_max / dist)
    return Goal(rx, ry, kernels.wrap_angle(float(goal[2]) - th))


def command_limits(speed_cap):
    low = np.maximum(ACTION_LOW, -speed_cap)
    high = np.minimum(ACTION_HIGH, speed_cap)
    return low, high


def cap_action(action, speed_cap):
    """Clamp each component to the cap and the command ranges, then the planar speed to the cap."""
    low, high = command_limits(speed_cap)
    a = np.minimum(np.maximum(np.asarray(action, dtype=np.float64), low), high)
    planar = math.hypot(a[0], a[1])
    if planar > speed_cap:
        a[:2] *= speed_cap / planar
    return a


def follow(plan, params, model, env_config=None, speed_cap=1.0, start=None, seed=0,
           surrogate=None, timeout_s=SUBGOAL_TIMEOUT_S):
    """Drive the deterministic policy through ``plan``; returns (trace, RunMetrics).

    Raises FollowFailedError (carrying the partial trace and metrics) when a
    sub-goal is not reached within ``timeout_s``.
    """
    if not plan.goals:
        raise InvalidInputError("plan has no sub-goals")
    env_config = env_config or EnvConfig()
    rng = np.random.default_rng(seed)
    env = GoalEnv(env_config, model, surrogate)
    start = RobotState(*(float(v) for v in (start if start is not None else (0.0, 0.0, 0.0))))
    env.reset_to(start, plan.goals[0], rng)
    env.tolerances = plan.tolerances
    max_steps = int(round(timeout_s / POLICY_DT))
    tol = plan.tolerances

    trace = []
    arrivals = []
    path_length = 0.0
    steps = 0
    idx = 0
    since_arrival = 0
    checked_at_start = False

    def metrics():
        duration = steps * POLICY_DT
        speed = path_length / duration if duration > 0 else 0.0
        return RunMetrics(path_length, duration, speed, list(arrivals), tuple(start))

    while idx < len(plan.goals):
        goal = plan.goals[idx]
        env.goal = goal
        if not checked_at_start or since_arrival > 0:
            e_p, e_th = errors(env.state, goal)
            checked_at_start = True
            if e_p < tol.eps_p and e_th < tol.eps_theta:
                arrivals.append(steps * POLICY_DT)
                idx += 1
                since_arrival = 0
                continue
        if since_arrival >= max_steps:
            raise FollowFailedError(
                f"sub-goal {idx} at ({goal.x:.2f}, {goal.y:.2f}) not reached within {timeout_s} s",
                trace=trace, metrics=metrics())
        rel = relative_goal(env.state, goal, env_config.r_max)
        obs = observe((0.0, 0.0, 0.0), rel, env_config.obs_noise, rng, env_config.r_max)
        raw, _ = sac.sample_action(params, obs, deterministic=True)
        action = cap_action(raw, speed_cap)
        before = env.state
        res = env.step(action)
        steps += 1
        since_arrival += 1
        path_length += math.hypot(res.next_state.x - before.x, res.next_state.y - before.y)
        e_p, e_th = errors(res.next_state, goal)
        trace.append({
            "t": steps * POLICY_DT,
            "x": res.next_state.x,
            "y": res.next_state.y,
            "theta": res.next_state.theta,
            "a_x": float(action[0]),
            "a_y": float(action[1]),
            "a_theta": float(action[2]),
            "reward": res.reward,
            "e_p": e_p,
            "e_theta": e_th,
            "success": bool(res.success),
            "subgoal": idx,
        })
    return trace, metrics()


# ------------------------------------------------------------------ file formats


def read_pose_csv(path, require_theta=True):
    """Rows of ``x,y,theta`` (``theta`` optional when ``require_theta`` is False)."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except FileNotFoundError:
        raise InvalidInputError(f"file not found: {path}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        needed = ["x", "y", "theta"] if require_theta else ["x", "y"]
        missing = [c for c in needed if c not in header]
        if missing:
            raise InvalidInputError(f"{path} is missing column(s): {', '.join(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): v for k, v in row.items() if k is not None}
            try:
                theta = float(row["theta"]) if row.get("theta") not in (None, "") else math.nan
                rows.append([float(row["x"]), float(row["y"]), theta])
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: non-numeric value") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def read_path_csv(path):
    return _as_path(read_pose_csv(path))


def write_pose_csv(path, poses):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "theta"])
        for x, y, th in np.asarray(poses, dtype=np.float64):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(th))])


def synthesize_path(waypoints, start=None, resolution=PATH_RESOLUTION):
    """Straight-line path through ``waypoints`` at ``resolution`` spacing.

    Headings follow each segment's direction. ``start`` (x, y, theta) is
    prepended when given; a NaN waypoint heading means "along the segment".
    """
    wp = np.asarray(waypoints, dtype=np.float64).reshape(-1, 3)
    if start is not None:
        wp = np.vstack([np.asarray(start, dtype=np.float64).reshape(1, 3), wp])
    if wp.shape[0] < 2:
        raise InvalidInputError("need a start and at least one waypoint")
    first_heading = wp[0, 2] if math.isfinite(wp[0, 2]) else math.atan2(wp[1, 1] - wp[0, 1], wp[1, 0] - wp[0, 0])
    poses = [(wp[0, 0], wp[0, 1], kernels.wrap_angle(first_heading))]
    for a, b in zip(wp[:-1], wp[1:]):
        dx, dy = b[0] - a[0], b[1] - a[1]
        length = math.hypot(dx, dy)
        if length == 0:
            continue
        heading = math.atan2(dy, dx)
        n = max(1, int(math.ceil(length / resolution - 1e-9)))
        for k in range(1, n + 1):
            f = k / n
            poses.append((a[0] + f * dx, a[1] + f * dy, heading))
        if math.isfinite(b[2]):
            poses[-1] = (poses[-1][0], poses[-1][1], kernels.wrap_angle(b[2]))
    return _as_path(poses)


def rectangle_waypoints(width=12.0, height=8.0):
    """Four corners of a ``width`` x ``height`` loop starting and ending at the origin."""
    return np.array([[width, 0.0, math.nan], [width, height, math.nan], [0.0, height, math.nan],
                     [0.0, 0.0, math.nan]])


def write_metrics_json(path, metrics):
    Path(path).write_text(json.dumps(metrics.to_dict(), indent=2) + "\n", encoding="utf-8")
