"""Hot numeric kernels: polynomial features, pose integration, reward.

Scalar kernels are written against ``math`` so the same source runs either
compiled by numba or as plain Python. Batch kernels come in two flavours, a
numba loop and a vectorised numpy expression; ``RLPIPE_BACKEND`` picks one.
Both flavours perform the same floating-point operations in the same order,
so results agree bit for bit on IEEE hardware.
"""
import math

import numpy as np

from rlpipe._accel import BACKEND, HAS_NUMBA, maybe_njit

PI = math.pi
TWO_PI = 2.0 * math.pi


def _monomial_exponents(order=3):
    exps = []
    for degree in range(1, order + 1):
        block = [(i, j, degree - i - j) for i in range(degree + 1) for j in range(degree + 1 - i)]
        exps.extend(sorted(block, reverse=True))
    return np.array(exps, dtype=np.int64)


# (19, 3) exponent table (i, j, l) for a_x^i a_y^j a_theta^l; degree-1 block first,
# then degree 2 and 3, each block sorted descending on (i, j, l).
MONOMIALS = _monomial_exponents(3)
N_FEATURES = MONOMIALS.shape[0]


@maybe_njit
def wrap_angle(a):
    """Wrap an angle into [-pi, pi); in-range angles pass through untouched."""
    if -PI <= a < PI:
        return a
    r = (a + PI) % TWO_PI - PI
    if r >= PI:
        r -= TWO_PI
    return r


@maybe_njit
def _powers(v):
    v2 = v * v
    return 1.0, v, v2, v2 * v


@maybe_njit
def features_scalar(ax, ay, at, exps, out):
    px = _powers(ax)
    py = _powers(ay)
    pt = _powers(at)
    for k in range(exps.shape[0]):
        out[k] = px[exps[k, 0]] * py[exps[k, 1]] * pt[exps[k, 2]]
    return out


@maybe_njit
def predict_scalar(coeffs, exps, ax, ay, at):
    """Evaluate the 3-output polynomial at one command; returns (vx, vy, vtheta)."""
    px = _powers(ax)
    py = _powers(ay)
    pt = _powers(at)
    vx = 0.0
    vy = 0.0
    vt = 0.0
    for k in range(exps.shape[0]):
        f = px[exps[k, 0]] * py[exps[k, 1]] * pt[exps[k, 2]]
        vx += coeffs[0, k] * f
        vy += coeffs[1, k] * f
        vt += coeffs[2, k] * f
    return vx, vy, vt


@maybe_njit
def advance_pose(x, y, th, vx, vy, vt, dt):
    """One explicit Euler substep of a body-frame velocity applied in the world frame."""
    c = math.cos(th)
    s = math.sin(th)
    x = x + (c * vx - s * vy) * dt
    y = y + (s * vx + c * vy) * dt
    th = wrap_angle(th + vt * dt)
    return x, y, th


@maybe_njit
def core_advance(x, y, th, ax, ay, at, coeffs, exps, dt, n_sub):
    vx, vy, vt = predict_scalar(coeffs, exps, ax, ay, at)
    for _ in range(n_sub):
        x, y, th = advance_pose(x, y, th, vx, vy, vt, dt)
    return x, y, th


@maybe_njit
def surrogate_advance(x, y, th, ax, ay, at, coeffs, exps, dt, n_sub,
                      fifo, head, active, age, vel, lag_alpha, min_duration):
    """Substep the perturbed dynamics; mutates ``fifo``, ``active`` and ``vel`` in place.

    ``lag_alpha`` <= 0 selects the no-lag path (velocity snaps to target).
    Returns the new pose plus the updated FIFO head and command age.
    """
    latency = fifo.shape[0]
    for _ in range(n_sub):
        if latency > 0:
            ox = fifo[head, 0]
            oy = fifo[head, 1]
            ot = fifo[head, 2]
            fifo[head, 0] = ax
            fifo[head, 1] = ay
            fifo[head, 2] = at
            head = (head + 1) % latency
        else:
            ox = ax
            oy = ay
            ot = at
        changed = ox != active[0] or oy != active[1] or ot != active[2]
        if changed and age >= min_duration:
            active[0] = ox
            active[1] = oy
            active[2] = ot
            age = 0
        age += 1
        tx, ty, tt = predict_scalar(coeffs, exps, active[0], active[1], active[2])
        if lag_alpha <= 0.0:
            vel[0] = tx
            vel[1] = ty
            vel[2] = tt
        else:
            vel[0] = vel[0] + lag_alpha * (tx - vel[0])
            vel[1] = vel[1] + lag_alpha * (ty - vel[1])
            vel[2] = vel[2] + lag_alpha * (tt - vel[2])
        x, y, th = advance_pose(x, y, th, vel[0], vel[1], vel[2], dt)
    return x, y, th, head, age


@maybe_njit
def reward_scalar(u0, u1, u2, p0, p1, p2, at_goal, r_diag, s_diag):
    d0 = u0 - p0
    d1 = u1 - p1
    d2 = u2 - p2
    cost = r_diag[0] * u0 * u0 + r_diag[1] * u1 * u1 + r_diag[2] * u2 * u2
    cost = cost + (s_diag[0] * d0 * d0 + s_diag[1] * d1 * d1 + s_diag[2] * d2 * d2)
    if not at_goal:
        cost = cost + 1.0
    return -cost


@maybe_njit
def errors_scalar(x, y, th, gx, gy, gth):
    e_p = math.hypot(gx - x, gy - y)
    e_th = abs(wrap_angle(gth - th))
    return e_p, e_th


# ---------------------------------------------------------------- batch kernels


def _features_batch_numpy(actions, exps):
    a = np.asarray(actions, dtype=np.float64)
    pows = []
    for col in range(3):
        v = a[:, col]
        v2 = v * v
        pows.append(np.stack([np.ones_like(v), v, v2, v2 * v], axis=1))
    px, py, pt = pows
    return px[:, exps[:, 0]] * py[:, exps[:, 1]] * pt[:, exps[:, 2]]


@maybe_njit
def _features_batch_loop(actions, exps):
    n = actions.shape[0]
    out = np.empty((n, exps.shape[0]))
    for r in range(n):
        features_scalar(actions[r, 0], actions[r, 1], actions[r, 2], exps, out[r])
    return out


def _relabel_batch_numpy(achieved, goals, actions, prev_actions, eps_p, eps_th, r_diag, s_diag):
    e_p = np.hypot(goals[:, 0] - achieved[:, 0], goals[:, 1] - achieved[:, 1])
    diff = goals[:, 2] - achieved[:, 2]
    r = np.mod(diff + PI, TWO_PI) - PI
    r = np.where(r >= PI, r - TWO_PI, r)
    r = np.where((diff >= -PI) & (diff < PI), diff, r)
    e_th = np.abs(r)
    success = (e_p < eps_p) & (e_th < eps_th)
    u, p = actions, prev_actions
    d = u - p
    cost = r_diag[0] * u[:, 0] * u[:, 0] + r_diag[1] * u[:, 1] * u[:, 1] + r_diag[2] * u[:, 2] * u[:, 2]
    cost = cost + (s_diag[0] * d[:, 0] * d[:, 0] + s_diag[1] * d[:, 1] * d[:, 1] + s_diag[2] * d[:, 2] * d[:, 2])
    cost = cost + np.where(success, 0.0, 1.0)
    return -cost, success


@maybe_njit
def _relabel_batch_loop(achieved, goals, actions, prev_actions, eps_p, eps_th, r_diag, s_diag):
    n = achieved.shape[0]
    rewards = np.empty(n)
    success = np.empty(n, dtype=np.bool_)
    for k in range(n):
        e_p, e_th = errors_scalar(achieved[k, 0], achieved[k, 1], achieved[k, 2],
                                  goals[k, 0], goals[k, 1], goals[k, 2])
        ok = e_p < eps_p and e_th < eps_th
        success[k] = ok
        rewards[k] = reward_scalar(actions[k, 0], actions[k, 1], actions[k, 2],
                                   prev_actions[k, 0], prev_actions[k, 1], prev_actions[k, 2],
                                   ok, r_diag, s_diag)
    return rewards, success


def features_batch(actions):
    """(n, 3) commands -> (n, 19) monomial features in ``MONOMIALS`` order."""
    a = np.ascontiguousarray(actions, dtype=np.float64).reshape(-1, 3)
    if HAS_NUMBA:
        return _features_batch_loop(a, MONOMIALS)
    return _features_batch_numpy(a, MONOMIALS)


def relabel_batch(achieved, goals, actions, prev_actions, eps_p, eps_th, r_diag, s_diag):
    """Vectorised success test and reward for (achieved state, goal, action) rows."""
    args = [np.ascontiguousarray(v, dtype=np.float64) for v in (achieved, goals, actions, prev_actions)]
    r_diag = np.ascontiguousarray(r_diag, dtype=np.float64)
    s_diag = np.ascontiguousarray(s_diag, dtype=np.float64)
    if HAS_NUMBA:
        return _relabel_batch_loop(*args, float(eps_p), float(eps_th), r_diag, s_diag)
    return _relabel_batch_numpy(*args, float(eps_p), float(eps_th), r_diag, s_diag)


__all__ = [
    "BACKEND",
    "MONOMIALS",
    "N_FEATURES",
    "advance_pose",
    "core_advance",
    "errors_scalar",
    "features_batch",
    "features_scalar",
    "predict_scalar",
    "relabel_batch",
    "reward_scalar",
    "surrogate_advance",
    "wrap_angle",
]
