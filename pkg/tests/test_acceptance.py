"""Acceptance suite: one PASS/FAIL line per criterion in the terminal summary.

Criteria 4, 5 and 8 share one policy trained through the ``pipeline`` command
(core-train stage in 10k-step chunks, gated at 90% success over 100
deterministic episodes at 0.3 m / 17 deg, at most 3e5 steps). Set
``RLPIPE_ACCEPTANCE_CACHE`` to a directory to keep and reuse that run while
developing; leave it unset for a clean run.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from rlpipe import cli, dynamics as dyn, pathfollow, sac, sysid
from rlpipe.curriculum import CurriculumState, promotions_to_floor
from rlpipe.dynamics import FINAL_TOLERANCES, RELAXED_TOLERANCES, TRANSFER_SURROGATE, EnvConfig, RewardWeights
from rlpipe.replay import ReplayBuffer
from rlpipe.training import evaluate

from oracles import accumulated_cost, check_all_gradients, random_episode, trace_metrics

STEP_LIMIT = 300_000
CHUNK = 10_000
WALL_LIMIT_S = 2 * 3600
EVAL_EPISODES = 100
EVAL_SEED = 20_240_601


# ------------------------------------------------------------------ 1


def test_c1_sysid_recovery(criterion):
    rng = np.random.default_rng(1)
    truth = rng.uniform(-1, 1, size=(3, 19))
    actions = sysid.make_grid(counts=(9, 9, 9))
    velocities = sysid.VelocityModel(truth).predict_batch(actions)
    sysid.fit(actions, velocities)  # warm-up so compilation is not timed
    t0 = time.perf_counter()
    model = sysid.fit(actions, velocities)
    elapsed = time.perf_counter() - t0
    rel = float(np.max(np.abs(model.coeffs - truth) / np.abs(truth)))
    ok = criterion(1, rel <= 1e-6 and elapsed < 1.0,
                   f"sysid recovery max rel err {rel:.2e} (<= 1e-6), fit time {elapsed * 1e3:.1f} ms (< 1 s)")
    assert ok


# ------------------------------------------------------------------ 2


def _independent_success(state, goal, tol):
    d = goal[2] - state[2]
    e_th = abs(math.atan2(math.sin(d), math.cos(d)))
    return math.hypot(goal[0] - state[0], goal[1] - state[1]) < tol[0] and e_th < tol[1]


def test_c2_features_and_reward_oracle(criterion, truth_model):
    n_feat = sysid.expand_features((0.3, -0.1, 0.7)).size
    rng = np.random.default_rng(2)
    tol = dyn.Tolerances(0.3, math.radians(17))
    cfg = EnvConfig(tolerances=tol, horizon=10_000, obs_noise=0.0)
    env = dyn.GoalEnv(cfg, truth_model)
    worst = 0.0
    for seq in range(1000):
        env.reset(np.random.default_rng([2, seq]))
        if seq % 2:  # half the sequences start near the goal so the lambda term varies
            env.reset_to(env.goal, env.goal, env.rng)
        length = int(rng.integers(1, 60))
        actions = rng.uniform(sac.ACTION_MID - sac.ACTION_HALF, sac.ACTION_MID + sac.ACTION_HALF,
                              size=(length, 3)) * rng.uniform(0, 1)
        total, reached = 0.0, []
        for a in actions:
            res = env.step(a)
            total += res.reward
            reached.append(_independent_success(res.next_state, env.goal, tol))
        cost = accumulated_cost(actions, reached)
        worst = max(worst, abs(-total - cost) / max(1.0, cost))
    ok = criterion(2, n_feat == 19 and worst < 1e-13,
                   f"{n_feat} features (== 19); 1000 sequences, max rel |(-sum r) - cost| {worst:.1e} (< 1e-13)")
    assert ok


# ------------------------------------------------------------------ 3


def test_c3_gradient_suite(criterion):
    errs = np.array([check_all_gradients(seed) for seed in range(20)])
    worst = errs.max(axis=0)
    ok = criterion(3, bool(np.all(worst < 1e-3)),
                   f"20 configurations, worst rel err critic {worst[0]:.1e} actor {worst[1]:.1e} "
                   f"temperature {worst[2]:.1e} (< 1e-3)")
    assert ok


# ------------------------------------------------------------------ 4, 5, 8: shared trained policy


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    cache = os.environ.get("RLPIPE_ACCEPTANCE_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    run_dir = root / "pipeline"
    summary_path = run_dir / "summary.json"
    if not (cache and summary_path.is_file()):
        assert cli.main(["sysid", "--synthetic", "--seed", "7", "--out-dir", str(root / "sysid")]) == 0
        config = {
            "model": str(root / "sysid" / "model.json"),
            "stages": [{
                "kind": "core-train",
                "name": "core",
                "budget": CHUNK,
                "max_repeats": STEP_LIMIT // CHUNK,
                "gate": {"metric": "success_rate", "threshold": 0.9, "episodes": EVAL_EPISODES,
                         "tolerances": list(RELAXED_TOLERANCES)},
            }],
        }
        (root / "pipeline.json").write_text(json.dumps(config, indent=2))
        t0 = time.perf_counter()
        code = cli.main(["pipeline", "--config", str(root / "pipeline.json"), "--seed", "0",
                         "--out-dir", str(run_dir)])
        elapsed = time.perf_counter() - t0
        (root / "wall_clock.json").write_text(json.dumps({"seconds": elapsed, "exit_code": code}))
    info = json.loads((root / "wall_clock.json").read_text())
    report = json.loads((run_dir / "reports" / "stage-0.json").read_text())
    summary = json.loads(summary_path.read_text())
    ckpt = sac.Checkpoint.load(run_dir / summary["final_checkpoint"]) if summary["verdict"] else None
    model = sysid.VelocityModel.load(run_dir / "model.json")
    return {"report": report, "summary": summary, "seconds": info["seconds"], "checkpoint": ckpt,
            "model": model, "root": root}


def test_c4_desk_scale_training(criterion, trained):
    report = trained["report"]
    steps = report.get("env_steps", STEP_LIMIT)
    fresh = evaluate(trained["checkpoint"].params, EnvConfig(), trained["model"], EVAL_EPISODES, seed=EVAL_SEED,
                     tolerances=RELAXED_TOLERANCES)["success_rate"] if trained["checkpoint"] else 0.0
    ok = (trained["summary"]["verdict"] and steps <= STEP_LIMIT and fresh >= 0.9
          and trained["seconds"] <= WALL_LIMIT_S)
    criterion(4, ok, f"gate success {report['success_rate']:.2f}, held-out seed {fresh:.2f} (>= 0.90) at 0.3 m/17 deg "
                     f"after {steps} steps (<= {STEP_LIMIT}), {trained['seconds'] / 60:.1f} min (<= 120)")
    assert ok


def test_c5_transfer_property(criterion, trained):
    ckpt = trained["checkpoint"]
    assert ckpt is not None, "no trained policy"
    args = (ckpt.params, EnvConfig(), trained["model"], EVAL_EPISODES)
    relaxed = evaluate(*args, seed=EVAL_SEED, tolerances=RELAXED_TOLERANCES, surrogate=TRANSFER_SURROGATE)
    tight = evaluate(*args, seed=EVAL_SEED, tolerances=FINAL_TOLERANCES, surrogate=TRANSFER_SURROGATE)
    r, t = relaxed["success_rate"], tight["success_rate"]
    ok = criterion(5, r >= t and r >= 0.8,
                   f"surrogate success {r:.2f} at 0.3 m/17 deg (>= 0.80) vs {t:.2f} at 0.05 m/1 deg")
    assert ok


def test_c8_path_following(criterion, trained):
    ckpt = trained["checkpoint"]
    assert ckpt is not None, "no trained policy"
    path = pathfollow.synthesize_path(pathfollow.rectangle_waypoints(), start=(0.0, 0.0, 0.0))
    plan = pathfollow.undersample(path)
    trace, metrics = pathfollow.follow(plan, ckpt.params, trained["model"], EnvConfig(), speed_cap=1.0, seed=0,
                                       start=path[0])
    length, duration, speed = trace_metrics(trace, metrics.start_pose)
    agree = max(abs(length - metrics.path_length_m), abs(duration - metrics.duration_s),
                abs(speed - metrics.average_speed_mps))
    last = trace[-1]
    final_ok = dyn.is_success((last["x"], last["y"], last["theta"]), plan.goals[-1], RELAXED_TOLERANCES)
    ok = (len(metrics.subgoal_times) == len(plan.goals) and final_ok and metrics.average_speed_mps <= 1.0
          and agree <= 1e-9)
    criterion(8, ok, f"{len(metrics.subgoal_times)}/{len(plan.goals)} sub-goals on a "
                     f"{np.hypot(*np.diff(path[:, :2], axis=0).T).sum():.0f} m loop, driven {metrics.path_length_m:.1f} m "
                     f"in {metrics.duration_s:.1f} s, {metrics.average_speed_mps:.3f} m/s (<= 1.0), "
                     f"metric mismatch {agree:.1e} (<= 1e-9)")
    assert ok


# ------------------------------------------------------------------ 6


def test_c6_her_consistency(criterion, truth_model):
    tol = RELAXED_TOLERANCES
    weights = RewardWeights()
    buf = ReplayBuffer(100_000)
    episodes = []
    for k in range(200):
        ep = random_episode(truth_model, int(np.random.default_rng(k).integers(5, 120)), k)
        buf.push_episode(ep)
        episodes.append(ep)
    checked = mismatches = bad_goals = 0
    rng = np.random.default_rng(6)
    while checked < 10_000:
        batch, info = buf.sample(1024, rng, tol, weights, her_k=4, with_info=True)
        for row in np.flatnonzero(info["relabelled"]):
            start, t, ft = info["episode_start"][row], info["t"][row], info["future_t"][row]
            ep = episodes[[s[0] for s in buf.episode_slots()].index(start)]
            goal = tuple(info["goals"][row])
            tr = ep[t]
            if not (ft >= t and goal == ep[ft].achieved_state):
                bad_goals += 1
            ok = dyn.is_success(tr.achieved_state, goal, tol)
            r = dyn.reward(tr.action, tr.prev_action, ok, weights)
            if batch.rewards[row] != r or bool(info["success"][row]) != ok or batch.terminals[row] != float(ok):
                mismatches += 1
            checked += 1
    passed = criterion(6, mismatches == 0 and bad_goals == 0,
                       f"{checked} relabelled transitions: {mismatches} reward/success mismatches, "
                       f"{bad_goals} goals not from a later step of the same episode")
    assert passed


# ------------------------------------------------------------------ 7


def test_c7_curriculum(criterion):
    rng = np.random.default_rng(7)
    violations = 0
    for trial in range(200):
        p = rng.uniform(0.85, 1.0)
        state = CurriculumState()
        window, prev = [], state.current
        for _ in range(3000):
            ok = bool(rng.random() < p)
            window = (window + [ok])[-100:]
            promoted = state.record(ok)
            if promoted:
                violations += not (len(window) == 100 and sum(window) >= 95)
                window = []
            violations += not (state.current.eps_p <= prev.eps_p and state.current.eps_theta <= prev.eps_theta)
            prev = state.current
    state = CurriculumState()
    while state.current.eps_p > FINAL_TOLERANCES.eps_p:
        for _ in range(100):
            state.record(True)
    expected = math.ceil(math.log(0.05 / 1.6) / math.log(0.8))
    ok = criterion(7, violations == 0 and state.promotions == expected == promotions_to_floor() == 16,
                   f"200 random success sequences: {violations} violations; floor reached after "
                   f"{state.promotions} promotions (== {expected})")
    assert ok


# ------------------------------------------------------------------ 9


def test_c9_manifest_reruns_byte_identical(criterion, tmp_path, model_file):
    config = {
        "model": str(model_file),
        "sac": {"batch_size": 64, "learning_starts": 200},
        "stages": [
            {"kind": "core-train", "budget": 1500, "gate": {"threshold": 0.0, "episodes": 5}},
            {"kind": "surrogate-eval", "budget": 5, "gate": {"threshold": 0.0},
             "surrogate": TRANSFER_SURROGATE._asdict()},
        ],
    }
    (tmp_path / "p.json").write_text(json.dumps(config))
    runs = {
        "pipeline": ["pipeline", "--config", str(tmp_path / "p.json"), "--seed", "3"],
        "eval": ["eval", "--untrained", "--model", str(model_file), "--episodes", "5", "--seed", "3",
                 "--surrogate"],
    }
    differing, compared = [], 0
    for name, argv in runs.items():
        first = tmp_path / f"{name}-a"
        assert cli.main(argv + ["--out-dir", str(first)]) == 0
        if name == "pipeline":
            # evaluate the freshly trained checkpoint as a second evaluation command
            runs_eval = ["eval", "--checkpoint", str(first / "checkpoints" / "stage-0.ckpt"), "--model",
                         str(model_file), "--episodes", "5", "--seed", "4", "--out-dir", str(tmp_path / "ev-a")]
            assert cli.main(runs_eval) == 0
            assert cli.main(["rerun", str(tmp_path / "ev-a" / "manifest.json"), "--out-dir",
                             str(tmp_path / "ev-b")]) == 0
            d, n = _compare(tmp_path / "ev-a", tmp_path / "ev-b")
            differing, compared = differing + d, compared + n
        second = tmp_path / f"{name}-b"
        assert cli.main(["rerun", str(first / "manifest.json"), "--out-dir", str(second)]) == 0
        d, n = _compare(first, second)
        differing, compared = differing + d, compared + n
    ok = criterion(9, compared > 0 and not differing,
                   f"3 commands re-run from their manifests: {compared} checkpoint/report/trace files compared, "
                   f"{len(differing)} differ {differing[:3]}")
    assert ok


def _compare(a, b):
    """Byte-compare every artifact except the manifest (which holds timestamps)."""
    diffs, count = [], 0
    for p in sorted(a.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            count += 1
            q = b / p.relative_to(a)
            if not q.is_file() or q.read_bytes() != p.read_bytes():
                diffs.append(str(p.relative_to(a)))
    return diffs, count
