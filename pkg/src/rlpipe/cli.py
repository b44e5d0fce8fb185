"""Command-line entry point.

Exit codes: 0 success, 2 config/input error, 3 gate or mission failure,
4 training diverged.
"""
import argparse
import datetime as _dt
import json
import logging
import math
import shlex
import sys
from pathlib import Path

import numpy as np

from rlpipe import __version__, pathfollow, sac, sysid
from rlpipe.dynamics import TRANSFER_SURROGATE, EnvConfig, Tolerances
from rlpipe.errors import (
    ConfigError,
    DegenerateDataError,
    FollowFailedError,
    GateFailedError,
    InvalidInputError,
    TrainingDivergedError,
)
from rlpipe.pipeline import PipelineConfig, run_pipeline
from rlpipe.training import evaluate, write_jsonl

EXIT_OK, EXIT_INPUT, EXIT_GATE, EXIT_DIVERGED = 0, 2, 3, 4
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _abs(p):
    return None if p is None else str(Path(p).resolve())


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _tolerances(args, default):
    eps_p = args.tolerance_pos if args.tolerance_pos is not None else default.eps_p
    eps_th = math.radians(args.tolerance_ang) if args.tolerance_ang is not None else default.eps_theta
    return Tolerances(eps_p, eps_th)


# ---------------------------------------------------------------- commands


def cmd_synth_data(args):
    actions, velocities = sysid.synthesize_dataset(counts=tuple(args.counts), noise_sigma=args.noise,
                                                   repeats=args.repeats, seed=args.seed)
    out = Path(args.out or Path(args.out_dir) / "data.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    sysid.write_dataset_csv(out, actions, velocities)
    print(f"wrote {len(actions)} samples to {out}")
    return {"seed": args.seed, "artifacts": [str(out)]}


def cmd_sysid(args):
    if args.synthetic:
        if args.seed is None:
            raise UsageError("--synthetic requires --seed")
        actions, velocities = sysid.synthesize_dataset(counts=tuple(args.counts), noise_sigma=args.noise,
                                                       repeats=args.repeats, seed=args.seed)
    elif args.data:
        actions, velocities = sysid.read_dataset_csv(args.data)
    else:
        raise UsageError("give a dataset CSV or --synthetic")
    model = sysid.fit(actions, velocities)
    rms = sysid.residual_rms(model, actions, velocities)
    out = Path(args.out or Path(args.out_dir) / "model.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    for name, value in zip(("v_x", "v_y", "v_theta"), rms):
        print(f"rms residual {name}: {value:.3e}")
    print(f"wrote {out}")
    return {"seed": args.seed, "artifacts": [str(out)], "rms_residual": rms.tolist(), "samples": len(actions)}


def cmd_pipeline(args):
    config = PipelineConfig.load(args.config)
    config.seed = args.seed
    out_dir = Path(args.out_dir or config.out_dir)
    try:
        _, summary = run_pipeline(config, out_dir)
    finally:
        args._snapshot = config.to_dict()
    print(json.dumps({"verdict": summary["verdict"], "final_checkpoint": summary.get("final_checkpoint")}))
    return {"seed": args.seed, "config": config.to_dict(),
            "artifacts": sorted(str(p.relative_to(out_dir)) for p in out_dir.rglob("*") if p.is_file())}


def _load_env(args):
    env = EnvConfig.load(args.env_config) if args.env_config else EnvConfig()
    if args.model:
        env.model_path = _abs(args.model)
    if env.model_path is None:
        raise ConfigError("no velocity model: pass --model or set model_path in the environment config")
    return env, sysid.VelocityModel.load(env.model_path)


def _load_policy(args):
    if args.untrained:
        return sac.PolicyParams.initialize(np.random.default_rng(args.seed), sac.SacHyper())
    if not args.checkpoint:
        raise UsageError("give --checkpoint or --untrained")
    return sac.Checkpoint.load(args.checkpoint).params


def cmd_eval(args):
    env, model = _load_env(args)
    params = _load_policy(args)
    surrogate = None
    if args.surrogate:
        surrogate = TRANSFER_SURROGATE
    elif env.surrogate is not None:
        surrogate = env.surrogate
    tol = _tolerances(args, env.tolerances)
    out = Path(args.out_dir)
    report = evaluate(params, env, model, args.episodes, seed=args.seed, tolerances=tol, surrogate=surrogate,
                      trace_path=out / "traces" / "eval.jsonl")
    _write_json(out / "report.json", report)
    print(json.dumps({k: report[k] for k in ("success_rate", "mean_return", "mean_length")}))
    return {"seed": args.seed, "config": env.to_dict(), "artifacts": ["report.json", "traces/eval.jsonl"]}


def cmd_follow(args):
    env, model = _load_env(args)
    params = _load_policy(args)
    tol = _tolerances(args, pathfollow.RELAXED_TOLERANCES)
    if args.path:
        path = pathfollow.read_path_csv(args.path)
    elif args.waypoints:
        wp = pathfollow.read_pose_csv(args.waypoints, require_theta=False)
        start = np.array(args.start if args.start else (0.0, 0.0, 0.0), dtype=np.float64)
        if wp.shape[0] == 1 and np.allclose(wp[0, :2], start[:2]):
            path = np.vstack([start, start])
        else:
            path = pathfollow.synthesize_path(wp, start=start)
    else:
        raise UsageError("give --path or --waypoints")
    plan = pathfollow.undersample(path, args.spacing, tol)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pathfollow.write_pose_csv(out / "subgoals.csv", [tuple(g) for g in plan.goals])
    surrogate = TRANSFER_SURROGATE if args.surrogate else None
    try:
        trace, metrics = pathfollow.follow(plan, params, model, env, speed_cap=args.speed_cap,
                                           start=path[0], seed=args.seed, surrogate=surrogate)
    except FollowFailedError as exc:
        write_jsonl(out / "traces" / "follow.jsonl", exc.trace or [])
        if exc.metrics is not None:
            pathfollow.write_metrics_json(out / "metrics.json", exc.metrics)
        raise
    write_jsonl(out / "traces" / "follow.jsonl", trace)
    pathfollow.write_metrics_json(out / "metrics.json", metrics)
    print(json.dumps(metrics.to_dict()))
    return {"seed": args.seed, "config": env.to_dict(),
            "artifacts": ["subgoals.csv", "traces/follow.jsonl", "metrics.json"]}


def cmd_export_velocities(args):
    """Commanded vs model-predicted (and optionally measured) velocities, one row per command."""
    model = sysid.VelocityModel.load(args.model)
    if args.data:
        actions, measured = sysid.read_dataset_csv(args.data)
    else:
        actions, measured = sysid.make_grid(counts=tuple(args.counts)), None
    pred = model.predict_batch(actions)
    out = Path(args.out or Path(args.out_dir) / "velocities.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ["a_x", "a_y", "a_theta", "vhat_x", "vhat_y", "vhat_theta"]
    if measured is not None:
        cols += ["v_x", "v_y", "v_theta"]
    with out.open("w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(len(actions)):
            row = list(actions[k]) + list(pred[k]) + ([] if measured is None else list(measured[k]))
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {out}")
    return {"artifacts": [str(out)]}


def cmd_rerun(args):
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    argv = list(manifest["argv"])
    if "--out-dir" in argv:
        argv[argv.index("--out-dir") + 1] = args.out_dir
    else:
        argv += ["--out-dir", args.out_dir]
    if "--out" in argv:
        raise UsageError("manifest uses an explicit --out path; rerun it by hand with a new --out")
    print("rerunning: rlpipe " + shlex.join(argv))
    return main(argv)


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="rlpipe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rlpipe {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_required=False):
        sp.add_argument("--seed", type=int, required=seed_required)
        sp.add_argument("--out-dir", required=True)

    def grid(sp):
        sp.add_argument("--counts", type=int, nargs=3, default=list(sysid.DEFAULT_GRID_COUNTS))
        sp.add_argument("--noise", type=float, default=0.01)
        sp.add_argument("--repeats", type=int, default=1)

    sp = sub.add_parser("synth-data", help="write a synthetic identification dataset")
    common(sp, seed_required=True)
    grid(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("sysid", help="fit the velocity model")
    sp.add_argument("data", nargs="?")
    sp.add_argument("--synthetic", action="store_true")
    common(sp)
    grid(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sysid)

    sp = sub.add_parser("pipeline", help="run the staged training pipeline")
    sp.add_argument("--config", required=True)
    common(sp, seed_required=True)
    sp.set_defaults(func=cmd_pipeline)

    def policy_args(sp):
        sp.add_argument("--checkpoint")
        sp.add_argument("--untrained", action="store_true")
        sp.add_argument("--env-config", "--config", dest="env_config")
        sp.add_argument("--model")
        sp.add_argument("--tolerance-pos", type=float)
        sp.add_argument("--tolerance-ang", type=float, help="degrees")
        sp.add_argument("--surrogate", action="store_true", help="use the perturbed transfer dynamics")

    sp = sub.add_parser("eval", help="evaluate a policy with deterministic actions")
    common(sp, seed_required=True)
    policy_args(sp)
    sp.add_argument("--episodes", type=int, default=100)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("follow", help="follow a path or waypoint mission")
    common(sp, seed_required=True)
    policy_args(sp)
    sp.add_argument("--path")
    sp.add_argument("--waypoints")
    sp.add_argument("--start", type=float, nargs=3)
    sp.add_argument("--speed-cap", type=float, default=1.0)
    sp.add_argument("--spacing", type=float, default=pathfollow.SUBGOAL_SPACING)
    sp.set_defaults(func=cmd_follow)

    sp = sub.add_parser("export-velocities", help="plot-ready commanded/executed velocity table")
    common(sp)
    grid(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_export_velocities)

    sp = sub.add_parser("rerun", help="re-execute a run from its manifest into a new directory")
    sp.add_argument("manifest")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_rerun)
    return p


_PATH_FLAGS = ("--config", "--env-config", "--model", "--checkpoint", "--path", "--waypoints", "--data")


def _absolute_argv(argv):
    out = list(argv)
    for k, tok in enumerate(out[:-1]):
        if tok in _PATH_FLAGS:
            out[k + 1] = _abs(out[k + 1])
    if len(out) > 1 and out[0] == "sysid" and not out[1].startswith("-"):
        out[1] = _abs(out[1])
    return out


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"rlpipe: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "rerun":
        try:
            return cmd_rerun(args)
        except (UsageError, OSError, KeyError, json.JSONDecodeError) as exc:
            print(f"rlpipe: error: {exc}", file=sys.stderr)
            return EXIT_INPUT

    started = _now()
    code, info, error = EXIT_OK, {}, None
    try:
        info = args.func(args) or {}
    except (UsageError, ConfigError, InvalidInputError, DegenerateDataError) as exc:
        code, error = EXIT_INPUT, str(exc)
    except (GateFailedError, FollowFailedError) as exc:
        code, error = EXIT_GATE, str(exc)
    except TrainingDivergedError as exc:
        code, error = EXIT_DIVERGED, str(exc)
    if error:
        print(f"rlpipe: error: {error}", file=sys.stderr)

    out_dir = Path(args.out_dir)
    if code != EXIT_INPUT or out_dir.exists():
        manifest = {
            "tool": "rlpipe",
            "version": __version__,
            "command": args.command,
            "argv": _absolute_argv(argv),
            "seed": info.get("seed", getattr(args, "seed", None)),
            "config": info.get("config", getattr(args, "_snapshot", None)),
            "artifacts": info.get("artifacts", []),
            "started_at": started,
            "finished_at": _now(),
            "exit_code": code,
        }
        if error:
            manifest["error"] = error
        _write_json(out_dir / MANIFEST, manifest)
    return code


def main_exit():
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
