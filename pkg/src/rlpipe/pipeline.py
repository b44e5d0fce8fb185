"""Staged training pipeline with pass/fail gates and per-stage feedback loops.

A stage takes a policy in and hands a policy out. Training stages keep
learning in budget-sized chunks until their gate passes or ``max_repeats``
chunks have been spent; evaluation stages never touch the parameters.
"""
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rlpipe import sac
from rlpipe.dynamics import EnvConfig, SurrogateConfig, Tolerances
from rlpipe.errors import ConfigError, GateFailedError, InvalidInputError, TrainingDivergedError
from rlpipe.sysid import VelocityModel
from rlpipe.training import Trainer, evaluate, write_jsonl

log = logging.getLogger(__name__)

STAGE_KINDS = ("core-train", "core-eval", "surrogate-eval", "surrogate-finetune")
GATE_METRICS = ("success_rate", "mean_return")
_INIT_STREAM = 2**32 - 1  # seed-stream index reserved for the initial weights


@dataclass
class Gate:
    metric: str = "success_rate"
    threshold: float = 0.9
    episodes: int = 100
    tolerances: tuple = None

    def __post_init__(self):
        if self.metric not in GATE_METRICS:
            raise ConfigError(f"gate metric must be one of {GATE_METRICS}, got {self.metric!r}")
        if self.metric == "success_rate" and not 0 <= self.threshold <= 1:
            raise ConfigError(f"success-rate threshold must lie in [0, 1], got {self.threshold}")
        if self.episodes < 1:
            raise ConfigError("gate needs at least one evaluation episode")
        if self.tolerances is not None:
            tol = self.tolerances
            if isinstance(tol, dict):
                tol = (tol["eps_p"], tol["eps_theta"])
            self.tolerances = Tolerances(*map(float, tol))

    def verdict(self, report):
        return bool(report[self.metric] >= self.threshold)

    def to_dict(self):
        return {"metric": self.metric, "threshold": self.threshold, "episodes": self.episodes,
                "tolerances": None if self.tolerances is None else list(self.tolerances)}


@dataclass
class StageSpec:
    kind: str
    budget: int
    gate: Gate = field(default_factory=Gate)
    max_repeats: int = 1
    name: str = None
    env: dict = field(default_factory=dict)
    surrogate: SurrogateConfig = None

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ConfigError(f"stage kind must be one of {STAGE_KINDS}, got {self.kind!r}")
        if isinstance(self.gate, dict):
            self.gate = Gate(**self.gate)
        if not self.budget > 0:
            raise ConfigError(f"stage budget must be positive, got {self.budget}")
        if self.max_repeats < 1:
            raise ConfigError("max_repeats must be at least 1")
        if isinstance(self.surrogate, dict):
            self.surrogate = SurrogateConfig(**self.surrogate)
        if self.surrogate is not None:
            self.surrogate = SurrogateConfig(*self.surrogate).validate()
        if self.kind.startswith("surrogate") and self.surrogate is None:
            raise ConfigError(f"{self.kind} stage needs a surrogate configuration")
        self.name = self.name or self.kind

    @property
    def is_training(self):
        return self.kind.endswith("train") or self.kind.endswith("finetune")

    def env_config(self, base):
        d = base.to_dict()
        d.update(self.env)
        cfg = EnvConfig.from_dict(d)
        cfg.surrogate = self.surrogate if self.kind.startswith("surrogate") else None
        return cfg

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "budget": self.budget, "max_repeats": self.max_repeats,
                "gate": self.gate.to_dict(), "env": dict(self.env),
                "surrogate": None if self.surrogate is None else self.surrogate._asdict()}


def stage_seed(master_seed, index):
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def run_gated(attempt, gate, max_repeats, stage_name="stage"):
    """Call ``attempt(k)`` until its report passes ``gate``; returns (report, attempts).

    Raises GateFailedError with the last report once ``max_repeats`` attempts fail.
    """
    attempts = []
    for k in range(max_repeats):
        report = attempt(k)
        report["verdict"] = gate.verdict(report)
        attempts.append({key: report[key] for key in ("success_rate", "mean_return", "mean_length", "verdict")}
                        | {"attempt": k})
        if report["verdict"]:
            return report, attempts
        log.info("%s: attempt %d failed gate (%s=%.3f < %.3f)", stage_name, k, gate.metric,
                 report[gate.metric], gate.threshold)
    report["attempts"] = attempts
    raise GateFailedError(
        f"{stage_name}: gate {gate.metric} >= {gate.threshold} not met after {max_repeats} attempt(s); "
        f"last {gate.metric} = {report[gate.metric]:.4f}", report)


def run_stage(spec, params, model, base_env, hyper, seed, trace_path=None, trainer=None):
    """Run one stage; returns (policy out, report, trainer).

    ``trainer`` lets a caller keep replay and curriculum state across calls.
    """
    cfg = spec.env_config(base_env)
    gate = spec.gate
    tolerances = gate.tolerances or cfg.tolerances
    if params.actor.sizes[0] != sac.OBS_DIM or params.actor.sizes[-1] != 2 * sac.ACTION_DIM:
        raise ConfigError(f"policy shape {params.actor.sizes} does not match the environment")

    if not spec.is_training:
        def attempt(k):
            return evaluate(params, cfg, model, spec.budget, seed=stage_seed(seed, k), tolerances=tolerances,
                            surrogate=cfg.surrogate, trace_path=trace_path)

        report, attempts = run_gated(attempt, gate, spec.max_repeats, spec.name)
        report["attempts"] = attempts
        return params, report, None

    if trainer is None:
        fresh = spec.kind == "core-train"
        run_hyper = hyper if fresh else _finetune_hyper(hyper)
        trainer = Trainer(params.copy(), cfg, model, run_hyper, seed=seed, use_curriculum=fresh,
                          surrogate=cfg.surrogate)

    def attempt(k):
        try:
            trainer.train(spec.budget, progress_every=10_000)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"{spec.name}: {exc.loss_name}", exc.value, exc.step) from exc
        return evaluate(trainer.params, cfg, model, gate.episodes, seed=stage_seed(seed, 1000 + k),
                        tolerances=tolerances, surrogate=cfg.surrogate, trace_path=trace_path)

    report, attempts = run_gated(attempt, gate, spec.max_repeats, spec.name)
    report["attempts"] = attempts
    report["env_steps"] = trainer.env_steps
    report["updates"] = trainer.updates
    report["curriculum_events"] = list(trainer.events)
    if trainer.curriculum is not None:
        report["curriculum"] = trainer.curriculum.to_dict()
    return trainer.params, report, trainer


def _finetune_hyper(hyper):
    d = hyper.to_dict()
    d["learning_starts"] = 0
    return sac.SacHyper.from_dict(d)


@dataclass
class PipelineConfig:
    model: str
    stages: list
    seed: int = None
    out_dir: str = "runs/pipeline"
    env: dict = field(default_factory=dict)
    sac: dict = field(default_factory=dict)
    init_checkpoint: str = None

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown pipeline config key(s): {', '.join(sorted(unknown))}")
        if "model" not in d or "stages" not in d:
            raise ConfigError("pipeline config needs 'model' and 'stages'")
        base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        for key in ("model", "init_checkpoint"):
            if d.get(key) is not None and not Path(d[key]).is_absolute():
                d[key] = str(base_dir / d[key])
        if not d["stages"]:
            raise ConfigError("pipeline needs at least one stage")
        try:
            d["stages"] = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in d["stages"]]
        except TypeError as exc:
            raise ConfigError(f"bad stage spec: {exc}") from None
        return cls(**d)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"pipeline config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"pipeline config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self):
        return {"model": self.model, "seed": self.seed, "out_dir": self.out_dir, "env": dict(self.env),
                "sac": dict(self.sac), "init_checkpoint": self.init_checkpoint,
                "stages": [s.to_dict() for s in self.stages]}

    def validate(self):
        """Fail fast on anything that would otherwise surface mid-run."""
        if self.seed is None:
            raise ConfigError("a master seed is required")
        if not Path(self.model).is_file():
            raise ConfigError(f"model file not found: {self.model}")
        try:
            model = VelocityModel.load(self.model)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None
        env = EnvConfig.from_dict(self.env)
        hyper = sac.SacHyper.from_dict(self.sac)
        for s in self.stages:
            s.env_config(env)
        if self.init_checkpoint is not None and not Path(self.init_checkpoint).is_file():
            raise ConfigError(f"initial checkpoint not found: {self.init_checkpoint}")
        return model, env, hyper


def _dump(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def run_pipeline(config, out_dir=None):
    """Execute every stage in order under ``out_dir``; returns (final params, summary).

    Layout: ``model.json``, ``checkpoints/stage-<n>.ckpt``, ``reports/stage-<n>.json``,
    ``traces/stage-<n>.jsonl``, ``logs/curriculum.jsonl`` and ``summary.json``.
    """
    model, base_env, hyper = config.validate()
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(config.model, out / "model.json")
    base_env.model_path = str((out / "model.json").resolve())

    if config.init_checkpoint is not None:
        params = sac.Checkpoint.load(config.init_checkpoint, hyper).params
    else:
        params = sac.PolicyParams.initialize(np.random.default_rng(stage_seed(config.seed, _INIT_STREAM)), hyper)

    summary = {"seed": config.seed, "stages": [], "verdict": None}
    curriculum_log = []
    for n, spec in enumerate(config.stages):
        seed = stage_seed(config.seed, n)
        trace_path = out / "traces" / f"stage-{n}.jsonl"
        entry = {"index": n, "name": spec.name, "kind": spec.kind, "seed": seed}
        try:
            params, report, trainer = run_stage(spec, params, model, base_env, hyper, seed, trace_path)
        except GateFailedError as exc:
            report = dict(exc.report or {})
            report.update(_stage_header(spec, n, seed, trace_path, out))
            _dump(out / "reports" / f"stage-{n}.json", report)
            entry.update(verdict=False, report=f"reports/stage-{n}.json")
            summary["stages"].append(entry)
            summary["verdict"] = False
            summary["failed_stage"] = n
            _dump(out / "summary.json", summary)
            raise GateFailedError(str(exc), report) from exc
        report.update(_stage_header(spec, n, seed, trace_path, out))
        ckpt_extra = {"stage": n, "stage_name": spec.name, "seed": seed}
        if trainer is not None:
            ckpt = trainer.checkpoint(ckpt_extra)
            for ev in trainer.events:
                curriculum_log.append({"stage": n, **ev})
        else:
            ckpt = sac.Checkpoint(params.copy(), hyper, extra=ckpt_extra)
        ckpt_path = out / "checkpoints" / f"stage-{n}.ckpt"
        ckpt.save(ckpt_path)
        _dump(out / "reports" / f"stage-{n}.json", report)
        entry.update(verdict=True, checkpoint=f"checkpoints/stage-{n}.ckpt", report=f"reports/stage-{n}.json",
                     success_rate=report["success_rate"], mean_return=report["mean_return"])
        summary["stages"].append(entry)
    write_jsonl(out / "logs" / "curriculum.jsonl", curriculum_log)
    summary["verdict"] = True
    summary["final_checkpoint"] = f"checkpoints/stage-{len(config.stages) - 1}.ckpt"
    _dump(out / "summary.json", summary)
    return params, summary


def _stage_header(spec, n, seed, trace_path, out):
    return {
        "stage": n,
        "spec": spec.to_dict(),
        "seed": seed,
        "trace": str(trace_path.relative_to(out)) if trace_path.exists() else None,
    }


def finite(x):
    return isinstance(x, (int, float)) and math.isfinite(x)
