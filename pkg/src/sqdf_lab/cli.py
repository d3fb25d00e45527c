"""``sqdf-lab`` command line: pretrain, distill, finetune, bbo, eval, oracle-check.

Configuration is resolved in three layers, later layers winning:
built-in defaults < ``--config`` file < command-line flags (``--set key=value``
and the named shortcuts such as ``--alpha``). Keys are namespaced
(``sqdf.alpha``, ``schedule.T``, ...); a bare key that names a field of the
soft-Q config (``alpha = 2``) is read as ``sqdf.<key>``. Unknown keys are
rejected.

Every random stream is derived from ``run.seed`` with
``spawn_rng(seed, <command>, <purpose>)``, so two runs with the same resolved
config and seed produce identical checkpoints.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .baselines import BaselineConfig, baseline_run
from .bbo import BboConfig, bbo_run, round_report, write_manifest
from .consistency import ConsistencyModel, distill, eval_prediction_error, make_estimator, predict_x0, write_error_table
from .diffcalc import (
    CheckpointError,
    OptimizerState,
    load_checkpoint,
    params_digest,
    save_checkpoint,
    spawn_rng,
)
from .diffusion import DiffusionModel, default_gmm, make_schedule, model_arrays, model_from_arrays, pretrain
from .evalkit import MetricRow, write_metrics
from .rewards import RewardFn, RidgeReward, TargetModeReward
from .softq_oracle import oracle_suite
from .sqdf import SqdfConfig, finetune_run, rollout_metrics

log = logging.getLogger("sqdf_lab")

COMMANDS = ("pretrain", "distill", "finetune", "bbo", "eval", "oracle-check")
METHODS = ("sqdf", "pg", "pg+kl", "draft", "draft+kl", "refl")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class ConfigKeyError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _alpha_or_default(text: str) -> float | None:
    """A float, or ``default`` for the method's own coefficient."""
    return None if str(text).strip() == "default" else float(text)


# key -> (parser, default)
DEFAULTS: dict[str, tuple[Callable, object]] = {
    "run.seed": (int, 0),
    "run.out": (str, "runs"),
    "run.pretrained": (str, ""),
    "run.consistency": (str, ""),
    "schedule.T": (int, 50),
    "schedule.beta_start": (float, 1e-3),
    "schedule.beta_end": (float, 0.25),
    "gmm.var": (float, 0.3),
    "pretrain.steps": (int, 6000),
    "pretrain.batch_size": (int, 256),
    "pretrain.lr": (float, 2e-3),
    "pretrain.lr_final": (float, 1e-4),
    "distill.steps": (int, 8000),
    "distill.batch_size": (int, 256),
    "distill.lr": (float, 1e-3),
    "distill.lr_final": (float, 1e-4),
    "distill.eval_samples": (int, 2000),
    "reward.kind": (str, "target-mode"),
    "reward.target": (_ints, (4, 4)),
    "reward.c": (float, 10.0),
    "finetune.method": (str, "sqdf"),
    "eval.n_samples": (int, 512),
    "eval.radius": (float, 1.0),
    "eval.checkpoint": (str, ""),
    "oracle.n_equiv": (int, 200),
    "oracle.n_bounds": (int, 100),
    "oracle.n_policy": (int, 50),
    "bbo.n_seeds": (int, 1),
}
_SQDF_TYPES = {"alpha": float, "gamma": float, "batch_size": int, "epochs": int, "buffer_capacity": int,
               "estimator": str, "buffer_mode": str, "lr": float, "weight_decay": float, "checkpoint_every": int}
for _k, _v in asdict(SqdfConfig()).items():
    DEFAULTS[f"sqdf.{_k}"] = (_SQDF_TYPES[_k], _v)
_BASE_TYPES = {"alpha": _alpha_or_default, "K": int, "t_lo": int, "t_hi": int, "batch_size": int, "epochs": int, "lr": float,
               "weight_decay": float, "checkpoint_every": int}
for _k in _BASE_TYPES:
    DEFAULTS[f"baseline.{_k}"] = (_BASE_TYPES[_k], getattr(BaselineConfig(), _k) if _k != "alpha" else None)
_BBO_TYPES = {"schedule": _ints, "inner_updates": int, "samples_per_iter": int, "surrogate_mode": str,
              "alpha": float, "gamma": float, "lr": float, "weight_decay": float, "estimator": str,
              "buffer_mode": str, "buffer_capacity": int, "n_heads": int, "surrogate_steps": int}
for _k, _v in asdict(BboConfig()).items():
    DEFAULTS[f"bbo.{_k}"] = (_BBO_TYPES[_k], _v)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Returns raw strings keyed by full name."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        key = qualify(key)
        if not value:
            raise ConfigKeyError(f"{source}:{lineno}: key '{key}' has no value")
        if key in out:
            raise ConfigKeyError(f"{source}:{lineno}: key '{key}' given twice")
        out[key] = value
    return out


def qualify(key: str) -> str:
    if "." not in key and key in _SQDF_TYPES:
        key = f"sqdf.{key}"
    if key not in DEFAULTS:
        raise ConfigKeyError(f"unknown config key '{key}'")
    return key


def resolve(file_values: dict[str, str], flag_values: dict[str, str]) -> dict[str, object]:
    """defaults < file < flags; every value is parsed with the key's type."""
    cfg = {k: d for k, (_, d) in DEFAULTS.items()}
    for layer in (file_values, flag_values):
        for key, raw in layer.items():
            key = qualify(key)
            parser = DEFAULTS[key][0]
            try:
                cfg[key] = parser(raw)
            except ValueError as exc:
                raise ConfigKeyError(f"key '{key}': cannot parse {raw!r} ({exc})") from exc
    return cfg


def section(cfg: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def run_id(command: str, cfg: dict) -> str:
    blob = json.dumps({"command": command, **{k: str(v) for k, v in sorted(cfg.items())}}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


class Run:
    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.seed = int(cfg["run.seed"])
        self.id = run_id(command, cfg)
        self.out = Path(cfg["run.out"])
        self.ckpt_dir = self.out / "checkpoints"
        self.log_dir = self.out / "logs" / f"{command}-{self.id}"
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.digests: dict[str, str] = {}
        self.checks: dict[str, bool] = {}
        self.t0 = time.time()

    def rng(self, *keys) -> np.random.Generator:
        return spawn_rng(self.seed, self.command, *keys)

    def path_for(self, key: str, default_name: str) -> Path:
        value = self.cfg[key]
        path = Path(value) if value else self.ckpt_dir / default_name
        if not path.is_file():
            raise ConfigKeyError(f"key '{key}': no checkpoint at {path}")
        return path

    def save(self, name: str, arrays: dict) -> Path:
        path = self.ckpt_dir / name
        save_checkpoint(path, arrays)
        self.digests[name] = params_digest(arrays)
        return path

    def finish(self, extra: dict | None = None) -> int:
        info = {"command": self.command, "run_id": self.id, "checks": self.checks, "version": __version__,
                "python": platform.python_version(), "numpy": np.__version__,
                "stream_rule": "spawn_rng(run.seed, command, purpose...)",
                "wall_s": round(time.time() - self.t0, 3)}
        info.update(extra or {})
        write_manifest(self.log_dir / "manifest.json", {k: v for k, v in sorted(self.cfg.items())},
                       [self.seed], self.digests, info)
        ok = all(self.checks.values())
        for name, passed in self.checks.items():
            log.info("check %s: %s", name, "pass" if passed else "FAIL")
        print(f"{self.command} {self.id}: {'ok' if ok else 'checks failed'} -> {self.log_dir}")
        return 0 if ok else 1


def build_schedule(cfg):
    return make_schedule(cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])


def build_reward(cfg) -> RewardFn:
    kind = cfg["reward.kind"]
    if kind == "target-mode":
        return TargetModeReward(np.array(cfg["reward.target"], dtype=np.float64), cfg["reward.c"])
    if kind == "ridge":
        return RidgeReward(c=cfg["reward.c"])
    raise ConfigKeyError(f"key 'reward.kind': unknown reward {kind!r}")


def load_reference(run: Run) -> DiffusionModel:
    arrays = load_checkpoint(run.path_for("run.pretrained", "pretrained.sqdf"))
    model = model_from_arrays(arrays)
    if not model.schedule.same_as(build_schedule(run.cfg)):
        raise ConfigKeyError("key 'schedule.*': config does not match the pretrained checkpoint's schedule")
    return model


def load_consistency(run: Run, reference: DiffusionModel) -> ConsistencyModel:
    arrays = load_checkpoint(run.path_for("run.consistency", "consistency.sqdf"))
    return ConsistencyModel.from_checkpoint(arrays, reference.schedule)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_pretrain(run: Run) -> int:
    c = run.cfg
    spec = default_gmm(c["gmm.var"])
    model = DiffusionModel.init(build_schedule(c), run.rng("init"))
    opt = OptimizerState(lr=c["pretrain.lr"], weight_decay=0.0)
    losses = pretrain(model, spec, c["pretrain.steps"], c["pretrain.batch_size"], run.rng("train"), opt,
                      c["pretrain.lr_final"])
    run.save("pretrained.sqdf", model_arrays(model))
    with open(run.log_dir / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(losses))
    k = max(1, min(100, len(losses) // 10))
    run.checks["loss_decreased"] = bool(np.mean(losses[-k:]) < np.mean(losses[:k]))
    return run.finish()


def cmd_distill(run: Run) -> int:
    c = run.cfg
    teacher = load_reference(run)
    spec = default_gmm(c["gmm.var"])
    cm = ConsistencyModel.init(teacher.schedule, spec.data_std, run.rng("init"),
                               teacher_id=params_digest(teacher.params()))
    ema, losses = distill(cm, teacher, spec, c["distill.steps"], c["distill.batch_size"], run.rng("train"),
                          OptimizerState(lr=c["distill.lr"], weight_decay=0.0), c["distill.lr_final"])
    run.save("consistency.sqdf", ema.checkpoint_arrays())
    ests = {"tweedie": make_estimator("tweedie", teacher), "consistency": make_estimator("consistency", cm=ema),
            "ddim-2": make_estimator("ddim-2", teacher)}
    rows = eval_prediction_error(ests, spec, teacher.schedule, range(5, teacher.schedule.T, 10),
                                 c["distill.eval_samples"], run.rng("eval"))
    write_error_table(rows, run.log_dir / "prediction_error.csv")
    x = run.rng("boundary").standard_normal((256, 2)) * 5
    run.checks["boundary_identity"] = bool(np.array_equal(predict_x0(ema, x, 0), x))
    return run.finish({"teacher_digest": cm.teacher_id, "final_loss": float(np.mean(losses[-100:]))})


def cmd_finetune(run: Run) -> int:
    c = run.cfg
    method = c["finetune.method"]
    if method not in METHODS:
        raise ConfigKeyError(f"key 'finetune.method': unknown method {method!r}")
    reference = load_reference(run)
    before = params_digest(reference.params())
    spec = default_gmm(c["gmm.var"])
    reward = build_reward(c)
    if method == "sqdf":
        cfg = SqdfConfig(**section(c, "sqdf"))
        cm = load_consistency(run, reference) if cfg.estimator == "consistency" else None
        result = finetune_run(cfg, reference, reward, spec, run.seed, cm, run.log_dir, run.id)
    else:
        kw = section(c, "baseline")
        result = baseline_run(BaselineConfig(method=method, **kw), reference, reward, spec, run.seed,
                              run.log_dir, run.id)
    run.save(f"policy-{method}-{run.id}.sqdf", model_arrays(result.policy))
    run.checks["reference_untouched"] = params_digest(reference.params()) == before
    last = result.rows[-1]
    print(f"final epoch {last.epoch}: reward={last.reward:.4f} kl_sum={last.kl_sum:.4f} "
          f"diversity={last.diversity:.4f} coverage={last.coverage:.4f}")
    return run.finish({"method": method})


def cmd_bbo(run: Run) -> int:
    c = run.cfg
    reference = load_reference(run)
    spec = default_gmm(c["gmm.var"])
    kw = section(c, "bbo")
    kw.pop("n_seeds")
    cfg = BboConfig(**kw)
    cm = load_consistency(run, reference) if cfg.estimator == "consistency" else None
    oracle = build_reward(c)
    seeds = [run.seed + i for i in range(c["bbo.n_seeds"])]
    histories = []
    for s in seeds:
        seed_dir = run.log_dir / f"seed{s}"
        seed_dir.mkdir(exist_ok=True)
        res = bbo_run(cfg, reference, oracle, spec, s, cm, seed_dir)
        histories.append(res.rows)
        run.digests[f"seed{s}/policy_final.sqdf"] = res.checkpoint_digest
        run.checks[f"seed{s}_queries"] = res.oracle.budget.total_used == sum(cfg.schedule)
        print(f"seed {s}: total oracle queries {res.oracle.budget.total_used}")
    report = round_report(histories, run.log_dir / "report.csv")
    for r in report:
        print(f"round {r['round']}: oracle_mean_reward={r['oracle_mean_reward_mean']:.4f}"
              f" +- {r['oracle_mean_reward_std']:.4f}  surrogate_mae={r['surrogate_mae_mean']:.4f}")
    return run.finish({"seeds_run": seeds, "total_queries": sum(cfg.schedule)})


def cmd_eval(run: Run) -> int:
    c = run.cfg
    path = c["eval.checkpoint"]
    if not path:
        raise ConfigKeyError("key 'eval.checkpoint': no checkpoint path given")
    if not Path(path).is_file():
        raise ConfigKeyError(f"key 'eval.checkpoint': no checkpoint at {path}")
    reference = load_reference(run)
    policy = model_from_arrays(load_checkpoint(path), "trainable-policy", reference.schedule)
    spec = default_gmm(c["gmm.var"])
    met = rollout_metrics(policy, reference, build_reward(c), spec, c["eval.n_samples"], run.rng("samples"),
                          c["eval.radius"])
    row = MetricRow(0, met["reward"], met["kl_sum"], met["diversity"], met["coverage"], 0, run_id=run.id)
    write_metrics([row], run.log_dir / "eval.csv")
    print("reward,kl_sum,diversity,coverage")
    print(f"{row.reward!r},{row.kl_sum!r},{row.diversity!r},{row.coverage!r}")
    run.digests[Path(path).name] = params_digest(load_checkpoint(path))
    return run.finish()


def cmd_oracle_check(run: Run) -> int:
    c = run.cfg
    res = oracle_suite(run.seed, c["oracle.n_equiv"], c["oracle.n_bounds"], c["oracle.n_policy"])
    print(f"dp vs enumeration      max |diff| = {res.equiv_max_diff:.3e}")
    print(f"sandwich bounds        violations = {res.bounds_violations}, min margin = {res.bounds_min_margin:.3e}")
    print(f"gamma = 1 collapse     max |diff| = {res.collapse_max_diff:.3e}")
    print(f"policy optimality      min margin = {res.policy_min_margin:.3e}")
    print(f"soft value identity    residual   = {res.identity_residual:.3e}")
    run.checks.update(res.checks())
    return run.finish({"suite": asdict(res)})


HANDLERS = {"pretrain": cmd_pretrain, "distill": cmd_distill, "finetune": cmd_finetune, "bbo": cmd_bbo,
            "eval": cmd_eval, "oracle-check": cmd_oracle_check}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sqdf-lab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("method", nargs="?", choices=METHODS, help="fine-tuning method (finetune only)")
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", help="run.seed")
    p.add_argument("--out", help="run.out (checkpoints/ and logs/ live here)")
    p.add_argument("--alpha", help="KL coefficient of the selected method")
    p.add_argument("--gamma", help="discount factor (sqdf, bbo)")
    p.add_argument("--epochs", help="fine-tuning epochs")
    p.add_argument("--schedule", help="bbo query schedule, comma separated")
    p.add_argument("--checkpoint", help="eval.checkpoint")
    p.add_argument("--n-samples", help="eval.n_samples")
    return p


def flag_overrides(ns: argparse.Namespace) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in ns.set:
        if "=" not in item:
            raise ConfigKeyError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        out[qualify(k)] = v
    method = ns.method or out.get("finetune.method")
    if ns.method:
        out["finetune.method"] = ns.method
    ns_key = "bbo" if ns.command == "bbo" else ("sqdf" if method in (None, "sqdf") else "baseline")
    simple = {"seed": "run.seed", "out": "run.out", "checkpoint": "eval.checkpoint", "n_samples": "eval.n_samples",
              "schedule": "bbo.schedule", "alpha": f"{ns_key}.alpha", "gamma": f"{ns_key}.gamma",
              "epochs": f"{'baseline' if ns_key == 'baseline' else 'sqdf'}.epochs"}
    for attr, key in simple.items():
        val = getattr(ns, attr)
        if val is not None:
            out[qualify(key)] = str(val)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("SQDF_LOG_LEVEL", "error").lower()
    if level not in LOG_LEVELS:
        print(f"SQDF_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")
    ns = build_parser().parse_args(argv)
    try:
        if ns.method and ns.command != "finetune":
            raise ConfigKeyError(f"a method is only accepted by finetune, not {ns.command}")
        file_values = parse_config_text(ns.config.read_text(), str(ns.config)) if ns.config else {}
        cfg = resolve(file_values, flag_overrides(ns))
        return HANDLERS[ns.command](Run(ns.command, cfg))
    except (ConfigKeyError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
