"""Online black-box optimisation: soft-Q fine-tuning against a surrogate that is
refitted between rounds on a budgeted set of oracle labels.

Round 0 labels ``schedule[0]`` samples from the untouched policy. Round k >= 1
runs ``inner_updates`` fine-tuning epochs against the current surrogate, then
labels ``schedule[k]`` fresh policy samples and refits the surrogate from
scratch on everything labelled so far.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .consistency import ConsistencyModel
from .diffcalc import ContractError, params_digest, save_checkpoint
from .diffusion import DiffusionModel, GmmSpec
from .evalkit import mode_coverage, pairwise_diversity, trajectory_kl
from .rewards import (
    BudgetedOracle,
    BudgetError,
    OracleBudget,
    RewardFn,
    SurrogateEnsemble,
    SurrogateReward,
    surrogate_fit,
    surrogate_score,
)
from .sqdf import SqdfConfig, SqdfLearner

log = logging.getLogger(__name__)

DESK_SCHEDULE = (64, 128, 256, 512)
SURROGATE_MODES = {"bootstrap": "bootstrap-UCB", "ucb": "feature-UCB", "mean": "mean"}
ROUND_FIELDS = ("round", "queries", "oracle_mean_reward", "surrogate_mae", "kl_sum", "diversity", "coverage")


@dataclass
class BboConfig:
    schedule: tuple[int, ...] = DESK_SCHEDULE
    inner_updates: int = 20
    samples_per_iter: int = 64
    surrogate_mode: str = "bootstrap"
    alpha: float = 1.0
    gamma: float = 0.9
    lr: float = 1e-3
    weight_decay: float = 0.1
    estimator: str = "consistency"
    buffer_mode: str = "prioritized"
    buffer_capacity: int = 20 * 64 * 50
    n_heads: int = 4
    surrogate_steps: int = 1500

    def __post_init__(self):
        self.schedule = tuple(int(o) for o in self.schedule)
        if not self.schedule or any(o <= 0 for o in self.schedule):
            raise ContractError("query schedule must be a non-empty list of positive counts")
        if self.surrogate_mode not in SURROGATE_MODES:
            raise ContractError(f"unknown surrogate mode {self.surrogate_mode!r}")
        if self.inner_updates < 1 or self.samples_per_iter < 1:
            raise ContractError("inner_updates and samples_per_iter must be positive")

    @property
    def rounds(self) -> int:
        return len(self.schedule)

    def sqdf_config(self) -> SqdfConfig:
        return SqdfConfig(alpha=self.alpha, gamma=self.gamma, batch_size=self.samples_per_iter,
                          epochs=self.inner_updates, buffer_capacity=self.buffer_capacity,
                          estimator=self.estimator, buffer_mode=self.buffer_mode, lr=self.lr,
                          weight_decay=self.weight_decay)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class BboResult:
    policy: DiffusionModel
    rows: list[dict]
    oracle: BudgetedOracle
    surrogate: SurrogateEnsemble
    checkpoint_digest: str = ""
    per_round_queries: list[int] = field(default_factory=list)


def _fit(cfg: BboConfig, seed: int, rnd: int, X: np.ndarray, y: np.ndarray) -> SurrogateEnsemble:
    # fresh heads and fresh bootstrap resamples every round
    seeds = [seed * 100_003 + rnd * cfg.n_heads + h for h in range(cfg.n_heads)]
    ens = SurrogateEnsemble(n_heads=cfg.n_heads, seeds=seeds)
    return surrogate_fit(ens, X, y, steps=cfg.surrogate_steps)


def bbo_run(cfg: BboConfig, reference: DiffusionModel, oracle_reward: RewardFn, spec: GmmSpec, seed: int,
            cm: ConsistencyModel | None = None, out_dir: str | Path | None = None) -> BboResult:
    oracle = BudgetedOracle(oracle_reward, OracleBudget(list(cfg.schedule)))
    learner = SqdfLearner(cfg.sqdf_config(), reference, seed, cm, stream="bbo")
    X = np.zeros((0, 2))
    y = np.zeros(0)
    ens: SurrogateEnsemble | None = None
    rows = []
    t0 = time.perf_counter()
    for rnd in range(cfg.rounds):
        if rnd > 0:
            surrogate = SurrogateReward(ens, SURROGATE_MODES[cfg.surrogate_mode])
            for _ in range(cfg.inner_updates):
                traj = learner.rollout()
                learner.push(traj, surrogate(traj.x0))
                learner.update(surrogate, out_dir)
        traj = learner.rollout(cfg.schedule[rnd])
        labels = oracle.query(traj.x0, rnd)
        mae = math.nan if ens is None else float(np.mean(np.abs(surrogate_score(ens, traj.x0, "mean") - labels)))
        rows.append({
            "round": rnd,
            "queries": int(oracle.budget.used[rnd]),
            "oracle_mean_reward": float(labels.mean()),
            "surrogate_mae": mae,
            "kl_sum": float(np.mean(trajectory_kl(traj, reference))),
            "diversity": pairwise_diversity(traj.x0),
            "coverage": mode_coverage(traj.x0, spec),
        })
        X = np.concatenate([X, traj.x0])
        y = np.concatenate([y, labels])
        ens = _fit(cfg, seed, rnd, X, y)
        log.info("bbo round %d: oracle mean %.3f, surrogate mae %.3f", rnd, rows[-1]["oracle_mean_reward"], mae)
    used = oracle.budget.used
    if used != list(cfg.schedule):
        raise BudgetError(f"oracle usage {used} differs from schedule {list(cfg.schedule)}")
    snap = learner.snapshot()
    result = BboResult(learner.policy, rows, oracle, ens, params_digest(snap), list(used))
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(out / "policy_final.sqdf", snap)
        write_rounds(rows, out / "rounds.csv")
        oracle.write_dataset(out / "oracle_queries.csv")
    log.info("bbo seed %d finished in %.1fs", seed, time.perf_counter() - t0)
    return result


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_rounds(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(ROUND_FIELDS))
        w.writeheader()
        for r in rows:
            w.writerow({k: (r[k] if k in ("round", "queries") else repr(float(r[k]))) for k in ROUND_FIELDS})


def read_rounds(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("round", "queries") else float(v)) for k, v in d.items()}
                for d in csv.DictReader(fh)]


REPORT_METRICS = ROUND_FIELDS[2:]


def round_report(histories: Sequence[Sequence[dict]], path: str | Path | None = None) -> list[dict]:
    """Per-round mean and sample standard deviation (ddof=1) across seeds; std is 0 for one seed."""
    if not histories or not histories[0]:
        raise ContractError("need at least one completed round")
    n_rounds = len(histories[0])
    if any(len(h) != n_rounds for h in histories):
        raise ContractError("seed histories cover different numbers of rounds")
    out = []
    for k in range(n_rounds):
        row = {"round": k, "seeds": len(histories)}
        for m in REPORT_METRICS:
            vals = np.array([h[k][m] for h in histories], dtype=np.float64)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(out[0]))
            w.writeheader()
            w.writerows(out)
    return out


def write_manifest(path: str | Path, config: dict, seeds: Sequence[int], digests: dict[str, str],
                   extra: dict | None = None) -> None:
    body = {"config": config, "seeds": list(seeds), "checkpoints": digests}
    if extra:
        body.update(extra)
    blob = json.dumps(body, sort_keys=True, indent=2, default=str)
    body["manifest_sha256"] = hashlib.sha256(blob.encode()).hexdigest()
    Path(path).write_text(json.dumps(body, sort_keys=True, indent=2, default=str) + "\n")


def config_dict(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}
