"""Sample-quality metrics and metric tables."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diffusion import DiffusionModel, GmmSpec, Trajectory, ddpm_mean, sample_trajectory

METRIC_FIELDS = ("epoch", "reward", "kl_sum", "diversity", "coverage", "wall_ms")


class MetricError(ValueError):
    pass


def mode_coverage(samples: np.ndarray, spec: GmmSpec, radius: float = 1.0) -> float:
    """Fraction of mixture means with at least one sample within ``radius``."""
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        raise MetricError("no samples")
    if radius <= 0:
        raise MetricError("radius must be positive")
    d2 = np.sum((samples[:, None, :] - spec.means[None]) ** 2, axis=2)
    return float(np.mean(d2.min(axis=0) <= radius * radius))


def pairwise_diversity(samples: np.ndarray, chunk: int = 2048) -> float:
    """Mean Euclidean distance over all unordered pairs."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = x.shape[0]
    if n < 2:
        raise MetricError("need at least two samples")
    total = 0.0
    for i in range(0, n, chunk):
        block = x[i : i + chunk]
        d = np.sqrt(np.maximum(np.sum((block[:, None, :] - x[None, i:, :]) ** 2, axis=2), 0.0))
        # keep pairs (a, b) with global index a < b
        rows = np.arange(block.shape[0])[:, None]
        cols = np.arange(n - i)[None, :]
        total += float(d[cols > rows].sum())
    return total / (n * (n - 1) / 2)


def step_kl(mu_a: np.ndarray, mu_b: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """KL between isotropic Gaussians with shared std: ||mu_a - mu_b||^2 / (2 sigma^2), per row."""
    return np.sum((mu_a - mu_b) ** 2, axis=-1) / (2.0 * sigma**2)


def trajectory_kl(traj: Trajectory, reference: DiffusionModel) -> np.ndarray:
    """Per-chain sum over t >= 2 of KL(p_theta(.|x_t) || p'(.|x_t)) along the stored rollout.

    Step t = 1 is deterministic (sigma_1 = 0) and contributes nothing.
    """
    sched = reference.schedule
    total = np.zeros(traj.states.shape[1])
    for t in range(2, traj.T + 1):
        mu_ref = ddpm_mean(reference, traj.states[t], t)
        total += step_kl(traj.means[t], mu_ref, sched.sigma[t])
    return total


def traj_kl_sum(policy: DiffusionModel, reference: DiffusionModel, n_traj: int,
                rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the trajectory KL sum under the policy."""
    if not policy.schedule.same_as(reference.schedule):
        raise MetricError("policy and reference use different noise schedules")
    kl = trajectory_kl(sample_trajectory(policy, rng, n_traj), reference)
    se = float(kl.std(ddof=1) / math.sqrt(n_traj)) if n_traj > 1 else 0.0
    return float(kl.mean()), se


@dataclass
class MetricRow:
    epoch: int
    reward: float
    kl_sum: float
    diversity: float
    coverage: float
    wall_ms: int
    run_id: str = ""
    method: str = ""

    def __post_init__(self):
        for name in ("reward", "kl_sum", "diversity", "coverage"):
            if not math.isfinite(getattr(self, name)):
                raise MetricError(f"{name} is not finite")
        if not 0.0 <= self.coverage <= 1.0:
            raise MetricError("coverage must lie in [0, 1]")


def write_metrics(rows: Iterable[MetricRow], path: str | Path, with_method: bool = False) -> None:
    fields = list(METRIC_FIELDS) + (["method"] if with_method else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            d = asdict(r)
            w.writerow([d[f] if f in ("epoch", "wall_ms", "method") else repr(float(d[f])) for f in fields])


def read_metrics(path: str | Path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        out = []
        for d in csv.DictReader(fh):
            out.append(MetricRow(int(d["epoch"]), float(d["reward"]), float(d["kl_sum"]),
                                 float(d["diversity"]), float(d["coverage"]), int(d["wall_ms"]),
                                 method=d.get("method", "")))
        return out


def write_tradeoff(points: Sequence[dict], path: str | Path,
                   columns: Sequence[str] = ("label", "reward", "kl_sum", "diversity", "coverage")) -> None:
    """Whitespace-separated table (gnuplot-friendly), one row per checkpoint."""
    with open(path, "w") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for p in points:
            fh.write(" ".join(str(p[c]) for c in columns) + "\n")


def sample_metrics(x0: np.ndarray, reward: np.ndarray, kl: np.ndarray, spec: GmmSpec,
                   radius: float = 1.0) -> dict[str, float]:
    return {
        "reward": float(np.mean(reward)),
        "kl_sum": float(np.mean(kl)),
        "diversity": pairwise_diversity(x0),
        "coverage": mode_coverage(x0, spec, radius),
    }


def metric_at_reward(curve: Sequence[dict], level: float, key: str = "diversity") -> float:
    """``key`` at the first point where reward reaches ``level``, linearly interpolated
    between the bracketing checkpoints. NaN if the curve never gets there."""
    prev = None
    for p in curve:
        if p["reward"] >= level:
            if prev is None or p["reward"] == prev["reward"]:
                return float(p[key])
            w = (level - prev["reward"]) / (p["reward"] - prev["reward"])
            return float(prev[key] + w * (p[key] - prev[key]))
        prev = p
    return math.nan


def average_curves(curves: Sequence[Sequence[dict]]) -> list[dict]:
    """Pointwise mean over seeds of checkpoint curves sampled at the same epochs."""
    out = []
    for pts in zip(*curves):
        if len({p["epoch"] for p in pts}) != 1:
            raise MetricError("curves are not aligned on epochs")
        out.append({k: (pts[0][k] if k == "epoch" else float(np.mean([p[k] for p in pts]))) for k in pts[0]})
    return out
