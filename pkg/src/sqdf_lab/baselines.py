"""Comparison fine-tuners: score-function policy gradient, truncated backprop
through the sampler, and one-step prediction from a random stopping time.

Each has a KL-augmented variant against the frozen reference. All of them
share the metric rows and checkpoint layout of :func:`sqdf.finetune_run`.
"""

from __future__ import annotations

import logging
import math
import re
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .diffcalc import (
    ContractError,
    NumericError,
    OptimizerState,
    Tape,
    Var,
    adamw_step,
    backward,
    save_checkpoint,
    spawn_rng,
    square,
    vmean,
    vsum,
)
from .diffusion import (
    DiffusionModel,
    GmmSpec,
    Trajectory,
    _per_row,
    ddpm_mean,
    model_arrays,
    sample_trajectory,
    tweedie_x0,
)
from .evalkit import MetricRow, mode_coverage, pairwise_diversity, trajectory_kl, write_metrics
from .rewards import RewardFn
from .sqdf import FinetuneResult

log = logging.getLogger(__name__)

DEFAULT_ALPHA = {"pg+kl": 0.2, "draft+kl": 0.04}
REFL_WINDOW = (40, 50)
_METHOD_RE = re.compile(r"^(pg|refl|draft)(?:-(\d+))?(\+kl)?$")


@dataclass
class BaselineConfig:
    method: str = "pg"
    alpha: float | None = None
    K: int = 1
    t_lo: int = REFL_WINDOW[0]
    t_hi: int = REFL_WINDOW[1]
    batch_size: int = 64
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-4
    checkpoint_every: int = 50

    def __post_init__(self):
        m = _METHOD_RE.match(self.method)
        if m is None or (m.group(1) != "draft" and m.group(2)) or (m.group(1) == "refl" and m.group(3)):
            raise ContractError(f"unknown baseline method {self.method!r}")
        self.family = m.group(1)
        self.with_kl = bool(m.group(3))
        if m.group(2):
            self.K = int(m.group(2))
        if self.alpha is None:
            self.alpha = DEFAULT_ALPHA.get(f"{self.family}+kl", 0.0) if self.with_kl else 0.0
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        if not self.with_kl and self.alpha != 0:
            raise ContractError(f"{self.method} takes no KL coefficient")
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if not 1 <= self.t_lo <= self.t_hi:
            raise ContractError("refl window must satisfy 1 <= t_lo <= t_hi")

    def check_horizon(self, T: int) -> None:
        if self.K > T or self.t_hi > T:
            raise ContractError(f"K and the refl window must lie within [1, {T}]")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# Policy gradient
# ---------------------------------------------------------------------------


def standardized_advantage(scores: np.ndarray) -> np.ndarray:
    """(s - mean) / std over the batch; a batch with zero spread is only centred."""
    s = np.asarray(scores, dtype=np.float64)
    a = s - s.mean()
    sd = s.std()
    return a / sd if sd > 0 else a


def step_log_density(policy: DiffusionModel, x_t, t, x_prev: np.ndarray, tape: Tape | None = None):
    """log N(x_prev; mu_theta(x_t, t), sigma_t^2 I) per row, t >= 2."""
    sched = policy.schedule
    t = sched.check_t(t, lo=2)
    n = x_prev.shape[0]
    sig = _per_row(sched.sigma, t, n)[:, 0]
    const = -x_prev.shape[1] * (np.log(sig) + 0.5 * math.log(2 * math.pi))
    mu = ddpm_mean(policy, x_t, t, tape, trainable=True)
    if tape is None:
        return const - np.sum((x_prev - mu) ** 2, axis=1) / (2 * sig**2)
    return vsum(square(mu - x_prev), axis=1) * (-1.0 / (2 * sig**2)) + const


def pg_loss(policy: DiffusionModel, reference: DiffusionModel, traj: Trajectory, scores: np.ndarray,
            alpha: float, tape: Tape) -> Var:
    """Surrogate whose gradient is -mean_{i,t} (A_i - alpha KL_{i,t}) grad log p_theta(x_{t-1}|x_t).

    ``scores`` are plain numbers; no reward gradient is involved. KL is detached and
    applied per step; the deterministic t = 1 step has no density and is skipped.
    """
    T, n = traj.T, traj.states.shape[1]
    adv = standardized_advantage(scores)
    ts = np.repeat(np.arange(T, 1, -1), n)
    x_t = traj.states[T:1:-1].reshape(-1, 2)
    x_prev = traj.states[T - 1:0:-1].reshape(-1, 2)
    mu_ref = ddpm_mean(reference, x_t, ts)
    mu_pol = traj.means[T:1:-1].reshape(-1, 2)
    kl = np.sum((mu_pol - mu_ref) ** 2, axis=1) / (2 * reference.schedule.sigma[ts] ** 2)
    weight = np.tile(adv, T - 1) - alpha * kl
    logp = step_log_density(policy, x_t, ts, x_prev, tape)
    return vmean(logp * weight) * (-1.0 * (T - 1))


# ---------------------------------------------------------------------------
# Truncated backprop and one-step prediction
# ---------------------------------------------------------------------------


def draft_loss(policy: DiffusionModel, reference: DiffusionModel, traj: Trajectory, K: int, reward: RewardFn,
               alpha: float, tape: Tape) -> Var:
    """-mean[r(x_0) - alpha sum KL] with x_0 rebuilt on the tape from x_K through K reparameterised steps.

    ``traj`` must come from the current policy; its stored noises are reused so the
    taped chain reproduces the rollout. x_K is a constant (stop-gradient).
    """
    sched = policy.schedule
    if not 1 <= K <= sched.T:
        raise ContractError(f"K={K} outside [1, {sched.T}]")
    n = traj.states.shape[1]
    x = traj.states[K]
    kl_total = None
    for t in range(K, 0, -1):
        mu = ddpm_mean(policy, x, t, tape, trainable=True)
        if sched.sigma[t] > 0:
            # the reference mean moves with x_t, which depends on the policy for t < K
            mu_ref = ddpm_mean(reference, x, t, tape, trainable=False)
            kl = vsum(square(mu - mu_ref), axis=1) * (1.0 / (2 * sched.sigma[t] ** 2))
            kl_total = kl if kl_total is None else kl_total + kl
        x = mu + _per_row(sched.sigma, t, n) * traj.noises[t] if sched.sigma[t] > 0 else mu
        if not np.all(np.isfinite(x.value)):
            raise NumericError(f"non-finite state in the differentiated chain at t={t}")
    objective = reward.graph(x, tape)
    if kl_total is not None:
        objective = objective - kl_total * alpha
    return vmean(objective) * -1.0


def refl_loss(policy: DiffusionModel, traj: Trajectory, t_rows: np.ndarray, reward: RewardFn, tape: Tape) -> Var:
    """-mean r(tweedie_theta(x_t, t)) with each chain stopped at its own ``t`` (no gradient before it)."""
    t_rows = policy.schedule.check_t(t_rows)
    n = traj.states.shape[1]
    x_t = traj.states[t_rows, np.arange(n)]
    x0 = tweedie_x0(policy, x_t, t_rows, tape, trainable=True)
    return vmean(reward.graph(x0, tape)) * -1.0


def sample_refl_t(cfg: BaselineConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(cfg.t_lo, cfg.t_hi + 1, size=n)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def pg_update(policy, reference, traj, scores, cfg: BaselineConfig, opt: OptimizerState) -> float:
    tape = Tape()
    loss = pg_loss(policy, reference, traj, scores, cfg.alpha, tape)
    adamw_step(opt, policy.params(), backward(tape, loss))
    return float(loss.value)


def draft_update(policy, reference, traj, reward, cfg: BaselineConfig, opt: OptimizerState) -> float:
    tape = Tape()
    loss = draft_loss(policy, reference, traj, cfg.K, reward, cfg.alpha, tape)
    adamw_step(opt, policy.params(), backward(tape, loss))
    return float(loss.value)


def refl_update(policy, traj, t_rows, reward, opt: OptimizerState) -> float:
    tape = Tape()
    loss = refl_loss(policy, traj, t_rows, reward, tape)
    adamw_step(opt, policy.params(), backward(tape, loss))
    return float(loss.value)


def baseline_run(cfg: BaselineConfig, reference: DiffusionModel, reward: RewardFn, spec: GmmSpec, seed: int,
                 out_dir: str | Path | None = None, run_id: str = "") -> FinetuneResult:
    cfg.check_horizon(reference.schedule.T)
    policy = reference.copy("trainable-policy")
    policy.prefix = "policy."
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng_roll = spawn_rng(seed, cfg.family, "rollout")
    rng_t = spawn_rng(seed, cfg.family, "window")
    result = FinetuneResult(policy, [])
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs + 1):
        traj = sample_trajectory(policy, rng_roll, cfg.batch_size)
        scores = reward(traj.x0)
        result.rows.append(MetricRow(
            epoch, float(np.mean(scores)), float(np.mean(trajectory_kl(traj, reference))),
            pairwise_diversity(traj.x0), mode_coverage(traj.x0, spec), int((time.perf_counter() - t0) * 1000),
            run_id=run_id, method=cfg.method))
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            result.checkpoints[epoch] = model_arrays(policy)
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / f"policy_epoch{epoch:04d}.sqdf", result.checkpoints[epoch])
        if epoch == cfg.epochs:
            break
        if cfg.family == "pg":
            loss = pg_update(policy, reference, traj, scores, cfg, opt)
        elif cfg.family == "draft":
            loss = draft_update(policy, reference, traj, reward, cfg, opt)
        else:
            loss = refl_update(policy, traj, sample_refl_t(cfg, cfg.batch_size, rng_t), reward, opt)
        if not math.isfinite(loss):
            raise NumericError(f"{cfg.method} loss is not finite at epoch {epoch}")
        result.diagnostics.append({"epoch": epoch, "loss": loss})
    if out_dir is not None:
        write_metrics(result.rows, Path(out_dir) / "metrics.csv", with_method=True)
    log.info("%s run %s finished in %.1fs", cfg.method, run_id, time.perf_counter() - t0)
    return result
