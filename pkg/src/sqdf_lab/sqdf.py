"""Soft-Q fine-tuning of a pretrained diffusion policy.

Each epoch rolls out ``batch_size`` chains with the current policy, pushes every
visited ``(x_t, t)`` into a replay buffer, then takes one reparameterised
gradient step on

    L = mean_j [ -gamma^(t_j - 1) r(x0_hat(x_{t_j - 1})) + alpha KL_j ],
    x_{t-1} = mu_theta(x_t, t) + sigma_t eps,

where ``x0_hat`` is a frozen clean-sample estimator (consistency model, Tweedie
under the reference, or multi-step DDIM) and ``KL_j`` is the closed-form
Gaussian KL between the policy and reference transitions at ``x_t``. The
weight is 1 for the step that lands on the data and gamma^(T-1) for the step
leaving pure noise.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .consistency import ConsistencyModel, predict_x0
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
    DATA_DIM,
    DiffusionModel,
    GmmSpec,
    _per_row,
    ddim_multistep_x0,
    ddpm_mean,
    model_arrays,
    model_from_arrays,
    sample_trajectory,
    tweedie_x0,
)
from .evalkit import MetricRow, mode_coverage, pairwise_diversity, trajectory_kl, write_metrics
from .rewards import RewardFn, StateError

log = logging.getLogger(__name__)

ESTIMATORS = ("consistency", "tweedie")  # plus ddim-<n>
BUFFER_MODES = ("uniform", "prioritized")
PRIORITY_EPS = 1e-6


@dataclass
class SqdfConfig:
    alpha: float = 2.0
    gamma: float = 0.9
    batch_size: int = 64
    epochs: int = 200
    buffer_capacity: int = 20 * 64 * 50
    estimator: str = "consistency"
    buffer_mode: str = "uniform"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError("gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.buffer_capacity < 1:
            raise ContractError("batch_size, buffer_capacity must be positive and epochs non-negative")
        if self.estimator not in ESTIMATORS and not _is_ddim_tag(self.estimator):
            raise ContractError(f"unknown estimator {self.estimator!r}")
        if self.buffer_mode not in BUFFER_MODES:
            raise ContractError(f"unknown buffer mode {self.buffer_mode!r}")
        if self.lr <= 0:
            raise ContractError("lr must be positive")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _is_ddim_tag(tag: str) -> bool:
    head, _, n = tag.partition("-")
    return head == "ddim" and n.isdigit() and int(n) >= 1


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------


@dataclass
class BufferEntry:
    x_t: np.ndarray
    t: int
    reward: float
    step: int
    priority: float


class ReplayBuffer:
    """Fixed-capacity FIFO ring of ``(x_t, t)`` states with per-state terminal rewards.

    In prioritized mode an entry's priority is ``gamma^t * (r - r_min + eps)``
    where ``r_min`` is the smallest reward currently stored, so states close to
    the data end of high-reward trajectories are replayed most. A priority
    passed explicitly to :meth:`push` overrides the formula.
    """

    def __init__(self, capacity: int, mode: str = "uniform", gamma: float = 0.9):
        if capacity < 1:
            raise ContractError("buffer capacity must be positive")
        if mode not in BUFFER_MODES:
            raise ContractError(f"unknown buffer mode {mode!r}")
        self.capacity = int(capacity)
        self.mode = mode
        self.gamma = gamma
        self._x = np.zeros((self.capacity, DATA_DIM))
        self._t = np.zeros(self.capacity, dtype=np.int64)
        self._r = np.zeros(self.capacity)
        self._step = np.zeros(self.capacity, dtype=np.int64)
        self._prio = np.full(self.capacity, np.nan)
        self._head = 0
        self._size = 0
        self._pushed = 0

    def __len__(self) -> int:
        return self._size

    def push(self, x_t: np.ndarray, t, reward=0.0, priority=None) -> None:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        n = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        if np.any(t < 1):
            raise ContractError("buffer states need t >= 1")
        reward = np.broadcast_to(np.asarray(reward, dtype=np.float64), (n,))
        prio = np.full(n, np.nan) if priority is None else np.broadcast_to(
            np.asarray(priority, dtype=np.float64), (n,))
        if np.any(prio < 0):
            raise ContractError("priorities must be non-negative")
        if n >= self.capacity:  # only the newest `capacity` survive
            x_t, t, reward, prio = x_t[-self.capacity:], t[-self.capacity:], reward[-self.capacity:], prio[-self.capacity:]
            self._pushed += n - self.capacity
            n = self.capacity
        idx = (self._head + np.arange(n)) % self.capacity
        self._x[idx] = x_t
        self._t[idx] = t
        self._r[idx] = reward
        self._prio[idx] = prio
        self._step[idx] = self._pushed + np.arange(n)
        self._pushed += n
        self._head = (self._head + n) % self.capacity
        self._size = min(self.capacity, self._size + n)

    def push_trajectory(self, states: np.ndarray, rewards: np.ndarray) -> None:
        """Store x_t for t = T..1 of a batch of rollouts (``states`` shaped (T+1, n, 2))."""
        T, n = states.shape[0] - 1, states.shape[1]
        ts = np.repeat(np.arange(T, 0, -1), n)
        xs = states[T:0:-1].reshape(-1, DATA_DIM)
        self.push(xs, ts, np.tile(np.asarray(rewards, dtype=np.float64), T))

    def _order(self) -> np.ndarray:
        """Storage slots from oldest to newest."""
        start = (self._head - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def priorities(self) -> np.ndarray:
        """Current priorities in insertion order (uniform mode: all ones)."""
        slots = self._order()
        if self.mode == "uniform":
            return np.ones(slots.size)
        r = self._r[slots]
        p = self.gamma ** self._t[slots].astype(np.float64) * (r - r.min() + PRIORITY_EPS)
        given = self._prio[slots]
        return np.where(np.isnan(given), p, given)

    def probabilities(self) -> np.ndarray:
        if self._size == 0:
            raise StateError("replay buffer is empty")
        p = self.priorities()
        total = p.sum()
        if not total > 0:
            raise StateError("all priorities are zero")
        return p / total

    def entries(self) -> list[BufferEntry]:
        slots = self._order()
        prio = self.priorities() if self._size else []
        return [BufferEntry(self._x[s].copy(), int(self._t[s]), float(self._r[s]), int(self._step[s]), float(p))
                for s, p in zip(slots, prio)]

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """With-replacement draw of positions in insertion order (0 = oldest)."""
        if self._size == 0:
            raise StateError("replay buffer is empty")
        if self.mode == "uniform":
            return rng.integers(0, self._size, size=n)
        return rng.choice(self._size, size=n, replace=True, p=self.probabilities())

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        slots = self._order()[self.sample_indices(n, rng)]
        return self._x[slots].copy(), self._t[slots].copy()


def buffer_push(buffer: ReplayBuffer, states: np.ndarray, rewards: np.ndarray) -> None:
    buffer.push_trajectory(states, rewards)


def buffer_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator):
    return buffer.sample(n, rng)


# ---------------------------------------------------------------------------
# Loss pieces
# ---------------------------------------------------------------------------


def kl_step(mu_theta, mu_ref, sigma):
    """||mu_theta - mu_ref||^2 / (2 sigma^2) per row; works on tape values and plain arrays."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ContractError("KL needs sigma_t > 0 (the t = 1 step is deterministic)")
    coef = 1.0 / (2.0 * sigma**2)
    if isinstance(mu_theta, Var):
        return vsum(square(mu_theta - mu_ref), axis=-1) * coef
    return np.sum((np.asarray(mu_theta) - mu_ref) ** 2, axis=-1) * coef


def discount_weight(t, gamma: float) -> np.ndarray:
    """gamma^(t-1) for the transition out of x_t."""
    return np.power(float(gamma), np.asarray(t, dtype=np.float64) - 1.0)


Estimator = Callable[..., object]


def make_graph_estimator(tag: str, reference: DiffusionModel, cm: ConsistencyModel | None = None) -> Estimator:
    """Frozen clean-sample estimator ``f(x, t, tape=None)``, differentiable in ``x`` on a tape."""
    if tag == "consistency":
        if cm is None:
            raise ContractError("consistency estimator needs a consistency model")
        return lambda x, t, tape=None: predict_x0(cm, x, t, tape, trainable=False)
    if tag == "tweedie":
        return lambda x, t, tape=None: tweedie_x0(reference, x, t, tape, trainable=False)
    if _is_ddim_tag(tag):
        n = int(tag.split("-")[1])
        return lambda x, t, tape=None: ddim_multistep_x0(reference, x, t, n if np.ndim(t) else min(n, max(int(t), 1)),
                                                         tape, trainable=False)
    raise ContractError(f"unknown estimator {tag!r}")


def soft_q_estimate(x_prev, t, estimator: Estimator, reward: RewardFn, gamma: float, tape: Tape | None = None):
    """gamma^(t-1) r(x0_hat(x_{t-1})) per row, for transitions out of x_t."""
    t = np.asarray(t)
    x0 = estimator(x_prev, t - 1, tape)
    w = discount_weight(t, gamma)
    if tape is None:
        return w * reward(x0)
    return reward.graph(x0, tape) * w


@dataclass
class LossParts:
    loss: Var | float
    q_mean: float
    kl_mean: float
    reward_mean: float


class NanBatchError(NumericError):
    def __init__(self, msg: str, x_t: np.ndarray, t: np.ndarray):
        super().__init__(msg)
        self.x_t = x_t
        self.t = t


def _transition(policy: DiffusionModel, reference: DiffusionModel, x_t, t, eps, tape):
    sched = policy.schedule
    n = x_t.shape[0]
    mu = ddpm_mean(policy, x_t, t, tape, trainable=True)
    mu_ref = ddpm_mean(reference, x_t, t)
    sigma = sched.sigma[t]
    x_prev = mu + _per_row(sched.sigma, t, n) * eps
    # t = 1 is deterministic: no KL term there
    kl_coef = np.where(sigma > 0, 1.0 / (2.0 * np.where(sigma > 0, sigma, 1.0) ** 2), 0.0)
    return mu, mu_ref, x_prev, kl_coef


def sqdf_loss(x_t: np.ndarray, t: np.ndarray, policy: DiffusionModel, reference: DiffusionModel,
              estimator: Estimator, reward: RewardFn, alpha: float, gamma: float, eps: np.ndarray,
              tape: Tape) -> LossParts:
    """Batch loss on a tape; gradients reach the policy only (via mu_theta)."""
    if x_t.shape[0] == 0:
        raise ContractError("empty batch")
    t = policy.schedule.check_t(t)
    mu, mu_ref, x_prev, kl_coef = _transition(policy, reference, x_t, t, eps, tape)
    x0 = estimator(x_prev, t - 1, tape)
    r = reward.graph(x0, tape)
    w = discount_weight(t, gamma)
    q = r * w
    kl = vsum(square(mu - mu_ref), axis=1) * kl_coef
    loss = vmean(kl * alpha - q)
    if not math.isfinite(loss.value):
        raise NanBatchError("SQDF loss is not finite", x_t, t)
    return LossParts(loss, float(np.mean(q.value)), float(np.mean(kl.value)), float(np.mean(r.value)))


def undiscounted_loss(x_t: np.ndarray, t: np.ndarray, policy: DiffusionModel, reference: DiffusionModel,
                      reward: RewardFn, alpha: float, eps: np.ndarray, tape: Tape) -> LossParts:
    """mean[-r(tweedie_ref(x_{t-1})) + alpha KL]: the plain form with Q approximated by the reward at the
    reference posterior-mean estimate."""
    t = policy.schedule.check_t(t)
    mu, mu_ref, x_prev, kl_coef = _transition(policy, reference, x_t, t, eps, tape)
    r = reward.graph(tweedie_x0(reference, x_prev, t - 1, tape, trainable=False), tape)
    kl = vsum(square(mu - mu_ref), axis=1) * kl_coef
    loss = vmean(kl * alpha - r)
    return LossParts(loss, float(np.mean(r.value)), float(np.mean(kl.value)), float(np.mean(r.value)))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    policy: DiffusionModel
    rows: list[MetricRow]
    checkpoints: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    diagnostics: list[dict] = field(default_factory=list)


def rollout_metrics(policy: DiffusionModel, reference: DiffusionModel, reward: RewardFn, spec: GmmSpec,
                    n: int, rng: np.random.Generator, radius: float = 1.0) -> dict[str, float]:
    """Reward, KL-sum, diversity and coverage of ``n`` fresh policy samples."""
    traj = sample_trajectory(policy, rng, n)
    return {
        "reward": float(np.mean(reward(traj.x0))),
        "kl_sum": float(np.mean(trajectory_kl(traj, reference))),
        "diversity": pairwise_diversity(traj.x0),
        "coverage": mode_coverage(traj.x0, spec, radius),
    }


class SqdfLearner:
    """Policy, buffer, optimizer and random streams of one soft-Q fine-tuning run.

    :meth:`rollout` draws on-policy chains from a read-only view of the policy;
    :meth:`update` is the only place parameters change.
    """

    def __init__(self, cfg: SqdfConfig, reference: DiffusionModel, seed: int,
                 cm: ConsistencyModel | None = None, buffer: ReplayBuffer | None = None,
                 policy: DiffusionModel | None = None, stream: str = "sqdf"):
        self.cfg = cfg
        self.reference = reference
        self.policy = policy or reference.copy("trainable-policy")
        self.policy.prefix = "policy."
        self.estimator = make_graph_estimator(cfg.estimator, reference, cm)
        self.buffer = buffer or ReplayBuffer(cfg.buffer_capacity, cfg.buffer_mode, cfg.gamma)
        self.opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.rng_roll = spawn_rng(seed, stream, "rollout")
        self.rng_buf = spawn_rng(seed, stream, "buffer")
        self.rng_eps = spawn_rng(seed, stream, "update")
        self.diagnostics: list[dict] = []

    def rollout(self, n: int | None = None):
        return sample_trajectory(self.policy, self.rng_roll, n or self.cfg.batch_size)

    def push(self, traj, rewards: np.ndarray) -> None:
        self.buffer.push_trajectory(traj.states, rewards)

    def update(self, reward: RewardFn, dump_dir: str | Path | None = None) -> LossParts:
        cfg = self.cfg
        x_t, t = self.buffer.sample(cfg.batch_size, self.rng_buf)
        eps = self.rng_eps.standard_normal((x_t.shape[0], DATA_DIM))
        tape = Tape()
        try:
            parts = sqdf_loss(x_t, t, self.policy, self.reference, self.estimator, reward,
                              cfg.alpha, cfg.gamma, eps, tape)
        except NanBatchError as err:
            if dump_dir is not None:
                np.savetxt(Path(dump_dir) / "nan_batch.csv", np.column_stack([err.x_t, err.t]),
                           delimiter=",", header="x,y,t", comments="")
            raise
        adamw_step(self.opt, self.policy.params(), backward(tape, parts.loss))
        self.diagnostics.append({"step": len(self.diagnostics), "loss": float(parts.loss.value),
                                 "q_mean": parts.q_mean, "kl_mean": parts.kl_mean})
        return parts

    def snapshot(self) -> dict[str, np.ndarray]:
        return model_arrays(self.policy)


def finetune_run(cfg: SqdfConfig, reference: DiffusionModel, reward: RewardFn, spec: GmmSpec, seed: int,
                 cm: ConsistencyModel | None = None, out_dir: str | Path | None = None,
                 run_id: str = "", buffer: ReplayBuffer | None = None,
                 policy: DiffusionModel | None = None) -> FinetuneResult:
    """Run ``cfg.epochs`` epochs of soft-Q fine-tuning from a copy of ``reference``.

    Row ``k`` describes the on-policy rollouts drawn at the start of epoch ``k``
    (row 0 is the untouched copy); the final row ``epochs`` is drawn after the
    last update and is not trained on.
    """
    learner = SqdfLearner(cfg, reference, seed, cm, buffer, policy)
    result = FinetuneResult(learner.policy, [], diagnostics=learner.diagnostics)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs + 1):
        traj = learner.rollout()
        r = reward(traj.x0)
        result.rows.append(MetricRow(
            epoch, float(np.mean(r)), float(np.mean(trajectory_kl(traj, reference))),
            pairwise_diversity(traj.x0), mode_coverage(traj.x0, spec), int((time.perf_counter() - t0) * 1000),
            run_id=run_id, method="sqdf"))
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            result.checkpoints[epoch] = learner.snapshot()
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / f"policy_epoch{epoch:04d}.sqdf", result.checkpoints[epoch])
        if epoch == cfg.epochs:
            break
        learner.push(traj, r)
        learner.update(reward, out_dir)
    if out_dir is not None:
        write_metrics(result.rows, Path(out_dir) / "metrics.csv")
    log.info("sqdf run %s finished in %.1fs", run_id, time.perf_counter() - t0)
    return result


def policy_from_checkpoint(arrays: dict[str, np.ndarray], reference: DiffusionModel) -> DiffusionModel:
    return model_from_arrays(arrays, "trainable-policy", reference.schedule)


def checkpoint_curve(result: FinetuneResult, reference: DiffusionModel, reward: RewardFn, spec: GmmSpec,
                     n: int, seed: int) -> list[dict]:
    """Fresh-sample metrics for every stored checkpoint, in epoch order (same eval noise for each)."""
    out = []
    for epoch, arrays in sorted(result.checkpoints.items()):
        met = rollout_metrics(policy_from_checkpoint(arrays, reference), reference, reward, spec, n,
                              spawn_rng(seed, "eval"))
        out.append({"epoch": epoch, **met})
    return out
