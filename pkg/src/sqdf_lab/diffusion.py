"""DDPM machinery on 2-D data.

Indexing convention: diffusion index ``t`` runs 1..T with ``x_T`` pure noise and
``x_0`` data. Arrays on :class:`NoiseSchedule` that are indexed by ``t`` have
length T+1 so that ``arr[t]`` is the value at step ``t`` (entry 0 is the clean
end: ``alpha_bar[0] == 1``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.special import logsumexp

from .diffcalc import (
    ContractError,
    MlpParams,
    NumericError,
    OptimizerState,
    Tape,
    Var,
    adamw_step,
    backward,
    concat,
    mlp_forward,
    seed_rng,
    square,
    vmean,
    vsum,
)

DATA_DIM = 2
EMBED_DIM = 3
DEFAULT_T = 50
DEFAULT_BETA_START = 1e-3
DEFAULT_BETA_END = 0.25
DEFAULT_WIDTHS = (DATA_DIM + EMBED_DIM, 128, 128, DATA_DIM)

ROLES = ("pretrained-reference", "trainable-policy")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray  # betas[t-1] is beta_t
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 2 or np.any(b <= 0) or np.any(b >= 1):
            raise ConfigError("betas must be a 1-D array in (0, 1) with at least 2 steps")
        ab = np.empty(b.size + 1)
        ab[0] = 1.0
        ab[1:] = np.exp(np.cumsum(np.log1p(-b)))
        beta = np.concatenate([[0.0], b])
        sigma = np.zeros(b.size + 1)
        # reverse-process std: DDPM posterior variance; sigma_1 = 0 since alpha_bar_0 = 1
        sigma[2:] = np.sqrt(beta[2:] * (1.0 - ab[1:-1]) / (1.0 - ab[2:]))

        sqrt_ab = np.sqrt(ab)
        sqrt_1m = np.sqrt(1.0 - ab)
        tw_scale = 1.0 / sqrt_ab
        tw_eps = sqrt_1m
        mean_scale = np.empty(b.size + 1)
        mean_eps = np.empty(b.size + 1)
        mean_scale[0], mean_eps[0] = 1.0, 0.0
        mean_scale[1], mean_eps[1] = tw_scale[1], tw_eps[1]
        mean_scale[2:] = 1.0 / np.sqrt(1.0 - b[1:])
        mean_eps[2:] = b[1:] / sqrt_1m[2:]

        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "sqrt_ab", sqrt_ab)
        object.__setattr__(self, "sqrt_1m_ab", sqrt_1m)
        object.__setattr__(self, "tweedie_scale", tw_scale)
        object.__setattr__(self, "tweedie_eps", tw_eps)
        object.__setattr__(self, "mean_scale", mean_scale)
        object.__setattr__(self, "mean_eps", mean_eps)

    @property
    def T(self) -> int:
        return self.betas.size

    def check_t(self, t, lo: int = 1) -> np.ndarray:
        t = np.asarray(t)
        if t.dtype.kind not in "iu":
            if np.any(t != np.round(t)):
                raise ContractError("diffusion index must be an integer")
            t = t.astype(np.int64)
        if np.any(t < lo) or np.any(t > self.T):
            raise ContractError(f"diffusion index out of range [{lo}, {self.T}]")
        return t

    def same_as(self, other: "NoiseSchedule") -> bool:
        return self.T == other.T and np.array_equal(self.betas, other.betas)


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linearly spaced betas."""
    if int(T) != T or T < 2:
        raise ConfigError("T must be an integer >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T)))


def time_embedding(t, T: int) -> np.ndarray:
    """Rows of (t/T, sin(2 pi t/T), cos(2 pi t/T))."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    return np.stack([s, np.sin(2 * np.pi * s), np.cos(2 * np.pi * s)], axis=-1)


def _per_row(arr: np.ndarray, t, n: int) -> np.ndarray:
    """Coefficient column of shape (n, 1) for scalar or per-row ``t``."""
    c = arr[np.asarray(t)]
    if c.ndim == 0:
        return np.full((n, 1), float(c))
    return c.reshape(-1, 1)


def _rows(x) -> int:
    return (x.value if isinstance(x, Var) else x).shape[0]


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class GmmSpec:
    means: np.ndarray
    var: float = 0.3
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = self.means.shape[0]
        if self.weights is None:
            self.weights = np.full(k, 1.0 / k)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (k,) or np.any(self.weights <= 0):
            raise ConfigError("mixture weights must be positive, one per component")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must sum to 1")
        if self.var <= 0:
            raise ConfigError("component variance must be positive")

    @property
    def data_std(self) -> float:
        """Per-coordinate standard deviation of the mixture, averaged over coordinates."""
        mu = self.weights @ self.means
        spread = self.weights @ ((self.means - mu) ** 2)
        return float(np.sqrt(np.mean(spread) + self.var))

    def to_config(self) -> dict[str, str]:
        return {
            "gmm.means": ";".join(f"{a:g},{b:g}" for a, b in self.means),
            "gmm.var": repr(self.var),
            "gmm.weights": ",".join(repr(float(w)) for w in self.weights),
        }


def default_gmm(var: float = 0.3) -> GmmSpec:
    """Nine equal-weight components on the 3x3 grid spanning (-4,-4)..(4,4)."""
    g = np.array([-4.0, 0.0, 4.0])
    means = np.array([(a, b) for a in g for b in g])
    return GmmSpec(means, var)


def sample_gmm(spec: GmmSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(spec.means.shape[0], size=n, p=spec.weights)
    return spec.means[comp] + math.sqrt(spec.var) * rng.standard_normal((n, spec.means.shape[1]))


def gmm_posterior_mean(spec: GmmSpec, x_t, t, sched: NoiseSchedule) -> np.ndarray:
    """Exact E[x_0 | x_t] when x_0 follows ``spec`` and x_t = q_sample(x_0, t)."""
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    t = sched.check_t(t, lo=0)
    ab = _per_row(sched.alpha_bar, t, x.shape[0])  # (n, 1)
    s2 = spec.var
    v = ab * s2 + (1.0 - ab)  # (n, 1)
    centres = np.sqrt(ab)[:, :, None] * spec.means.T[None]  # (n, d, K)
    d2 = np.sum((x[:, :, None] - centres) ** 2, axis=1)  # (n, K)
    logw = np.log(spec.weights)[None] - 0.5 * d2 / v - 0.5 * x.shape[1] * np.log(v)
    resp = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    comp_mean = (s2 * np.sqrt(ab)[:, :, None] * x[:, :, None] + (1.0 - ab)[:, :, None] * spec.means.T[None]) / v[:, :, None]
    # abar = 1 (t = 0) leaves no noise: return x_t itself rather than a rounded blend
    return np.where(ab == 1.0, x, np.einsum("nk,ndk->nd", resp, comp_mean))


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class EpsPredictor(Protocol):
    schedule: NoiseSchedule

    def predict_eps(self, x, t, tape: Tape | None = None, trainable: bool | None = None): ...


@dataclass
class DiffusionModel:
    schedule: NoiseSchedule
    net: MlpParams
    role: str = "pretrained-reference"
    prefix: str = ""

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}")
        widths = self.net.widths
        if widths[0] != DATA_DIM + EMBED_DIM or widths[-1] != DATA_DIM:
            raise ConfigError(f"network widths {widths} do not fit data dim {DATA_DIM}")

    @classmethod
    def init(cls, schedule: NoiseSchedule, rng: np.random.Generator,
             widths=DEFAULT_WIDTHS, role: str = "pretrained-reference") -> "DiffusionModel":
        return cls(schedule, MlpParams.init(widths, rng, "tanh"), role)

    def predict_eps(self, x, t, tape: Tape | None = None, trainable: bool | None = None):
        if trainable is None:
            trainable = self.role == "trainable-policy"
        emb = time_embedding(t, self.schedule.T)
        n = _rows(x)
        if emb.shape[0] == 1 and n != 1:
            emb = np.broadcast_to(emb, (n, EMBED_DIM))
        if tape is None:
            xv = x.value if isinstance(x, Var) else x
            return mlp_forward(self.net, np.concatenate([xv, emb], axis=1))
        if not isinstance(x, Var):
            x = tape.input(x)
        inp = concat([x, emb], axis=1)
        return mlp_forward(self.net, inp, tape, prefix=self.prefix, trainable=trainable)

    def copy(self, role: str | None = None) -> "DiffusionModel":
        """Deep copy; the copy's parameters share no memory with this model."""
        return DiffusionModel(self.schedule, self.net.copy(), role or self.role, self.prefix)

    def params(self) -> dict[str, np.ndarray]:
        return self.net.named(self.prefix)


class AnalyticGmmDenoiser:
    """Exact noise predictor for a GMM: eps*(x, t) = -sqrt(1 - abar_t) * grad log p_t(x)."""

    def __init__(self, spec: GmmSpec, schedule: NoiseSchedule):
        self.spec = spec
        self.schedule = schedule

    def predict_eps(self, x, t, tape=None, trainable=None):
        if tape is not None:
            raise ContractError("analytic denoiser is not differentiable on a tape")
        x = np.atleast_2d(np.asarray(x.value if isinstance(x, Var) else x, dtype=np.float64))
        t = self.schedule.check_t(t, lo=0)
        ab = _per_row(self.schedule.alpha_bar, t, x.shape[0])
        v = ab * self.spec.var + (1.0 - ab)
        centres = np.sqrt(ab)[:, :, None] * self.spec.means.T[None]
        diff = centres - x[:, :, None]  # (n, d, K)
        logw = np.log(self.spec.weights)[None] - 0.5 * np.sum(diff**2, axis=1) / v
        resp = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
        score = np.einsum("nk,ndk->nd", resp, diff) / v
        return -np.sqrt(1.0 - ab) * score


# ---------------------------------------------------------------------------
# Forward process and training
# ---------------------------------------------------------------------------


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    t = sched.check_t(t)
    n = x0.shape[0]
    return _per_row(sched.sqrt_ab, t, n) * x0 + _per_row(sched.sqrt_1m_ab, t, n) * eps


def noise_prediction_loss(model: EpsPredictor, x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                          tape: Tape | None = None):
    """Mean over the batch of ||eps - eps_theta(x_t, t)||^2."""
    x_t = q_sample(x0, t, eps, model.schedule)
    if tape is None:
        pred = model.predict_eps(x_t, t)
        return float(np.mean(np.sum((eps - pred) ** 2, axis=1)))
    pred = model.predict_eps(x_t, t, tape, trainable=True)
    return vmean(vsum(square(pred - eps), axis=1))


def pretrain_step(model: DiffusionModel, x0: np.ndarray, rng: np.random.Generator,
                  opt: OptimizerState) -> float:
    """One noise-prediction step on a data batch, followed by an AdamW update."""
    n = x0.shape[0]
    t = rng.integers(1, model.schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    tape = Tape()
    loss = noise_prediction_loss(model, x0, t, eps, tape)
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericError("pretraining loss is not finite")
    grads = backward(tape, loss)
    adamw_step(opt, model.params(), grads)
    return value


def pretrain(model: DiffusionModel, spec: GmmSpec, steps: int, batch_size: int,
             rng: np.random.Generator, opt: OptimizerState | None = None,
             lr_final: float | None = None) -> list[float]:
    """Run ``steps`` pretraining steps; optional cosine decay of the learning rate to ``lr_final``."""
    opt = opt or OptimizerState(lr=1e-3, weight_decay=0.0)
    lr0 = opt.lr
    losses = []
    for k in range(steps):
        if lr_final is not None:
            opt.lr = lr_final + 0.5 * (lr0 - lr_final) * (1 + math.cos(math.pi * k / steps))
        losses.append(pretrain_step(model, sample_gmm(spec, batch_size, rng), rng, opt))
    opt.lr = lr0
    return losses


# ---------------------------------------------------------------------------
# Reverse process
# ---------------------------------------------------------------------------


def ddpm_mean(model: EpsPredictor, x_t, t, tape: Tape | None = None, trainable: bool | None = None):
    """Reverse-process mean mu_theta(x_t, t); at t=1 this is exactly the one-step x0 estimate."""
    sched = model.schedule
    t = sched.check_t(t)
    n = _rows(x_t)
    eps = model.predict_eps(x_t, t, tape, trainable)
    return (x_t - eps * _per_row(sched.mean_eps, t, n)) * _per_row(sched.mean_scale, t, n)


def ancestral_step(model: EpsPredictor, x_t, t, eps=None, rng: np.random.Generator | None = None,
                   tape: Tape | None = None, trainable: bool | None = None):
    """Sample x_{t-1} = mu_theta(x_t, t) + sigma_t * eps; returns (x_{t-1}, mu)."""
    sched = model.schedule
    t = sched.check_t(t)
    mu = ddpm_mean(model, x_t, t, tape, trainable)
    if eps is None:
        if rng is None:
            raise ContractError("need either eps or rng")
        eps = rng.standard_normal((_rows(x_t), DATA_DIM))
    return mu + _per_row(sched.sigma, t, _rows(x_t)) * eps, mu


@dataclass
class Trajectory:
    """A batch of rollouts; ``states[t]`` holds x_t for t = T..0.

    ``means[t]`` and ``noises[t]`` belong to the transition x_t -> x_{t-1}
    (entry 0 unused).
    """

    states: np.ndarray
    means: np.ndarray
    noises: np.ndarray
    seed: int | None = None

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    def __len__(self) -> int:
        return self.states.shape[0]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["traj", "t", "x", "y"])
            for t in range(self.T, -1, -1):
                for i, (a, b) in enumerate(self.states[t]):
                    w.writerow([i, t, repr(float(a)), repr(float(b))])


def sample_trajectory(model: EpsPredictor, rng: np.random.Generator | int, n: int = 1) -> Trajectory:
    """Ancestral rollout of ``n`` chains from x_T ~ N(0, I).

    Passing an integer seed makes the trajectory replayable with :func:`replay_trajectory`.
    """
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = seed_rng(seed)
    T = model.schedule.T
    states = np.zeros((T + 1, n, DATA_DIM))
    means = np.zeros((T + 1, n, DATA_DIM))
    noises = np.zeros((T + 1, n, DATA_DIM))
    states[T] = rng.standard_normal((n, DATA_DIM))
    for t in range(T, 0, -1):
        eps = rng.standard_normal((n, DATA_DIM))
        states[t - 1], means[t] = ancestral_step(model, states[t], t, eps)
        noises[t] = eps
    return Trajectory(states, means, noises, seed)


def replay_trajectory(model: EpsPredictor, traj: Trajectory) -> Trajectory:
    if traj.seed is None:
        raise ContractError("trajectory was not generated from a stored seed")
    return sample_trajectory(model, traj.seed, traj.states.shape[1])


def sample(model: EpsPredictor, n: int, rng: np.random.Generator) -> np.ndarray:
    """x_0 samples only, without keeping the trajectory."""
    x = rng.standard_normal((n, DATA_DIM))
    for t in range(model.schedule.T, 0, -1):
        x, _ = ancestral_step(model, x, t, rng.standard_normal((n, DATA_DIM)))
    return x


# ---------------------------------------------------------------------------
# Clean-sample estimates
# ---------------------------------------------------------------------------


def tweedie_x0(model: EpsPredictor, x_t, t, tape: Tape | None = None, trainable: bool | None = None):
    """One-step estimate (x_t - sqrt(1 - abar_t) eps_theta) / sqrt(abar_t).

    ``t = 0`` is accepted and returns ``x_t`` (abar_0 = 1).
    """
    sched = model.schedule
    t = sched.check_t(t, lo=0)
    n = _rows(x_t)
    eps = model.predict_eps(x_t, t, tape, trainable)
    return (x_t - eps * _per_row(sched.tweedie_eps, t, n)) * _per_row(sched.tweedie_scale, t, n)


def ddim_grid(t, n_steps: int) -> np.ndarray:
    """Integer time grid from ``t`` down to 0 in ``n_steps`` uniform sub-steps, shape (n_steps+1, ...)."""
    t = np.asarray(t)
    k = np.arange(n_steps + 1).reshape((-1,) + (1,) * t.ndim)
    return np.rint(t * (1.0 - k / n_steps)).astype(np.int64)


def ddim_multistep_x0(model: EpsPredictor, x_t, t, n_steps: int, tape: Tape | None = None,
                      trainable: bool | None = None):
    """Deterministic DDIM (eta = 0) from ``t`` to 0 in ``n_steps`` steps; returns the x0 estimate.

    With ``n_steps == 1`` this is :func:`tweedie_x0`. For per-row ``t`` smaller
    than ``n_steps`` the grid repeats indices; a repeated step is an exact
    re-noising to the same level.
    """
    sched = model.schedule
    t = sched.check_t(t, lo=0)
    if int(n_steps) != n_steps or n_steps < 1:
        raise ContractError("n_steps must be a positive integer")
    if t.ndim == 0 and n_steps > t and t > 0:
        raise ContractError(f"n_steps={n_steps} exceeds t={int(t)}")
    grid = ddim_grid(t, int(n_steps))
    if np.any(np.diff(grid, axis=0) > 0):
        raise ContractError("DDIM time grid must be non-increasing")
    n = _rows(x_t)
    x = x_t
    for k in range(int(n_steps)):
        s, s_next = grid[k], grid[k + 1]
        eps = model.predict_eps(x, s, tape, trainable)
        x0_hat = (x - eps * _per_row(sched.tweedie_eps, s, n)) * _per_row(sched.tweedie_scale, s, n)
        if k == n_steps - 1:
            return x0_hat
        x = x0_hat * _per_row(sched.sqrt_ab, s_next, n) + eps * _per_row(sched.sqrt_1m_ab, s_next, n)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Checkpoint layout
# ---------------------------------------------------------------------------


def model_arrays(model: DiffusionModel) -> dict[str, np.ndarray]:
    """Named arrays for :func:`save_checkpoint`: ``eps.W*``/``eps.b*`` plus ``meta.betas``."""
    out = {k: v.copy() for k, v in model.net.named("eps.").items()}
    out["meta.betas"] = model.schedule.betas.copy()
    return out


def model_from_arrays(arrays, role: str = "pretrained-reference",
                      schedule: NoiseSchedule | None = None) -> DiffusionModel:
    sched = schedule if schedule is not None else NoiseSchedule(np.asarray(arrays["meta.betas"]))
    if "meta.betas" in arrays and not np.array_equal(sched.betas, arrays["meta.betas"]):
        raise ConfigError("checkpoint was trained with a different noise schedule")
    return DiffusionModel(sched, MlpParams.from_named(arrays, "eps."), role)
