"""Differentiable toy rewards, a budget-gated oracle, and surrogate ensembles."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcalc import (
    MlpParams,
    OptimizerState,
    Tape,
    Var,
    adamw_step,
    backward,
    mlp_forward,
    spawn_rng,
    safe_sqrt,
    square,
    tanh,
    affine,
    vmean,
    vsum,
)

log = logging.getLogger(__name__)


class BudgetError(RuntimeError):
    pass


class StateError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Reward functions
# ---------------------------------------------------------------------------


class RewardFn:
    """Reward over 2-D points. ``graph`` builds the same value on a tape."""

    kind = "abstract"
    differentiable = True

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def graph(self, x: Var, tape: Tape) -> Var:
        raise NotImplementedError


@dataclass
class TargetModeReward(RewardFn):
    """r(x) = c - ||x - target||^2."""

    target: np.ndarray = field(default_factory=lambda: np.array([4.0, 4.0]))
    c: float = 10.0
    kind = "target-mode"

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)

    def __call__(self, x):
        x = np.atleast_2d(x)
        return self.c - np.sum((x - self.target) ** 2, axis=1)

    def graph(self, x, tape):
        return self.c - vsum(square(x - self.target), axis=1)


@dataclass
class RidgeReward(RewardFn):
    """r(x) = c - (x . u - b)^2."""

    u: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]) / math.sqrt(2))
    b: float = 0.0
    c: float = 10.0
    kind = "ridge"

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)

    def __call__(self, x):
        x = np.atleast_2d(x)
        return self.c - (x @ self.u - self.b) ** 2

    def graph(self, x, tape):
        proj = vsum(x * self.u, axis=1)
        return self.c - square(proj - self.b)


@dataclass
class MlpReward(RewardFn):
    """Reward given by a frozen MLP with a single output."""

    net: MlpParams
    kind = "learned-mlp"

    def __call__(self, x):
        return mlp_forward(self.net, np.atleast_2d(x))[:, 0]

    def graph(self, x, tape):
        return mlp_forward(self.net, x, tape, trainable=False)[:, 0]


def reward_eval(r: RewardFn, x) -> np.ndarray:
    return r(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def reward_grad(r: RewardFn, x) -> np.ndarray:
    """Per-point gradient of ``r``, shape (n, 2)."""
    tape = Tape()
    xv = tape.input(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    backward(tape, vsum(r.graph(xv, tape)))
    return xv.grad


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleBudget:
    allowances: list[int]
    used: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.allowances or any(a <= 0 for a in self.allowances):
            raise ValueError("every round needs a positive query allowance")
        self.allowances = [int(a) for a in self.allowances]
        if not self.used:
            self.used = [0] * len(self.allowances)

    @property
    def total_cap(self) -> int:
        return sum(self.allowances)

    @property
    def total_used(self) -> int:
        return sum(self.used)

    def remaining(self, round_id: int) -> int:
        return self.allowances[round_id] - self.used[round_id]


class BudgetedOracle:
    """The only path to the black-box reward: every call is counted and logged."""

    def __init__(self, reward: RewardFn, budget: OracleBudget):
        self._reward = reward
        self.budget = budget
        self.log: list[tuple[int, np.ndarray, np.ndarray]] = []
        self.calls = 0

    def query(self, x: np.ndarray, round_id: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not 0 <= round_id < len(self.budget.allowances):
            raise BudgetError(f"no allowance for round {round_id}")
        if x.shape[0] > self.budget.remaining(round_id):
            raise BudgetError(
                f"round {round_id}: {x.shape[0]} queries requested, {self.budget.remaining(round_id)} left")
        y = self._reward(x)
        self.budget.used[round_id] += x.shape[0]
        self.calls += 1
        self.log.append((round_id, x.copy(), y.copy()))
        return y

    def replay(self, reward: RewardFn | None = None) -> list[np.ndarray]:
        """Re-score every logged batch (deterministic oracles reproduce the stored scores)."""
        f = reward or self._reward
        return [f(x) for _, x, _ in self.log]

    def write_dataset(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "reward", "round"])
            for rnd, x, y in self.log:
                for (a, b), v in zip(x, y):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(v)), rnd])


def oracle_query(oracle: BudgetedOracle, x: np.ndarray, round_id: int) -> np.ndarray:
    return oracle.query(x, round_id)


# ---------------------------------------------------------------------------
# Surrogate ensemble
# ---------------------------------------------------------------------------

SURROGATE_WIDTHS = (2, 64, 64, 1)


@dataclass
class SurrogateEnsemble:
    n_heads: int = 4
    seeds: list[int] | None = None
    c1: float = 0.01
    lam: float = 0.001
    widths: Sequence[int] = SURROGATE_WIDTHS
    heads: list[MlpParams] = field(default_factory=list)
    gram: np.ndarray | None = None
    gram_inv: np.ndarray | None = None
    y_mean: float = 0.0
    y_std: float = 1.0
    x_scale: float = 4.0
    resample_counts: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.n_heads < 1:
            raise ValueError("ensemble needs at least one head")
        if self.seeds is None:
            self.seeds = list(range(self.n_heads))
        if len(self.seeds) != self.n_heads:
            raise ValueError("one seed per head")
        k = self.widths[-2]
        self.gram = self.lam * np.eye(k)

    @property
    def fitted(self) -> bool:
        return bool(self.heads)


def _head_features(head: MlpParams, x, tape: Tape | None):
    """Penultimate activations of a head (input already scaled)."""
    h = x
    for i in range(len(head.weights) - 1):
        if tape is None:
            h = np.tanh(h @ head.weights[i] + head.biases[i])
        else:
            h = tanh(affine(h, head.weights[i], head.biases[i]))
    return h


def surrogate_fit(ens: SurrogateEnsemble, X: np.ndarray, y: np.ndarray, steps: int = 1500,
                  lr: float = 3e-3, batch_size: int = 256, weight_decay: float = 0.0) -> SurrogateEnsemble:
    """Fit each head on its own with-replacement resample of (X, y), from scratch.

    Targets are standardised internally; scores are reported in reward units.
    The UCB Gram matrix is rebuilt from head 0's penultimate features on all of X.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    if n < 8:
        raise ValueError("need at least 8 labelled points")
    if np.allclose(X, X[0]):
        log.warning("surrogate data has a single distinct input")
    ens.y_mean = float(y.mean())
    ens.y_std = float(y.std()) or 1.0
    z = (y - ens.y_mean) / ens.y_std
    Xs = X / ens.x_scale
    ens.heads = []
    ens.resample_counts = []
    for seed in ens.seeds:
        rng = spawn_rng(seed, "surrogate-head")
        idx = rng.integers(0, n, size=n)
        ens.resample_counts.append(np.bincount(idx, minlength=n))
        head = MlpParams.init(ens.widths, rng, "tanh")
        opt = OptimizerState(lr=lr, weight_decay=weight_decay)
        params = head.named()
        for _ in range(steps):
            b = idx if n <= batch_size else idx[rng.integers(0, n, size=batch_size)]
            tape = Tape()
            pred = mlp_forward(head, Xs[b], tape)[:, 0]
            loss = vmean(square(pred - z[b]))
            adamw_step(opt, params, backward(tape, loss))
        ens.heads.append(head)
    phi = _head_features(ens.heads[0], Xs, None)
    ens.gram = ens.lam * np.eye(phi.shape[1]) + phi.T @ phi
    ens.gram_inv = np.linalg.inv(ens.gram)
    return ens


def surrogate_train_loss(ens: SurrogateEnsemble, X: np.ndarray, y: np.ndarray, head: int = 0) -> float:
    """Mean squared error of one head on standardised targets."""
    z = (np.asarray(y) - ens.y_mean) / ens.y_std
    pred = mlp_forward(ens.heads[head], np.atleast_2d(X) / ens.x_scale)[:, 0]
    return float(np.mean((pred - z) ** 2))


SCORE_MODES = ("mean", "bootstrap-UCB", "feature-UCB")


def surrogate_score(ens: SurrogateEnsemble, x, mode: str = "mean", tape: Tape | None = None):
    """Surrogate reward per point; on a tape the result is differentiable w.r.t. ``x``.

    mean: average of head outputs. bootstrap-UCB: mean + std across heads.
    feature-UCB: mean + c1 sqrt(phi(x)^T G^-1 phi(x)) with phi the head-0
    penultimate features and G = lam I + sum phi phi^T over the fit set.
    """
    if not ens.fitted:
        raise StateError("surrogate ensemble has not been fitted")
    if mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {mode!r}")
    H = len(ens.heads)
    if tape is None:
        xs = np.atleast_2d(np.asarray(x.value if isinstance(x, Var) else x, dtype=np.float64)) / ens.x_scale
        outs = np.stack([mlp_forward(h, xs)[:, 0] for h in ens.heads]) * ens.y_std + ens.y_mean
        mean = outs.mean(axis=0)
        if mode == "mean":
            return mean
        if mode == "bootstrap-UCB":
            return mean + outs.std(axis=0)
        phi = _head_features(ens.heads[0], xs, None)
        return mean + ens.c1 * np.sqrt(np.einsum("ni,ij,nj->n", phi, ens.gram_inv, phi))
    if not isinstance(x, Var):
        x = tape.input(x)
    xs = x * (1.0 / ens.x_scale)
    outs = [mlp_forward(h, xs, tape, trainable=False)[:, 0] * ens.y_std + ens.y_mean for h in ens.heads]
    total = outs[0]
    for o in outs[1:]:
        total = total + o
    mean = total * (1.0 / H)
    if mode == "mean":
        return mean
    if mode == "bootstrap-UCB":
        if H == 1:
            return mean
        var = square(outs[0] - mean)
        for o in outs[1:]:
            var = var + square(o - mean)
        return mean + safe_sqrt(var * (1.0 / H))
    phi = _head_features(ens.heads[0], xs, tape)
    quad = vsum((phi @ ens.gram_inv) * phi, axis=1)
    return mean + safe_sqrt(quad) * ens.c1


@dataclass
class SurrogateReward(RewardFn):
    """Adapter exposing a fitted ensemble as a :class:`RewardFn`."""

    ensemble: SurrogateEnsemble
    mode: str = "mean"
    kind = "surrogate"

    def __call__(self, x):
        return surrogate_score(self.ensemble, x, self.mode)

    def graph(self, x, tape):
        return surrogate_score(self.ensemble, x, self.mode, tape)
