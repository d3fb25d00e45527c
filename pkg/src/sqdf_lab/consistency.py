"""Toy consistency model distilled from a frozen DDPM teacher.

The network output is wrapped as ``c_skip(t) * x + c_out(t) * net(x, t)`` with
``c_skip(0) = 1`` and ``c_out(0) = 0``, so ``f(x, 0) = x`` holds exactly for
any parameters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .diffcalc import (
    MlpParams,
    NumericError,
    OptimizerState,
    Tape,
    Var,
    adamw_step,
    backward,
    concat,
    mlp_forward,
    square,
    vmean,
    vsum,
)
from .diffusion import (
    DATA_DIM,
    EMBED_DIM,
    DiffusionModel,
    GmmSpec,
    NoiseSchedule,
    _per_row,
    _rows,
    ddim_multistep_x0,
    gmm_posterior_mean,
    q_sample,
    sample_gmm,
    time_embedding,
    tweedie_x0,
)

SKIP_LAMBDA = 4.0
EMA_DECAY = 0.99


@dataclass
class ConsistencyModel:
    net: MlpParams
    schedule: NoiseSchedule
    sigma_data: float
    lam: float = SKIP_LAMBDA
    teacher_id: str = ""
    prefix: str = "cm."

    @classmethod
    def init(cls, schedule: NoiseSchedule, sigma_data: float, rng: np.random.Generator,
             widths=(DATA_DIM + EMBED_DIM, 128, 128, DATA_DIM), teacher_id: str = "") -> "ConsistencyModel":
        return cls(MlpParams.init(widths, rng, "tanh"), schedule, float(sigma_data), SKIP_LAMBDA, teacher_id)

    def c_skip(self, t) -> np.ndarray:
        s = np.asarray(t, dtype=np.float64) / self.schedule.T * self.lam
        return self.sigma_data**2 / (s**2 + self.sigma_data**2)

    def c_out(self, t) -> np.ndarray:
        s = np.asarray(t, dtype=np.float64) / self.schedule.T * self.lam
        return s * self.sigma_data / np.sqrt(s**2 + self.sigma_data**2)

    def copy(self) -> "ConsistencyModel":
        return ConsistencyModel(self.net.copy(), self.schedule, self.sigma_data, self.lam,
                                self.teacher_id, self.prefix)

    def params(self) -> dict[str, np.ndarray]:
        return self.net.named(self.prefix)

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        out = self.params()
        out["meta.sigma_data"] = np.array(self.sigma_data)
        out["meta.lambda"] = np.array(self.lam)
        return out

    @classmethod
    def from_checkpoint(cls, arrays: Mapping[str, np.ndarray], schedule: NoiseSchedule,
                        teacher_id: str = "") -> "ConsistencyModel":
        net = MlpParams.from_named(arrays, "cm.")
        return cls(net, schedule, np.asarray(arrays["meta.sigma_data"]).item(), np.asarray(arrays["meta.lambda"]).item(), teacher_id)


def predict_x0(cm: ConsistencyModel, x_t, t, tape: Tape | None = None, trainable: bool = False):
    """f_psi(x_t, t). On a tape the result is differentiable w.r.t. ``x_t``."""
    t = cm.schedule.check_t(t, lo=0)
    n = _rows(x_t)
    skip = _per_row(np.atleast_1d(cm.c_skip(np.arange(cm.schedule.T + 1))), t, n)
    out = _per_row(np.atleast_1d(cm.c_out(np.arange(cm.schedule.T + 1))), t, n)
    emb = time_embedding(t, cm.schedule.T)
    if emb.shape[0] == 1 and n != 1:
        emb = np.broadcast_to(emb, (n, EMBED_DIM))
    if tape is None:
        xv = x_t.value if isinstance(x_t, Var) else np.asarray(x_t, dtype=np.float64)
        return skip * xv + out * mlp_forward(cm.net, np.concatenate([xv, emb], axis=1))
    if not isinstance(x_t, Var):
        x_t = tape.input(x_t)
    h = mlp_forward(cm.net, concat([x_t, emb], axis=1), tape, prefix=cm.prefix, trainable=trainable)
    return x_t * skip + h * out


def teacher_step(teacher: DiffusionModel, x_t: np.ndarray, t: np.ndarray) -> np.ndarray:
    """One deterministic DDIM step x_t -> x_{t-1} with the frozen teacher."""
    sched = teacher.schedule
    n = x_t.shape[0]
    eps = teacher.predict_eps(x_t, t)
    x0_hat = (x_t - eps * _per_row(sched.tweedie_eps, t, n)) * _per_row(sched.tweedie_scale, t, n)
    return x0_hat * _per_row(sched.sqrt_ab, t - 1, n) + eps * _per_row(sched.sqrt_1m_ab, t - 1, n)


def ema_update(target: ConsistencyModel, online: ConsistencyModel, decay: float = EMA_DECAY) -> None:
    for tp, op in zip(target.net.weights + target.net.biases, online.net.weights + online.net.biases):
        tp *= decay
        tp += (1.0 - decay) * op


def distill_step(cm: ConsistencyModel, ema: ConsistencyModel, teacher: DiffusionModel, x0: np.ndarray,
                 rng: np.random.Generator, opt: OptimizerState, decay: float = EMA_DECAY) -> float:
    """One consistency-distillation step with an adjacent-step teacher target.

    Loss: mean ||f_psi(x_t, t) - f_ema(x_{t-1}, t-1)||^2 where x_{t-1} is the
    teacher's DDIM step from x_t. The target is a constant (no gradient).
    """
    sched = teacher.schedule
    n = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    x_t = q_sample(x0, t, rng.standard_normal(x0.shape), sched)
    x_prev = teacher_step(teacher, x_t, t)
    target = predict_x0(ema, x_prev, t - 1)
    tape = Tape()
    pred = predict_x0(cm, x_t, t, tape, trainable=True)
    loss = vmean(vsum(square(pred - target), axis=1))
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericError("distillation loss is not finite")
    adamw_step(opt, cm.params(), backward(tape, loss))
    ema_update(ema, cm, decay)
    return value


def distill(cm: ConsistencyModel, teacher: DiffusionModel, spec: GmmSpec, steps: int, batch_size: int,
            rng: np.random.Generator, opt: OptimizerState | None = None,
            lr_final: float | None = None) -> tuple[ConsistencyModel, list[float]]:
    """Distil ``steps`` steps; returns the EMA target network and the loss curve."""
    opt = opt or OptimizerState(lr=1e-3, weight_decay=0.0)
    ema = cm.copy()
    lr0 = opt.lr
    losses = []
    for k in range(steps):
        if lr_final is not None:
            opt.lr = lr_final + 0.5 * (lr0 - lr_final) * (1 + math.cos(math.pi * k / steps))
        losses.append(distill_step(cm, ema, teacher, sample_gmm(spec, batch_size, rng), rng, opt))
    opt.lr = lr0
    return ema, losses


# ---------------------------------------------------------------------------
# Estimator comparison
# ---------------------------------------------------------------------------


def make_estimator(tag: str, teacher: DiffusionModel | None = None,
                   cm: ConsistencyModel | None = None) -> Callable[[np.ndarray, int], np.ndarray]:
    """Map an estimator tag (``tweedie``, ``consistency``, ``ddim-<n>``) to ``f(x_t, t) -> x0_hat``."""
    if tag == "tweedie":
        return lambda x, t: tweedie_x0(teacher, x, t)
    if tag == "consistency":
        return lambda x, t: predict_x0(cm, x, t)
    if tag.startswith("ddim-"):
        n = int(tag.split("-", 1)[1])
        return lambda x, t: ddim_multistep_x0(teacher, x, t, min(n, int(t)))
    raise ValueError(f"unknown estimator {tag!r}")


def eval_prediction_error(estimators: Mapping[str, Callable], spec: GmmSpec, sched: NoiseSchedule,
                          t_grid, n: int, rng: np.random.Generator) -> list[dict]:
    """Per-t mean Euclidean distance between each estimate and the exact posterior mean.

    All estimators see the same ``n`` draws of x_t ~ q(x_t) at each t.
    """
    rows = []
    for t in t_grid:
        x0 = sample_gmm(spec, n, rng)
        x_t = q_sample(x0, t, rng.standard_normal(x0.shape), sched)
        exact = gmm_posterior_mean(spec, x_t, t, sched)
        for tag, f in estimators.items():
            err = np.linalg.norm(f(x_t, t) - exact, axis=1)
            rows.append({
                "t": int(t),
                "estimator": tag,
                "mean_err": float(err.mean()),
                "std_err": float(err.std(ddof=1) / math.sqrt(n)),
            })
    return rows


def write_error_table(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["t", "estimator", "mean_err", "std_err"])
        w.writeheader()
        for r in rows:
            w.writerow(r)
