"""Exact soft-Bellman quantities on small finite-horizon tabular MDPs.

The MDP mirrors the denoising chain: states live on levels t = T..0, an action
at level t picks the next state on level t-1 (deterministic transition), the
reference policy is a row-stochastic matrix per level, and the only reward is
``r(s_0)`` paid on the final transition.

Levels are indexed like diffusion steps: ``transitions[t-1]`` has shape
(|S_t|, |S_{t-1}|) and ``reward`` has length |S_0|.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

MAX_TRAJECTORIES = 10**6


class OracleConfigError(ValueError):
    pass


class EnumerationLimitError(RuntimeError):
    pass


@dataclass
class TabularMDP:
    transitions: list[np.ndarray]
    reward: np.ndarray
    alpha: float
    gamma: float = 1.0

    def __post_init__(self) -> None:
        self.transitions = [np.asarray(P, dtype=np.float64) for P in self.transitions]
        self.reward = np.asarray(self.reward, dtype=np.float64)
        if not self.transitions:
            raise OracleConfigError("need at least one level")
        if self.alpha <= 0:
            raise OracleConfigError("temperature alpha must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise OracleConfigError("discount gamma must lie in (0, 1]")
        width = self.reward.size
        for t, P in enumerate(self.transitions, start=1):
            if P.ndim != 2 or P.shape[1] != width:
                raise OracleConfigError(f"level {t}: matrix {P.shape} does not map onto {width} states")
            if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
                raise OracleConfigError(f"level {t}: rows must be probability vectors")
            width = P.shape[0]

    @property
    def T(self) -> int:
        return len(self.transitions)

    def n_states(self, t: int) -> int:
        return self.reward.size if t == 0 else self.transitions[t - 1].shape[0]

    def n_trajectories(self, t: int) -> int:
        """Number of level-t -> level-0 paths from one state (counting zero-probability edges)."""
        return math.prod(self.n_states(k) for k in range(t))


@dataclass
class SoftSolution:
    V: list[np.ndarray]  # V[t] over S_t, V[0] = 0
    Q: list[np.ndarray | None]  # Q[t] shape (|S_t|, |S_{t-1}|); Q[0] unused
    log_Z: list[np.ndarray]  # log partition, V = alpha * log_Z
    policy: list[np.ndarray | None]  # optimal policy rows per level
    alpha: float = field(default=1.0)


def _log(P: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(P)


def solve_soft(mdp: TabularMDP) -> SoftSolution:
    """Backward soft-Bellman recursion with max-shifted log-sum-exp.

    V_t(s) = alpha log sum_a p'(a|s) exp(Q_t(s, a) / alpha),
    Q_t(s, a) = [t == 1] r(a) + gamma V_{t-1}(a),
    p*(a|s) = p'(a|s) exp((Q_t(s, a) - V_t(s)) / alpha).
    """
    a = mdp.alpha
    V = [np.zeros(mdp.reward.size)]
    Q: list = [None]
    P_star: list = [None]
    for t in range(1, mdp.T + 1):
        P = mdp.transitions[t - 1]
        q = np.broadcast_to(mdp.gamma * V[t - 1], P.shape).copy()
        if t == 1:
            q += mdp.reward
        logits = _log(P) + q / a
        v = a * logsumexp(logits, axis=1)
        V.append(v)
        Q.append(q)
        P_star.append(np.exp(logits - v[:, None] / a))
    return SoftSolution(V, Q, [v / a for v in V], P_star, a)


def _enumerate_paths(mdp: TabularMDP, t: int) -> tuple[np.ndarray, np.ndarray]:
    """All level-t -> level-0 trajectories as one tensor.

    Returns (log_prob, terminal_reward), both with shape
    (|S_t|, |S_{t-1}|, ..., |S_0|): element [s_t, s_{t-1}, ..., s_0] is one path.
    """
    if mdp.n_trajectories(t) * mdp.n_states(t) > MAX_TRAJECTORIES:
        raise EnumerationLimitError(f"level {t} has more than {MAX_TRAJECTORIES} trajectories")
    logp = np.zeros(mdp.n_states(t))
    for k in range(t, 0, -1):
        logp = logp[..., None] + _log(mdp.transitions[k - 1]).reshape(
            (1,) * (t - k) + mdp.transitions[k - 1].shape)
    reward = np.broadcast_to(mdp.reward, logp.shape)
    return logp, reward


def _path_logmeanexp(logp: np.ndarray, values: np.ndarray) -> np.ndarray:
    """log E_paths[exp(values)] for every start state (leading axis)."""
    n = logp.shape[0]
    return logsumexp((logp + values).reshape(n, -1), axis=1)


def brute_force_soft_value(mdp: TabularMDP) -> list[np.ndarray]:
    """Soft values without the backward table.

    gamma = 1: alpha log sum_tau p'(tau) exp(r(tau)/alpha) over every enumerated
    trajectory. gamma < 1: the recursion tree evaluated on the full path
    tensor, i.e. every subtree is recomputed per prefix (no shared table).
    """
    a = mdp.alpha
    out = [np.zeros(mdp.reward.size)]
    for t in range(1, mdp.T + 1):
        logp, reward = _enumerate_paths(mdp, t)
        if mdp.gamma == 1.0:
            out.append(a * _path_logmeanexp(logp, reward / a))
            continue
        # reduce the last axis first: innermost subtree is the final transition
        vals = reward
        for k in range(1, t + 1):
            P = mdp.transitions[k - 1]
            lp = _log(P).reshape((1,) * (t - k) + P.shape)
            inner = vals if k == 1 else mdp.gamma * vals
            vals = a * logsumexp(lp + inner / a, axis=-1)
        out.append(vals)
    return out


# ---------------------------------------------------------------------------
# Sandwich bounds
# ---------------------------------------------------------------------------


@dataclass
class BoundsReport:
    rows: list[dict]
    violations: int
    min_margin: float

    def to_csv(self, path: str | Path) -> None:
        _write_rows(self.rows, path)


def _terminal_moments(mdp: TabularMDP, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Enumerated (log_prob, reward) tensors for paths starting at level t (t=0: trivial)."""
    if t == 0:
        return np.zeros(mdp.reward.size), mdp.reward.copy()
    return _enumerate_paths(mdp, t)


def discounted_bounds(mdp: TabularMDP, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper bounds on Q_t(., a) as functions of the next state a on level t-1.

    lower = alpha log E[exp(gamma^(t-1) r / alpha)], upper = gamma^(t-1) alpha log E[exp(r / alpha)],
    expectations over reference paths from a down to level 0.
    """
    a = mdp.alpha
    w = mdp.gamma ** (t - 1)
    logp, reward = _terminal_moments(mdp, t - 1)
    if t == 1:
        return w * reward, w * reward
    lower = a * _path_logmeanexp(logp, w * reward / a)
    upper = w * a * _path_logmeanexp(logp, reward / a)
    return lower, upper


def check_bounds(mdp: TabularMDP, slack: float = 1e-9) -> BoundsReport:
    """Compare exact Q against the enumerated bounds at every reachable (t, s, a)."""
    sol = solve_soft(mdp)
    rows, violations, worst = [], 0, math.inf
    for t in range(1, mdp.T + 1):
        lower, upper = discounted_bounds(mdp, t)
        P = mdp.transitions[t - 1]
        for s, act in zip(*np.nonzero(P > 0)):
            q = float(sol.Q[t][s, act])
            lo, up = float(lower[act]), float(upper[act])
            m_lo, m_up = q - lo, up - q
            bad = m_lo < -slack or m_up < -slack
            violations += bad
            worst = min(worst, m_lo, m_up)
            rows.append({"t": t, "state": int(s), "action": int(act), "lower": lo, "q": q, "upper": up,
                         "margin_lower": m_lo, "margin_upper": m_up})
    return BoundsReport(rows, violations, worst)


# ---------------------------------------------------------------------------
# Policy optimality and identities
# ---------------------------------------------------------------------------


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def policy_objective(p: np.ndarray, q_row: np.ndarray, ref: np.ndarray, alpha: float) -> float:
    """E_p[Q] - alpha KL(p || p')."""
    return float(p @ q_row) - alpha * _kl(p, ref)


def _perturbations(p_star: np.ndarray, ref: np.ndarray, n: int, rng: np.random.Generator):
    support = ref > 0
    k = int(support.sum())
    for i in range(n):
        kind = i % 3
        p = np.zeros_like(p_star)
        if kind == 0:
            p[support] = rng.dirichlet(np.ones(k))
        elif kind == 1:
            scale = 10.0 ** rng.uniform(-4, 0.5)
            w = p_star[support] * np.exp(scale * rng.standard_normal(k))
            p[support] = w / w.sum()
        else:
            lam = 10.0 ** rng.uniform(-6, 0)
            p[support] = (1 - lam) * p_star[support] + lam * rng.dirichlet(np.ones(k))
        yield p


def policy_optimality_check(mdp: TabularMDP, sol: SoftSolution | None = None, n_perturb: int = 100,
                            rng: np.random.Generator | None = None) -> float:
    """Min over states and perturbations of objective(p*) - objective(p~)."""
    sol = sol or solve_soft(mdp)
    rng = rng or np.random.default_rng(0)
    worst = math.inf
    for t in range(1, mdp.T + 1):
        P = mdp.transitions[t - 1]
        for s in range(P.shape[0]):
            best = policy_objective(sol.policy[t][s], sol.Q[t][s], P[s], mdp.alpha)
            for p in _perturbations(sol.policy[t][s], P[s], n_perturb, rng):
                worst = min(worst, best - policy_objective(p, sol.Q[t][s], P[s], mdp.alpha))
    return worst


def soft_value_identity_residual(mdp: TabularMDP, sol: SoftSolution | None = None) -> float:
    """max |V(s) - (E_{p*}[Q(s, .)] - alpha KL(p*(.|s) || p'(.|s)))| over all states."""
    sol = sol or solve_soft(mdp)
    worst = 0.0
    for t in range(1, mdp.T + 1):
        P = mdp.transitions[t - 1]
        for s in range(P.shape[0]):
            rhs = policy_objective(sol.policy[t][s], sol.Q[t][s], P[s], mdp.alpha)
            worst = max(worst, abs(sol.V[t][s] - rhs))
    return worst


# ---------------------------------------------------------------------------
# One-point approximation error
# ---------------------------------------------------------------------------


def expected_terminal_index(mdp: TabularMDP, t: int) -> np.ndarray:
    """E[index of s_0] under the reference rollout from each state on level t."""
    dist = np.eye(mdp.n_states(t))
    for k in range(t, 0, -1):
        dist = dist @ mdp.transitions[k - 1]
    return dist @ np.arange(mdp.reward.size)


def q_approx_error(mdp: TabularMDP, gamma: float | None = None) -> list[dict]:
    """Mean/max |Q_t - gamma^(t-1) r(x0_hat)| per level, x0_hat the rounded expected terminal state.

    The rounded expectation is the tabular stand-in for a posterior-mean
    estimate; it is an analogy, exact only when reference paths are deterministic.
    """
    if gamma is not None:
        mdp = replace(mdp, gamma=gamma)
    sol = solve_soft(mdp)
    rows = []
    for t in range(1, mdp.T + 1):
        idx = np.clip(np.rint(expected_terminal_index(mdp, t - 1)), 0, mdp.reward.size - 1).astype(int)
        approx = mdp.gamma ** (t - 1) * mdp.reward[idx]
        P = mdp.transitions[t - 1]
        s, act = np.nonzero(P > 0)
        err = np.abs(sol.Q[t][s, act] - approx[act])
        rows.append({"t": t, "alpha": mdp.alpha, "gamma": mdp.gamma,
                     "mean_abs_err": float(err.mean()), "max_abs_err": float(err.max())})
    return rows


# ---------------------------------------------------------------------------
# Construction and I/O
# ---------------------------------------------------------------------------


def random_mdp(rng: np.random.Generator, max_states: int = 6, horizon: int | None = None,
               alpha: float = 1.0, gamma: float = 1.0, reward_scale: float = 1.0,
               sparsity: float = 0.3, min_states: int = 2) -> TabularMDP:
    """Random reference chain; some edges are zeroed (each row keeps at least one)."""
    T = horizon or int(rng.integers(1, 7))
    sizes = [int(rng.integers(min_states, max_states + 1)) for _ in range(T + 1)]
    transitions = []
    for t in range(1, T + 1):
        P = rng.dirichlet(np.ones(sizes[t - 1]), size=sizes[t])
        mask = rng.random(P.shape) < sparsity
        mask[np.arange(sizes[t]), rng.integers(0, sizes[t - 1], sizes[t])] = False
        P = np.where(mask, 0.0, P)
        transitions.append(P / P.sum(axis=1, keepdims=True))
    reward = reward_scale * rng.standard_normal(sizes[0])
    return TabularMDP(transitions, reward, alpha, gamma)


def dumps_mdp(mdp: TabularMDP) -> str:
    """Plain-text form, readable by :func:`loads_mdp`."""
    lines = [
        f"horizon {mdp.T}",
        f"alpha {mdp.alpha!r}",
        f"gamma {mdp.gamma!r}",
        "states " + " ".join(str(mdp.n_states(t)) for t in range(mdp.T, -1, -1)),
        "reward " + " ".join(repr(float(r)) for r in mdp.reward),
    ]
    for t in range(mdp.T, 0, -1):
        lines.append(f"matrix {t}")
        for row in mdp.transitions[t - 1]:
            lines.append(" ".join(repr(float(p)) for p in row))
    return "\n".join(lines) + "\n"


def loads_mdp(text: str) -> TabularMDP:
    """Parse the plain-text MDP format.

    Lines: ``horizon T``, ``alpha a``, ``gamma g``, ``states n_T ... n_0``,
    ``reward r_1 ... r_{n_0}``, then for each level ``matrix t`` followed by
    |S_t| rows of |S_{t-1}| probabilities. ``#`` starts a comment.
    """
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    header: dict[str, list[str]] = {}
    mats: dict[int, list[list[float]]] = {}
    current = None
    for ln in lines:
        head, *rest = ln.split()
        if head in ("horizon", "alpha", "gamma", "states", "reward"):
            header[head] = rest
            current = None
        elif head == "matrix":
            current = int(rest[0])
            mats[current] = []
        elif current is not None:
            mats[current].append([float(v) for v in ln.split()])
        else:
            raise OracleConfigError(f"unexpected line {ln!r}")
    for key in ("horizon", "alpha", "states", "reward"):
        if key not in header:
            raise OracleConfigError(f"missing {key!r} line")
    T = int(header["horizon"][0])
    sizes = [int(v) for v in header["states"]][::-1]  # index by level
    if len(sizes) != T + 1 or sorted(mats) != list(range(1, T + 1)):
        raise OracleConfigError("states/matrix lines do not match the horizon")
    transitions = []
    for t in range(1, T + 1):
        P = np.array(mats[t], dtype=np.float64)
        if P.shape != (sizes[t], sizes[t - 1]):
            raise OracleConfigError(f"matrix {t} has shape {P.shape}, expected {(sizes[t], sizes[t - 1])}")
        transitions.append(P)
    reward = [float(v) for v in header["reward"]]
    gamma = float(header.get("gamma", ["1.0"])[0])
    return TabularMDP(transitions, reward, float(header["alpha"][0]), gamma)


def _write_rows(rows: list[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_margin_csv(rows: list[dict], path: str | Path) -> None:
    _write_rows(rows, path)


def enumerate_values_by_loop(mdp: TabularMDP, t: int, s: int) -> float:
    """Scalar loop over explicit trajectories from state ``s`` on level ``t`` (gamma = 1 only).

    Slow; kept as a second, loop-based oracle for tiny MDPs.
    """
    if mdp.gamma != 1.0:
        raise OracleConfigError("loop enumeration is exact only for gamma = 1")
    terms = []
    ranges = [range(mdp.n_states(k)) for k in range(t - 1, -1, -1)]
    for path in itertools.product(*ranges):
        prev, lp = s, 0.0
        for k, nxt in zip(range(t, 0, -1), path):
            p = mdp.transitions[k - 1][prev, nxt]
            if p == 0:
                lp = -math.inf
                break
            lp += math.log(p)
            prev = nxt
        if lp > -math.inf:
            terms.append(lp + mdp.reward[path[-1]] / mdp.alpha)
    return mdp.alpha * float(logsumexp(terms))


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

SUITE_ALPHAS = (0.1, 1.0, 10.0)


@dataclass
class SuiteResult:
    equiv_max_diff: float
    bounds_violations: int
    bounds_min_margin: float
    collapse_max_diff: float
    policy_min_margin: float
    identity_residual: float

    def checks(self) -> dict[str, bool]:
        return {
            "dp_vs_enumeration": self.equiv_max_diff <= 1e-10,
            "sandwich_bounds": self.bounds_violations == 0,
            "gamma1_collapse": self.collapse_max_diff <= 1e-10,
            "policy_optimality": self.policy_min_margin >= -1e-10,
            "soft_value_identity": self.identity_residual <= 1e-10,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks().values())


def oracle_suite(seed: int = 0, n_equiv: int = 200, n_bounds: int = 100, n_policy: int = 50,
                 n_perturb: int = 100, gammas=(0.5, 0.9)) -> SuiteResult:
    """Exact-vs-enumerated checks on random small MDPs (|S| <= 6, T <= 6)."""
    from .diffcalc import spawn_rng

    rng = spawn_rng(seed, "oracle-suite")
    equiv = 0.0
    for i in range(n_equiv):
        mdp = random_mdp(rng, alpha=SUITE_ALPHAS[i % 3], reward_scale=float(rng.uniform(0.5, 5.0)))
        sol = solve_soft(mdp)
        for v_dp, v_bf in zip(sol.V, brute_force_soft_value(mdp)):
            equiv = max(equiv, float(np.max(np.abs(v_dp - v_bf))))
    violations, margin = 0, math.inf
    for i in range(n_bounds):
        base = random_mdp(rng, alpha=SUITE_ALPHAS[i % 3], reward_scale=float(rng.uniform(0.5, 5.0)))
        for g in gammas:
            rep = check_bounds(replace(base, gamma=g))
            violations += rep.violations
            margin = min(margin, rep.min_margin)
    collapse = 0.0
    for i in range(n_bounds):
        rep = check_bounds(random_mdp(rng, alpha=SUITE_ALPHAS[i % 3]))
        for row in rep.rows:
            collapse = max(collapse, abs(row["margin_lower"]), abs(row["margin_upper"]))
    pol, ident = math.inf, 0.0
    for i in range(n_policy):
        mdp = random_mdp(rng, alpha=SUITE_ALPHAS[i % 3], gamma=float(rng.choice([0.5, 0.9, 1.0])))
        sol = solve_soft(mdp)
        pol = min(pol, policy_optimality_check(mdp, sol, n_perturb, rng))
        ident = max(ident, soft_value_identity_residual(mdp, sol))
    return SuiteResult(equiv, violations, float(margin), collapse, float(pol), float(ident))
