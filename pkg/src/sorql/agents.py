"""Tabular learners: Q-learning, double Q-learning and their over-relaxed variants.

Every update has the form Q(i, a) <- (1 - beta) Q(i, a) + beta * target with

    QL      target = r + gamma max Q(j)
    SORQL   target = w (r + gamma max Q(j)) + (1 - w) max Q(i)
    DQL     target = r + gamma Q_other(j, argmax Q_sel(j))
    DSORQL  target = w (r + gamma Q_other(j, b)) + (1 - w) Q_other(i, c),
            b = argmax Q_sel(j), c = argmax Q_sel(i)

The MF_ variants use the weight w_n produced by an attached SorEstimator.
Update argmaxes break ties by lowest index; action selection breaks ties
uniformly at random. The numba kernels are shared with the compiled loops in
`sorql.harness.runner`, so both paths execute identical arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from numba import njit

from .relaxation import SorEstimator

SELECT_TOL = 1e-9

# Integer codes used inside compiled kernels.
QL, DQL, SORQL, DSORQL, MF_SORQL, MF_DSORQL = range(6)
POLYNOMIAL, LINEAR_SHIFTED = 0, 1


class Algorithm(str, Enum):
    QL = "QL"
    DQL = "DQL"
    SORQL = "SORQL"
    DSORQL = "DSORQL"
    MF_SORQL = "MF_SORQL"
    MF_DSORQL = "MF_DSORQL"

    @property
    def code(self) -> int:
        return list(Algorithm).index(self)

    @property
    def double(self) -> bool:
        return self in (Algorithm.DQL, Algorithm.DSORQL, Algorithm.MF_DSORQL)

    @property
    def model_free(self) -> bool:
        return self in (Algorithm.MF_SORQL, Algorithm.MF_DSORQL)

    @property
    def relaxed(self) -> bool:
        return self in (Algorithm.SORQL, Algorithm.DSORQL)


class AlgorithmMismatch(ValueError):
    """A step function was called on an agent of a different algorithm."""


@dataclass(frozen=True)
class StepSchedule:
    """beta = 1/n**exponent (polynomial) or numerator/(n + shift) (linear_shifted).

    `n` is the visit count of the updated pair, including the current update.
    """

    kind: str = "polynomial"
    exponent: float = 0.8
    numerator: float = 1.0
    shift: float = 1.0

    def __post_init__(self):
        if self.kind == "polynomial":
            if not 0.5 < self.exponent <= 1.0:
                raise ValueError("polynomial exponent must lie in (0.5, 1]")
        elif self.kind == "linear_shifted":
            if not (self.numerator > 0 and self.shift > 0 and self.numerator <= self.shift):
                raise ValueError("linear_shifted needs 0 < numerator <= shift")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def polynomial(cls, exponent: float = 0.8) -> "StepSchedule":
        return cls("polynomial", exponent=exponent)

    @classmethod
    def linear_shifted(cls, numerator: float, shift: float) -> "StepSchedule":
        return cls("linear_shifted", numerator=numerator, shift=shift)

    @property
    def kernel_args(self) -> tuple[int, float, float]:
        if self.kind == "polynomial":
            return POLYNOMIAL, float(self.exponent), 0.0
        return LINEAR_SHIFTED, float(self.numerator), float(self.shift)

    def beta(self, n: int) -> float:
        if n < 1:
            raise ValueError("visit count must be >= 1")
        return float(step_size_kernel(*self.kernel_args, float(n)))


@dataclass(frozen=True)
class EpsilonSchedule:
    """Constant epsilon, or linear decay from `start` to `end` over `decay_episodes`."""

    start: float = 0.1
    end: Optional[float] = None
    decay_episodes: int = 0

    def __post_init__(self):
        end = self.start if self.end is None else self.end
        if not (0.0 <= self.start <= 1.0 and 0.0 <= end <= 1.0):
            raise ValueError("epsilon values must lie in [0, 1]")
        if self.decay_episodes < 0:
            raise ValueError("decay_episodes must be >= 0")

    @property
    def kernel_args(self) -> tuple[float, float, float]:
        end = self.start if self.end is None else self.end
        return float(self.start), float(end), float(self.decay_episodes)

    def value(self, episode: int) -> float:
        return float(epsilon_kernel(*self.kernel_args, float(episode)))


@njit(cache=True)
def epsilon_kernel(start, end, decay, episode):
    if decay <= 0.0 or episode >= decay:
        return end if decay > 0.0 else start
    return start + (end - start) * (episode / decay)


@njit(cache=True)
def step_size_kernel(kind, p1, p2, n):
    if kind == POLYNOMIAL:
        return n ** (-p1)
    return p1 / (n + p2)


@njit(cache=True)
def argmax_first(row):
    best = 0
    for k in range(1, row.shape[0]):
        if row[k] > row[best]:
            best = k
    return best


@njit(cache=True)
def greedy_random_kernel(row, rng):
    """Uniform choice among actions within SELECT_TOL of the row max."""
    top = row.max()
    ties = 0
    for k in range(row.shape[0]):
        if row[k] >= top - SELECT_TOL:
            ties += 1
    if ties == 1:
        return argmax_first(row)
    pick = rng.integers(0, ties)
    seen = 0
    for k in range(row.shape[0]):
        if row[k] >= top - SELECT_TOL:
            if seen == pick:
                return k
            seen += 1
    return 0


@njit(cache=True)
def decision_row(qa, qb, double, i):
    if double:
        return (qa[i] + qb[i]) / 2.0
    return qa[i].copy()


@njit(cache=True)
def act_kernel(qa, qb, double, i, epsilon, rng):
    if rng.random() < epsilon:
        return rng.integers(0, qa.shape[1])
    return greedy_random_kernel(decision_row(qa, qb, double, i), rng)


@njit(cache=True)
def target_kernel(code, table, qa, qb, i, j, r, gamma, w, bootstrap, literal_b):
    """Update target for one transition, reading values from (qa, qb)."""
    if code == QL or code == SORQL or code == MF_SORQL:
        m_j = qa[j].max() if bootstrap else 0.0
        if code == QL:
            return r + gamma * m_j
        return w * (r + gamma * m_j) + (1.0 - w) * qa[i].max()
    if table == 0:
        sel = qa
        ev = qb
    elif literal_b:
        sel = qa
        ev = qa
    else:
        sel = qb
        ev = qa
    v = ev[j, argmax_first(sel[j])] if bootstrap else 0.0
    if code == DQL:
        return r + gamma * v
    return w * (r + gamma * v) + (1.0 - w) * ev[i, argmax_first(sel[i])]


@njit(cache=True)
def _draw_table(code, table, rng):
    if not (code == DQL or code == DSORQL or code == MF_DSORQL):
        return 0
    if table >= 0:
        return table
    return 0 if rng.random() < 0.5 else 1


@njit(cache=True)
def _beta_for(counts, t, i, a, kind, p1, p2, shared):
    if shared:
        n = counts[0, i, a] + counts[1, i, a]
    else:
        n = counts[t, i, a]
    return step_size_kernel(kind, p1, p2, float(n))


@njit(cache=True)
def update_kernel(code, qa, qb, counts, i, a, j, r, bootstrap, gamma, w,
                  kind, p1, p2, shared, literal_b, table, rng):
    """Asynchronous update of one (i, a) entry. Returns the updated table (0=A, 1=B).

    `table` forces the coin for double variants (0 or 1); -1 flips it from `rng`.
    """
    t = _draw_table(code, table, rng)
    counts[t, i, a] += 1
    beta = _beta_for(counts, t, i, a, kind, p1, p2, shared)
    target = target_kernel(code, t, qa, qb, i, j, r, gamma, w, bootstrap, literal_b)
    q = qb if t == 1 else qa
    q[i, a] = (1.0 - beta) * q[i, a] + beta * target
    return t


@njit(cache=True)
def sync_update_kernel(code, qa, qb, counts, i, next_states, rewards, bootstraps,
                       gamma, w, kind, p1, p2, shared, literal_b, rng):
    """Update every action of state i at once; targets read the pre-sweep tables.

    Same arithmetic as `target_kernel`, with the row argmaxes of the snapshot
    computed once per sweep instead of once per action.
    """
    qa0 = qa.copy()
    qb0 = qb.copy()
    double = not (code == QL or code == SORQL or code == MF_SORQL)
    n_states = qa.shape[0]
    arg_a = np.empty(n_states, dtype=np.int64)
    arg_b = np.zeros(n_states, dtype=np.int64)
    for s in range(n_states):
        arg_a[s] = argmax_first(qa0[s])
        if double:
            arg_b[s] = argmax_first(qb0[s])
    for a in range(qa.shape[1]):
        t = _draw_table(code, -1, rng)
        counts[t, i, a] += 1
        beta = _beta_for(counts, t, i, a, kind, p1, p2, shared)
        j = next_states[a]
        r = rewards[a]
        if not double:
            m_j = qa0[j, arg_a[j]] if bootstraps[a] else 0.0
            if code == QL:
                target = r + gamma * m_j
            else:
                target = w * (r + gamma * m_j) + (1.0 - w) * qa0[i, arg_a[i]]
        else:
            if t == 0:
                ev = qb0
                arg = arg_a
            elif literal_b:
                ev = qa0
                arg = arg_a
            else:
                ev = qa0
                arg = arg_b
            v = ev[j, arg[j]] if bootstraps[a] else 0.0
            if code == DQL:
                target = r + gamma * v
            else:
                target = w * (r + gamma * v) + (1.0 - w) * ev[i, arg[i]]
        q = qb if t == 1 else qa
        q[i, a] = (1.0 - beta) * q[i, a] + beta * target


class Agent:
    """State of one learner: tables, visit counts, weight source and RNG stream.

    Args:
        algorithm: One of the six `Algorithm` tags (or its string value).
        n_states: Number of states.
        n_actions: Number of actions.
        gamma: Discount factor.
        schedule: Step-size schedule; defaults to beta = 1/n**0.8.
        w: Fixed relaxation weight. Must be 1 for QL and DQL.
        estimator: SorEstimator supplying w_n; required for MF variants.
        rng: Random stream for exploration and the double-variant coin.
        step_counter: For double variants, "per_table" computes beta from the
            selected table's own visit count of (i, a); "shared" pools the
            count over both tables.
        literal_b_branch: For double variants, compute the B-update argmaxes
            from table A and evaluate in table A instead of the symmetric form.
    """

    def __init__(
        self,
        algorithm,
        n_states: int,
        n_actions: int,
        gamma: float,
        schedule: Optional[StepSchedule] = None,
        w: float = 1.0,
        estimator: Optional[SorEstimator] = None,
        rng: Optional[np.random.Generator] = None,
        step_counter: str = "per_table",
        literal_b_branch: bool = False,
    ):
        self.algorithm = Algorithm(algorithm)
        if not 0.0 <= gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if step_counter not in ("shared", "per_table"):
            raise ValueError("step_counter must be 'shared' or 'per_table'")
        if not np.isfinite(w) or w <= 0.0:
            raise ValueError("w must be positive")
        if self.algorithm in (Algorithm.QL, Algorithm.DQL) and w != 1.0:
            raise ValueError(f"{self.algorithm.value} uses w = 1")
        if self.algorithm.model_free:
            if estimator is None:
                raise ValueError(f"{self.algorithm.value} needs an attached SorEstimator")
            if (estimator.n_states, estimator.n_actions) != (n_states, n_actions):
                raise ValueError("estimator shape does not match the agent")
        elif estimator is not None:
            raise ValueError("only MF variants take an estimator")
        self.gamma = float(gamma)
        self.schedule = schedule if schedule is not None else StepSchedule()
        self.w = float(w)
        self.estimator = estimator
        self.rng = rng if rng is not None else np.random.default_rng()
        self.step_counter = step_counter
        self.literal_b_branch = bool(literal_b_branch)
        self.q_a = np.zeros((n_states, n_actions))
        self._q_b = np.zeros((n_states, n_actions) if self.algorithm.double else (1, 1))
        self.counts = np.zeros((2, n_states, n_actions), dtype=np.int64)

    @property
    def n_states(self) -> int:
        return self.q_a.shape[0]

    @property
    def n_actions(self) -> int:
        return self.q_a.shape[1]

    @property
    def q_b(self) -> Optional[np.ndarray]:
        return self._q_b if self.algorithm.double else None

    @property
    def visit_counts(self) -> np.ndarray:
        """Update calls per (i, a), summed over both tables."""
        return self.counts.sum(axis=0)

    @property
    def current_w(self) -> float:
        return self.estimator.w if self.algorithm.model_free else self.w

    def decision_table(self) -> np.ndarray:
        if self.algorithm.double:
            return (self.q_a + self._q_b) / 2.0
        return self.q_a

    def act(self, i: int, epsilon: float) -> int:
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        return int(act_kernel(self.q_a, self._q_b, self.algorithm.double, i, epsilon, self.rng))

    def _kernel_args(self):
        kind, p1, p2 = self.schedule.kernel_args
        return kind, p1, p2, self.step_counter == "shared", self.literal_b_branch

    def update(self, i: int, a: int, j: int, r: float, absorbing: bool = False,
               table: Optional[int] = None) -> int:
        """Apply this agent's update rule to one transition; returns the updated table.

        For MF variants the estimator observes (i, a, j) first and its new w_n
        is used. `absorbing` drops the bootstrap term (true termination).
        """
        if not (0 <= i < self.n_states and 0 <= j < self.n_states and 0 <= a < self.n_actions):
            raise IndexError(f"transition ({i}, {a}, {j}) out of range")
        if table not in (None, 0, 1):
            raise ValueError("table must be None, 0 (A) or 1 (B)")
        w = self.estimator.observe(i, a, j) if self.algorithm.model_free else self.w
        kind, p1, p2, shared, literal = self._kernel_args()
        return int(update_kernel(
            self.algorithm.code, self.q_a, self._q_b, self.counts, i, a, j, float(r),
            not absorbing, self.gamma, w, kind, p1, p2, shared, literal,
            -1 if table is None else table, self.rng,
        ))

    def sync_update(self, i: int, next_states, rewards, absorbing) -> None:
        """Synchronous sweep over all actions of state i, one sample per action."""
        next_states = np.asarray(next_states, dtype=np.int64)
        rewards = np.asarray(rewards, dtype=np.float64)
        bootstraps = ~np.asarray(absorbing, dtype=bool)
        if self.algorithm.model_free:
            for a in range(self.n_actions):
                self.estimator.observe(i, a, int(next_states[a]))
        w = self.current_w
        kind, p1, p2, shared, literal = self._kernel_args()
        sync_update_kernel(
            self.algorithm.code, self.q_a, self._q_b, self.counts, i, next_states, rewards,
            bootstraps, self.gamma, w, kind, p1, p2, shared, literal, self.rng,
        )


def _require(agent: Agent, algorithm: Algorithm) -> None:
    if agent.algorithm is not algorithm:
        raise AlgorithmMismatch(
            f"{algorithm.value} step called on a {agent.algorithm.value} agent"
        )


def _require_estimator(agent: Agent, est: SorEstimator) -> None:
    if est is None or est is not agent.estimator:
        raise ValueError("the estimator passed in is not attached to this agent")


def act_epsilon_greedy(agent: Agent, i: int, epsilon: float) -> int:
    return agent.act(i, epsilon)


def decision_table(agent: Agent) -> np.ndarray:
    return agent.decision_table()


def ql_step(agent: Agent, i, a, j, r, absorbing=False) -> Agent:
    _require(agent, Algorithm.QL)
    agent.update(i, a, j, r, absorbing)
    return agent


def sorql_step(agent: Agent, i, a, j, r, absorbing=False) -> Agent:
    _require(agent, Algorithm.SORQL)
    agent.update(i, a, j, r, absorbing)
    return agent


def dql_step(agent: Agent, i, a, j, r, absorbing=False, table=None) -> Agent:
    _require(agent, Algorithm.DQL)
    agent.update(i, a, j, r, absorbing, table)
    return agent


def dsorql_step(agent: Agent, i, a, j, r, absorbing=False, table=None) -> Agent:
    _require(agent, Algorithm.DSORQL)
    agent.update(i, a, j, r, absorbing, table)
    return agent


def mf_sorql_step(agent: Agent, est: SorEstimator, i, a, j, r, absorbing=False) -> Agent:
    _require(agent, Algorithm.MF_SORQL)
    _require_estimator(agent, est)
    agent.update(i, a, j, r, absorbing)
    return agent


def mf_dsorql_step(agent: Agent, est: SorEstimator, i, a, j, r, absorbing=False,
                   table=None) -> Agent:
    _require(agent, Algorithm.MF_DSORQL)
    _require_estimator(agent, est)
    agent.update(i, a, j, r, absorbing, table)
    return agent
