"""Online estimate of the optimal relaxation weight from transition counts.

The estimator keeps counts Y[i, j, a] of observed transitions and runs the
stochastic-approximation iterate

    w <- w + alpha(n) * (1 / (1 - gamma * p_min) - w),   alpha(n) = n ** -exponent

where p_min is the smallest estimated self-loop probability over (i, a).
The numba kernels below are also called from the compiled training loops.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np
from numba import njit

NORMALIZATIONS = ("visits", "total")


@njit(cache=True)
def min_self_loop_kernel(counts, visits, total_steps, literal):
    """Smallest estimated p(i | i, a); 0 while any (i, a) is unvisited."""
    n_states = counts.shape[0]
    n_actions = counts.shape[2]
    best = 1.0
    for i in range(n_states):
        for a in range(n_actions):
            v = visits[i, a]
            if v == 0:
                return 0.0
            if literal:
                p = counts[i, i, a] / total_steps
            else:
                p = counts[i, i, a] / v
            if p < best:
                best = p
    return best


@njit(cache=True)
def record_kernel(counts, visits, scalars, i, a, j):
    counts[i, j, a] += 1
    visits[i, a] += 1
    scalars[1] += 1.0


@njit(cache=True)
def update_w_kernel(counts, visits, scalars, n, gamma, exponent, literal):
    """One step of the w iterate; `scalars` holds (w, total_steps, last p_min)."""
    p_min = min_self_loop_kernel(counts, visits, scalars[1], literal)
    target = 1.0 / (1.0 - gamma * p_min)
    alpha = n ** (-exponent)
    w = scalars[0] + alpha * (target - scalars[0])
    upper = 1.0 / (1.0 - gamma)
    if w < 1.0:
        w = 1.0
    elif w > upper:
        w = upper
    scalars[0] = w
    scalars[2] = p_min
    return w


@njit(cache=True)
def observe_kernel(counts, visits, scalars, i, a, j, gamma, exponent, literal, frozen):
    """Record (i, a, j), then advance w unless frozen. Returns the current w."""
    record_kernel(counts, visits, scalars, i, a, j)
    if frozen:
        scalars[2] = min_self_loop_kernel(counts, visits, scalars[1], literal)
        return scalars[0]
    return update_w_kernel(counts, visits, scalars, scalars[1], gamma, exponent, literal)


class SorEstimator:
    """Transition counts plus the relaxation-weight iterate for one run.

    Args:
        n_states: Number of states.
        n_actions: Number of actions.
        gamma: Discount factor, fixed for the estimator's lifetime.
        w0: Initial weight, in [1, 1/(1 - gamma)].
        step_exponent: Exponent of alpha(n) = n ** -step_exponent, in (0.5, 1].
        normalization: "visits" divides Y[i, i, a] by the visits of (i, a);
            "total" divides by the total step count (the literal form).
        frozen: Keep w at w0 while still counting transitions.
        trace_every: Append (step, w, p_min) to `w_history` every this many
            observations; 0 disables tracing.
    """

    def __init__(
        self,
        n_states: int,
        n_actions: int,
        gamma: float,
        w0: float = 1.0,
        step_exponent: float = 1.0,
        normalization: str = "visits",
        frozen: bool = False,
        trace_every: int = 0,
    ):
        if not 0.0 <= gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.5 < step_exponent <= 1.0:
            raise ValueError("step_exponent must lie in (0.5, 1]")
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if not 1.0 <= w0 <= 1.0 / (1.0 - gamma):
            raise ValueError("w0 must lie in [1, 1/(1 - gamma)]")
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.gamma = float(gamma)
        self.step_exponent = float(step_exponent)
        self.normalization = normalization
        self.frozen = bool(frozen)
        self.trace_every = int(trace_every)
        self.counts = np.zeros((n_states, n_states, n_actions), dtype=np.int64)
        self.visits = np.zeros((n_states, n_actions), dtype=np.int64)
        # (w, total_steps, last p_min); a float array so compiled loops can mutate it
        self.scalars = np.array([float(w0), 0.0, 0.0])
        self.w_history: list[tuple[int, float, float]] = []

    @property
    def w(self) -> float:
        return float(self.scalars[0])

    @property
    def total_steps(self) -> int:
        return int(self.scalars[1])

    @property
    def w_max(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    @property
    def _literal(self) -> bool:
        return self.normalization == "total"

    def _check(self, i: int, a: int, j: int) -> None:
        if not (0 <= i < self.n_states and 0 <= j < self.n_states and 0 <= a < self.n_actions):
            raise IndexError(f"transition ({i}, {a}, {j}) out of range")

    def record(self, i: int, a: int, j: int) -> None:
        self._check(i, a, j)
        record_kernel(self.counts, self.visits, self.scalars, i, a, j)

    def estimated_min_self_loop(self) -> float:
        return float(
            min_self_loop_kernel(self.counts, self.visits, self.scalars[1], self._literal)
        )

    def update_w(self, n: Optional[int] = None) -> float:
        """Advance w with step alpha(n); `n` defaults to the step count."""
        n = self.total_steps if n is None else int(n)
        if n < 1:
            raise ValueError("n must be >= 1")
        if self.frozen:
            return self.w
        return float(
            update_w_kernel(
                self.counts, self.visits, self.scalars, float(n),
                self.gamma, self.step_exponent, self._literal,
            )
        )

    def observe(self, i: int, a: int, j: int) -> float:
        """Record one transition and advance w; returns the new w."""
        self._check(i, a, j)
        w = float(
            observe_kernel(
                self.counts, self.visits, self.scalars, i, a, j,
                self.gamma, self.step_exponent, self._literal, self.frozen,
            )
        )
        if self.trace_every and self.total_steps % self.trace_every == 0:
            self.w_history.append((self.total_steps, w, float(self.scalars[2])))
        return w

    def write_trace(self, path) -> None:
        with open(Path(path), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "w", "p_min_estimate"])
            for step, w, p in self.w_history:
                writer.writerow([step, format(w, ".17g"), format(p, ".17g")])
