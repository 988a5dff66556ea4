"""Finite MDPs, the Bellman operator and its over-relaxed variant.

Everything here is a pure function of its inputs. MDP arrays are made
read-only at construction so a single instance can be shared across threads.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

TIE_TOL = 1e-9
ROW_SUM_TOL = 1e-9
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 1_000_000
FORMAT_ID = "sorql.mdp/1"

PathLike = Union[str, Path]


class ConvergenceError(RuntimeError):
    """Raised when fixed-point iteration hits its iteration cap."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class RelaxationError(ValueError):
    """Raised when a relaxation weight lies outside (0, w*]."""


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite MDP with transition tensor P[i, a, j] and reward r[i, a, j]."""

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    terminal: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.array(self.transition, dtype=np.float64)
        r = np.array(self.reward, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        if r.shape != p.shape:
            raise ValueError(f"reward shape {r.shape} != transition shape {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError("need at least one state and one action")
        if not 0.0 <= float(self.discount) < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if self.terminal is None:
            term = np.zeros(p.shape[0], dtype=bool)
        else:
            term = np.array(self.terminal, dtype=bool)
            if term.shape != (p.shape[0],):
                raise ValueError(f"terminal must have shape ({p.shape[0]},)")
        for arr in (p, r, term):
            arr.flags.writeable = False
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def expected_reward(self) -> np.ndarray:
        """r(i, a) = sum_j P[i, a, j] r[i, a, j]."""
        return np.einsum("iaj,iaj->ia", self.transition, self.reward)

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward)))

    def self_loop(self) -> np.ndarray:
        """Self-transition probabilities p(i | i, a) as an (S, A) array."""
        idx = np.arange(self.n_states)
        return self.transition[idx, :, idx]


def validate(mdp: TabularMdp) -> list[str]:
    """Return one description per violated invariant; empty when valid."""
    problems = []
    p, r = mdp.transition, mdp.reward
    if not np.all(np.isfinite(p)):
        for i, a, j in zip(*np.nonzero(~np.isfinite(p))):
            problems.append(f"transition[{i}][{a}][{j}] is not finite")
    bad = np.isfinite(p) & ((p < 0.0) | (p > 1.0))
    for i, a, j in zip(*np.nonzero(bad)):
        problems.append(f"transition[{i}][{a}][{j}] = {p[i, a, j]!r} outside [0, 1]")
    sums = p.sum(axis=2)
    for i, a in zip(*np.nonzero(~(np.abs(sums - 1.0) <= ROW_SUM_TOL))):
        problems.append(f"row ({i}, {a}) sums to {sums[i, a]!r}, expected 1")
    for i, a, j in zip(*np.nonzero(~np.isfinite(r))):
        problems.append(f"reward[{i}][{a}][{j}] is not finite")
    for i in np.flatnonzero(mdp.terminal):
        for a in range(mdp.n_actions):
            if p[i, a, i] != 1.0:
                problems.append(f"terminal state {i} action {a} is not a self-loop")
            if np.any(r[i, a] != 0.0):
                problems.append(f"terminal state {i} action {a} has non-zero reward")
    return problems


def _check_q(q: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"Q shape {q.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )
    return q


def apply_bellman(q: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    """(UQ)(i, a) = sum_j P[i, a, j] (r[i, a, j] + gamma max_b Q(j, b))."""
    q = _check_q(q, mdp)
    target = mdp.reward + mdp.discount * q.max(axis=1)
    return np.einsum("iaj,iaj->ia", mdp.transition, target)


def sor_star(mdp: TabularMdp) -> float:
    """Largest admissible relaxation weight, min over (i, a) of 1/(1 - gamma p_iia)."""
    return float(np.min(1.0 / (1.0 - mdp.discount * mdp.self_loop())))


def check_relaxation(w: float, w_star: float, on_invalid: str = "raise") -> None:
    """Validate 0 < w <= w_star. `on_invalid` is 'raise', 'warn' or 'ignore'."""
    if on_invalid not in ("raise", "warn", "ignore"):
        raise ValueError(f"unknown on_invalid mode {on_invalid!r}")
    if not np.isfinite(w) or w <= 0.0:
        raise RelaxationError(f"relaxation weight must be positive, got {w}")
    # Small slack so that w = sor_star(mdp) computed elsewhere is never rejected.
    if w > w_star * (1.0 + 1e-12):
        msg = f"relaxation weight {w} exceeds w* = {w_star}; contraction is not guaranteed"
        if on_invalid == "raise":
            raise RelaxationError(msg)
        if on_invalid == "warn":
            warnings.warn(msg, RuntimeWarning, stacklevel=3)


def apply_sor_bellman(
    q: np.ndarray, mdp: TabularMdp, w: float, on_invalid: str = "raise"
) -> np.ndarray:
    """(U_w Q)(i, a) = w (UQ)(i, a) + (1 - w) max_b Q(i, b)."""
    q = _check_q(q, mdp)
    check_relaxation(w, sor_star(mdp), on_invalid)
    return w * apply_bellman(q, mdp) + (1.0 - w) * q.max(axis=1, keepdims=True)


def contraction_factor(w: float, discount: float) -> float:
    return 1.0 - w + w * discount


def solve_fixed_point(
    mdp: TabularMdp,
    w: float = 1.0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    on_invalid: str = "raise",
) -> tuple[np.ndarray, int]:
    """Iterate Q <- U_w Q from zero until the sup-norm step drops below `tol`.

    Returns the last iterate and the number of operator applications.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    check_relaxation(w, sor_star(mdp), on_invalid)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    residual = np.inf
    for k in range(1, max_iter + 1):
        q_next = apply_sor_bellman(q, mdp, w, on_invalid="ignore")
        residual = float(np.max(np.abs(q_next - q)))
        q = q_next
        if residual < tol:
            return q, k
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations (residual {residual:.3e})",
        residual,
        max_iter,
    )


def greedy_values_and_policy(
    q: np.ndarray, tol: float = TIE_TOL
) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Per-state max and the full set of actions within `tol` of it."""
    q = np.asarray(q, dtype=np.float64)
    values = q.max(axis=1)
    argmax_sets = [
        tuple(int(a) for a in np.flatnonzero(row >= v - tol)) for row, v in zip(q, values)
    ]
    return values, argmax_sets


def sample_transition(
    mdp: TabularMdp, i: int, a: int, rng: np.random.Generator
) -> tuple[int, float]:
    """Draw j ~ P[i, a, .] by inverse CDF and return (j, r[i, a, j])."""
    if not (0 <= i < mdp.n_states and 0 <= a < mdp.n_actions):
        raise IndexError(f"invalid state/action ({i}, {a})")
    if mdp.terminal[i]:
        return int(i), 0.0
    cdf = np.cumsum(mdp.transition[i, a])
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    j = min(j, mdp.n_states - 1)
    return j, float(mdp.reward[i, a, j])


def random_mdp(
    n_states: int,
    n_actions: int,
    min_self_loop: float = 0.0,
    seed: Optional[int] = None,
    discount: float = 0.95,
) -> TabularMdp:
    """Random MDP whose rows put at least `min_self_loop` mass on the self-loop.

    Each row is min_self_loop * e_i + (1 - min_self_loop) * Dirichlet(1, ..., 1),
    rewards are uniform on [-1, 1].
    """
    if not 0.0 <= min_self_loop < 1.0:
        raise ValueError("min_self_loop must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    s, a = n_states, n_actions
    p = (1.0 - min_self_loop) * rng.dirichlet(np.ones(s), size=(s, a))
    p[np.arange(s), :, np.arange(s)] += min_self_loop
    p /= p.sum(axis=2, keepdims=True)
    r = rng.uniform(-1.0, 1.0, size=(s, a, s))
    return TabularMdp(p, r, discount)


def _render(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    return format(float(x), ".17g")


def _render_nested(arr: np.ndarray) -> str:
    if arr.ndim == 1:
        return "[" + ", ".join(_render(v) for v in arr) + "]"
    return "[" + ", ".join(_render_nested(sub) for sub in arr) + "]"


def mdp_to_json(mdp: TabularMdp) -> str:
    """Serialize with 17 significant digits so the round trip is exact."""
    lines = [
        "{",
        f'  "format": "{FORMAT_ID}",',
        f'  "n_states": {mdp.n_states},',
        f'  "n_actions": {mdp.n_actions},',
        f'  "gamma": {_render(mdp.discount)},',
        f'  "transition": {_render_nested(mdp.transition)},',
        f'  "reward": {_render_nested(mdp.reward)},',
        f'  "terminal": {_render_nested(mdp.terminal)}',
        "}",
    ]
    return "\n".join(lines) + "\n"


def mdp_from_json(text: str) -> TabularMdp:
    doc = json.loads(text)
    for key in ("n_states", "n_actions", "gamma", "transition", "reward"):
        if key not in doc:
            raise ValueError(f"MDP document missing field {key!r}")
    mdp = TabularMdp(
        np.array(doc["transition"], dtype=np.float64),
        np.array(doc["reward"], dtype=np.float64),
        doc["gamma"],
        np.array(doc["terminal"], dtype=bool) if "terminal" in doc else None,
    )
    if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
        raise ValueError("declared n_states/n_actions do not match the tensors")
    return mdp


def save_mdp(mdp: TabularMdp, path: PathLike) -> None:
    Path(path).write_text(mdp_to_json(mdp), encoding="utf-8", newline="\n")


def load_mdp(path: PathLike) -> TabularMdp:
    return mdp_from_json(Path(path).read_text(encoding="utf-8"))
