"""Benchmark environments: roulette, Gaussian bandit, bias chain, CartPole.

All environments share one step convention, `EnvStep(next_state, reward,
terminal, absorbing)`. `terminal` ends the episode. `absorbing` says whether
the episode ended in a true zero-value state, so learners drop the bootstrap
term. The single-state games (roulette, bandit) end episodes through the
"stop" action without an absorbing state: the learner keeps bootstrapping
from the single state, which is the single-state MDP whose w* is 1/(1-gamma).
CartPole's time limit is likewise terminal but not absorbing.

The step functions are numba kernels shared with the compiled training loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from numba import njit

from .mdp import TabularMdp

ROULETTE, BANDIT, CHAIN, MDP, CARTPOLE = range(5)
LEFT, RIGHT = 0, 1


class EnvStep(NamedTuple):
    next_state: int
    reward: float
    terminal: bool
    absorbing: bool = True


@njit(cache=True)
def discrete_step_kernel(kind, params, cdf, rewards, terminal, state, action, rng):
    """One transition of a discrete environment: (next_state, reward, terminal, absorbing)."""
    if kind == ROULETTE:
        if action == int(params[0]):
            return 0, 0.0, True, False
        if rng.random() < params[1]:
            return 0, params[2], False, False
        return 0, -1.0, False, False
    if kind == BANDIT:
        if action == int(params[0]):
            return 0, 0.0, True, False
        return 0, rng.normal(params[1], params[2]), False, False
    if kind == CHAIN:
        m = int(params[0])
        if state == 0:
            if action == RIGHT:
                return m + 2, 0.0, True, True
            return 1 + rng.integers(0, m), 0.0, False, False
        if action == RIGHT:
            return 0, 0.0, False, False
        return m + 1, rng.normal(params[1], params[2]), True, True
    # MDP: inverse-CDF sampling from the stored row
    row = cdf[state, action]
    if terminal[state]:
        return state, 0.0, True, True
    j = np.searchsorted(row, rng.random() * row[-1], side="right")
    if j > row.shape[0] - 1:
        j = row.shape[0] - 1
    return j, rewards[state, action, j], terminal[j], terminal[j]


class _DiscreteEnv:
    kind = -1
    n_states = 1
    n_actions = 1
    probe_state = 0

    def __init__(self, params, rng: Optional[np.random.Generator]):
        self.params = np.asarray(params, dtype=np.float64)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.state = 0
        self._cdf = np.zeros((1, 1, 1))
        self._rewards = np.zeros((1, 1, 1))
        self._terminal = np.zeros(1, dtype=np.bool_)

    def reset(self) -> int:
        self.state = 0
        return 0

    def _check_action(self, action: int) -> None:
        if not 0 <= action < self.n_actions:
            raise ValueError(f"invalid action {action}; expected 0..{self.n_actions - 1}")

    def step(self, action: int) -> EnvStep:
        self._check_action(action)
        j, r, term, absorbing = discrete_step_kernel(
            self.kind, self.params, self._cdf, self._rewards, self._terminal,
            self.state, action, self.rng,
        )
        self.state = int(j)
        return EnvStep(int(j), float(r), bool(term), bool(absorbing))


class Roulette(_DiscreteEnv):
    """One state; `n_bets` straight-number bets paying 35:1 on a 38-pocket
    wheel, plus a final action that walks away with zero payout."""

    kind = ROULETTE

    def __init__(self, rng=None, n_bets: int = 170, win_prob: float = 1.0 / 38.0,
                 payout: float = 35.0):
        super().__init__([n_bets, win_prob, payout], rng)
        self.n_actions = n_bets + 1
        self.stop_action = n_bets

    @property
    def bet_mean(self) -> float:
        p = self.params[1]
        return float(p * self.params[2] - (1.0 - p))

    def to_mdp(self, gamma: float) -> TabularMdp:
        n = self.n_actions
        reward = np.full((1, n, 1), self.bet_mean)
        reward[0, self.stop_action, 0] = 0.0
        return TabularMdp(np.ones((1, n, 1)), reward, gamma)


class Bandit(_DiscreteEnv):
    """One state; `n_arms` Gaussian arms plus a stop action with no reward."""

    kind = BANDIT

    def __init__(self, rng=None, n_arms: int = 38, mean: float = -0.0526, std: float = 1.0):
        if n_arms < 1 or std < 0:
            raise ValueError("need n_arms >= 1 and std >= 0")
        super().__init__([n_arms, mean, std], rng)
        self.n_actions = n_arms + 1
        self.stop_action = n_arms

    def to_mdp(self, gamma: float) -> TabularMdp:
        n = self.n_actions
        reward = np.full((1, n, 1), self.params[1])
        reward[0, self.stop_action, 0] = 0.0
        return TabularMdp(np.ones((1, n, 1)), reward, gamma)


@dataclass(frozen=True)
class ChainConfig:
    m: int = 8
    left_reward_mean: float = -0.1
    left_reward_std: float = 1.0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("chain needs m >= 1")


class Chain(_DiscreteEnv):
    """Start state 0, middle states 1..m, terminals m+1 (left) and m+2 (right).

    From 0: right ends the game with reward 0; left moves to a uniform middle
    state. From a middle state: right returns to 0, left ends the game with a
    N(left_reward_mean, left_reward_std) reward.
    """

    kind = CHAIN

    def __init__(self, rng=None, config: ChainConfig = ChainConfig()):
        super().__init__([config.m, config.left_reward_mean, config.left_reward_std], rng)
        self.config = config
        self.n_states = config.m + 3
        self.n_actions = 2

    @property
    def left_terminal(self) -> int:
        return self.config.m + 1

    @property
    def right_terminal(self) -> int:
        return self.config.m + 2

    def step_from(self, state: int, action: int) -> EnvStep:
        if not 0 <= state <= self.config.m:
            raise ValueError(f"invalid chain state {state}")
        self.state = state
        return self.step(action)

    def to_mdp(self, gamma: float) -> TabularMdp:
        """Exact model with rewards replaced by their expectations."""
        m, s = self.config.m, self.n_states
        p = np.zeros((s, 2, s))
        r = np.zeros((s, 2, s))
        p[0, RIGHT, self.right_terminal] = 1.0
        p[0, LEFT, 1 : m + 1] = 1.0 / m
        for k in range(1, m + 1):
            p[k, RIGHT, 0] = 1.0
            p[k, LEFT, self.left_terminal] = 1.0
            r[k, LEFT, self.left_terminal] = self.config.left_reward_mean
        terminal = np.zeros(s, dtype=bool)
        for t in (self.left_terminal, self.right_terminal):
            p[t, :, t] = 1.0
            terminal[t] = True
        return TabularMdp(p, r, gamma, terminal)


class MdpEnv(_DiscreteEnv):
    """Samples transitions from a TabularMdp, starting each episode in `start`."""

    kind = MDP

    def __init__(self, mdp: TabularMdp, rng=None, start: int = 0):
        super().__init__([0.0], rng)
        self.mdp = mdp
        self.n_states, self.n_actions = mdp.n_states, mdp.n_actions
        self.start = start
        self._cdf = np.cumsum(mdp.transition, axis=2)
        self._rewards = np.ascontiguousarray(mdp.reward)
        self._terminal = np.ascontiguousarray(mdp.terminal)
        self.state = start

    def reset(self) -> int:
        self.state = self.start
        return self.start


def roulette_step(action: int, rng: np.random.Generator, **kwargs) -> EnvStep:
    env = Roulette(rng, **kwargs)
    return env.step(action)


def bandit_step(action: int, rng: np.random.Generator, **kwargs) -> EnvStep:
    env = Bandit(rng, **kwargs)
    return env.step(action)


def chain_step(state: int, action: int, rng: np.random.Generator,
               config: ChainConfig = ChainConfig()) -> EnvStep:
    return Chain(rng, config).step_from(state, action)


# ---------------------------------------------------------------- CartPole

@dataclass(frozen=True)
class CartPoleConfig:
    """Physics constants, termination limits and the discretization grid.

    Dimensions are ordered (x, x_dot, theta, theta_dot). Values outside
    `bounds` fall into the edge bins.
    """

    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force: float = 10.0
    tau: float = 0.02
    x_threshold: float = 2.4
    theta_threshold: float = 12.0 * 2.0 * math.pi / 360.0
    max_steps: int = 200
    bins: tuple = (1, 1, 12, 6)
    bounds: tuple = field(
        default=(
            (-2.4, 2.4),
            (-3.0, 3.0),
            (-12.0 * 2.0 * math.pi / 360.0, 12.0 * 2.0 * math.pi / 360.0),
            (-2.0, 2.0),
        )
    )

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if len(self.bins) != 4 or len(self.bounds) != 4 or min(self.bins) < 1:
            raise ValueError("need four positive bin counts and four bounds")
        for lo, hi in self.bounds:
            if not hi > lo:
                raise ValueError("each bound needs hi > lo")

    @property
    def n_states(self) -> int:
        return int(np.prod(self.bins))

    def params(self) -> np.ndarray:
        """Flat parameter vector consumed by the numba kernels."""
        head = [self.gravity, self.cart_mass, self.pole_mass, self.half_length,
                self.force, self.tau, self.x_threshold, self.theta_threshold,
                float(self.max_steps)]
        bounds = [v for pair in self.bounds for v in pair]
        return np.array(head + [float(b) for b in self.bins] + bounds)


@njit(cache=True)
def cartpole_dynamics_kernel(s, action, params):
    """Advance state `s` in place by one semi-implicit Euler step; returns failure."""
    gravity, mc, mp, length, force_mag, tau = params[0], params[1], params[2], params[3], params[4], params[5]
    total_mass = mc + mp
    polemass_length = mp * length
    force = force_mag if action == 1 else -force_mag
    x, x_dot, theta, theta_dot = s[0], s[1], s[2], s[3]
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    temp = (force + polemass_length * theta_dot * theta_dot * sin_t) / total_mass
    theta_acc = (gravity * sin_t - cos_t * temp) / (
        length * (4.0 / 3.0 - mp * cos_t * cos_t / total_mass)
    )
    x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
    x_dot = x_dot + tau * x_acc
    x = x + tau * x_dot
    theta_dot = theta_dot + tau * theta_acc
    theta = theta + tau * theta_dot
    s[0] = x
    s[1] = x_dot
    s[2] = theta
    s[3] = theta_dot
    return abs(x) > params[6] or abs(theta) > params[7]


@njit(cache=True)
def cartpole_discretize_kernel(s, params):
    idx = 0
    for d in range(4):
        n = int(params[9 + d])
        lo = params[13 + 2 * d]
        hi = params[14 + 2 * d]
        b = int(math.floor((s[d] - lo) / (hi - lo) * n))
        if b < 0:
            b = 0
        elif b > n - 1:
            b = n - 1
        idx = idx * n + b
    return idx


@njit(cache=True)
def cartpole_reset_kernel(s, rng):
    for k in range(4):
        s[k] = rng.uniform(-0.05, 0.05)


def cartpole_discretize(state, config: CartPoleConfig = CartPoleConfig()) -> int:
    s = np.asarray(state, dtype=np.float64)
    if s.shape != (4,) or not np.all(np.isfinite(s)):
        raise ValueError("CartPole state must be four finite numbers")
    return int(cartpole_discretize_kernel(s, config.params()))


def cartpole_reset(rng: np.random.Generator) -> np.ndarray:
    s = np.zeros(4)
    cartpole_reset_kernel(s, rng)
    return s


def cartpole_step(state, action: int, config: CartPoleConfig = CartPoleConfig(),
                  rng=None) -> tuple[np.ndarray, EnvStep]:
    """Pure one-step dynamics; the time limit is applied by `CartPole`."""
    s = np.array(state, dtype=np.float64)
    if s.shape != (4,) or not np.all(np.isfinite(s)):
        raise ValueError("CartPole state must be four finite numbers")
    if action not in (0, 1):
        raise ValueError("CartPole actions are 0 (push left) and 1 (push right)")
    params = config.params()
    failed = bool(cartpole_dynamics_kernel(s, action, params))
    j = int(cartpole_discretize_kernel(s, params))
    return s, EnvStep(j, 0.0 if failed else 1.0, failed, failed)


class CartPole:
    """Episodic CartPole with discretized observations.

    Reward is +1 for every step that does not fail. Failure is absorbing;
    reaching `max_steps` ends the episode without absorbing.
    """

    kind = CARTPOLE
    n_actions = 2
    probe_state = 0

    def __init__(self, rng=None, config: CartPoleConfig = CartPoleConfig()):
        self.rng = rng if rng is not None else np.random.default_rng()
        self.config = config
        self.n_states = config.n_states
        self.params = config.params()
        self.continuous = np.zeros(4)
        self.steps = 0

    def reset(self) -> int:
        cartpole_reset_kernel(self.continuous, self.rng)
        self.steps = 0
        return int(cartpole_discretize_kernel(self.continuous, self.params))

    def step(self, action: int) -> EnvStep:
        if action not in (0, 1):
            raise ValueError("CartPole actions are 0 (push left) and 1 (push right)")
        failed = bool(cartpole_dynamics_kernel(self.continuous, action, self.params))
        self.steps += 1
        j = int(cartpole_discretize_kernel(self.continuous, self.params))
        truncated = self.config.max_steps > 0 and self.steps >= self.config.max_steps
        return EnvStep(j, 0.0 if failed else 1.0, failed or truncated, failed)
