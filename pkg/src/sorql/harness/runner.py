"""Seeded training loops.

Each (agent config, seed) pair is an isolated run with its own agent and
environment streams, split from the master seed by SeedSequence spawn keys.
Runs execute in a compiled loop (`engine="compiled"`, the default) or in a
plain Python loop over the public Agent/environment API (`engine="python"`).
Both call the same numba kernels in the same order and produce identical
records; the Python loop is the readable reference for the compiled one.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from ..agents import (
    DQL, DSORQL, MF_DSORQL, MF_SORQL, SELECT_TOL, Agent, act_kernel, decision_row,
    epsilon_kernel, sync_update_kernel, update_kernel,
)
from ..envs import (
    CARTPOLE, Bandit, CartPole, Chain, ChainConfig, MdpEnv, Roulette,
    cartpole_discretize_kernel, cartpole_dynamics_kernel, cartpole_reset_kernel,
    discrete_step_kernel,
)
from ..relaxation import SorEstimator, observe_kernel
from .config import AgentConfig, ExperimentSpec, resolve_w
from .records import RunRecord, episodes_to_threshold, window_means

ENGINES = ("compiled", "python")


class DivergenceError(RuntimeError):
    """Raised by callers that treat a non-finite table as fatal."""


@dataclass
class RunOutcome:
    label: str
    seed: int
    records: list
    diverged: bool
    agent: Agent
    returns: np.ndarray


def run_streams(master_seed: int, seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(agent stream, environment stream) for one seed; independent of other seeds."""
    agent_ss, env_ss = np.random.SeedSequence(master_seed, spawn_key=(seed,)).spawn(2)
    return np.random.default_rng(agent_ss), np.random.default_rng(env_ss)


def make_env(spec: ExperimentSpec, rng: np.random.Generator):
    if spec.env == "roulette":
        return Roulette(rng)
    if spec.env == "bandit39":
        return Bandit(rng)
    if spec.env == "cartpole72":
        return CartPole(rng)
    return Chain(rng, ChainConfig(spec.chain_m))


def make_agent(spec: ExperimentSpec, cfg: AgentConfig, env, rng: np.random.Generator) -> Agent:
    estimator = None
    if cfg.algorithm.model_free:
        e = cfg.estimator
        estimator = SorEstimator(
            env.n_states, env.n_actions, spec.gamma, e.w0, e.step_exponent,
            e.normalization, e.frozen,
        )
    return Agent(
        cfg.algorithm, env.n_states, env.n_actions, spec.gamma, cfg.schedule,
        w=resolve_w(cfg, spec.env, spec.gamma), estimator=estimator, rng=rng,
        step_counter=cfg.step_counter, literal_b_branch=cfg.literal_b_branch,
    )


# ----------------------------------------------------------- compiled loop

@njit(cache=True)
def _probe(k, qa, qb, double, probe, eps, w, max_q, left_prob, w_trace):
    """Max value, epsilon-greedy probability of action 0 and w at the probe state."""
    row = decision_row(qa, qb, double, probe)
    top = row.max()
    ties = 0
    first_tied = False
    for b in range(row.shape[0]):
        if row[b] >= top - SELECT_TOL:
            ties += 1
            if b == 0:
                first_tied = True
    p = eps / row.shape[0]
    if first_tied:
        p += (1.0 - eps) / ties
    max_q[k] = top
    left_prob[k] = p
    w_trace[k] = w


@njit(cache=True)
def train_kernel(env_kind, env_params, cdf, rewards, terminal, start_state,
                 code, qa, qb, counts, gamma, w_fixed, kind, p1, p2, shared, literal_b,
                 est_counts, est_visits, est_scalars, est_exponent, est_literal, est_frozen,
                 eps_start, eps_end, eps_decay, episodes, synchronous, max_steps, cadence,
                 probe, agent_rng, env_rng, returns, sample_idx, max_q, left_prob, w_trace):
    """Train for `episodes` episodes. Returns (episodes completed, samples, diverged)."""
    double = code == DQL or code == DSORQL or code == MF_DSORQL
    model_free = code == MF_SORQL or code == MF_DSORQL
    n_actions = qa.shape[1]
    w = est_scalars[0] if model_free else w_fixed
    _probe(0, qa, qb, double, probe, epsilon_kernel(eps_start, eps_end, eps_decay, 0.0),
           w, max_q, left_prob, w_trace)
    sample_idx[0] = 0
    k = 1
    s = np.zeros(4)
    ns = np.zeros(n_actions, dtype=np.int64)
    rs = np.zeros(n_actions)
    boots = np.zeros(n_actions, dtype=np.bool_)
    for ep in range(episodes):
        eps = epsilon_kernel(eps_start, eps_end, eps_decay, float(ep))
        ret = 0.0
        if synchronous:
            i = start_state
            a_beh = act_kernel(qa, qb, double, i, eps, agent_rng)
            for a in range(n_actions):
                j, r, term, absorb = discrete_step_kernel(
                    env_kind, env_params, cdf, rewards, terminal, i, a, env_rng)
                ns[a] = j
                rs[a] = r
                boots[a] = not absorb
            if model_free:
                for a in range(n_actions):
                    w = observe_kernel(est_counts, est_visits, est_scalars, i, a, ns[a],
                                       gamma, est_exponent, est_literal, est_frozen)
            sync_update_kernel(code, qa, qb, counts, i, ns, rs, boots, gamma, w,
                               kind, p1, p2, shared, literal_b, agent_rng)
            ret = rs[a_beh]
            if not (np.all(np.isfinite(qa[i])) and np.all(np.isfinite(qb))):
                returns[ep] = ret
                return ep, k, True
        else:
            if env_kind == CARTPOLE:
                cartpole_reset_kernel(s, env_rng)
                i = cartpole_discretize_kernel(s, env_params)
            else:
                i = start_state
            t = 0
            while True:
                a = act_kernel(qa, qb, double, i, eps, agent_rng)
                if env_kind == CARTPOLE:
                    fail = cartpole_dynamics_kernel(s, a, env_params)
                    j = cartpole_discretize_kernel(s, env_params)
                    r = 0.0 if fail else 1.0
                    absorb = fail
                    t += 1
                    term = fail or (env_params[8] > 0 and t >= env_params[8])
                else:
                    j, r, term, absorb = discrete_step_kernel(
                        env_kind, env_params, cdf, rewards, terminal, i, a, env_rng)
                    t += 1
                if max_steps > 0 and t >= max_steps:
                    term = True
                if model_free:
                    w = observe_kernel(est_counts, est_visits, est_scalars, i, a, j,
                                       gamma, est_exponent, est_literal, est_frozen)
                tbl = update_kernel(code, qa, qb, counts, i, a, j, r, not absorb, gamma, w,
                                    kind, p1, p2, shared, literal_b, -1, agent_rng)
                ret += r
                q = qb if tbl == 1 else qa
                if not np.isfinite(q[i, a]):
                    returns[ep] = ret
                    return ep, k, True
                i = j
                if term:
                    break
        returns[ep] = ret
        if (ep + 1) % cadence == 0 or ep + 1 == episodes:
            _probe(k, qa, qb, double, probe, eps, w, max_q, left_prob, w_trace)
            sample_idx[k] = ep + 1
            k += 1
    return episodes, k, False


def _env_arrays(env):
    if isinstance(env, CartPole):
        dummy = np.zeros((1, 1, 1))
        return env.params, dummy, dummy, np.zeros(1, dtype=np.bool_)
    return env.params, env._cdf, env._rewards, env._terminal


def _buffers(episodes: int, cadence: int):
    n = episodes // cadence + 2
    return (np.zeros(episodes), np.zeros(n, dtype=np.int64), np.full(n, np.nan),
            np.full(n, np.nan), np.full(n, np.nan))


def _run_compiled(spec, env, agent, env_rng):
    params, cdf, rewards, terminal = _env_arrays(env)
    kind, p1, p2, shared, literal = agent._kernel_args()
    est = agent.estimator or SorEstimator(1, 1, 0.0)
    start, end, decay = spec.epsilon.kernel_args
    bufs = _buffers(spec.episodes, spec.cadence)
    done, k, diverged = train_kernel(
        env.kind, params, cdf, rewards, terminal, 0,
        agent.algorithm.code, agent.q_a, agent._q_b, agent.counts, agent.gamma, agent.w,
        kind, p1, p2, shared, literal,
        est.counts, est.visits, est.scalars, est.step_exponent, est._literal, est.frozen,
        start, end, decay, spec.episodes, spec.update_mode == "synchronous",
        spec.max_steps_per_episode, spec.cadence, env.probe_state, agent.rng, env_rng, *bufs,
    )
    return int(done), int(k), bool(diverged), bufs


# ------------------------------------------------------------- python loop

def _run_python(spec, env, agent, env_rng):
    """Reference loop over the public API; mirrors `train_kernel` step for step."""
    bufs = _buffers(spec.episodes, spec.cadence)
    returns, sample_idx, max_q, left_prob, w_trace = bufs
    n_actions = env.n_actions

    def probe(k, eps):
        row = agent.decision_table()[env.probe_state]
        top = row.max()
        tied = np.flatnonzero(row >= top - SELECT_TOL)
        p = eps / n_actions
        if tied.size and tied[0] == 0:
            p += (1.0 - eps) / tied.size
        max_q[k], left_prob[k], w_trace[k] = top, p, agent.current_w

    probe(0, spec.epsilon.value(0))
    k = 1
    sync = spec.update_mode == "synchronous"
    for ep in range(spec.episodes):
        eps = spec.epsilon.value(ep)
        ret = 0.0
        if sync:
            i = env.reset()
            a_beh = agent.act(i, eps)
            steps = []
            for a in range(n_actions):
                env.state = i
                steps.append(env.step(a))
            agent.sync_update(i, [s.next_state for s in steps], [s.reward for s in steps],
                              [s.absorbing for s in steps])
            ret = steps[a_beh].reward
            if not (np.all(np.isfinite(agent.q_a[i])) and np.all(np.isfinite(agent._q_b))):
                returns[ep] = ret
                return ep, k, True, bufs
        else:
            i = env.reset()
            t = 0
            while True:
                a = agent.act(i, eps)
                step = env.step(a)
                t += 1
                term = step.terminal or (0 < spec.max_steps_per_episode <= t)
                tbl = agent.update(i, a, step.next_state, step.reward, step.absorbing)
                ret += step.reward
                q = agent._q_b if tbl == 1 else agent.q_a
                if not np.isfinite(q[i, a]):
                    returns[ep] = ret
                    return ep, k, True, bufs
                i = step.next_state
                if term:
                    break
        returns[ep] = ret
        if (ep + 1) % spec.cadence == 0 or ep + 1 == spec.episodes:
            probe(k, eps)
            sample_idx[k] = ep + 1
            k += 1
    return spec.episodes, k, False, bufs


# ------------------------------------------------------------------ driver

def _records(spec: ExperimentSpec, cfg: AgentConfig, seed: int, done, k, diverged, bufs):
    returns, sample_idx, max_q, left_prob, w_trace = bufs
    rets = returns[:done]
    out = []

    def add(index, metric, value):
        out.append(RunRecord(spec.name, cfg.label, seed, int(index), metric, float(value)))

    sampled = {"max_q": max_q, "left_action_probability": left_prob, "w_trace": w_trace}
    for metric in spec.metrics:
        if metric.name in sampled:
            for t in range(k):
                add(sample_idx[t], metric.tag, sampled[metric.name][t])
        elif metric.name == "episode_return":
            for e, v in enumerate(rets):
                add(e + 1, metric.tag, v)
        elif metric.name == "rolling_mean_return":
            for e, v in enumerate(window_means(rets, metric.window)):
                add(e + metric.window, metric.tag, v)
        elif metric.name == "episodes_to_threshold":
            hit = episodes_to_threshold(rets, metric.threshold, metric.window)
            add(done, metric.tag, math.nan if hit is None else hit)
    if diverged:
        add(done, "diverged", 1.0)
    return out


def run_one(spec: ExperimentSpec, cfg: AgentConfig, seed: int, engine: str = "compiled") -> RunOutcome:
    """Train one agent configuration on one seed and collect its records."""
    if engine not in ENGINES:
        raise ValueError(f"engine must be one of {ENGINES}")
    agent_rng, env_rng = run_streams(spec.master_seed, seed)
    env = make_env(spec, env_rng)
    agent = make_agent(spec, cfg, env, agent_rng)
    runner = _run_compiled if engine == "compiled" else _run_python
    done, k, diverged, bufs = runner(spec, env, agent, env_rng)
    records = _records(spec, cfg, seed, done, k, diverged, bufs)
    return RunOutcome(cfg.label, seed, records, diverged, agent, bufs[0][:done].copy())


def _job(args):
    spec, cfg, seed, engine = args
    return run_one(spec, cfg, seed, engine).records


def run_experiment(spec: ExperimentSpec, parallel: int = 1, engine: str = "compiled") -> list[RunRecord]:
    """All runs of `spec`, ordered by agent config, then seed, then metric and index."""
    jobs = [(spec, cfg, seed, engine) for cfg in spec.agents for seed in spec.seeds]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            chunks = list(pool.map(_job, jobs))
    else:
        chunks = [_job(j) for j in jobs]
    return [r for chunk in chunks for r in chunk]


# ------------------------------------------------------- MDP random walks

@njit(cache=True)
def walk_kernel(cdf, rewards, terminal, state, restart, steps, epsilon,
                code, qa, qb, counts, gamma, w_fixed, kind, p1, p2, shared, literal_b,
                est_counts, est_visits, est_scalars, est_exponent, est_literal, est_frozen,
                agent_rng, env_rng):
    """`steps` epsilon-greedy transitions on a tabular MDP, restarting at terminals."""
    double = code == DQL or code == DSORQL or code == MF_DSORQL
    model_free = code == MF_SORQL or code == MF_DSORQL
    params = np.zeros(1)
    w = w_fixed
    i = state
    for _ in range(steps):
        a = act_kernel(qa, qb, double, i, epsilon, agent_rng)
        j, r, term, absorb = discrete_step_kernel(3, params, cdf, rewards, terminal, i, a, env_rng)
        if model_free:
            w = observe_kernel(est_counts, est_visits, est_scalars, i, a, j,
                               gamma, est_exponent, est_literal, est_frozen)
        update_kernel(code, qa, qb, counts, i, a, j, r, not absorb, gamma, w,
                      kind, p1, p2, shared, literal_b, -1, agent_rng)
        i = restart if term else j
    return i


def run_walk(agent: Agent, env: MdpEnv, steps: int, epsilon: float = 1.0,
             engine: str = "compiled") -> Agent:
    """Drive `agent` through `steps` transitions of `env` (uniform actions by default)."""
    if engine == "python":
        i = env.state
        for _ in range(steps):
            a = agent.act(i, epsilon)
            step = env.step(a)
            agent.update(i, a, step.next_state, step.reward, step.absorbing)
            i = env.reset() if step.terminal else step.next_state
        return agent
    kind, p1, p2, shared, literal = agent._kernel_args()
    est = agent.estimator or SorEstimator(1, 1, 0.0)
    env.state = walk_kernel(
                env._cdf, env._rewards, env._terminal, env.state, env.start, steps, epsilon,
                agent.algorithm.code, agent.q_a, agent._q_b, agent.counts, agent.gamma, agent.w,
                kind, p1, p2, shared, literal,
                est.counts, est.visits, est.scalars, est.step_exponent, est._literal, est.frozen,
                agent.rng, env.rng)
    return agent
