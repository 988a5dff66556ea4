"""Monte-Carlo bias of max estimators: single, SOR-weighted and double.

For arms X_1..X_d with true means m_i, each trial draws k-sample means mu_i
(and, for the weighted estimators, a second family zeta_j) and records

    single        max mu - max m
    sor_weighted  max zeta + w (max mu - max zeta) - max m
    double        zeta^B[b] + w (mu^B[a] - zeta^B[b]) - max m,
                  a = argmax mu^A, b = argmax zeta^A

The weighted forms are written as z + w (x - z), so with coupled families
(zeta = mu) they reduce to the unweighted values exactly in floating point.
Trials run in fixed-size chunks, each with its own child stream spawned from
the caller's generator, so results do not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class EstimatorProblem:
    arm_means: tuple
    arm_std: float = 1.0
    samples_per_arm: int = 1
    weight: float = 1.0
    coupled: bool = True

    def __post_init__(self):
        means = np.asarray(self.arm_means, dtype=np.float64).ravel()
        if means.size < 1 or not np.all(np.isfinite(means)):
            raise ValueError("need at least one finite arm mean")
        if self.samples_per_arm < 1:
            raise ValueError("samples_per_arm must be >= 1")
        if self.arm_std < 0:
            raise ValueError("arm_std must be >= 0")
        object.__setattr__(self, "arm_means", tuple(float(m) for m in means))

    @classmethod
    def identical(cls, d: int, mean: float, std: float = 1.0, **kwargs) -> "EstimatorProblem":
        return cls((mean,) * d, std, **kwargs)

    @property
    def d(self) -> int:
        return len(self.arm_means)

    @property
    def true_max(self) -> float:
        return max(self.arm_means)


def _sample_means(p: EstimatorProblem, n: int, rng: np.random.Generator) -> np.ndarray:
    means = np.asarray(p.arm_means)
    noise = rng.standard_normal((n, p.samples_per_arm, p.d)).mean(axis=1)
    return means + p.arm_std * noise


def _single(p, n, rng):
    return _sample_means(p, n, rng).max(axis=1) - p.true_max


def _sor_weighted(p, n, rng):
    x = _sample_means(p, n, rng).max(axis=1)
    z = x if p.coupled else _sample_means(p, n, rng).max(axis=1)
    return z + p.weight * (x - z) - p.true_max


def _double(p, n, rng):
    rows = np.arange(n)
    mu_a = _sample_means(p, n, rng)
    mu_b = _sample_means(p, n, rng)
    if p.coupled:
        zeta_a, zeta_b = mu_a, mu_b
    else:
        zeta_a = _sample_means(p, n, rng)
        zeta_b = _sample_means(p, n, rng)
    x = mu_b[rows, mu_a.argmax(axis=1)]
    z = zeta_b[rows, zeta_a.argmax(axis=1)]
    return z + p.weight * (x - z) - p.true_max


def _combine(parts: list[tuple[int, float, float]]) -> tuple[int, float, float]:
    """Merge (count, mean, sum of squared deviations) triples pairwise."""
    n, mean, m2 = parts[0]
    for nb, mb, m2b in parts[1:]:
        total = n + nb
        delta = mb - mean
        mean = mean + delta * nb / total
        m2 = m2 + m2b + delta * delta * n * nb / total
        n = total
    return n, mean, m2


def _monte_carlo(
    stat: Callable, p: EstimatorProblem, trials: int, rng: np.random.Generator,
    n_jobs: int = 1, chunk: int | None = None,
) -> tuple[float, float]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if chunk is None:
        chunk = max(1, CHUNK_ELEMENTS // (p.d * p.samples_per_arm))
    sizes = [chunk] * (trials // chunk)
    if trials % chunk:
        sizes.append(trials % chunk)
    streams = rng.spawn(len(sizes))

    def work(k):
        v = stat(p, sizes[k], streams[k])
        return v.size, float(v.mean()), float(((v - v.mean()) ** 2).sum())

    if n_jobs > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(work, range(len(sizes))))
    else:
        parts = [work(k) for k in range(len(sizes))]
    n, mean, m2 = _combine(parts)
    se = float(np.sqrt(m2 / (n - 1) / n)) if n > 1 else 0.0
    return float(mean), se


def single_max_bias(p: EstimatorProblem, trials: int, rng: np.random.Generator,
                    n_jobs: int = 1) -> tuple[float, float]:
    """Bias of max_i mu_i as an estimate of max_i m_i, with its standard error."""
    return _monte_carlo(_single, p, trials, rng, n_jobs)


def sor_weighted_bias(p: EstimatorProblem, trials: int, rng: np.random.Generator,
                      n_jobs: int = 1) -> tuple[float, float]:
    """Bias of w max mu + (1 - w) max zeta, with its standard error."""
    return _monte_carlo(_sor_weighted, p, trials, rng, n_jobs)


def double_estimator_bias(p: EstimatorProblem, trials: int, rng: np.random.Generator,
                          n_jobs: int = 1) -> tuple[float, float]:
    """Bias of the (weighted) double estimator, with its standard error."""
    return _monte_carlo(_double, p, trials, rng, n_jobs)


ESTIMATORS = {
    "single": single_max_bias,
    "sor_weighted": sor_weighted_bias,
    "double": double_estimator_bias,
}
