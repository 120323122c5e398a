"""Transitional MCMC.

Bridges prior and posterior through tempered targets
``likelihood(z)**p_j * prior(z)`` with ``0 = p_0 < p_1 < ... < p_m = 1``. Each
generation picks the next exponent so the importance weights have a target
coefficient of variation, resamples by those weights, and rejuvenates every
particle with Metropolis steps whose Gaussian proposal is a scaled copy of the
weighted sample covariance.

The sampler works in an unconstrained-looking "sampling space" ``z``; the
target supplies ``log_prior(z)`` (``-inf`` outside the support),
``log_likelihood(z)`` and a prior sampler.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

BISECT_TOL = 1e-10
COV_JITTER = 1e-10


@dataclass
class Target:
    log_prior: Callable[[np.ndarray], float]
    log_likelihood: Callable[[np.ndarray], float]
    sample_prior: Callable[[np.random.Generator, int], np.ndarray]


@dataclass
class TmcmcConfig:
    n_samples: int = 6000
    cov_target: float = 1.0
    beta2: float = 0.04
    max_generations: int = 40
    chain_steps: int = 1
    rng_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_samples < 100:
            raise ValueError("n_samples must be at least 100")
        if not 0 < self.beta2 <= 1:
            raise ValueError("beta2 must lie in (0, 1]")
        if self.cov_target <= 0:
            raise ValueError("cov_target must be positive")
        if self.chain_steps < 0 or self.max_generations < 1:
            raise ValueError("chain_steps must be >= 0 and max_generations >= 1")


@dataclass
class Generation:
    samples: np.ndarray
    loglik: np.ndarray
    logprior: np.ndarray
    p_j: float
    weights: np.ndarray
    cov_scaled: np.ndarray
    acceptance: float = float("nan")


@dataclass
class TmcmcResult:
    samples: np.ndarray
    loglik: np.ndarray
    logprior: np.ndarray
    log_evidence: float
    trace: list[dict] = field(default_factory=list)
    last_importance: tuple[np.ndarray, np.ndarray] | None = None


class TmcmcError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


def _weights_cov(dp: float, loglik: np.ndarray) -> float:
    w = np.exp(dp * (loglik - loglik.max()))
    return float(w.std() / w.mean())


def next_exponent(loglik, p_prev: float, cov_target: float) -> float:
    """Largest ``p <= 1`` whose incremental weights have CoV ``cov_target``.

    Non-finite log-likelihoods get zero weight whatever ``p`` is and are left
    out of the CoV. CoV uses the population standard deviation.
    """
    L = np.asarray(loglik, dtype=np.float64)
    L = L[np.isfinite(L)]
    if L.size == 0:
        raise ValueError("no sample has a finite log-likelihood")
    span = 1.0 - p_prev
    if span <= 0 or np.ptp(L) == 0 or _weights_cov(span, L) <= cov_target:
        return 1.0
    lo, hi = 0.0, span
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if _weights_cov(mid, L) > cov_target:
            hi = mid
        else:
            lo = mid
    return p_prev + max(lo, BISECT_TOL)


def importance_weights(loglik, dp: float) -> tuple[np.ndarray, float]:
    """Normalised weights ``exp(dp * L)`` and ``log(mean(unnormalised))``."""
    L = np.asarray(loglik, dtype=np.float64)
    lw = np.where(np.isfinite(L), dp * np.where(np.isfinite(L), L, 0.0), -np.inf)
    top = lw.max()
    w = np.exp(lw - top)
    total = w.sum()
    return w / total, float(top + math.log(total / L.size))


def weighted_covariance(samples, weights) -> np.ndarray:
    mean = weights @ samples
    d = samples - mean
    cov = (d * weights[:, None]).T @ d
    return 0.5 * (cov + cov.T)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        scale = max(float(np.max(np.diag(cov))), 1.0)
        jitter = COV_JITTER * scale
        for _ in range(20):
            try:
                return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
            except np.linalg.LinAlgError:
                jitter *= 10
        raise


class Evaluator:
    """Maps a batch of points through ``fn``, memoised, optionally in a process pool.

    Results come back in input order, so the outcome does not depend on the
    pool width.
    """

    def __init__(self, fn, workers: int = 1):
        self.fn = fn
        self.workers = max(int(workers), 1)
        self.cache: dict[bytes, float] = {}
        self.n_calls = 0
        self._pool = None

    def __enter__(self):
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(
                self.workers, initializer=_pool_init, initargs=(self.fn,)
            )
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        Z = np.ascontiguousarray(Z, dtype=np.float64)
        keys = [z.tobytes() for z in Z]
        todo = []
        seen = set()
        for key, z in zip(keys, Z):
            if key not in self.cache and key not in seen:
                seen.add(key)
                todo.append((key, z))
        if todo:
            points = [z for _, z in todo]
            if self._pool is None:
                values = [self.fn(z) for z in points]
            else:
                chunk = max(1, len(points) // (4 * self.workers))
                values = list(self._pool.map(_pool_call, points, chunksize=chunk))
            self.n_calls += len(points)
            for (key, _), v in zip(todo, values):
                v = float(v)
                self.cache[key] = v if math.isfinite(v) or v == -math.inf else -math.inf
        return np.array([self.cache[k] for k in keys])


_POOL_FN = None


def _pool_init(fn):
    global _POOL_FN
    _POOL_FN = fn


def _pool_call(z):
    return _POOL_FN(z)


def resample_and_move(
    gen: Generation, target: Target, config: TmcmcConfig, rng: np.random.Generator, evaluate=None
) -> Generation:
    """Multinomial resampling by weight, then ``chain_steps`` Metropolis moves per particle."""
    evaluate = evaluate or Evaluator(target.log_likelihood)
    n = gen.samples.shape[0]
    idx = rng.choice(n, size=n, p=gen.weights)
    Z = gen.samples[idx].copy()
    L = gen.loglik[idx].copy()
    LP = gen.logprior[idx].copy()
    chol = _cholesky(gen.cov_scaled)
    p = gen.p_j
    accepted = 0
    proposed = 0
    for _ in range(config.chain_steps):
        prop = Z + rng.standard_normal(Z.shape) @ chol.T
        log_u = np.log(rng.uniform(size=n))
        lp_new = np.array([target.log_prior(z) for z in prop])
        ok = np.isfinite(lp_new)
        L_new = np.full(n, -np.inf)
        if ok.any():
            L_new[ok] = evaluate(prop[ok])
        with np.errstate(invalid="ignore"):
            dl = np.where(np.isfinite(L_new), p * (L_new - np.where(np.isfinite(L), L, 0.0)), -np.inf)
        if p == 0:
            dl = np.zeros(n)
        log_ratio = np.where(ok, dl + lp_new - LP, -np.inf)
        acc = log_u < log_ratio
        Z[acc] = prop[acc]
        L[acc] = L_new[acc]
        LP[acc] = lp_new[acc]
        accepted += int(acc.sum())
        proposed += n
    rate = accepted / proposed if proposed else float("nan")
    uniform = np.full(n, 1.0 / n)
    return Generation(Z, L, LP, p, uniform, gen.cov_scaled, rate)


def run(target: Target, config: TmcmcConfig, evaluate=None) -> TmcmcResult:
    """Sample the posterior; deterministic given ``config.rng_seed``."""
    rng = np.random.default_rng(config.rng_seed)
    owns = evaluate is None
    evaluate = evaluate or Evaluator(target.log_likelihood, config.workers)
    if owns:
        evaluate.__enter__()
    try:
        return _run(target, config, rng, evaluate)
    finally:
        if owns:
            evaluate.__exit__(None, None, None)


def _run(target, config, rng, evaluate) -> TmcmcResult:
    N = config.n_samples
    Z = np.asarray(target.sample_prior(rng, N), dtype=np.float64)
    LP = np.array([target.log_prior(z) for z in Z])
    L = evaluate(Z)
    p = 0.0
    log_evidence = 0.0
    trace = []
    last_importance = None
    for j in range(1, config.max_generations + 1):
        p_new = next_exponent(L, p, config.cov_target)
        w, log_mean_w = importance_weights(L, p_new - p)
        log_evidence += log_mean_w
        cov = config.beta2 * weighted_covariance(Z, w)
        last_importance = (Z, w)
        gen = Generation(Z, L, LP, p_new, w, cov)
        gen = resample_and_move(gen, target, config, rng, evaluate)
        Z, L, LP = gen.samples, gen.loglik, gen.logprior
        ess = float(1.0 / np.sum(w * w))
        trace.append(
            {
                "generation": j,
                "p": p_new,
                "acceptance": gen.acceptance,
                "ess": ess,
                "log_evidence": log_evidence,
                "unique": int(np.unique(Z, axis=0).shape[0]),
                "evaluations": evaluate.n_calls,
            }
        )
        log.info(
            "gen %d: p=%.4g acc=%.3f ess=%.0f logZ=%.3f",
            j, p_new, gen.acceptance, ess, log_evidence,
        )
        p = p_new
        if p >= 1.0:
            return TmcmcResult(Z, L, LP, log_evidence, trace, last_importance)
    raise TmcmcError(
        f"p={p:.4g} after {config.max_generations} generations", trace
    )


def default_workers() -> int:
    """Pool width from ``GLIOMA_THREADS`` (defaults to serial)."""
    try:
        return max(int(os.environ.get("GLIOMA_THREADS", "1")), 1)
    except ValueError:
        return 1
