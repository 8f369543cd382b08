"""Reference estimators: cross-entropy method, SGLD and stretch-move MCMC.

All three work on a generic :class:`~csvgd.svgd.Target` (batched log-density
with box limits), so they run unchanged on analytic test densities and on the
pendulum posterior, with or without shooting variables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

STD_FLOOR = 1e-6


@dataclass
class CemState:
    mean: np.ndarray
    diag_std: np.ndarray
    elite_fraction: float

    def __post_init__(self):
        if not 0 < self.elite_fraction <= 1:
            raise ValueError("elite_fraction must lie in (0, 1]")
        self.diag_std = np.maximum(np.asarray(self.diag_std, dtype=float), STD_FLOOR)


@dataclass
class EnsembleState:
    walkers: np.ndarray
    log_posteriors: np.ndarray
    rng_seed: int

    def __post_init__(self):
        k = self.walkers.shape[0]
        if k < 4 or k % 2:
            raise ValueError("the stretch move needs an even number of at least 4 walkers")


@dataclass
class SamplerResult:
    samples: np.ndarray        # (n, D) returned draws
    log_prob: np.ndarray       # (n,)
    trace: list[float]         # mean log-probability per iteration
    acceptance: float = float("nan")


def _truncated_normal(rng, mean, std, lower, upper, n):
    a = (lower - mean) / std
    b = (upper - mean) / std
    return truncnorm.rvs(a, b, loc=mean, scale=std, size=(n, mean.size), random_state=rng)


def cem_run(target, iterations: int, population: int = 64, elite_fraction: float = 0.2,
            init_mean=None, init_std=None, seed: int = 0, callback=None) -> SamplerResult:
    """Cross-entropy method with a diagonal Gaussian truncated to the target box."""
    if population < 4:
        raise ValueError("population must be at least 4")
    n_elite = int(round(elite_fraction * population))
    if n_elite < 2:
        raise ValueError("at least two elites are needed")
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(target.lower, float), np.asarray(target.upper, float)
    finite = np.isfinite(lo) & np.isfinite(hi)
    if init_mean is None:
        init_mean = np.where(finite, 0.5 * (lo + hi), 0.0)
    if init_std is None:
        init_std = np.where(finite, 0.5 * (hi - lo), 1.0)
    state = CemState(np.asarray(init_mean, float), np.asarray(init_std, float), elite_fraction)
    trace = []
    x = lp = None
    for it in range(iterations):
        x = _truncated_normal(rng, state.mean, state.diag_std, lo, hi, population)
        lp = target.log_prob(x)
        trace.append(float(np.mean(lp[np.isfinite(lp)])) if np.any(np.isfinite(lp)) else -np.inf)
        elite = x[np.argsort(-lp, kind="stable")[:n_elite]]
        state.mean = elite.mean(axis=0)
        state.diag_std = np.maximum(elite.std(axis=0), STD_FLOOR)
        if callback:
            callback(it, x)
    if x is None:
        x = _truncated_normal(rng, state.mean, state.diag_std, lo, hi, population)
        lp = target.log_prob(x)
    return SamplerResult(x, lp, trace)


def _reflect(x, lo, hi):
    # fold back into [lo, hi]; dimensions with infinite bounds pass through
    width = hi - lo
    finite = np.isfinite(width)
    if not np.any(finite):
        return x
    y = x.copy()
    f = np.broadcast_to(finite, x.shape)
    lo_b = np.broadcast_to(lo, x.shape)[f]
    w_b = np.broadcast_to(width, x.shape)[f]
    r = np.mod(y[f] - lo_b, 2 * w_b)
    y[f] = lo_b + np.where(r > w_b, 2 * w_b - r, r)
    return y


def sgld_run(target, init: np.ndarray, iterations: int, step_eps: float,
             n_keep: int = 100, seed: int = 0, noise: bool = True,
             burn_in: float = 0.5, thin: int | None = None, callback=None) -> SamplerResult:
    """Langevin dynamics on parallel chains.

    ``x <- x + eps/2 * grad log p + N(0, eps)``, reflected at the limits.
    The first ``burn_in`` fraction of iterations is discarded; the last
    ``n_keep`` draws (spread evenly over the remainder across all chains)
    are returned.
    """
    if step_eps <= 0:
        raise ValueError("step_eps must be positive")
    rng = np.random.default_rng(seed)
    x = np.array(np.atleast_2d(init), dtype=float)
    lo, hi = np.asarray(target.lower, float), np.asarray(target.upper, float)
    n_chains = x.shape[0]
    start = int(burn_in * iterations)
    if thin is None:
        per_chain = max(1, -(-n_keep // n_chains))
        thin = max(1, (iterations - start) // per_chain)
    kept, kept_lp, trace = [], [], []
    sd = np.sqrt(step_eps)
    for it in range(iterations):
        lp, g = target.log_prob_and_grad(x)
        trace.append(float(np.mean(lp)))
        g = np.where(np.isfinite(g), g, 0.0)
        x = x + 0.5 * step_eps * g
        if noise:
            x = x + sd * rng.standard_normal(x.shape)
        x = _reflect(x, lo, hi)
        if callback:
            callback(it, x)
        if it >= start and (iterations - 1 - it) % thin == 0:
            kept.append(x.copy())
    samples = np.concatenate(kept) if kept else x.copy()
    samples = samples[-n_keep:] if n_keep else samples
    return SamplerResult(samples, target.log_prob(samples), trace)


def stretch_move_run(target, init: np.ndarray, iterations: int, a: float = 2.0,
                     n_keep: int = 100, seed: int = 0, burn_in: float = 0.5,
                     thin: int | None = None, callback=None) -> SamplerResult:
    """Goodman-Weare affine-invariant ensemble sampler (split-ensemble stretch move)."""
    if a <= 1:
        raise ValueError("stretch scale a must exceed 1")
    rng = np.random.default_rng(seed)
    walkers = np.array(init, dtype=float)
    state = EnsembleState(walkers, target.log_prob(walkers), seed)
    if np.all(~np.isfinite(state.log_posteriors)):
        raise FloatingPointError("every walker starts at zero posterior density")
    K, D = walkers.shape
    half = K // 2
    start = int(burn_in * iterations)
    if thin is None:
        per_walker = max(1, -(-n_keep // K))
        thin = max(1, (iterations - start) // per_walker)
    accepted = 0
    kept, kept_lp, trace = [], [], []
    for it in range(iterations):
        for first, second in ((slice(0, half), slice(half, K)), (slice(half, K), slice(0, half))):
            active = state.walkers[first]
            others = state.walkers[second]
            n = active.shape[0]
            z = ((a - 1.0) * rng.random(n) + 1.0) ** 2 / a
            partner = others[rng.integers(0, others.shape[0], n)]
            proposal = stretch_proposal(active, partner, z)
            lp_new = target.log_prob(proposal)
            log_ratio = (D - 1) * np.log(z) + lp_new - state.log_posteriors[first]
            accept = np.log(rng.random(n)) < log_ratio
            accept &= np.isfinite(lp_new)
            idx = np.arange(K)[first][accept]
            state.walkers[idx] = proposal[accept]
            state.log_posteriors[idx] = lp_new[accept]
            accepted += int(accept.sum())
        trace.append(float(np.mean(state.log_posteriors)))
        if callback:
            callback(it, state.walkers)
        if it >= start and (iterations - 1 - it) % thin == 0:
            kept.append(state.walkers.copy())
            kept_lp.append(state.log_posteriors.copy())
    samples = np.concatenate(kept) if kept else state.walkers.copy()
    lps = np.concatenate(kept_lp) if kept_lp else state.log_posteriors.copy()
    if n_keep:
        samples, lps = samples[-n_keep:], lps[-n_keep:]
    return SamplerResult(samples, lps, trace, accepted / max(1, iterations * K))


def stretch_proposal(x_k: np.ndarray, x_j: np.ndarray, z) -> np.ndarray:
    """``Y = X_j + z (X_k - X_j)``."""
    z = np.asarray(z, dtype=float)
    return x_j + z[..., None] * (x_k - x_j) if z.ndim else x_j + z * (x_k - x_j)
