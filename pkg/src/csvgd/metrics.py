"""Sample-based comparison of particle posteriors and trajectory sets."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .diffsim import PendulumModel, Trajectory, TrajectorySet
from .likelihoods import LikelihoodConfig, ShootingProblem, observation_variance

EULER_GAMMA = 0.5772156649015329
DISTANCE_FLOOR = 1e-12

# asymptotic series psi(x) ~ log x - 1/(2x) - sum B_2k / (2k x^2k)
_DIGAMMA_SERIES = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)


def digamma(x: float) -> float:
    """psi(x) for x > 0 via upward recurrence and the asymptotic series."""
    x = float(x)
    if not x > 0:
        raise ValueError("digamma is only defined here for x > 0")
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    p = inv2
    for c in _DIGAMMA_SERIES:
        series += c * p
        p *= inv2
    return acc + math.log(x) - 0.5 / x - series


@dataclass
class MetricReport:
    kl_real_sim: float
    kl_sim_real: float
    mmd: float
    log_likelihood: float
    n_real: int
    n_sim: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def knn_kl(samples_p, samples_q, k: int = 3, l: int = 3) -> float:
    """Nearest-neighbour estimate of KL(P || Q).

    For each point of P: ``nu`` is the distance to its ``k``-th neighbour in
    Q, ``rho`` the distance to its ``l``-th neighbour among the other points
    of P. The estimate is
    ``D/n sum log(nu/rho) + 1/n sum [psi(l) - psi(k)] + log(m / (n - 1))``.
    """
    p, q = _as_samples(samples_p), _as_samples(samples_q)
    n, m = p.shape[0], q.shape[0]
    if p.shape[1] != q.shape[1]:
        raise ValueError("samples must share their dimensionality")
    if n <= l or m < k:
        raise ValueError(f"need more than {l} samples from P and at least {k} from Q")
    d = p.shape[1]
    nu = cKDTree(q).query(p, k=[k])[0][:, 0]
    rho = cKDTree(p).query(p, k=[l + 1])[0][:, 0]  # first hit is the point itself
    if np.any(nu < DISTANCE_FLOOR) or np.any(rho < DISTANCE_FLOOR):
        warnings.warn("duplicate samples: zero neighbour distances were floored",
                      RuntimeWarning, stacklevel=2)
    nu = np.maximum(nu, DISTANCE_FLOOR)
    rho = np.maximum(rho, DISTANCE_FLOOR)
    return float(d * np.mean(np.log(nu / rho)) + (digamma(l) - digamma(k))
                 + math.log(m / (n - 1)))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.maximum(d, 0.0)


def mmd(samples_p, samples_q) -> float:
    """Biased (V-statistic) squared MMD with a median-heuristic RBF kernel."""
    p, q = _as_samples(samples_p), _as_samples(samples_q)
    if len(p) == 0 or len(q) == 0 or p.shape[1] != q.shape[1]:
        raise ValueError("need two nonempty sample sets of equal dimension")
    pooled = np.concatenate([p, q])
    n = len(pooled)
    d2 = _sq_dists(pooled, pooled)
    iu = np.triu_indices(n, k=1)
    med2 = float(np.median(d2[iu])) if n > 1 else 0.0
    bw = max(med2 / math.log(n), 1e-8) if n > 1 else 1.0
    kern = np.exp(-d2 / bw)
    a = len(p)
    kpp, kqq, kpq = kern[:a, :a], kern[a:, a:], kern[:a, a:]
    return float(max(kpp.mean() + kqq.mean() - 2 * kpq.mean(), 0.0))


def _flatten_normalized(trajs, variance) -> np.ndarray:
    T = min(len(t) for t in trajs)
    if any(len(t) != T for t in trajs):
        warnings.warn(f"trajectories truncated to {T} steps for comparison",
                      RuntimeWarning, stacklevel=3)
    return np.stack([(t.observations[:T] / variance).ravel() for t in trajs])


def trajectory_distance(a: Trajectory, b: Trajectory, variance=None) -> float:
    """Euclidean distance between flattened, variance-normalized observations."""
    if variance is None:
        variance = np.ones(a.observations.shape[1])
    fa, fb = _flatten_normalized([a, b], np.asarray(variance))
    return float(np.linalg.norm(fa - fb))


def rollout_set(model: PendulumModel, particles: np.ndarray, starts: list[Trajectory],
                ) -> list[Trajectory]:
    """Roll every particle out from every reference start state (value only)."""
    problem = ShootingProblem(model, TrajectorySet(starts), LikelihoodConfig())
    return simulated_trajectories(problem, particles)


def simulated_trajectories(problem: ShootingProblem, particles: np.ndarray) -> list[Trajectory]:
    from .diffsim import apply_params, physical, step, observe

    particles = np.atleast_2d(particles)
    model = problem.model
    out = []
    th = list(particles.T.reshape(particles.shape[1], -1, 1))
    m = physical(apply_params(model, th))
    with np.errstate(all="ignore"):
        for tr in problem.trajectories:
            x = tuple(np.full((particles.shape[0], 1), v) for v in tr.start_state.as_array())
            obs = []
            for _ in range(len(tr)):
                x = step(m, x, check=False)
                obs.append(np.stack([c[:, 0] for c in observe(x, model.observed)], axis=-1))
            arr = np.stack(obs, axis=1)  # (N, T, D)
            for n in range(arr.shape[0]):
                if np.all(np.isfinite(arr[n])):
                    out.append(Trajectory(arr[n], tr.dt, tr.start_state, model.observed))
    return out


def posterior_log_likelihood(particles: np.ndarray, trajectories: TrajectorySet,
                             model: PendulumModel, config: LikelihoodConfig) -> float:
    """Per-step, per-dimension log-likelihood of the references under the particle mixture.

    Each reference trajectory is scored by the uniform mixture over particles
    of their single-shooting likelihoods; the log-mixtures are averaged over
    references and divided by the number of steps times observation
    dimensions.
    """
    particles = np.atleast_2d(particles)
    if particles.shape[0] == 0:
        raise ValueError("no particles")
    cfg = LikelihoodConfig(sigma_obs=config.sigma_obs, normalization=config.normalization,
                           combination="product")
    problem = ShootingProblem(model, trajectories, cfg)
    ev = problem.evaluate(particles, with_grad=False)
    ll = np.where(ev.per_traj <= -1e11, -np.inf, ev.per_traj)  # (N, K)
    if np.all(~np.isfinite(ll)):
        raise FloatingPointError("every particle rollout diverged")
    top = np.max(ll, axis=0)
    mix = top + np.log(np.mean(np.exp(ll - top), axis=0))
    steps = sum(len(t) for t in trajectories) * trajectories.obs_dim
    return float(np.sum(mix) / steps)


def evaluate_posterior(particles: np.ndarray, reference: TrajectorySet, model: PendulumModel,
                       config: LikelihoodConfig, k: int = 3) -> MetricReport:
    """Trajectory-space KL (both ways), MMD and log-likelihood against ``reference``."""
    variance = (np.asarray(config.normalization) if config.normalization is not None
                else observation_variance(reference))
    problem = ShootingProblem(model, reference, LikelihoodConfig(normalization=tuple(variance)))
    sim = simulated_trajectories(problem, particles)
    real_f = _flatten_normalized(list(reference), variance)
    sim_f = _flatten_normalized(sim, variance) if sim else np.zeros((0, real_f.shape[1]))
    kl_rs = knn_kl(real_f, sim_f, k, k) if len(sim_f) >= k and len(real_f) > k else math.nan
    kl_sr = knn_kl(sim_f, real_f, k, k) if len(real_f) >= k and len(sim_f) > k else math.nan
    return MetricReport(kl_rs, kl_sr, mmd(real_f, sim_f) if len(sim_f) else math.nan,
                        posterior_log_likelihood(particles, reference, model, config),
                        len(real_f), len(sim_f))
