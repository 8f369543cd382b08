"""Stein variational gradient descent and its constrained variant.

Particles live in the unit box spanned by the parameter limits; kernels and
repulsion act on those coordinates only (never on shooting variables or
multipliers). Step sizes are adapted per coordinate with Adam.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.stats import qmc

from .likelihoods import AugmentedParams, ShootingProblem

log = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-8
SOBOL_MAX_DIM = 21201


class Target(Protocol):
    """A differentiable log-density over ``(N, D)`` batches."""

    dim: int
    lower: np.ndarray
    upper: np.ndarray

    def log_prob(self, x: np.ndarray) -> np.ndarray: ...

    def log_prob_and_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class KernelConfig:
    bandwidth_rule: str = "median"
    fixed_bandwidth: float | None = None

    def __post_init__(self):
        if self.bandwidth_rule not in ("median", "fixed"):
            raise ValueError(f"unknown bandwidth rule {self.bandwidth_rule!r}")
        if self.bandwidth_rule == "fixed" and not (self.fixed_bandwidth and self.fixed_bandwidth > 0):
            raise ValueError("a fixed bandwidth must be positive")


@dataclass(frozen=True)
class MdmmConfig:
    damping_c: float = 1.0
    lambda_step: float = 1e-2
    shooting_state_step: float = 1e-2
    # the limit constraints compete with likelihood gradients that can be many
    # orders of magnitude larger than the defect terms; None reuses the above
    limit_damping: float | None = None
    limit_lambda_step: float | None = None

    def __post_init__(self):
        values = [self.damping_c, self.lambda_step, self.shooting_state_step,
                  self.c_lim, self.step_lim]
        if min(values) <= 0:
            raise ValueError("MDMM settings must be positive")

    @property
    def c_lim(self) -> float:
        return self.damping_c if self.limit_damping is None else self.limit_damping

    @property
    def step_lim(self) -> float:
        return self.lambda_step if self.limit_lambda_step is None else self.limit_lambda_step


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, x: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(x), np.zeros_like(x))


@dataclass
class Particle:
    augmented: AugmentedParams
    adam_state: AdamState
    log_likelihood: float
    defect_norms: np.ndarray


@dataclass
class Posterior:
    """Final particle set plus diagnostics.

    ``particles`` are in physical parameter units. ``history`` maps a metric
    name to its per-iteration trace.
    """

    particles: np.ndarray
    log_likelihood: np.ndarray
    out_of_bounds: np.ndarray
    history: dict[str, list[float]] = field(default_factory=dict)
    defect_norms: np.ndarray | None = None
    shooting_states: np.ndarray | None = None
    lambda_def: np.ndarray | None = None
    lambda_lim: np.ndarray | None = None
    diverged: np.ndarray | None = None
    method: str = ""

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    def particle(self, i: int, adam: AdamState | None = None) -> Particle:
        m = self.particles.shape[1]
        ss = self.shooting_states[i] if self.shooting_states is not None else np.zeros((1, 0, 4))
        ld = self.lambda_def[i] if self.lambda_def is not None else np.zeros(ss.shape[:2])
        ll = self.lambda_lim[i] if self.lambda_lim is not None else np.zeros(m)
        aug = AugmentedParams(self.particles[i], ss, ld, ll)
        flat = aug.flatten()
        dn = self.defect_norms[i] if self.defect_norms is not None else np.zeros(ss.shape[:2])
        return Particle(aug, adam or AdamState.zeros_like(flat),
                        float(self.log_likelihood[i]), dn)


# -- kernel ------------------------------------------------------------------------

def rbf_kernel(x, y, bandwidth: float) -> tuple[float, np.ndarray]:
    """``k = exp(-|x - y|^2 / bw)`` and its gradient in ``x``."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    k = math.exp(-float(diff @ diff) / bandwidth)
    return k, -(2.0 / bandwidth) * diff * k


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(x: np.ndarray) -> float:
    """``med^2 / log N`` over the N(N-1)/2 pairwise distances."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if n < 2:
        raise ValueError("median heuristic needs at least two particles")
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(pairwise_sq_dists(x)[iu])))
    return max(med * med / math.log(n), BANDWIDTH_FLOOR)


def bandwidth_for(x: np.ndarray, cfg: KernelConfig) -> float:
    if cfg.bandwidth_rule == "fixed":
        return float(cfg.fixed_bandwidth)
    if x.shape[0] < 2:
        return 1.0  # irrelevant: a lone particle only sees k(x, x) = 1
    return median_bandwidth(x)


def kernel_matrix(x: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-pairwise_sq_dists(x) / bandwidth)


def svgd_phi(x: np.ndarray, grad_logp: np.ndarray, bandwidth: float) -> np.ndarray:
    """Stein direction for every particle.

    ``phi_i = 1/N sum_j [k(x_j, x_i) grad_j + d/dx_j k(x_j, x_i)]``.
    """
    x = np.atleast_2d(x)
    n = x.shape[0]
    kxx = kernel_matrix(x, bandwidth)
    drive = kxx @ grad_logp
    # sum_j d/dx_j k(x_j, x_i) = (2/bw) sum_j k_ij (x_i - x_j)
    repulse = (2.0 / bandwidth) * (x * kxx.sum(axis=1, keepdims=True) - kxx @ x)
    return (drive + repulse) / n


# -- initialization and step-size control ------------------------------------------------

def sobol_init(n: int, lower, upper) -> np.ndarray:
    """First ``n`` unscrambled Sobol points mapped onto the box."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if n < 1:
        raise ValueError("need at least one point")
    d = lower.size
    if d > SOBOL_MAX_DIM:
        raise ValueError(f"Sobol direction numbers only cover {SOBOL_MAX_DIM} dimensions")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pts = qmc.Sobol(d, scramble=False).random(n)
    return lower + pts * (upper - lower)


def adam_step(x: np.ndarray, state: AdamState, direction: np.ndarray, lr,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected Adam move along an ascent direction. Updates ``state`` in place."""
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * direction
    state.v = beta2 * state.v + (1 - beta2) * direction * direction
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    return x + lr * m_hat / (np.sqrt(v_hat) + eps)


# -- pendulum targets -------------------------------------------------------------------

class PendulumTarget:
    """Log-posterior of a :class:`ShootingProblem` over unit-box parameters.

    With ``shooting=True`` (multiple-shooting likelihood for samplers) the
    shooting variables, in normalized state units, are appended to the space
    and the Gaussian defect densities are added to the log-likelihood.
    ``prior`` adds the uniform prior (``-inf`` outside the box).

    ``shooting_scale`` multiplies the normalized shooting variables. It is a
    constant change of units, so the density is unchanged up to a constant,
    but gradient samplers then move those coordinates ``shooting_scale**2``
    times slower than the parameters.
    """

    def __init__(self, problem: ShootingProblem, shooting: bool | None = None,
                 prior: bool = False, shooting_scale: float = 1.0):
        if shooting_scale <= 0:
            raise ValueError("shooting_scale must be positive")
        self.problem = problem
        self.shooting_scale = float(shooting_scale)
        self.shooting = problem.n_boundaries > 0 if shooting is None else shooting
        if self.shooting and problem.n_boundaries == 0:
            raise ValueError("multiple-shooting target needs at least two windows")
        self.prior = prior
        m = problem.n_params
        self.n_params = m
        self.n_shoot = problem.n_traj * problem.n_boundaries * 4 if self.shooting else 0
        self.dim = m + self.n_shoot
        self.lower = np.concatenate([np.zeros(m), np.full(self.n_shoot, -np.inf)])
        self.upper = np.concatenate([np.ones(m), np.full(self.n_shoot, np.inf)])

    def initial_extra(self) -> np.ndarray:
        if not self.shooting:
            return np.zeros(0)
        s = self.problem.initial_shooting_states()
        return (s / self.problem.state_variance * self.shooting_scale).ravel()

    def split(self, x: np.ndarray):
        p = self.problem
        theta = p.from_unit(x[:, :self.n_params])
        if not self.shooting:
            return theta, None
        z = x[:, self.n_params:].reshape(x.shape[0], p.n_traj, p.n_boundaries, 4)
        return theta, z * p.state_variance / self.shooting_scale

    def _evaluate(self, x: np.ndarray, with_grad: bool):
        x = np.atleast_2d(x)
        theta, shoot = self.split(x)
        ev = self.problem.evaluate(theta, shoot, with_grad=with_grad)
        lp = ev.log_obs.copy()
        if self.shooting:
            lp = lp + self.problem.defect_log_density(ev)
        if self.prior:
            inside = np.all((x[:, :self.n_params] >= 0) & (x[:, :self.n_params] <= 1), axis=1)
            lp = np.where(inside, lp, -np.inf)
        return ev, lp

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        return self._evaluate(x, False)[1]

    def log_prob_and_grad(self, x: np.ndarray):
        ev, lp = self._evaluate(x, True)
        p = self.problem
        g_theta = ev.d_theta * p.limits.width
        if not self.shooting:
            return lp, g_theta
        s2 = p.config.sigma_def ** 2
        # d/ds of sum_b -0.5 * dsq_b / s2
        g_theta = g_theta - 0.5 * np.einsum("nkbm->nm", ev.dsq_theta) / s2 * p.limits.width
        g_s = ev.d_shoot - 0.5 * ev.dsq_self / s2
        g_s[:, :, :-1] -= 0.5 * ev.dsq_prev[:, :, 1:] / s2
        g_z = g_s * p.state_variance / self.shooting_scale  # chain rule through s = z * var / scale
        return lp, np.concatenate([g_theta, g_z.reshape(x.shape[0] if x.ndim == 2 else 1, -1)],
                                  axis=1)


# -- runners ----------------------------------------------------------------------------------

def svgd_run(target: Target, init: np.ndarray, iterations: int, lr: float = 5e-3,
             kernel: KernelConfig = KernelConfig(), kernel_dims: int | None = None,
             callback: Callable[[int, np.ndarray], None] | None = None) -> dict:
    """Plain SVGD with Adam on an arbitrary differentiable target.

    Returns a dict with the final particles ``x``, their log-probabilities
    and the per-iteration mean log-probability trace.
    """
    x = np.array(init, dtype=float, copy=True)
    kd = kernel_dims or x.shape[1]
    adam = AdamState.zeros_like(x)
    trace = []
    for it in range(iterations):
        lp, g = target.log_prob_and_grad(x)
        g = np.where(np.isfinite(g), g, 0.0)
        phi = _phi_split(x, g, kd, kernel)
        trace.append(float(np.mean(lp)))
        x = adam_step(x, adam, phi, lr)
        if callback:
            callback(it, x)
    lp = target.log_prob(x)
    return {"x": x, "log_prob": lp, "trace": trace, "adam": adam}


def _phi_split(x, g, kd, kernel):
    # kernel on the first kd coordinates; the rest follow their own gradient
    bw = bandwidth_for(x[:, :kd], kernel)
    phi = np.empty_like(g)
    phi[:, :kd] = svgd_phi(x[:, :kd], g[:, :kd], bw)
    if kd < x.shape[1]:
        phi[:, kd:] = g[:, kd:]
    return phi


def svgd_estimate(problem: ShootingProblem, n_particles: int = 100, iterations: int = 1000,
                  lr: float = 5e-3, kernel: KernelConfig = KernelConfig(),
                  init: np.ndarray | None = None, callback=None) -> Posterior:
    """SVGD on the single-shooting (or windowless) set likelihood.

    ``callback(iteration, theta)`` sees the physical parameters after each update.
    """
    if problem.n_boundaries:
        raise ValueError("svgd_estimate uses the single-shooting likelihood; use csvgd_estimate")
    target = PendulumTarget(problem)
    if init is None:
        init = sobol_init(n_particles, problem.limits.min, problem.limits.max)
    cb = None if callback is None else (lambda it, x: callback(it, problem.from_unit(x)))
    res = svgd_run(target, problem.to_unit(init), iterations, lr, kernel, callback=cb)
    theta = problem.from_unit(res["x"])
    ev = problem.evaluate(theta, with_grad=False)
    oob = np.any((theta < problem.limits.min) | (theta > problem.limits.max), axis=1)
    return Posterior(theta, ev.log_obs, oob, {"mean_log_likelihood": res["trace"]},
                     diverged=ev.diverged, method="svgd")


def csvgd_estimate(problem: ShootingProblem, n_particles: int = 100, iterations: int = 1000,
                   lr: float = 5e-3, mdmm: MdmmConfig = MdmmConfig(),
                   kernel: KernelConfig = KernelConfig(),
                   init: np.ndarray | None = None, lr_decay: float = 1.0,
                   callback=None) -> Posterior:
    """Constrained SVGD with multiple shooting (Algorithm "CSVGD").

    Both Adam step sizes (parameters and shooting states) are multiplied by
    ``lr_decay`` after every iteration. With a single shooting window this is
    exactly :func:`svgd_estimate`.
    """
    if not 0 < lr_decay <= 1:
        raise ValueError("lr_decay must lie in (0, 1]")
    if problem.n_boundaries == 0:
        post = svgd_estimate(problem, n_particles, iterations, lr, kernel, init, callback)
        post.method = "csvgd"
        return post
    if init is None:
        init = sobol_init(n_particles, problem.limits.min, problem.limits.max)
    N, M = init.shape
    K, B = problem.n_traj, problem.n_boundaries
    width = problem.limits.width
    s2 = problem.config.sigma_def ** 2
    c = mdmm.damping_c

    u = problem.to_unit(init)
    shoot = np.broadcast_to(problem.initial_shooting_states(), (N, K, B, 4)).copy()
    lam_lim = np.zeros((N, M))
    lam_def = np.zeros((N, K, B))
    svar = problem.state_variance
    z = shoot / svar  # shooting variables are stepped in normalized state units
    adam_u, adam_s = AdamState.zeros_like(u), AdamState.zeros_like(z)
    history: dict[str, list[float]] = {"mean_log_likelihood": [], "max_defect_norm": [],
                                       "max_limit_violation": []}

    for it in range(iterations):
        # the simulator only ever sees in-limit parameters; outside the box the
        # limit constraint is the sole force on the violated coordinates
        inside = (u >= 0.0) & (u <= 1.0)
        ev = problem.evaluate(problem.from_unit(np.clip(u, 0.0, 1.0)), shoot)
        grad_u = np.where(np.isfinite(ev.d_theta) & inside, ev.d_theta, 0.0) * width
        phi = svgd_phi(u, grad_u, bandwidth_for(u, kernel)) * inside

        glim = np.clip(u, 0.0, 1.0) - u
        dglim = np.where(glim != 0.0, -1.0, 0.0)
        gdef = ev.defect_sq / s2
        wdef = lam_def + c * gdef                                 # (N,K,B)
        dgdef_u = ev.dsq_theta / s2 * width * inside[:, None, None, :]   # (N,K,B,M)

        u_dot = phi - (lam_lim + mdmm.c_lim * glim) * dglim - np.einsum("nkb,nkbm->nm", wdef, dgdef_u)
        s_dot = ev.d_shoot - wdef[..., None] * ev.dsq_self / s2
        s_dot[:, :, :-1] -= wdef[:, :, 1:, None] * ev.dsq_prev[:, :, 1:] / s2

        scale = lr_decay ** it
        u = adam_step(u, adam_u, u_dot, lr * scale)
        z = adam_step(z, adam_s, s_dot * svar, mdmm.shooting_state_step * scale)
        shoot = z * svar
        lam_lim = lam_lim + mdmm.step_lim * glim
        lam_def = lam_def + mdmm.lambda_step * gdef

        history["mean_log_likelihood"].append(float(np.mean(ev.log_obs)))
        history["max_defect_norm"].append(float(np.max(ev.defect_norm)))
        history["max_limit_violation"].append(float(np.max(np.abs(glim))))
        if callback:
            callback(it, problem.from_unit(u))
        if it % 50 == 0:
            log.debug("csvgd it=%d ll=%.4g defect=%.3g", it, history["mean_log_likelihood"][-1],
                      history["max_defect_norm"][-1])

    theta = problem.from_unit(u)
    ev = problem.evaluate(theta, shoot, with_grad=False)
    oob = np.any((theta < problem.limits.min) | (theta > problem.limits.max), axis=1)
    return Posterior(theta, ev.log_obs, oob, history, ev.defect_norm, shoot, lam_def,
                     lam_lim, ev.diverged, method="csvgd")
