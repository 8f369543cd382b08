"""Gaussian trajectory likelihoods, shooting windows, constraints and prior.

Two evaluation routes live here:

* scalar functions (``single_shooting_ll``, ``multiple_shooting_ll``,
  ``set_log_likelihood``) that take one parameter vector, are generic over
  duals and mirror the math line by line;
* :class:`ShootingProblem`, which evaluates log-likelihoods, defect
  constraints and their derivatives for a whole batch of particles at once.
  Estimators use this one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .diffsim import (MAX_JOINT_SPEED, PendulumModel, State, Trajectory,
                      TrajectorySet, apply_params, observe, physical, rollout, step)

DIVERGED_LOGLIK = -1e12
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class LikelihoodConfig:
    sigma_obs: float | tuple[float, ...] = 0.1
    sigma_def: float = 0.1
    num_windows: int = 1
    window_length: int | None = None
    combination: str = "sum"
    # per-observation-dimension variances; None = estimate from the data
    normalization: tuple[float, ...] | None = None

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_obs, dtype=float) <= 0):
            raise ValueError("sigma_obs must be positive")
        if self.sigma_def <= 0:
            raise ValueError("sigma_def must be positive")
        if self.num_windows < 1:
            raise ValueError("num_windows must be >= 1")
        if self.window_length is not None and self.window_length < 1:
            raise ValueError("window_length must be >= 1")
        if self.combination not in ("sum", "product"):
            raise ValueError(f"combination must be 'sum' or 'product', not {self.combination!r}")
        if self.normalization is not None and np.any(np.asarray(self.normalization) <= 0):
            raise ValueError("normalization variances must be positive")


@dataclass(frozen=True)
class ParamLimits:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if lo.shape != hi.shape or not np.all(lo < hi):
            raise ValueError("limits need min < max elementwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def from_model(cls, model: PendulumModel) -> "ParamLimits":
        return cls(model.lower, model.upper)

    @property
    def width(self) -> np.ndarray:
        return self.max - self.min


@dataclass
class AugmentedParams:
    """Parameters plus shooting variables and multipliers of one particle.

    ``shooting_states`` has shape ``(K, n_s - 1, 4)`` for a set of ``K``
    reference trajectories; the first window of each trajectory starts at its
    recorded start state, which is not stored.
    """

    theta: np.ndarray
    shooting_states: np.ndarray
    lambda_def: np.ndarray
    lambda_lim: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        self.shooting_states = np.asarray(self.shooting_states, dtype=float)
        if self.shooting_states.ndim == 2:
            self.shooting_states = self.shooting_states[None]
        k, b = self.shooting_states.shape[:2]
        self.lambda_def = np.asarray(self.lambda_def, dtype=float).reshape(k, b)
        self.lambda_lim = np.asarray(self.lambda_lim, dtype=float).reshape(self.theta.size)

    @classmethod
    def zeros(cls, theta, n_traj: int, n_windows: int, state_dim: int = 4) -> "AugmentedParams":
        theta = np.asarray(theta, dtype=float)
        return cls(theta, np.zeros((n_traj, n_windows - 1, state_dim)),
                   np.zeros((n_traj, n_windows - 1)), np.zeros(theta.size))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.theta, self.shooting_states.ravel(),
                               self.lambda_def.ravel(), self.lambda_lim])

    @classmethod
    def unflatten(cls, vec, n_params: int, n_traj: int, n_windows: int,
                  state_dim: int = 4) -> "AugmentedParams":
        vec = np.asarray(vec, dtype=float)
        nb = n_windows - 1
        sizes = [n_params, n_traj * nb * state_dim, n_traj * nb, n_params]
        if vec.size != sum(sizes):
            raise ValueError(f"expected flat length {sum(sizes)}, got {vec.size}")
        a, b, c = np.cumsum(sizes)[:3]
        return cls(vec[:a], vec[a:b].reshape(n_traj, nb, state_dim),
                   vec[b:c].reshape(n_traj, nb), vec[c:])

    @staticmethod
    def flat_size(n_params: int, n_traj: int, n_windows: int, state_dim: int = 4) -> int:
        nb = n_windows - 1
        return 2 * n_params + n_traj * nb * (state_dim + 1)


# -- elementary densities and constraints ----------------------------------------

def step_log_likelihood(o_real, o_sim, sigma_obs) -> Any:
    """Gaussian log-density of one observation vector."""
    if len(o_real) != len(o_sim):
        raise ValueError("observation dimensions differ")
    sig = np.broadcast_to(np.asarray(sigma_obs, dtype=float), (len(o_real),))
    total = 0.0
    for r, s, sd in zip(o_real, o_sim, sig):
        z = (r - s) / sd
        total = total + (-0.5 * (z * z) - 0.5 * math.log(2 * math.pi * sd * sd))
    return total


def defect_log_likelihood(s_shoot, s_sim, sigma_def: float) -> Any:
    """Gaussian log-density of a shooting variable around the simulated state."""
    if len(s_shoot) != len(s_sim):
        raise ValueError("state dimensions differ")
    total = 0.0
    const = -0.5 * math.log(2 * math.pi * sigma_def * sigma_def)
    for a, b in zip(s_shoot, s_sim):
        z = (a - b) / sigma_def
        total = total + (-0.5 * (z * z) + const)
    return total


def g_lim(theta, limits: ParamLimits) -> list:
    """``clamp(theta) - theta``; zero iff inside the limits."""
    return [ad.clamp(t, lo, hi) - t for t, lo, hi in zip(theta, limits.min, limits.max)]


def g_def(shooting_states, simulated_states, sigma_def: float) -> list:
    """Scaled squared defect ``||s_shoot - s_sim||^2 / sigma_def^2`` per boundary."""
    out = []
    for s, e in zip(shooting_states, simulated_states):
        sq = 0.0
        for a, b in zip(s, e):
            d = a - b
            sq = sq + d * d
        out.append(sq / (sigma_def * sigma_def))
    return out


def uniform_log_prior(theta, limits: ParamLimits) -> float:
    th = np.asarray([ad.value(t) for t in theta], dtype=float)
    if np.any(th < limits.min) or np.any(th > limits.max):
        return -math.inf
    return -float(np.sum(np.log(limits.width)))


def normalize(w, variance):
    """Divide each dimension by its variance."""
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0):
        raise ValueError("variances must be positive")
    if isinstance(w, np.ndarray):
        return w / variance
    return [x / v for x, v in zip(w, variance)]


def denormalize(w, variance):
    variance = np.asarray(variance, dtype=float)
    if isinstance(w, np.ndarray):
        return w * variance
    return [x * v for x, v in zip(w, variance)]


def logsumexp(values) -> Any:
    """Max-shifted log-sum-exp over a list of scalars (duals allowed)."""
    vals = np.array([float(ad.value(v)) for v in values])
    if np.all(vals == -np.inf):
        return -math.inf
    shift = float(np.max(vals))
    acc = 0.0
    for v in values:
        acc = acc + ad.exp(v - shift)
    return ad.log(acc) + shift


def observation_variance(trajectories: TrajectorySet | Sequence[Trajectory]) -> np.ndarray:
    obs = np.concatenate([t.observations for t in trajectories], axis=0)
    var = obs.var(axis=0)
    return np.where(var > 1e-12, var, 1.0)


def window_bounds(T: int, config: LikelihoodConfig) -> list[tuple[int, int]]:
    """Observation index ranges of the shooting windows.

    Equal windows of ``floor(T / n_s)`` steps; the last absorbs the remainder.
    """
    n_s = config.num_windows
    h = config.window_length or T // n_s
    if h < 1 or n_s * h > T:
        raise ValueError(f"{n_s} windows of {h} steps do not fit into {T} observations")
    bounds = [(w * h, (w + 1) * h) for w in range(n_s)]
    bounds[-1] = (bounds[-1][0], T)
    return bounds


def _resolved_variance(config: LikelihoodConfig, trajectories) -> np.ndarray:
    if config.normalization is not None:
        return np.asarray(config.normalization, dtype=float)
    return observation_variance(trajectories)


def _state_variance(obs_var: np.ndarray, observed: Sequence[int]) -> np.ndarray:
    var = np.ones(4)
    var[list(observed)] = obs_var
    return var


# -- scalar (single-particle) likelihoods -------------------------------------------

def _window_ll(model, theta, start, real, var, sigma_obs):
    m = physical(apply_params(model, theta))
    x = tuple(start)
    total = 0.0
    for t in range(real.shape[0]):
        x = step(m, x, check=False)
        sim = normalize(observe(x, model.observed), var)
        total = total + step_log_likelihood(list(normalize(real[t], var)), sim, sigma_obs)
    return total, x


def _diverged(value) -> bool:
    return not math.isfinite(float(ad.value(value)))


def single_shooting_ll(traj: Trajectory, theta, model: PendulumModel,
                       config: LikelihoodConfig, variance=None) -> Any:
    """Log-likelihood of ``traj`` under one rollout from its start state."""
    return multiple_shooting_ll(traj, theta, model, replace(config, num_windows=1,
                                                            window_length=None),
                                variance=variance)[0]


def multiple_shooting_ll(traj: Trajectory, theta, model: PendulumModel,
                         config: LikelihoodConfig, shooting_states=None,
                         variance=None) -> tuple[Any, list]:
    """Windowed log-likelihood and per-boundary squared defect norms.

    ``theta`` may be an :class:`AugmentedParams` (shooting states taken from
    its first trajectory slot) or a plain parameter sequence together with
    ``shooting_states`` of shape ``(n_s - 1, 4)``. Defects are squared
    Euclidean norms in normalized state units. Defect log-densities are not
    included; add them with :func:`defect_log_likelihood` where needed.
    """
    if isinstance(theta, AugmentedParams):
        shooting_states = theta.shooting_states[0]
        theta = list(theta.theta)
    var = np.asarray(variance if variance is not None else _resolved_variance(config, [traj]))
    svar = _state_variance(var, model.observed)
    bounds = window_bounds(len(traj), config)
    if len(bounds) > 1 and (shooting_states is None or len(shooting_states) != len(bounds) - 1):
        raise ValueError(f"need {len(bounds) - 1} shooting states")
    starts = [tuple(traj.start_state.as_array())]
    if len(bounds) > 1:
        starts += [tuple(s) for s in shooting_states]
    total = 0.0
    defects = []
    prev_end = None
    with np.errstate(all="ignore"):
        for w, (a, b) in enumerate(bounds):
            ll, end = _window_ll(model, theta, starts[w], traj.observations[a:b], var,
                                 config.sigma_obs)
            if prev_end is not None:
                d = normalize([s - e for s, e in zip(starts[w], prev_end)], svar)
                sq = 0.0
                for c in d:
                    sq = sq + c * c
                defects.append(sq)
            total = total + ll
            prev_end = end
            if any(abs(float(ad.value(c))) > MAX_JOINT_SPEED for c in end[2:]):
                return DIVERGED_LOGLIK, defects
    if _diverged(total):
        return DIVERGED_LOGLIK, defects
    return total, defects


def set_log_likelihood(trajectories: TrajectorySet | Sequence[Trajectory], theta,
                       model: PendulumModel, config: LikelihoodConfig,
                       shooting_states=None) -> Any:
    """Combine per-trajectory log-likelihoods by mixture (sum) or product.

    The mixture includes the uniform weight ``1/K``. ``shooting_states`` has
    shape ``(K, n_s - 1, 4)`` when ``config.num_windows > 1``.
    """
    trajs = list(trajectories)
    if not trajs:
        raise ValueError("empty trajectory set")
    if isinstance(theta, AugmentedParams):
        shooting_states = theta.shooting_states
        theta = list(theta.theta)
    var = _resolved_variance(config, trajs)
    lls = []
    for k, tr in enumerate(trajs):
        ss = None if shooting_states is None else shooting_states[k]
        ss = None if ss is not None and len(ss) == 0 else ss
        lls.append(multiple_shooting_ll(tr, theta, model, config, ss, variance=var)[0])
    if config.combination == "product":
        total = 0.0
        for v in lls:
            total = total + v
        return total
    return logsumexp(lls) - math.log(len(lls))


# -- batched evaluation ----------------------------------------------------------------

@dataclass
class Evaluation:
    """Batched results for ``N`` particles over ``K`` trajectories.

    Gradient fields are ``None`` when evaluated without derivatives. Defect
    arrays have a boundary axis of length ``n_s - 1``.
    """

    log_obs: np.ndarray                 # (N,) combined set log-likelihood
    per_traj: np.ndarray                # (N, K)
    defect_sq: np.ndarray               # (N, K, B) squared normalized defect norms
    diverged: np.ndarray                # (N,) any trajectory diverged
    d_theta: np.ndarray | None = None   # (N, M)
    d_shoot: np.ndarray | None = None   # (N, K, B, 4)
    dsq_theta: np.ndarray | None = None  # (N, K, B, M)
    dsq_self: np.ndarray | None = None   # (N, K, B, 4) wrt the boundary's own shooting state
    dsq_prev: np.ndarray | None = None   # (N, K, B, 4) wrt the previous window's start state

    @property
    def defect_norm(self) -> np.ndarray:
        return np.sqrt(self.defect_sq)


@dataclass
class ShootingProblem:
    """Batched likelihood of a trajectory set for a fixed model and config."""

    model: PendulumModel
    trajectories: TrajectorySet
    config: LikelihoodConfig = field(default_factory=LikelihoodConfig)

    def __post_init__(self):
        if not isinstance(self.trajectories, TrajectorySet):
            self.trajectories = TrajectorySet(list(self.trajectories))
        self.variance = _resolved_variance(self.config, self.trajectories)
        self.state_variance = _state_variance(self.variance, self.model.observed)
        self.sigma_obs = np.broadcast_to(np.asarray(self.config.sigma_obs, dtype=float),
                                         (self.trajectories.obs_dim,)).copy()
        self.limits = ParamLimits.from_model(self.model)
        self.bounds = [window_bounds(len(t), self.config) for t in self.trajectories]
        # trajectories with identical window layouts are rolled out together
        groups: dict[tuple, list[int]] = {}
        for k, b in enumerate(self.bounds):
            groups.setdefault(tuple(b), []).append(k)
        self._groups = list(groups.items())

    # -- sizes ---------------------------------------------------------------
    @property
    def n_params(self) -> int:
        return self.model.n_params

    @property
    def n_traj(self) -> int:
        return len(self.trajectories)

    @property
    def n_windows(self) -> int:
        return self.config.num_windows

    @property
    def n_boundaries(self) -> int:
        return self.config.num_windows - 1

    # -- parameter scaling ------------------------------------------------------
    def to_unit(self, theta: np.ndarray) -> np.ndarray:
        return (np.asarray(theta) - self.limits.min) / self.limits.width

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return self.limits.min + np.asarray(u) * self.limits.width

    def initial_shooting_states(self, theta: np.ndarray | None = None) -> np.ndarray:
        """Shooting variables at window boundaries, shape ``(K, n_s - 1, 4)``.

        Taken from the observed states when the full state is observed,
        otherwise from a rollout at ``theta`` (default: centre of the limits).
        """
        B = self.n_boundaries
        out = np.zeros((self.n_traj, B, 4))
        full = tuple(self.model.observed) == (0, 1, 2, 3)
        if B == 0:
            return out
        if theta is None:
            theta = 0.5 * (self.limits.min + self.limits.max)
        for k, tr in enumerate(self.trajectories):
            starts = [a for a, _ in self.bounds[k][1:]]
            if full:
                out[k] = tr.observations[[a - 1 for a in starts]]
            else:
                m = physical(apply_params(self.model, list(theta)))
                x = tuple(tr.start_state.as_array())
                with np.errstate(all="ignore"):
                    states = [x := step(m, x, check=False) for _ in range(starts[-1])]
                out[k] = np.array([states[a - 1] for a in starts], dtype=float)
                obs = np.asarray(self.model.observed)
                out[k][:, obs] = tr.observations[[a - 1 for a in starts]]
        return out

    # -- evaluation ---------------------------------------------------------------
    def evaluate(self, theta: np.ndarray, shooting: np.ndarray | None = None,
                 with_grad: bool = True) -> Evaluation:
        """Evaluate all particles. ``theta`` is ``(N, M)`` in physical units."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        N, M = theta.shape
        if M != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {M}")
        K, B = self.n_traj, self.n_boundaries
        if B and shooting is None:
            shooting = np.broadcast_to(self.initial_shooting_states(), (N, K, B, 4))
        per_traj = np.zeros((N, K))
        defect_sq = np.zeros((N, K, B))
        div = np.zeros((N, K), dtype=bool)
        if with_grad:
            d_ll_theta = np.zeros((N, K, M))
            d_shoot = np.zeros((N, K, B, 4))
            dsq_theta = np.zeros((N, K, B, M))
            dsq_self = np.zeros((N, K, B, 4))
            dsq_prev = np.zeros((N, K, B, 4))
        with np.errstate(all="ignore"):
            for bounds, idx in self._groups:
                res = self._evaluate_group(theta, None if not B else shooting[:, idx],
                                           idx, list(bounds), with_grad)
                per_traj[:, idx] = res["ll"]
                defect_sq[:, idx] = res["dsq"]
                div[:, idx] = res["div"]
                if with_grad:
                    d_ll_theta[:, idx] = res["ll_theta"]
                    d_shoot[:, idx] = res["ll_shoot"]
                    dsq_theta[:, idx] = res["dsq_theta"]
                    dsq_self[:, idx] = res["dsq_self"]
                    dsq_prev[:, idx] = res["dsq_prev"]

        per_traj = np.where(div, DIVERGED_LOGLIK, per_traj)
        if self.config.combination == "product":
            log_obs = per_traj.sum(axis=1)
            weights = np.ones((N, K))
        else:
            top = per_traj.max(axis=1, keepdims=True)
            e = np.exp(per_traj - top)
            s = e.sum(axis=1, keepdims=True)
            log_obs = (np.log(s) + top)[:, 0] - math.log(K)
            weights = e / s
        ev = Evaluation(log_obs, per_traj, defect_sq, div.any(axis=1))
        if with_grad:
            ok = ~div
            w = np.where(ok, weights, 0.0)
            ev.d_theta = np.einsum("nk,nkm->nm", w, np.where(ok[..., None], d_ll_theta, 0.0))
            ev.d_shoot = np.where(ok[..., None, None], d_shoot * w[..., None, None], 0.0)
            okb = ok[..., None, None]
            ev.dsq_theta = np.where(okb, dsq_theta, 0.0)
            ev.dsq_self = np.where(okb, dsq_self, 0.0)
            ev.dsq_prev = np.where(okb, dsq_prev, 0.0)
            ev.defect_sq = np.where(ok[..., None], defect_sq, 0.0)
        return ev

    def _evaluate_group(self, theta, shooting, idx, bounds, with_grad):
        N, M = theta.shape
        Kg = len(idx)
        W = len(bounds)
        h = bounds[0][1] - bounds[0][0]
        trajs = [self.trajectories[k] for k in idx]
        P = M + 4
        var = self.variance
        svar = self.state_variance
        sig = self.sigma_obs
        inv_scale = 1.0 / (var * sig)  # residual scaling per observation dim
        const = -0.5 * np.sum(np.log(2 * math.pi * sig * sig))

        # start states: (4, N, Kg, W)
        x0 = np.array([t.start_state.as_array() for t in trajs])  # (Kg, 4)
        starts = np.empty((4, N, Kg, W))
        starts[:, :, :, 0] = x0.T[:, None, :]
        if W > 1:
            starts[:, :, :, 1:] = np.moveaxis(shooting, -1, 0)
        # reference observations: real[j] -> (D, 1, Kg, W) for window-local step j
        real = np.stack([t.observations for t in trajs])  # (Kg, T, D)

        if with_grad:
            th = ad.seed(theta.T.reshape(M, N, 1, 1), P, 0)
            x = tuple(ad.seed(starts, P, M))
        else:
            th = list(theta.T.reshape(M, N, 1, 1))
            x = tuple(starts)
        model = physical(apply_params(self.model, th))
        observed = self.model.observed

        div = np.zeros((N, Kg), dtype=bool)
        window_starts = np.array([a for a, _ in bounds])
        acc = 0.0

        def advance(x, acc, real_slice):
            x = step(model, x, check=False)
            v2, v3 = ad.value(x[2]), ad.value(x[3])
            bad = ~(np.abs(v2) <= MAX_JOINT_SPEED) | ~(np.abs(v3) <= MAX_JOINT_SPEED)
            for d, i in enumerate(observed):
                r = (real_slice[d] - x[i]) * inv_scale[d]
                acc = acc + r * r
            return x, acc, bad

        for j in range(h):
            rs = np.moveaxis(real[:, window_starts + j, :], -1, 0)[:, None]  # (D,1,Kg,W)
            x, acc, bad = advance(x, acc, rs)
            div |= bad.any(axis=-1)
        ends = x
        steps = np.full(W, h)
        tail = bounds[-1][1] - bounds[-1][0] - h
        if tail:
            xl = tuple(c[..., W - 1:] for c in x)
            acc_l = 0.0
            for j in range(tail):
                rs = np.moveaxis(real[:, [bounds[-1][0] + h + j], :], -1, 0)[:, None]
                xl, acc_l, bad = advance(xl, acc_l, rs)
                div |= bad.any(axis=-1)
            steps[-1] += tail
        # per-window log-likelihood: -0.5 * sum r^2 + steps * const
        ll_val = -0.5 * ad.value(acc) + h * const
        ll_w = np.broadcast_to(ll_val, (N, Kg, W)).copy()
        if tail:
            ll_w[..., -1] += -0.5 * ad.value(acc_l)[..., 0] + tail * const
        ll = ll_w.sum(axis=-1)

        # defects between consecutive windows: (4, N, Kg, W-1)
        out = {"div": div | ~np.isfinite(ll)}
        if W > 1:
            e_val = np.stack([np.broadcast_to(ad.value(c), (N, Kg, W))[..., :-1] for c in ends])
            d = (starts[:, :, :, 1:] - e_val) / svar[:, None, None, None]
            out["dsq"] = np.sum(d * d, axis=0)
        else:
            out["dsq"] = np.zeros((N, Kg, 0))
        out["ll"] = ll
        if not with_grad:
            return out

        dacc = -0.5 * ad.derivative(acc, P, (N, Kg, W))  # (P, N, Kg, W)
        ll_theta = dacc[:M].sum(axis=-1)                  # (M, N, Kg)
        ll_start = dacc[M:].copy()                         # (4, N, Kg, W)
        if tail:
            dl = -0.5 * ad.derivative(acc_l, P, (N, Kg, 1))[..., 0]
            ll_theta += dl[:M]
            ll_start[..., -1] += dl[M:]
        out["ll_theta"] = np.moveaxis(ll_theta, 0, -1)
        out["ll_shoot"] = np.moveaxis(ll_start[..., 1:], 0, -1)  # (N, Kg, W-1, 4)
        if W > 1:
            de = np.stack([ad.derivative(c, P, (N, Kg, W))[..., :-1] for c in ends])  # (4,P,N,Kg,B)
            wgt = 2.0 * d / svar[:, None, None, None]                          # (4,N,Kg,B)
            out["dsq_self"] = np.moveaxis(wgt, 0, -1)
            g = -np.einsum("inkb,ipnkb->pnkb", wgt, de)
            out["dsq_theta"] = np.moveaxis(g[:M], 0, -1)
            prev = np.moveaxis(g[M:], 0, -1)
            prev[:, :, 0, :] = 0.0  # first window starts at the fixed recorded state
            out["dsq_prev"] = prev
        else:
            out["dsq_self"] = np.zeros((N, Kg, 0, 4))
            out["dsq_theta"] = np.zeros((N, Kg, 0, M))
            out["dsq_prev"] = np.zeros((N, Kg, 0, 4))
        return out

    # -- derived quantities ---------------------------------------------------------
    def defect_log_density(self, ev: Evaluation) -> np.ndarray:
        """Sum of Gaussian defect log-densities per particle, ``(N,)``."""
        s2 = self.config.sigma_def ** 2
        const = -0.5 * 4 * math.log(2 * math.pi * s2)
        return np.sum(-0.5 * ev.defect_sq / s2 + const, axis=(1, 2))

    def g_def(self, ev: Evaluation) -> np.ndarray:
        return ev.defect_sq / self.config.sigma_def ** 2
