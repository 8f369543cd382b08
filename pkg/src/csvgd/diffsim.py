"""Planar two-link pendulum with closed-form dynamics.

Conventions: joint angles are zero when a link hangs straight down (gravity
along -y). ``q[0]`` is the absolute angle of link 1, ``q[1]`` the angle of
link 2 relative to link 1. A link's frame has its x axis pointing from its
joint towards the next joint, so a point mass at the far end of a link sits
at ``com_x = length, com_y = 0``.

Every function here is written against :mod:`csvgd.autodiff`, so states and
parameters may be floats, ndarrays (batched), or duals.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad

LINK_FIELDS = ("mass", "inertia", "com_x", "com_y", "length", "friction")

# lower bounds used when a parameter overlay is pushed outside physical ranges
_PHYSICAL_FLOOR = {"mass": 1e-6, "inertia": 1e-9, "length": 1e-6, "friction": 0.0}

MAX_JOINT_SPEED = 1e6
MAX_CONDITION = 1e12


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, message: str = "rollout diverged"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class SingularMassMatrixError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LinkParams:
    mass: Any = 1.0
    inertia: Any = 1e-3
    com_x: Any = 1.0
    com_y: Any = 0.0
    length: Any = 1.0
    friction: Any = 0.0

    def __post_init__(self):
        # only plain numbers are validated; duals/batches come from apply_params
        if all(isinstance(getattr(self, f), (int, float)) for f in LINK_FIELDS):
            if self.mass <= 0 or self.inertia <= 0 or self.length <= 0:
                raise ValueError(f"non-physical link parameters: {self}")
            if self.friction < 0:
                raise ValueError("joint friction must be non-negative")


@dataclass(frozen=True)
class ParamSpec:
    link: int
    name: str
    min: float
    max: float

    def __post_init__(self):
        if self.link not in (0, 1):
            raise ValueError(f"link index must be 0 or 1, got {self.link}")
        if self.name not in LINK_FIELDS:
            raise ValueError(f"unknown link field {self.name!r}")
        if not self.min < self.max:
            raise ValueError(f"empty range for {self.label}: [{self.min}, {self.max}]")

    @property
    def label(self) -> str:
        return f"link{self.link}.{self.name}"


@dataclass(frozen=True)
class PendulumModel:
    links: tuple[LinkParams, LinkParams] = (LinkParams(), LinkParams())
    gravity: float = 9.81
    dt: float = 0.01
    param_spec: tuple[ParamSpec, ...] = ()
    # observation selector: indices into [q0, q1, qd0, qd1]
    observed: tuple[int, ...] = (0, 1, 2, 3)
    # measure com_x from the far end of each link instead of from its joint,
    # so a change of length carries the mass with it
    com_at_tip: bool = False

    def __post_init__(self):
        if len(self.links) != 2:
            raise ValueError("the pendulum has exactly two links")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "param_spec", tuple(self.param_spec))
        if not self.observed or any(i not in range(4) for i in self.observed):
            raise ValueError(f"bad observation selector {self.observed}")

    @property
    def n_params(self) -> int:
        return len(self.param_spec)

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.min for p in self.param_spec], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.max for p in self.param_spec], dtype=float)

    def read_params(self) -> np.ndarray:
        """Current values of the estimable fields, in ``param_spec`` order."""
        return np.array([float(getattr(self.links[p.link], p.name))
                         for p in self.param_spec])


@dataclass(frozen=True)
class State:
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(2)
        qd = np.asarray(self.qd, dtype=float).reshape(2)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise ValueError("state must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qd", qd)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd])

    @classmethod
    def from_array(cls, x) -> "State":
        x = np.asarray(x, dtype=float)
        return cls(x[:2], x[2:4])


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim), states after steps 1..T
    dt: float
    start_state: State
    observed: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        if self.observations.shape[0] < 1:
            raise ValueError("a trajectory needs at least one observation")
        if self.observations.shape[1] != len(self.observed):
            raise ValueError("observation width does not match the selector")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def __len__(self) -> int:
        return self.observations.shape[0]


@dataclass
class TrajectorySet:
    trajectories: list[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        self.trajectories = list(self.trajectories)
        if not self.trajectories:
            raise ValueError("trajectory set is empty")
        widths = {t.observations.shape[1] for t in self.trajectories}
        if len(widths) != 1:
            raise ValueError(f"inconsistent observation dimensions {sorted(widths)}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].observations.shape[1]


def apply_params(model: PendulumModel, theta: Sequence[Any]) -> PendulumModel:
    """Substitute ``theta`` into the fields named by ``model.param_spec``."""
    if len(theta) != len(model.param_spec):
        raise ValueError(f"expected {len(model.param_spec)} parameters, got {len(theta)}")
    if not model.param_spec:
        return model
    updates: list[dict[str, Any]] = [{}, {}]
    for spec, val in zip(model.param_spec, theta):
        updates[spec.link][spec.name] = val
    links = tuple(dataclasses.replace(link, **upd) if upd else link
                  for link, upd in zip(model.links, updates))
    return dataclasses.replace(model, links=links)


def physical(model: PendulumModel) -> PendulumModel:
    """Clamp link fields to physically admissible values."""
    links = []
    for link in model.links:
        upd = {}
        for name, floor in _PHYSICAL_FLOOR.items():
            v = getattr(link, name)
            if np.any(ad.value(v) < floor):
                upd[name] = ad.clamp(v, floor, np.inf)
        links.append(dataclasses.replace(link, **upd) if upd else link)
    return dataclasses.replace(model, links=tuple(links))


def forward_dynamics(model: PendulumModel, q, qd, tau=(0.0, 0.0), check: bool = True):
    """Joint accelerations of the planar chain.

    Solves ``M(q) qdd = tau - h(q, qd) - G(q) - friction * qd`` by a closed
    2x2 inverse. ``q`` and ``qd`` are pairs of scalars (floats, arrays or
    duals); the link parameters of ``model`` may be duals as well.
    """
    l1, l2 = model.links
    g = model.gravity
    q1, q2 = q
    w1, w2 = qd
    m1, m2 = l1.mass, l2.mass
    a1, b1, a2, b2 = _com(model)
    L1 = l1.length

    s1, c1 = ad.sin(q1), ad.cos(q1)
    s2, c2 = ad.sin(q2), ad.cos(q2)
    phi2 = q1 + q2
    s12, c12 = ad.sin(phi2), ad.cos(phi2)

    A = m1 * (a1 * a1 + b1 * b1) + l1.inertia + m2 * (L1 * L1)
    B = m2 * (a2 * a2 + b2 * b2) + l2.inertia
    mL = m2 * L1
    C = mL * (a2 * c2 - b2 * s2)
    D = -mL * (a2 * s2 + b2 * c2)

    M11 = A + B + 2.0 * C
    M12 = B + C
    M22 = B

    dV2 = (g * m2) * (a2 * s12 + b2 * c12)
    dV1 = g * (m1 * (a1 * s1 + b1 * c1) + mL * s1)

    r1 = tau[0] - (D * w2) * (2.0 * w1 + w2) - (dV1 + dV2) - l1.friction * w1
    r2 = tau[1] + (D * w1) * w1 - dV2 - l2.friction * w2

    det = M11 * M22 - M12 * M12
    if check:
        _check_conditioning(ad.value(M11), ad.value(M12), ad.value(M22))
    qdd1 = (M22 * r1 - M12 * r2) / det
    qdd2 = (M11 * r2 - M12 * r1) / det
    return qdd1, qdd2


def _com(model: PendulumModel):
    l1, l2 = model.links
    if model.com_at_tip:
        return l1.com_x + l1.length, l1.com_y, l2.com_x + l2.length, l2.com_y
    return l1.com_x, l1.com_y, l2.com_x, l2.com_y


def _check_conditioning(m11, m12, m22) -> None:
    tr = m11 + m22
    disc = np.sqrt(np.maximum((m11 - m22) ** 2 + 4 * m12 * m12, 0.0))
    lo, hi = 0.5 * (tr - disc), 0.5 * (tr + disc)
    bad = ~(lo > 0) | (hi > MAX_CONDITION * np.maximum(lo, 1e-300))
    if np.any(bad):
        raise SingularMassMatrixError("mass matrix is singular or badly conditioned")


def step(model: PendulumModel, x, t: float = 0.0, tau=(0.0, 0.0), check: bool = True):
    """Semi-implicit Euler: velocity first, then position with the new velocity.

    ``x`` is the 4-tuple ``(q0, q1, qd0, qd1)``; ``t`` is reserved for
    time-dependent inputs.
    """
    q1, q2, w1, w2 = x
    a1, a2 = forward_dynamics(model, (q1, q2), (w1, w2), tau, check=check)
    dt = model.dt
    w1 = w1 + a1 * dt
    w2 = w2 + a2 * dt
    return (q1 + w1 * dt, q2 + w2 * dt, w1, w2)


def observe(x, observed: Sequence[int] = (0, 1, 2, 3)) -> list:
    return [x[i] for i in observed]


def unobserve(obs, observed: Sequence[int] = (0, 1, 2, 3), fill=None) -> list:
    """Inverse of :func:`observe`; unobserved slots come from ``fill``."""
    out = list(fill) if fill is not None else [0.0] * 4
    for i, o in zip(observed, obs):
        out[i] = o
    return out


def simulate(model: PendulumModel, x0, T: int, check: bool = True) -> list[tuple]:
    """Raw state sequence x_1..x_T (no observation mapping, no divergence guard)."""
    states = []
    x = tuple(x0)
    for t in range(T):
        x = step(model, x, t * model.dt, check=check)
        states.append(x)
    return states


def rollout(model: PendulumModel, theta: Sequence[Any], x0, T: int):
    """Roll out ``T`` steps at parameters ``theta`` from ``x0``.

    ``x0`` is a :class:`State` or 4-sequence. Returns the list of observation
    vectors (length ``T``). Generic over duals. Raises
    :class:`DivergenceError` with the offending step if any joint speed
    exceeds ``MAX_JOINT_SPEED`` or becomes non-finite.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    m = apply_params(model, theta)
    x = tuple(x0.as_array()) if isinstance(x0, State) else tuple(x0)
    out = []
    with np.errstate(all="ignore"):
        for t in range(T):
            x = step(m, x, t * model.dt)
            speed = np.maximum(np.abs(ad.value(x[2])), np.abs(ad.value(x[3])))
            if not np.all(speed <= MAX_JOINT_SPEED) or not all(
                    np.all(np.isfinite(ad.value(c))) for c in x):
                raise DivergenceError(t + 1)
            out.append(observe(x, model.observed))
    return out


def rollout_array(model: PendulumModel, theta, x0, T: int) -> np.ndarray:
    """Value-only rollout as a ``(T, obs_dim)`` array."""
    return np.array([[float(v) for v in o]
                     for o in rollout(model, list(np.asarray(theta, float)), x0, T)])


def make_trajectory(model: PendulumModel, theta, x0: State, T: int) -> Trajectory:
    return Trajectory(rollout_array(model, theta, x0, T), model.dt, x0, model.observed)


def energy(model: PendulumModel, x) -> Any:
    """Total mechanical energy, with zero potential at the hanging-down pose."""
    l1, l2 = model.links
    q1, q2, w1, w2 = x
    a1, b1, a2, b2 = _com(model)
    L1 = l1.length
    phi2 = q1 + q2
    W2 = w1 + w2
    A = l1.mass * (a1 * a1 + b1 * b1) + l1.inertia + l2.mass * L1 * L1
    B = l2.mass * (a2 * a2 + b2 * b2) + l2.inertia
    C = l2.mass * L1 * (a2 * ad.cos(q2) - b2 * ad.sin(q2))
    kinetic = 0.5 * (A * w1 * w1 + B * W2 * W2) + C * w1 * W2
    # heights of the two COMs, minus their values at q = 0
    y1 = -a1 * ad.cos(q1) + b1 * ad.sin(q1) + a1
    y2 = (-L1 * ad.cos(q1) - a2 * ad.cos(phi2) + b2 * ad.sin(phi2)) + (L1 + a2)
    potential = model.gravity * (l1.mass * y1 + l2.mass * y2)
    return kinetic + potential
