"""Forward-mode dual numbers with batched values.

A :class:`Dual` carries a value (a float or an ndarray of any batch shape) and
a derivative payload of shape ``(n_seeds,) + batch_shape``. Keeping the seed
axis in front lets every elementwise numpy operation broadcast the value
against the payload without reshaping, which is what makes rolling out many
particles at once cheap.

All simulator and likelihood code is written against the free functions in
this module (``sin``, ``cos``, ``clamp``, ...), so the same code runs on plain
floats, plain ndarrays, and duals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A traced evaluation produced inf/nan."""

    def __init__(self, op_index: int, op_name: str):
        super().__init__(f"non-finite result at operation #{op_index} ({op_name})")
        self.op_index = op_index
        self.op_name = op_name


class _Trace:
    # Per-call operation counter; only attached to duals created by grad().
    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0


class Dual:
    __slots__ = ("val", "der", "trace")
    __array_priority__ = 1000

    def __init__(self, val, der, trace: _Trace | None = None):
        self.val = val
        self.der = der
        self.trace = trace

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(val, der, trace, name):
        if trace is not None:
            trace.count += 1
            if not (np.all(np.isfinite(val)) and np.all(np.isfinite(der))):
                raise NonFiniteError(trace.count, name)
        return Dual(val, der, trace)

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.val)

    @property
    def n_seeds(self) -> int:
        return self.der.shape[0]

    def __repr__(self) -> str:
        return f"Dual({self.val!r}, der={self.der!r})"

    def __float__(self) -> float:
        return float(self.val)

    # -- arithmetic -----------------------------------------------------------
    def __neg__(self):
        return Dual._make(-self.val, -self.der, self.trace, "neg")

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual._make(self.val + other.val, self.der + other.der,
                              self.trace or other.trace, "add")
        return Dual._make(self.val + other, self.der, self.trace, "add")

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual._make(self.val - other.val, self.der - other.der,
                              self.trace or other.trace, "sub")
        return Dual._make(self.val - other, self.der, self.trace, "sub")

    def __rsub__(self, other):
        return Dual._make(other - self.val, -self.der, self.trace, "sub")

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual._make(self.val * other.val,
                              self.der * other.val + other.der * self.val,
                              self.trace or other.trace, "mul")
        return Dual._make(self.val * other, self.der * other, self.trace, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            _check_nonzero(other.val)
            val = self.val / other.val
            return Dual._make(val, (self.der - other.der * val) / other.val,
                              self.trace or other.trace, "div")
        _check_nonzero(other)
        return Dual._make(self.val / other, self.der / other, self.trace, "div")

    def __rtruediv__(self, other):
        _check_nonzero(self.val)
        val = other / self.val
        return Dual._make(val, -self.der * (val / self.val), self.trace, "div")

    def __pow__(self, p):
        if isinstance(p, Dual):
            return exp(p * log(self))
        if p == 2:
            return Dual._make(self.val * self.val, self.der * (2.0 * self.val),
                              self.trace, "pow")
        return Dual._make(self.val ** p, self.der * (p * self.val ** (p - 1)),
                          self.trace, "pow")

    # comparisons act on values only
    def __lt__(self, other):
        return self.val < value(other)

    def __le__(self, other):
        return self.val <= value(other)

    def __gt__(self, other):
        return self.val > value(other)

    def __ge__(self, other):
        return self.val >= value(other)

    # -- indexing over the batch axes ------------------------------------------
    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.val[idx], self.der[(slice(None),) + idx], self.trace)


def _check_nonzero(x) -> None:
    if np.any(np.asarray(x) == 0):
        raise ZeroDivisionError("division by zero in differentiable expression")


# -- elementary functions ------------------------------------------------------

def value(x):
    """Strip derivative information."""
    return x.val if isinstance(x, Dual) else x


def sin(x):
    if isinstance(x, Dual):
        return Dual._make(np.sin(x.val), x.der * np.cos(x.val), x.trace, "sin")
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual._make(np.cos(x.val), -x.der * np.sin(x.val), x.trace, "cos")
    return np.cos(x)


def exp(x):
    if isinstance(x, Dual):
        e = np.exp(x.val)
        return Dual._make(e, x.der * e, x.trace, "exp")
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual._make(np.log(x.val), x.der / x.val, x.trace, "log")
    return np.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        r = np.sqrt(x.val)
        return Dual._make(r, x.der * (0.5 / r), x.trace, "sqrt")
    return np.sqrt(x)


def tanh(x):
    if isinstance(x, Dual):
        t = np.tanh(x.val)
        return Dual._make(t, x.der * (1.0 - t * t), x.trace, "tanh")
    return np.tanh(x)


def absolute(x):
    """|x| with derivative 0 at the kink."""
    if isinstance(x, Dual):
        return Dual._make(np.abs(x.val), x.der * np.sign(x.val), x.trace, "abs")
    return np.abs(x)


def _select(mask, a, b, name):
    # elementwise where(mask, a, b) for any mix of duals and plain values
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.where(mask, a, b)
    va, vb = value(a), value(b)
    da = a.der if isinstance(a, Dual) else 0.0
    db = b.der if isinstance(b, Dual) else 0.0
    ref = a if isinstance(a, Dual) else b
    der = np.where(mask, da, db)
    if np.ndim(der) == 0 or der.shape[0] != ref.der.shape[0]:
        der = np.broadcast_to(der, (ref.der.shape[0],) + np.shape(der)).copy()
    trace = (a.trace if isinstance(a, Dual) else None) or (
        b.trace if isinstance(b, Dual) else None)
    return Dual._make(np.where(mask, va, vb), der, trace, name)


def minimum(a, b):
    """Elementwise min; ties take the first argument's derivative."""
    return _select(value(a) <= value(b), a, b, "min")


def maximum(a, b):
    """Elementwise max; ties take the first argument's derivative."""
    return _select(value(a) >= value(b), a, b, "max")


def clamp(x, lo, hi):
    """Clip ``x`` to ``[lo, hi]``.

    The derivative is the identity on the closed interval and zero outside.
    """
    if not isinstance(x, Dual):
        return np.clip(x, lo, hi)
    v = x.val
    inside = (v >= lo) & (v <= hi)
    val = np.where(inside, v, np.where(v < lo, lo, hi))
    return Dual._make(val, np.where(inside, x.der, 0.0), x.trace, "clamp")


def seed(values: np.ndarray, n_seeds: int, offset: int = 0) -> list[Dual]:
    """Make one dual per entry of the leading axis of ``values``.

    ``values`` has shape ``(k,) + batch``; entry ``i`` gets a unit derivative
    in seed slot ``offset + i``.
    """
    values = np.asarray(values, dtype=float)
    out = []
    batch = values.shape[1:]
    for i in range(values.shape[0]):
        der = np.zeros((n_seeds,) + batch)
        der[offset + i] = 1.0
        out.append(Dual(values[i], der))
    return out


def derivative(x, n_seeds: int, shape=()) -> np.ndarray:
    """Derivative payload of ``x``; zeros if ``x`` is a plain value."""
    if isinstance(x, Dual):
        d = x.der
        target = (n_seeds,) + tuple(np.broadcast_shapes(np.shape(x.val), shape))
        return d if d.shape == target else np.broadcast_to(d, target)
    return np.zeros((n_seeds,) + tuple(np.broadcast_shapes(np.shape(x), shape)))


# -- gradient API ----------------------------------------------------------------

@dataclass(frozen=True)
class GradResult:
    value: float
    gradient: np.ndarray


def grad(f: Callable[[Sequence[Any]], Any], x) -> GradResult:
    """Value and gradient of a scalar function of ``len(x)`` reals.

    ``f`` receives a list of duals and must return a scalar dual or float.
    Each primitive is checked for finiteness; the first offending operation
    raises :class:`NonFiniteError` carrying its index.
    """
    x = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("grad: non-finite input")
    n = x.size
    trace = _Trace()
    args = []
    for i in range(n):
        der = np.zeros(n)
        der[i] = 1.0
        args.append(Dual(float(x[i]), der, trace))
    with np.errstate(all="ignore"):
        out = f(args)
    if isinstance(out, Dual):
        return GradResult(float(out.val), np.array(out.der, dtype=float).reshape(n))
    out = float(out)
    if not math.isfinite(out):
        raise NonFiniteError(trace.count, "result")
    return GradResult(out, np.zeros(n))


def check_gradient(f: Callable[[Sequence[Any]], Any], x, step: float = 1e-5) -> float:
    """Max relative error between :func:`grad` and central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float).ravel()
    analytic = grad(f, x).gradient
    worst = 0.0
    for i in range(x.size):
        hi, lo = x.copy(), x.copy()
        hi[i] += step
        lo[i] -= step
        numeric = (float(value(f(list(hi)))) - float(value(f(list(lo))))) / (2 * step)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
