"""Closed-form densities for exercising the estimators."""

from __future__ import annotations

import numpy as np


class GaussianTarget:
    def __init__(self, mean, cov, lower=None, upper=None):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.prec = np.linalg.inv(self.cov)
        self.dim = self.mean.size
        self.lower = np.full(self.dim, -np.inf) if lower is None else np.asarray(lower, float)
        self.upper = np.full(self.dim, np.inf) if upper is None else np.asarray(upper, float)

    def log_prob(self, x):
        d = np.atleast_2d(x) - self.mean
        lp = -0.5 * np.einsum("ni,ij,nj->n", d, self.prec, d)
        inside = np.all((np.atleast_2d(x) >= self.lower) & (np.atleast_2d(x) <= self.upper), axis=1)
        return np.where(inside, lp, -np.inf)

    def log_prob_and_grad(self, x):
        d = np.atleast_2d(x) - self.mean
        return self.log_prob(x), -d @ self.prec


class UniformTarget:
    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.dim = self.lower.size

    def log_prob(self, x):
        x = np.atleast_2d(x)
        inside = np.all((x >= self.lower) & (x <= self.upper), axis=1)
        return np.where(inside, 0.0, -np.inf)

    def log_prob_and_grad(self, x):
        return self.log_prob(x), np.zeros_like(np.atleast_2d(x))


class ConstantTarget(UniformTarget):
    """Flat log-density that ignores the box (for mechanics checks)."""

    def log_prob(self, x):
        return np.zeros(np.atleast_2d(x).shape[0])
