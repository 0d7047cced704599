"""Gaussian (Laplace) fits to one- and two-parameter posteriors, and a grid oracle.

Tiny models are stateless objects exposing ``k`` (parameter count),
``log_lik(theta, data)`` vectorised over a trailing parameter axis, and
``grad_log_lik(theta, data)`` for a single point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.special import expit, log_expit

from .model import Batch


class BoundsError(ValueError):
    pass


class OptimizationError(RuntimeError):
    pass


class SaddleError(RuntimeError):
    pass


class TinyModel(Protocol):
    k: int

    def log_lik(self, theta: np.ndarray, data) -> np.ndarray: ...

    def grad_log_lik(self, theta: np.ndarray, data) -> np.ndarray: ...


class GaussianMean:
    """Observations ``x_i ~ N(theta, sigma^2)`` with known ``sigma``."""

    k = 1

    def __init__(self, sigma: float = 1.0):
        self.sigma = sigma

    def log_lik(self, theta, data):
        x = np.asarray(data, dtype=float)
        t = np.asarray(theta)[..., 0]
        # sum_i (x_i - t)^2 expanded so the grid never builds an (n, G) array
        n, s1, s2 = x.size, x.sum(), (x * x).sum()
        return -(s2 - 2 * t * s1 + n * t * t) / (2 * self.sigma ** 2)

    def grad_log_lik(self, theta, data):
        x = np.asarray(data, dtype=float)
        return np.array([(x.sum() - x.size * theta[0]) / self.sigma ** 2])


class BernoulliLogit:
    """0/1 outcomes with success probability ``sigmoid(theta)``."""

    k = 1

    def log_lik(self, theta, data):
        y = np.asarray(data, dtype=float)
        t = np.asarray(theta)[..., 0]
        k, n = y.sum(), y.size
        return k * log_expit(t) + (n - k) * log_expit(-t)

    def grad_log_lik(self, theta, data):
        y = np.asarray(data, dtype=float)
        return np.array([y.sum() - y.size * expit(theta[0])])


class SignMixture:
    """``x_i ~ 0.5 N(theta, 1) + 0.5 N(-theta, 1)``; symmetric, bimodal in theta."""

    k = 1

    def log_lik(self, theta, data):
        x = np.asarray(data, dtype=float)
        t = np.asarray(theta)[..., 0][..., None]
        a = -0.5 * (x - t) ** 2
        b = -0.5 * (x + t) ** 2
        return (np.logaddexp(a, b) - np.log(2.0)).sum(axis=-1)

    def grad_log_lik(self, theta, data):
        x = np.asarray(data, dtype=float)
        t = theta[0]
        w = expit(-0.5 * (x - t) ** 2 + 0.5 * (x + t) ** 2)  # responsibility of +theta
        return np.array([np.sum(w * (x - t) - (1 - w) * (x + t))])


class Logistic2:
    """Logistic regression with intercept and slope on a 1-D input ``Batch``."""

    k = 2

    def log_lik(self, theta, data: Batch):
        x, y = data.inputs[:, 0], data.labels.astype(float)
        theta = np.asarray(theta)
        z = theta[..., 0:1] + theta[..., 1:2] * x
        return (y * log_expit(z) + (1 - y) * log_expit(-z)).sum(axis=-1)

    def grad_log_lik(self, theta, data: Batch):
        x, y = data.inputs[:, 0], data.labels.astype(float)
        r = y - expit(theta[0] + theta[1] * x)
        return np.array([r.sum(), (r * x).sum()])


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    var: np.ndarray  # per-coordinate variances

    @classmethod
    def isotropic(cls, k: int, mean: float = 0.0, var: float = 100.0) -> "GaussianPrior":
        return cls(np.full(k, mean, dtype=float), np.full(k, var, dtype=float))

    def log_pdf(self, theta):
        d = np.asarray(theta) - self.mean
        return -0.5 * np.sum(d * d / self.var, axis=-1) - 0.5 * np.sum(np.log(2 * np.pi * self.var))

    def grad(self, theta):
        return -(np.asarray(theta) - self.mean) / self.var


def default_prior(k: int) -> GaussianPrior:
    return GaussianPrior.isotropic(k, 0.0, 100.0)


def log_posterior(model: TinyModel, data, prior: GaussianPrior | None, theta) -> np.ndarray:
    """Unnormalised log posterior; ``prior=None`` means flat."""
    lp = model.log_lik(theta, data)
    if prior is not None:
        lp = lp + prior.log_pdf(theta)
    return lp


def grad_log_posterior(model: TinyModel, data, prior: GaussianPrior | None, theta) -> np.ndarray:
    g = model.grad_log_lik(np.asarray(theta, dtype=float), data)
    if prior is not None:
        g = g + prior.grad(theta)
    return g


@dataclass
class GridPosterior:
    axes: list[np.ndarray]
    log_density: np.ndarray
    bounds: list[tuple[float, float]]

    @property
    def k(self) -> int:
        return len(self.axes)

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def points(self) -> np.ndarray:
        """Grid as an array of shape ``(G, k)`` or ``(G, G, k)``."""
        if self.k == 1:
            return self.axes[0][:, None]
        a, b = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([a, b], axis=-1)

    def integrate(self, values: np.ndarray) -> float:
        out = values
        for ax in reversed(self.axes):
            out = np.trapezoid(out, ax, axis=-1)
        return float(out)

    def mean(self) -> np.ndarray:
        p, pts = self.density, self.points()
        return np.array([self.integrate(p * pts[..., i]) for i in range(self.k)])

    def cov(self) -> np.ndarray:
        p, pts, m = self.density, self.points(), self.mean()
        C = np.empty((self.k, self.k))
        for i in range(self.k):
            for j in range(self.k):
                C[i, j] = self.integrate(p * (pts[..., i] - m[i]) * (pts[..., j] - m[j]))
        return C


def _log_trapezoid(log_f: np.ndarray, axes) -> float:
    """log of the trapezoid integral of exp(log_f), computed stably."""
    top = log_f.max()
    out = np.exp(log_f - top)
    for ax in reversed(axes):
        out = np.trapezoid(out, ax, axis=-1)
    return float(np.log(out) + top)


def grid_posterior(model: TinyModel, data, prior: GaussianPrior | None,
                   bounds, resolution: int = 401) -> GridPosterior:
    bounds = [tuple(map(float, b)) for b in bounds]
    if len(bounds) != model.k or model.k not in (1, 2):
        raise ValueError("grid posterior supports 1 or 2 parameters, one (lo, hi) pair each")
    if resolution < 201:
        raise ValueError("resolution must be at least 201 points per dimension")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in bounds]
    g = GridPosterior(axes, np.empty(0), bounds)
    lp = log_posterior(model, data, prior, g.points())
    idx = np.unravel_index(np.argmax(lp), lp.shape)
    if any(i in (0, resolution - 1) for i in idx):
        raise BoundsError(f"posterior mode sits on the grid boundary at index {idx}; widen the bounds")
    g.log_density = lp - _log_trapezoid(lp, axes)
    return g


@dataclass
class LaplaceFit:
    mean: np.ndarray
    precision: np.ndarray
    grad_norm: float
    steps: int

    @property
    def k(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        return np.linalg.inv(self.precision)

    def log_pdf(self, theta) -> np.ndarray:
        d = np.asarray(theta) - self.mean
        quad = np.einsum("...i,ij,...j->...", d, self.precision, d)
        _, logdet = np.linalg.slogdet(self.precision)
        return -0.5 * quad + 0.5 * logdet - 0.5 * self.k * np.log(2 * np.pi)


def find_mode(model: TinyModel, data, prior, init, tol: float = 1e-8,
              max_steps: int = 100_000) -> tuple[np.ndarray, float, int]:
    """Gradient ascent with backtracking on the log posterior."""
    theta = np.array(init, dtype=float).reshape(model.k)
    lp = float(log_posterior(model, data, prior, theta))
    g = grad_log_posterior(model, data, prior, theta)
    t = 1.0
    for step in range(max_steps):
        gn = float(np.linalg.norm(g))
        if gn < tol:
            return (*_polish(model, data, prior, theta, g), step)
        t = min(t * 2.0, 1e6)
        while True:
            cand = theta + t * g
            lp_c = float(log_posterior(model, data, prior, cand))
            g_c = grad_log_posterior(model, data, prior, cand)
            gain = lp_c - lp
            noise = 64 * np.finfo(float).eps * max(abs(lp), 1.0)
            # Armijo while lp differences are resolvable, shrinking gradient once they are not
            if (gain > noise and gain >= 1e-4 * t * gn * gn) or \
                    (abs(gain) <= noise and np.linalg.norm(g_c) < gn):
                break
            t *= 0.5
            if t < 1e-300:
                raise OptimizationError("line search collapsed")
        theta, lp, g = cand, lp_c, g_c
    raise OptimizationError(f"no convergence in {max_steps} steps (|grad| = {np.linalg.norm(g):.3e})")


def _polish(model, data, prior, theta, g, rounds: int = 5):
    """A few Newton steps from a converged point, kept only while |grad| shrinks.

    Lands quadratic log posteriors on the exact mode instead of within ``tol``.
    """
    gn = float(np.linalg.norm(g))
    for _ in range(rounds):
        if gn == 0.0:
            break
        H = neg_hessian(model, data, prior, theta)
        if np.linalg.eigvalsh(H).min() <= 0:
            break
        cand = theta + np.linalg.solve(H, g)
        g_c = grad_log_posterior(model, data, prior, cand)
        gn_c = float(np.linalg.norm(g_c))
        if not gn_c < gn:
            break
        theta, g, gn = cand, g_c, gn_c
    return theta, gn


def neg_hessian(model: TinyModel, data, prior, theta, step: float = 1e-5) -> np.ndarray:
    """Central differences of the analytic gradient, symmetrised."""
    k = theta.size
    H = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = step
        H[:, j] = (grad_log_posterior(model, data, prior, theta + e)
                   - grad_log_posterior(model, data, prior, theta - e)) / (2 * step)
    return -(H + H.T) / 2


def fit_laplace(model: TinyModel, data, prior: GaussianPrior | None, init,
                tol: float = 1e-8, max_steps: int = 100_000, step: float = 1e-5) -> LaplaceFit:
    mode, gn, steps = find_mode(model, data, prior, init, tol, max_steps)
    prec = neg_hessian(model, data, prior, mode, step)
    if np.linalg.eigvalsh(prec).min() <= 0:
        raise SaddleError(f"precision at {mode} is not positive definite")
    return LaplaceFit(mode, prec, gn, steps)


def laplace_bounds(fit: LaplaceFit, n_sd: float = 10.0) -> list[tuple[float, float]]:
    sd = np.sqrt(np.diag(fit.cov))
    return [(m - n_sd * s, m + n_sd * s) for m, s in zip(fit.mean, sd)]


def kl_grid_vs_laplace(truth: GridPosterior, fit: LaplaceFit) -> float:
    """KL(grid posterior || Laplace Gaussian) by trapezoid quadrature."""
    lq = fit.log_pdf(truth.points())
    kl = truth.integrate(truth.density * (truth.log_density - lq))
    # exact KL is >= 0; clip quadrature round-off
    return max(kl, 0.0)


def whitened_probe(k: int, radius: float) -> np.ndarray:
    if k == 1:
        return np.linspace(-radius, radius, 41)[:, None]
    r = np.linspace(0.0, radius, 9)[:, None]
    ang = np.linspace(0.0, 2 * np.pi, 32, endpoint=False)[None, :]
    return np.stack([(r * np.cos(ang)).ravel(), (r * np.sin(ang)).ravel()], axis=-1)


def taylor_gap(model: TinyModel, data, prior, fit: LaplaceFit, theta) -> np.ndarray:
    """``|lp(theta) - lp(mode) + 0.5 (theta - mode)^T precision (theta - mode)|``"""
    d = np.asarray(theta, dtype=float) - fit.mean
    quad = np.einsum("...i,ij,...j->...", d, fit.precision, d)
    lp0 = float(log_posterior(model, data, prior, fit.mean))
    return np.abs(log_posterior(model, data, prior, theta) - lp0 + 0.5 * quad)


def taylor_residual(model: TinyModel, data, prior, fit: LaplaceFit, radius: float) -> float:
    """Largest gap between the log posterior and its quadratic model within ``radius``.

    Radius is measured in whitened coordinates ``u = L^T (theta - mode)`` with
    ``precision = L L^T``, so ``0.5 u.u`` is the quadratic term.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    L = np.linalg.cholesky(fit.precision)
    u = whitened_probe(fit.k, radius)
    theta = fit.mean + np.linalg.solve(L.T, u.T).T
    lp0 = float(log_posterior(model, data, prior, fit.mean))
    lp = log_posterior(model, data, prior, theta)
    return float(np.max(np.abs(lp - lp0 + 0.5 * np.sum(u * u, axis=-1))))


def dump_csv(path, truth: GridPosterior, fit: LaplaceFit) -> None:
    """Write grid, posterior density and Laplace density columns for plotting."""
    pts = truth.points().reshape(-1, truth.k)
    dens = truth.density.reshape(-1)
    gauss = np.exp(fit.log_pdf(pts))
    names = [f"theta{i}" for i in range(truth.k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["posterior_density", "laplace_density"])
        for p, d, q in zip(pts, dens, gauss):
            w.writerow([repr(float(v)) for v in p] + [repr(float(d)), repr(float(q))])
