"""Self-contained numerical validation suites (the ``validate-math`` verb).

Each check compares a production code path against an independent oracle
(closed forms, finite differences, grid quadrature) and returns a
:class:`CheckResult`. Production callables can be swapped out through keyword
arguments, which is how the mutation tests confirm a check actually bites.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import ewc, laplace
from .autodiff import ParamVector
from .ewc import PenaltyLedger, TaskAnchor
from .fisher import FisherEstimate, estimate_fisher, hessian_oracle, validate_psd
from .model import Architecture, Batch, init_params, logistic_layout, nll_loss, nll_value


@dataclass
class CheckResult:
    name: str
    family: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


class GraphModel:
    """Adapts an autodiff-built NLL to the tiny-model interface used by ``laplace``."""

    def __init__(self, layout):
        self.layout = layout
        self.k = sum(e.size for e in layout)

    def log_lik(self, theta, data: Batch):
        theta = np.asarray(theta, dtype=float)
        flat = theta.reshape(-1, self.k)
        vals = [-len(data) * nll_value(ParamVector(t, self.layout), data) for t in flat]
        return np.array(vals).reshape(theta.shape[:-1])

    def grad_log_lik(self, theta, data: Batch):
        root = nll_loss(ParamVector(np.asarray(theta, dtype=float), self.layout), data)
        ad.forward(root)
        return -len(data) * ad.backward(root).values


def logistic_data(n: int = 10_000, theta_true: float = 1.0, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1))
    y = (rng.random(n) < expit(theta_true * x[:, 0])).astype(int)
    return Batch(x, y)


def bernoulli_fisher(theta: float) -> float:
    s = expit(theta)
    return float(s * (1 - s))


@_timed
def check_fisher_vs_hessian(n: int = 10_000, seed: int = 0, fisher_fn=estimate_fisher) -> CheckResult:
    """Outer-product Fisher vs. FD Hessian of the mean NLL, plus the Bernoulli closed form."""
    layout = logistic_layout(1)
    data = logistic_data(n, 1.0, seed)
    mode, gnorm, _ = laplace.find_mode(GraphModel(layout), data, None, [0.0])
    theta_star = ParamVector(mode, layout)
    F = fisher_fn(theta_star, data, "diagonal", "model-sampled", n, seed + 1).values[0]
    H = hessian_oracle(theta_star, data, 1e-4).matrix[0, 0]
    rel_fh = abs(F - H) / abs(H)

    ones = Batch(np.ones((1, 1)), np.array([1]))
    at0 = ParamVector(np.zeros(1), layout)
    F0 = fisher_fn(at0, ones, "diagonal", "model-sampled", n, seed + 2).values[0]
    H0 = hessian_oracle(at0, ones, 1e-4).matrix[0, 0]
    exact = bernoulli_fisher(0.0)
    rel_f0, rel_h0 = abs(F0 - exact) / exact, abs(H0 - exact) / exact
    ok = rel_fh < 0.10 and rel_f0 < 0.05 and rel_h0 < 0.05
    return CheckResult("fisher-vs-hessian", "fisher", ok, {
        "theta_star": float(mode[0]), "grad_norm_at_fit": gnorm, "fisher": F, "hessian": H,
        "rel_error": rel_fh, "tolerance": 0.10,
        "bernoulli_fisher_at_0": F0, "bernoulli_hessian_at_0": H0, "closed_form": exact,
        "rel_error_fisher_closed_form": rel_f0, "rel_error_hessian_closed_form": rel_h0,
        "closed_form_tolerance": 0.05})


@_timed
def check_fisher_psd(seeds=(0, 1, 2)) -> CheckResult:
    arch = Architecture((3, 4, 2), 0)
    params = init_params(arch)
    rng = np.random.default_rng(0)
    batch = Batch(rng.normal(size=(64, 3)), rng.integers(0, 2, 64))
    mins, ok = [], True
    for s in seeds:
        for kind in ("diagonal", "full"):
            rep = validate_psd(estimate_fisher(params, batch, kind, "model-sampled", 64, s))
            mins.append(rep.min_eigenvalue)
            ok &= rep.passed
    full = estimate_fisher(params, batch, "full", "model-sampled", 64, 0)
    diag = estimate_fisher(params, batch, "diagonal", "model-sampled", 64, 0)
    same_diag = bool(np.array_equal(np.diag(full.values), diag.values))
    return CheckResult("fisher-psd", "fisher", bool(ok and same_diag),
                       {"min_eigenvalues": mins, "full_diag_equals_diagonal": same_diag})


@_timed
def check_laplace_conjugate() -> CheckResult:
    """Gaussian likelihood + Gaussian prior: the Laplace fit must be exact."""
    x = np.array([1.0, 2.0, 2.0, 3.0])  # n = 4, sum = 8
    prior = laplace.GaussianPrior.isotropic(1, 0.0, 1.0)
    model = laplace.GaussianMean(1.0)
    fit = laplace.fit_laplace(model, x, prior, [0.0])
    sd = 1 / np.sqrt(5)
    grid = laplace.grid_posterior(model, x, prior, [(1.6 - 10 * sd, 1.6 + 10 * sd)], 801)
    kl = laplace.kl_grid_vs_laplace(grid, fit)
    gm, gv = float(grid.mean()[0]), float(grid.cov()[0, 0])
    ok = kl < 1e-8 and abs(gm - 1.6) < 1e-3 and abs(gv - 0.2) < 1e-3 \
        and abs(fit.mean[0] - 1.6) < 1e-8 and abs(fit.precision[0, 0] - 5.0) < 1e-6
    return CheckResult("laplace-conjugate", "laplace", ok, {
        "kl": kl, "grid_mean": gm, "grid_var": gv, "fit_mean": float(fit.mean[0]),
        "fit_precision": float(fit.precision[0, 0]), "kl_tolerance": 1e-8, "moment_tolerance": 1e-3})


def bernoulli_outcomes(n: int, frac: float = 0.7) -> np.ndarray:
    k = int(round(frac * n))
    return np.r_[np.ones(k), np.zeros(n - k)]


@_timed
def check_laplace_asymptotics(sizes=(10, 100, 1000)) -> CheckResult:
    """KL(grid || Laplace) shrinks as the Bernoulli sample grows."""
    model = laplace.BernoulliLogit()
    kls = []
    for n in sizes:
        y = bernoulli_outcomes(n)
        fit = laplace.fit_laplace(model, y, None, [0.0])
        grid = laplace.grid_posterior(model, y, None, laplace.laplace_bounds(fit, 12.0), 801)
        kls.append(laplace.kl_grid_vs_laplace(grid, fit))
    ok = all(a > b for a, b in zip(kls, kls[1:])) and min(kls) >= 0
    return CheckResult("laplace-asymptotics", "laplace", ok, {"n": list(sizes), "kl": kls})


@_timed
def check_taylor(radii=(0.05, 0.1, 0.2, 0.4)) -> CheckResult:
    """Neglected higher-order terms scale like radius**3 around the mode."""
    model = laplace.BernoulliLogit()
    y = bernoulli_outcomes(10)
    fit = laplace.fit_laplace(model, y, None, [0.0])
    res = [laplace.taylor_residual(model, y, None, fit, r) for r in radii]
    slope = float(np.polyfit(np.log(radii), np.log(res), 1)[0])
    at_mode = float(laplace.taylor_gap(model, y, None, fit, fit.mean))
    ok = 2.5 <= slope <= 3.5 and at_mode == 0.0 and fit.grad_norm < 1e-8 \
        and abs(fit.mean[0] - np.log(7 / 3)) < 1e-8
    return CheckResult("taylor-residual", "laplace", ok, {
        "radii": list(radii), "residuals": res, "loglog_slope": slope, "residual_at_mode": at_mode,
        "grad_norm": fit.grad_norm, "mode": float(fit.mean[0])})


@_timed
def check_grad_mlp(step: float = 1e-5, tol: float = 1e-4) -> CheckResult:
    arch = Architecture((3, 8, 2), 7)  # 50 parameters
    params = init_params(arch)
    rng = np.random.default_rng(3)
    params = params.with_values(params.values + 0.1 * rng.normal(size=len(params)))
    batch = Batch(rng.normal(size=(16, 3)), rng.integers(0, 2, 16))
    rep = ad.grad_check(lambda p: nll_loss(p, batch), params, step, tol)
    return CheckResult("grad-check-mlp", "grad-check", rep.passed, {
        "n_params": len(params), "max_rel_error": rep.max_rel_error, "excluded": rep.excluded,
        "tolerance": tol})


@_timed
def check_grad_quadratic(step: float = 1e-5, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(5)
    A = rng.normal(size=(6, 6))
    Q = A @ A.T
    layout = ad.make_layout([("q", (6,))])
    point = ParamVector(rng.normal(size=6), layout)

    def build(p):
        th = ad.parameter(p)
        return ad.total(ad.matmul_acc(th, ad.constant(0.5 * Q)) * th)

    rep = ad.grad_check(build, point, step, tol)
    return CheckResult("grad-check-quadratic", "grad-check", rep.passed,
                       {"max_rel_error": rep.max_rel_error, "tolerance": tol})


def _penalty_fixture(seed: int = 0):
    rng = np.random.default_rng(seed)
    arch = Architecture((3, 4, 2), seed)
    base = init_params(arch)
    anchors = []
    for i, kind in enumerate(("diagonal", "full")):
        ts = base.with_values(base.values + rng.normal(size=len(base)))
        if kind == "diagonal":
            vals = rng.random(len(base))
            vals[::5] = 0.0
        else:
            B = rng.normal(size=(len(base), len(base)))
            vals = B @ B.T / len(base)
        anchors.append(TaskAnchor(f"T{i}", ts, FisherEstimate(kind, vals, 1, "label-empirical", base.layout),
                                  float(1 + 3 * i)))
    point = base.with_values(base.values + rng.normal(size=len(base)))
    return PenaltyLedger(anchors), point, rng


@_timed
def check_penalty_gradient(grad_fn=None, penalty_fn=None, step: float = 1e-3, tol: float = 1e-8) -> CheckResult:
    """Analytic penalty gradient vs. central differences; quadratic scaling; graph linearity."""
    grad_fn = grad_fn or ewc.penalty_gradient
    penalty_fn = penalty_fn or ewc.penalty
    ledger, point, rng = _penalty_fixture()
    g = grad_fn(ledger, point).values
    num = np.empty_like(g)
    for i in range(len(point)):
        v = point.values.copy()
        v[i] += step
        fp = penalty_fn(ledger, point.with_values(v))
        v[i] -= 2 * step
        fm = penalty_fn(ledger, point.with_values(v))
        num[i] = (fp - fm) / (2 * step)
    fd_err = float(np.abs(g - num).max() / max(np.abs(num).max(), 1e-300))

    single = PenaltyLedger([ledger.anchors[0]])
    star = single.anchors[0].theta_star.values
    v = rng.normal(size=len(point))
    base = penalty_fn(single, point.with_values(star + v))
    scale_err = max(abs(penalty_fn(single, point.with_values(star + t * v)) - t * t * base) / base
                    for t in (-2.0, 0.5, 3.0))
    at_anchor = penalty_fn(single, point.with_values(star.copy()))

    batch = Batch(rng.normal(size=(8, 3)), rng.integers(0, 2, 8))
    root = ewc.total_loss(ledger, point, batch)
    ad.forward(root)
    g_total = ad.backward(root).values
    r2 = nll_loss(point, batch)
    ad.forward(r2)
    lin_err = float(np.abs(g_total - (ad.backward(r2).values + grad_fn(ledger, point).values)).max())
    ok = fd_err < tol and scale_err < 1e-10 and at_anchor == 0.0 and lin_err < 1e-10
    return CheckResult("penalty-gradient", "penalty-gradient", ok, {
        "fd_rel_error": fd_err, "fd_tolerance": tol, "quadratic_scaling_error": scale_err,
        "penalty_at_anchor": at_anchor, "total_loss_linearity_error": lin_err})


def run_all(**overrides) -> list[CheckResult]:
    """Run every suite. ``overrides`` maps a check name to replacement kwargs."""
    suites = [check_fisher_vs_hessian, check_fisher_psd, check_laplace_conjugate,
              check_laplace_asymptotics, check_taylor, check_grad_mlp, check_grad_quadratic,
              check_penalty_gradient]
    return [fn(**overrides.get(fn.__name__, {})) for fn in suites]


def report(results: list[CheckResult]) -> dict:
    return {
        "passed": all(r.passed for r in results),
        "families": sorted({r.family for r in results}),
        "checks": [asdict(r) for r in results],
    }
