from ewc_lab import checks, ewc
from ewc_lab.fisher import estimate_fisher


def test_all_suites_pass():
    rep = checks.report(checks.run_all())
    assert rep["passed"], [c for c in rep["checks"] if not c["passed"]]
    assert len(rep["families"]) >= 4
    assert {"fisher", "laplace", "grad-check", "penalty-gradient"} <= set(rep["families"])


def test_sign_flip_in_penalty_gradient_is_caught():
    flipped = lambda led, p: p.with_values(-ewc.penalty_gradient(led, p).values)
    assert not checks.check_penalty_gradient(grad_fn=flipped).passed


def test_factor_two_in_penalty_gradient_is_caught():
    doubled = lambda led, p: p.with_values(2 * ewc.penalty_gradient(led, p).values)
    assert not checks.check_penalty_gradient(grad_fn=doubled).passed


def test_biased_fisher_is_caught():
    def biased(*args):
        F = estimate_fisher(*args)
        F.values = F.values * 1.3
        return F
    assert not checks.check_fisher_vs_hessian(fisher_fn=biased).passed


def test_overrides_route_by_name():
    flipped = lambda led, p: p.with_values(-ewc.penalty_gradient(led, p).values)
    res = checks.run_all(check_penalty_gradient={"grad_fn": flipped})
    assert [r.name for r in res if not r.passed] == ["penalty-gradient"]
