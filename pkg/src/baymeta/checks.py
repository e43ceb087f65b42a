"""Runtime property suites: conjugacy, well-posedness, curvature, gradients.

These re-verify the numerical core against independent recomputations and
finite differences at run time (smaller sample counts than the test suite,
same logic).  Each suite returns a :class:`CheckResult`; the CLI ``checks``
mode runs them all and fails loudly if any property does not hold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from . import autodiff as ad
from .bayescore import (
    AnomalyReference,
    NIWPrior,
    StudentT,
    hessian_bound_check,
    niw_posterior,
    predictive,
    studentt_logpdf,
    wellposedness_check,
)
from .diffnet import EmbeddingNet
from .episodes import Episode
from .metalearn import HyperParams, episode_loss, episode_meta_gradient


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_case(rng: np.random.Generator, d: int, K: int) -> tuple[NIWPrior, np.ndarray]:
    A = rng.standard_normal((d, d))
    lambda0 = A @ A.T + d * np.eye(d)
    prior = NIWPrior(
        mu0=rng.standard_normal(d),
        kappa0=float(rng.uniform(0.01, 5.0)),
        lambda0=lambda0,
        nu0=float(d - 1 + rng.uniform(0.5, 5.0)),
    )
    Z = prior.mu0 + rng.standard_normal((K, d)) * rng.uniform(0.5, 2.0)
    return prior, Z


def recompute_posterior(prior: NIWPrior, Z: np.ndarray):
    """Straight-line recomputation of the conjugate update, kept independent
    of the library path (plain numpy sums, no shared helpers)."""
    K = Z.shape[0]
    zbar = Z.sum(axis=0) / K
    S = np.zeros((Z.shape[1], Z.shape[1]))
    for z in Z:
        S += np.outer(z - zbar, z - zbar)
    kappa_n = prior.kappa0 + K
    nu_n = prior.nu0 + K
    mu_n = (prior.kappa0 * prior.mu0 + K * zbar) / kappa_n
    lambda_n = prior.lambda0 + S + (prior.kappa0 * K / kappa_n) * np.outer(
        zbar - prior.mu0, zbar - prior.mu0
    )
    return mu_n, kappa_n, lambda_n, nu_n


def check_conjugacy(n_cases: int = 100, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        d = int(rng.choice([1, 2, 4, 8]))
        K = int(rng.integers(1, 13))
        prior, Z = _random_case(rng, d, K)
        post = niw_posterior(prior, Z)
        mu_n, kappa_n, lambda_n, nu_n = recompute_posterior(prior, Z)
        rel = max(
            np.max(np.abs(post.mu_n - mu_n)) / max(np.max(np.abs(mu_n)), 1.0),
            abs(post.kappa_n - kappa_n) / kappa_n,
            np.max(np.abs(post.lambda_n - lambda_n)) / np.max(np.abs(lambda_n)),
            abs(post.nu_n - nu_n) / nu_n,
        )
        worst = max(worst, float(rel))
    return CheckResult("conjugacy_recompute", worst <= tol, f"worst rel err {worst:.3e}")


def check_wellposedness(n_cases: int = 100, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    detail = ""
    for i in range(n_cases):
        d = int(rng.choice([2, 4, 8]))
        K = int(rng.integers(1, d + 4))
        prior, Z = _random_case(rng, d, K)
        post = niw_posterior(prior, Z)
        report = wellposedness_check(post)
        probes = post.mu_n + rng.standard_normal((100, d)) * 5.0
        finite = np.isfinite(studentt_logpdf(predictive(post), probes)).all()
        if not (report.scale_pd and report.bound_ok and finite):
            ok = False
            detail = f"case {i}: pd={report.scale_pd} bounds={report.bound_ok} finite={finite}"
            break
    return CheckResult("predictive_wellposedness", ok, detail or f"{n_cases} cases ok")


def check_normalization(n_cases: int = 5, seed: int = 2, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        prior, Z = _random_case(rng, 1, int(rng.integers(1, 8)))
        pred = predictive(niw_posterior(prior, Z))
        total, _ = quad(
            lambda x: np.exp(studentt_logpdf(pred, np.array([x]))),
            float(pred.mean[0]) - 60 * np.sqrt(pred.scale[0, 0]),
            float(pred.mean[0]) + 60 * np.sqrt(pred.scale[0, 0]),
            limit=200,
        )
        worst = max(worst, abs(total - 1.0))
    return CheckResult("density_normalization", worst <= tol, f"worst |mass-1| {worst:.3e}")


def check_curvature(n_cases: int = 10, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    for i in range(n_cases):
        d = int(rng.choice([2, 3, 4]))
        A = rng.standard_normal((d, d))
        scale = A @ A.T + rng.uniform(0.5, 2.0) * np.eye(d)
        t = StudentT(mean=rng.standard_normal(d), scale=scale, dof=float(rng.uniform(2, 10)))
        radius = float(rng.uniform(1.0, 4.0))
        directions = rng.standard_normal((20, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        grid = t.mean + directions * rng.uniform(0, radius, size=(20, 1))
        report = hessian_bound_check(t, radius, grid)
        if not report.ok:
            return CheckResult(
                "curvature_bound", False,
                f"case {i}: max {report.max_hess_norm:.4g} bound {report.bound:.4g} "
                f"fd_err {report.max_fd_rel_err:.2e}",
            )
    return CheckResult("curvature_bound", True, f"{n_cases} cases ok")


def check_meta_gradient(n_cases: int = 3, seed: int = 4, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    net = EmbeddingNet(input_dim=3, hidden_dims=(4,), output_dim=2, layer_norm=True)
    prior = NIWPrior.default(2, kappa0=0.5, nu0=5.0)
    ref = AnomalyReference(dim=2, scale_value=25.0, dof=2.0)
    worst = 0.0
    for case in range(n_cases):
        hp = HyperParams(alpha=0.05, lam=0.1 if case % 2 else 0.0, tau=0.5,
                         epochs=1, episodes_per_epoch=1, val_episodes=0)
        params = net.init_params(seed + case)
        episode = Episode(
            support=rng.standard_normal((3, 3)),
            query_x=rng.standard_normal((4, 3)),
            query_y=np.array([0, 0, 1, 1]),
        )
        g, _ = episode_meta_gradient(net, params, episode, prior, ref, hp)
        fd = np.empty_like(g)
        h = 1e-6  # steep random cases: truncation must sit below the tolerance
        for i in range(params.size):
            e = np.zeros(params.size)
            e[i] = h
            lp = episode_loss(net, params.replace_values(params.values + e), episode, prior, ref, hp)
            lm = episode_loss(net, params.replace_values(params.values - e), episode, prior, ref, hp)
            fd[i] = (lp - lm) / (2 * h)
        rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(rel))
    return CheckResult("meta_gradient_fd", worst <= tol, f"worst rel err {worst:.3e}")


def check_autodiff(seed: int = 5, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(4)
    A = rng.standard_normal((4, 4))
    spd = A @ A.T + 4 * np.eye(4)

    def f(x: ad.Tensor) -> ad.Tensor:
        q = ad.matmul(x, ad.solve_spd(ad.constant(spd), x))
        return ad.add(ad.mul(ad.constant(0.5), q), ad.sum_(ad.tanh(x)))

    leaf = ad.constant(x0)
    (g,) = ad.grad(f(leaf), [leaf])
    fd = np.empty(4)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd[i] = (f(ad.constant(x0 + e)).item() - f(ad.constant(x0 - e)).item()) / (2 * h)
    rel = np.linalg.norm(g.value - fd) / np.linalg.norm(fd)
    return CheckResult("autodiff_gradcheck", rel <= tol, f"rel err {rel:.3e}")


def run_all(fast: bool = False) -> list[CheckResult]:
    scale = 0.3 if fast else 1.0
    return [
        check_conjugacy(n_cases=max(10, int(100 * scale))),
        check_wellposedness(n_cases=max(10, int(100 * scale))),
        check_normalization(n_cases=max(2, int(5 * scale))),
        check_curvature(n_cases=max(3, int(10 * scale))),
        check_autodiff(),
        check_meta_gradient(n_cases=2 if fast else 3),
    ]
