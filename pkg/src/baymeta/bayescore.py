"""Conjugate normality modeling and likelihood-ratio anomaly scoring.

Normal support embeddings are modeled as Gaussian with a conjugate
Normal-Inverse-Wishart prior over (mean, covariance).  Integrating the
Gaussian parameters out turns the posterior into a closed-form multivariate
Student-t predictive, which stays proper for any support size -- including
fewer support points than embedding dimensions, where an empirical
covariance would be singular.  Anomaly scores are log-likelihood ratios
between a fixed broad reference distribution and the task predictive.

Everything here is plain numpy: immutable dataclasses and pure functions.
Densities are evaluated through Cholesky factors and cached log-determinants
rather than explicit inverses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln


class JitterError(np.linalg.LinAlgError):
    """Cholesky failed even after a single jitter retry."""


def cholesky_spd(matrix: np.ndarray, jitter_scale: float = 1e-9) -> tuple[np.ndarray, bool]:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    If the factorization fails (round-off only: the matrices fed here are
    positive definite analytically), retries once with ``jitter_scale *
    tr(M)/d`` added to the diagonal.  A second failure raises
    :class:`JitterError`.

    Returns ``(L, jitter_used)``.
    """
    try:
        return np.linalg.cholesky(matrix), False
    except np.linalg.LinAlgError:
        d = matrix.shape[0]
        bump = jitter_scale * float(np.trace(matrix)) / d
        try:
            return np.linalg.cholesky(matrix + bump * np.eye(d)), True
        except np.linalg.LinAlgError as exc:
            raise JitterError(
                f"matrix not positive definite even after jitter {bump:g}"
            ) from exc


def _fsum_rows(rows: np.ndarray) -> np.ndarray:
    """Column sums with correctly-rounded (compensated) accumulation.

    math.fsum returns the exactly rounded sum, so the result is independent
    of row order; permutation invariance of the posterior update is then an
    exact property rather than an approximate one.
    """
    return np.array([math.fsum(col) for col in rows.T], dtype=float)


def _fsum_outer(diffs: np.ndarray) -> np.ndarray:
    """Sum of outer products v v^T over rows of ``diffs``, compensated per entry."""
    d = diffs.shape[1]
    out = np.empty((d, d), dtype=float)
    for i in range(d):
        for j in range(i, d):
            s = math.fsum(diffs[:, i] * diffs[:, j])
            out[i, j] = s
            out[j, i] = s
    return out


@dataclass(frozen=True)
class NIWPrior:
    """Normal-Inverse-Wishart prior over a Gaussian's (mean, covariance).

    ``nu0 > d - 1`` together with positive-definite ``lambda0`` is exactly
    what keeps the posterior predictive proper for every support size.
    """

    mu0: np.ndarray
    kappa0: float
    lambda0: np.ndarray
    nu0: float

    def __post_init__(self) -> None:
        mu0 = np.asarray(self.mu0, dtype=float)
        lambda0 = np.asarray(self.lambda0, dtype=float)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "lambda0", lambda0)
        d = mu0.shape[0]
        if lambda0.shape != (d, d):
            raise ValueError(f"lambda0 must be {d}x{d}, got {lambda0.shape}")
        if not self.kappa0 > 0:
            raise ValueError("kappa0 must be positive")
        if not self.nu0 > d - 1:
            raise ValueError(f"nu0 must exceed d - 1 = {d - 1}, got {self.nu0}")
        if not np.allclose(lambda0, lambda0.T):
            raise ValueError("lambda0 must be symmetric")
        np.linalg.cholesky(lambda0)  # raises if not positive definite

    @property
    def dim(self) -> int:
        return self.mu0.shape[0]

    @staticmethod
    def default(dim: int, kappa0: float = 0.01, nu0: float | None = None,
                lambda0_scale: float = 1.0) -> "NIWPrior":
        """Zero mean, identity-scaled ``lambda0``, ``nu0 = d + 2`` unless given."""
        return NIWPrior(
            mu0=np.zeros(dim),
            kappa0=kappa0,
            lambda0=lambda0_scale * np.eye(dim),
            nu0=float(dim + 2) if nu0 is None else float(nu0),
        )


@dataclass(frozen=True)
class NIWPosterior:
    """Posterior after conditioning an :class:`NIWPrior` on support embeddings.

    Keeps a reference to the originating prior: the well-posedness bounds
    (and the guarantee that ``lambda_n - lambda0`` is positive semidefinite)
    are statements relative to it.
    """

    mu_n: np.ndarray
    kappa_n: float
    lambda_n: np.ndarray
    nu_n: float
    support_size: int
    dim: int
    prior: NIWPrior

    def flat_record(self) -> np.ndarray:
        """Debug dump: (mu_n, kappa_n, lambda_n row-major, nu_n) as one flat vector."""
        return np.concatenate(
            [self.mu_n, [self.kappa_n], self.lambda_n.ravel(), [self.nu_n]]
        )


@dataclass(frozen=True)
class StudentT:
    """Multivariate Student-t with Cholesky factor and log-determinant cached.

    ``chol`` and ``logdet`` are derived in ``__post_init__`` (jitter policy of
    :func:`cholesky_spd` applies); ``jitter_used`` records whether the retry
    path fired, so tests can assert clean factorizations.
    """

    mean: np.ndarray
    scale: np.ndarray
    dof: float
    chol: np.ndarray = field(init=False, repr=False, compare=False)
    logdet: float = field(init=False, repr=False, compare=False)
    jitter_used: bool = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float)
        scale = np.asarray(self.scale, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        if not self.dof > 0:
            raise ValueError(f"degrees of freedom must be positive, got {self.dof}")
        chol, jitter_used = cholesky_spd(scale)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "logdet", 2.0 * float(np.sum(np.log(np.diag(chol)))))
        object.__setattr__(self, "jitter_used", jitter_used)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class AnomalyReference:
    """Fixed heavy-tailed background distribution for anomalous embeddings.

    Zero mean, isotropic scale, low degrees of freedom; never updated by
    training.  Lives at whatever embedding dimension is in force.
    """

    dim: int
    scale_value: float = 100.0
    dof: float = 2.0

    def __post_init__(self) -> None:
        if not self.scale_value > 0:
            raise ValueError("scale_value must be positive")
        if not self.dof > 0:
            raise ValueError("dof must be positive")

    def as_student_t(self) -> StudentT:
        return StudentT(
            mean=np.zeros(self.dim),
            scale=self.scale_value * np.eye(self.dim),
            dof=self.dof,
        )


def niw_posterior(prior: NIWPrior, support_embeddings: np.ndarray) -> NIWPosterior:
    """Condition the prior on a (K, d) array of support embeddings.

    kappa_n = kappa0 + K
    nu_n    = nu0 + K
    mu_n    = (kappa0 mu0 + K zbar) / kappa_n
    lambda_n = lambda0 + S_z + kappa0 K / kappa_n (zbar - mu0)(zbar - mu0)^T

    with ``zbar`` the support mean and ``S_z`` the centered scatter matrix.
    Both statistics are accumulated with compensated summation, making the
    result exactly independent of support order.
    """
    Z = np.asarray(support_embeddings, dtype=float)
    if Z.ndim != 2:
        raise ValueError(f"support must be a (K, d) array, got shape {Z.shape}")
    K, d = Z.shape
    if K < 1:
        raise ValueError("support must contain at least one embedding")
    if d != prior.dim:
        raise ValueError(f"embedding dim {d} does not match prior dim {prior.dim}")
    if not np.isfinite(Z).all():
        raise ValueError("support embeddings must be finite")

    zbar = _fsum_rows(Z) / K
    scatter = _fsum_outer(Z - zbar)
    kappa_n = prior.kappa0 + K
    nu_n = prior.nu0 + K
    mu_n = (prior.kappa0 * prior.mu0 + K * zbar) / kappa_n
    dev = zbar - prior.mu0
    lambda_n = prior.lambda0 + scatter + (prior.kappa0 * K / kappa_n) * np.outer(dev, dev)
    lambda_n = 0.5 * (lambda_n + lambda_n.T)
    return NIWPosterior(
        mu_n=mu_n,
        kappa_n=kappa_n,
        lambda_n=lambda_n,
        nu_n=nu_n,
        support_size=K,
        dim=d,
        prior=prior,
    )


def predictive(post: NIWPosterior) -> StudentT:
    """Posterior predictive of a new embedding: Student-t with

    mean  = mu_n
    scale = (kappa_n + 1) / (kappa_n (nu_n - d + 1)) * lambda_n
    dof   = nu_n - d + 1
    """
    dof = post.nu_n - post.dim + 1
    if not dof > 0:
        raise ValueError(
            f"predictive dof = nu_n - d + 1 = {dof} must be positive; "
            "the prior must satisfy nu0 > d - 1"
        )
    a_n = (post.kappa_n + 1.0) / (post.kappa_n * dof)
    return StudentT(mean=post.mu_n, scale=a_n * post.lambda_n, dof=dof)


def studentt_logpdf(t: StudentT, z: np.ndarray) -> float | np.ndarray:
    """Multivariate Student-t log-density; finite for every finite input.

    Accepts a single d-vector or an (n, d) batch; the quadratic form is
    evaluated through the cached Cholesky factor.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    if not np.isfinite(Z).all():
        raise ValueError("input must be finite")
    d = t.dim
    if Z.shape[1] != d:
        raise ValueError(f"input dim {Z.shape[1]} does not match distribution dim {d}")
    diff = Z - t.mean
    w = solve_triangular(t.chol, diff.T, lower=True)
    delta = np.sum(w * w, axis=0)
    nu = t.dof
    out = (
        gammaln(0.5 * (nu + d))
        - gammaln(0.5 * nu)
        - 0.5 * d * np.log(nu * np.pi)
        - 0.5 * t.logdet
        - 0.5 * (nu + d) * np.log1p(delta / nu)
    )
    return float(out[0]) if single else out


def anomaly_score(p0: StudentT, p1: AnomalyReference, z: np.ndarray) -> float | np.ndarray:
    """Likelihood-ratio score ``log p1(z) - log p0(z)``; larger means more anomalous."""
    ref = p1.as_student_t()
    if ref.dim != p0.dim:
        raise ValueError(f"reference dim {ref.dim} does not match predictive dim {p0.dim}")
    return studentt_logpdf(ref, z) - studentt_logpdf(p0, z)


def neg_loglik_gradient(t: StudentT, z: np.ndarray) -> np.ndarray:
    """Gradient of the negative log-density in the input:

    (nu + d) / (nu + delta) * Sigma^{-1} (z - mu),  delta = (z-mu)^T Sigma^{-1} (z-mu).
    """
    z = np.asarray(z, dtype=float)
    diff = z - t.mean
    siv = cho_solve((t.chol, True), diff)
    delta = float(diff @ siv)
    return (t.dof + t.dim) / (t.dof + delta) * siv


def neg_loglik_hessian(t: StudentT, z: np.ndarray) -> np.ndarray:
    """Closed-form Hessian of the negative log-density in the input:

    (nu+d)/(nu+delta) Sigma^{-1}
      - 2 (nu+d)/(nu+delta)^2 Sigma^{-1}(z-mu)(z-mu)^T Sigma^{-1}.
    """
    z = np.asarray(z, dtype=float)
    diff = z - t.mean
    siv = cho_solve((t.chol, True), diff)
    delta = float(diff @ siv)
    sigma_inv = cho_solve((t.chol, True), np.eye(t.dim))
    c = t.dof + t.dim
    return c / (t.dof + delta) * sigma_inv - (2.0 * c / (t.dof + delta) ** 2) * np.outer(siv, siv)


@dataclass(frozen=True)
class WellPosednessReport:
    scale_pd: bool
    jitter_used: bool
    min_eig: float
    min_eig_bound: float
    inv_norm: float
    inv_norm_bound: float
    bound_ok: bool


def wellposedness_check(post: NIWPosterior, rel_slack: float = 1e-10) -> WellPosednessReport:
    """Numerical verification that the predictive scale is well-conditioned.

    Checks (report-only, never raises on a failed bound):
      * the predictive scale factors (positive definite),
      * min eigenvalue >= lambda_min(lambda0) / (nu0 + K - d + 1),
      * ||scale^{-1}|| <= (nu0 + K - d + 1) / lambda_min(lambda0),
    each within ``rel_slack`` relative slack.
    """
    pred = predictive(post)
    eigs = np.linalg.eigvalsh(pred.scale)
    min_eig = float(eigs[0])
    scale_pd = min_eig > 0 and not pred.jitter_used
    lam0_min = float(np.linalg.eigvalsh(post.prior.lambda0)[0])
    denom = post.prior.nu0 + post.support_size - post.dim + 1
    min_eig_bound = lam0_min / denom
    inv_norm = 1.0 / min_eig if min_eig > 0 else np.inf
    inv_norm_bound = denom / lam0_min
    bound_ok = (
        min_eig >= min_eig_bound * (1.0 - rel_slack)
        and inv_norm <= inv_norm_bound * (1.0 + rel_slack)
    )
    return WellPosednessReport(
        scale_pd=scale_pd,
        jitter_used=pred.jitter_used,
        min_eig=min_eig,
        min_eig_bound=min_eig_bound,
        inv_norm=inv_norm,
        inv_norm_bound=inv_norm_bound,
        bound_ok=bound_ok,
    )


@dataclass(frozen=True)
class HessianBoundReport:
    max_hess_norm: float
    bound: float
    ok: bool
    max_fd_rel_err: float


def hessian_bound_check(
    t: StudentT,
    radius: float,
    grid: np.ndarray,
    fd_step: float = 1e-5,
    fd_tol: float = 1e-5,
) -> HessianBoundReport:
    """Check the curvature bound of the negative log-density on a ball.

    At every grid point inside ``radius`` of the mean, the analytic Hessian is
    evaluated, cross-checked against central finite differences of the
    analytic gradient, and its spectral norm compared with

        (nu+d)/nu ||Sigma^{-1}|| + 2 (nu+d)/nu^2 ||Sigma^{-1}||^2 radius^2.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    dists = np.linalg.norm(grid - t.mean, axis=1)
    if np.any(dists > radius * (1 + 1e-12)):
        raise ValueError("grid contains points outside the stated radius")

    sigma_inv_norm = 1.0 / float(np.linalg.eigvalsh(t.scale)[0])
    c = (t.dof + t.dim) / t.dof
    bound = c * sigma_inv_norm + (2.0 * (t.dof + t.dim) / t.dof**2) * sigma_inv_norm**2 * radius**2

    max_norm = 0.0
    max_fd_err = 0.0
    for z in grid:
        hess = neg_loglik_hessian(t, z)
        max_norm = max(max_norm, float(np.linalg.norm(hess, 2)))
        fd = np.empty_like(hess)
        for i in range(t.dim):
            e = np.zeros(t.dim)
            e[i] = fd_step
            fd[:, i] = (neg_loglik_gradient(t, z + e) - neg_loglik_gradient(t, z - e)) / (
                2 * fd_step
            )
        fd = 0.5 * (fd + fd.T)
        err = np.linalg.norm(fd - hess) / max(np.linalg.norm(hess), 1e-12)
        max_fd_err = max(max_fd_err, float(err))

    ok = max_norm <= bound * (1 + 1e-12) and max_fd_err <= fd_tol
    return HessianBoundReport(
        max_hess_norm=max_norm, bound=bound, ok=ok, max_fd_rel_err=max_fd_err
    )
