"""Synthetic task distribution and episodic sampling.

A task family is a seeded generator of anomaly-detection tasks: each task
owns a Gaussian normal component and one anomaly generator (a mean shift, an
inflated covariance, or heavy-tailed noise).  Families support a per-client
offset whose magnitude scales linearly with a heterogeneity knob (zero gives
identical clients) and a held-out-subtype protocol: training episodes draw
anomalies only from the non-held-out kinds, test episodes only from the
held-out kind.

Everything is derived from seeds; episodes are never persisted, only
regenerated.  Because the generators are controlled, the true likelihood
ratio between the anomaly and normal components is available in closed form
(:func:`oracle_scores`) and serves as the Bayes-optimal scoring oracle in
acceptance experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ANOMALY_KINDS = ("mean-shift", "covariance-inflation", "heavy-tail")

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class TaskSpec:
    """One anomaly-detection task: a normal component plus an anomaly generator."""

    normal_mean: np.ndarray
    normal_cov: np.ndarray
    anomaly_kind: str
    anomaly_params: dict
    task_seed: int

    def __post_init__(self) -> None:
        mean = np.asarray(self.normal_mean, dtype=float)
        cov = np.asarray(self.normal_cov, dtype=float)
        object.__setattr__(self, "normal_mean", mean)
        object.__setattr__(self, "normal_cov", cov)
        if self.anomaly_kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.anomaly_kind!r}")
        np.linalg.cholesky(cov)  # SPD required

    @property
    def dim(self) -> int:
        return self.normal_mean.shape[0]


@dataclass(frozen=True)
class Episode:
    """Support set of normal samples plus a labeled query set."""

    support: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.query_y, dtype=int)
        object.__setattr__(self, "query_y", y)
        if not np.isin(y, (0, 1)).all():
            raise ValueError("query labels must be 0 or 1")
        if self.query_x.shape[0] != y.shape[0]:
            raise ValueError("query inputs and labels must align")

    @property
    def counts(self) -> tuple[int, int, int]:
        k = self.support.shape[0]
        q_a = int(self.query_y.sum())
        return k, self.query_y.shape[0] - q_a, q_a


@dataclass(frozen=True)
class TaskFamily:
    """Seeded distribution over tasks, with heterogeneity and held-out kind.

    ``heterogeneity`` scales a fixed per-client offset of the normal mean, so
    inter-client dispersion is exactly proportional to it.  ``task_jitter``
    perturbs each sampled task around its client's center.
    """

    family_seed: int = 42
    input_dim: int = 16
    heterogeneity: float = 0.0
    heldout_kind: str = "heavy-tail"
    base_scale: float = 0.5
    mean_radius: float = 1.0
    task_jitter: float = 0.1
    shift: float = 2.0
    inflation: float = 9.0
    tail_dof: float = 2.0
    kinds: tuple[str, ...] = ANOMALY_KINDS
    shift_subspace_dim: int = 0  # 0: shift directions span the full input space

    def __post_init__(self) -> None:
        if self.heterogeneity < 0:
            raise ValueError("heterogeneity must be non-negative")
        if self.heldout_kind not in self.kinds:
            raise ValueError(f"held-out kind {self.heldout_kind!r} not among {self.kinds}")
        if self.inflation <= 1:
            raise ValueError("covariance inflation factor must exceed 1")

    def train_kinds(self) -> tuple[str, ...]:
        held_in = tuple(k for k in self.kinds if k != self.heldout_kind)
        # single-kind families train and test on the same generator
        return held_in if held_in else self.kinds


def _client_offset(family: TaskFamily, client_id: int) -> np.ndarray:
    rng = np.random.default_rng(
        np.random.SeedSequence([family.family_seed, 7919, client_id])
    )
    draw = rng.standard_normal(family.input_dim)
    return family.heterogeneity * draw


def gen_task(family: TaskFamily, client_id: int = 0, split: str = "train",
             task_index: int = 0) -> TaskSpec:
    """Deterministic task draw for (family, client, split, index).

    The task-level randomness depends only on (family, split, index); the
    client enters solely through its heterogeneity-scaled offset, so zero
    heterogeneity yields identical tasks across clients.
    """
    if split not in _SPLIT_CODES:
        raise ValueError(f"split must be one of {sorted(_SPLIT_CODES)}")
    ss = np.random.SeedSequence([family.family_seed, _SPLIT_CODES[split], task_index])
    rng = np.random.default_rng(ss)

    base = family.mean_radius * _unit(rng.standard_normal(family.input_dim))
    mean = base + _client_offset(family, client_id)
    mean = mean + family.task_jitter * rng.standard_normal(family.input_dim)
    cov = family.base_scale**2 * np.eye(family.input_dim)

    if split == "test":
        kind = family.heldout_kind
    else:
        choices = family.train_kinds()
        kind = choices[int(rng.integers(len(choices)))]

    params: dict = {}
    if kind == "mean-shift":
        params["shift"] = family.shift * family.base_scale * _unit(
            rng.standard_normal(family.input_dim)
        )
    elif kind == "covariance-inflation":
        params["factor"] = family.inflation
    else:
        params["dof"] = family.tail_dof

    task_seed = int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
    return TaskSpec(
        normal_mean=mean,
        normal_cov=cov,
        anomaly_kind=kind,
        anomaly_params=params,
        task_seed=task_seed,
    )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _draw_normal(rng: np.random.Generator, task: TaskSpec, n: int) -> np.ndarray:
    chol = np.linalg.cholesky(task.normal_cov)
    return task.normal_mean + rng.standard_normal((n, task.dim)) @ chol.T


def _draw_anomalous(rng: np.random.Generator, task: TaskSpec, n: int) -> np.ndarray:
    chol = np.linalg.cholesky(task.normal_cov)
    if task.anomaly_kind == "mean-shift":
        center = task.normal_mean + task.anomaly_params["shift"]
        return center + rng.standard_normal((n, task.dim)) @ chol.T
    if task.anomaly_kind == "covariance-inflation":
        c = task.anomaly_params["factor"]
        return task.normal_mean + np.sqrt(c) * rng.standard_normal((n, task.dim)) @ chol.T
    dof = task.anomaly_params["dof"]
    gauss = rng.standard_normal((n, task.dim)) @ chol.T
    u = rng.chisquare(dof, size=n) / dof
    return task.normal_mean + gauss / np.sqrt(u)[:, None]


def sample_episode(task: TaskSpec, K: int, Q_N: int, Q_A: int, seed: int) -> Episode:
    """Draw one episode: K normal supports, Q_N normal + Q_A anomalous queries."""
    if K < 1 or Q_N < 1 or Q_A < 0:
        raise ValueError(f"invalid episode counts K={K}, Q_N={Q_N}, Q_A={Q_A}")
    rng = np.random.default_rng(np.random.SeedSequence([task.task_seed, seed]))
    support = _draw_normal(rng, task, K)
    q_norm = _draw_normal(rng, task, Q_N)
    q_anom = _draw_anomalous(rng, task, Q_A) if Q_A else np.empty((0, task.dim))
    query_x = np.vstack([q_norm, q_anom])
    query_y = np.concatenate([np.zeros(Q_N, dtype=int), np.ones(Q_A, dtype=int)])
    return Episode(support=support, query_x=query_x, query_y=query_y)


# --------------------------------------------------------------------------
# generative-truth scoring
# --------------------------------------------------------------------------

def _gaussian_logpdf(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = mean.shape[0]
    chol = np.linalg.cholesky(cov)
    diff = X - mean
    w = np.linalg.solve(chol, diff.T)
    delta = np.sum(w * w, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * np.log(2 * np.pi) + logdet + delta)


def _studentt_logpdf(X: np.ndarray, mean: np.ndarray, cov: np.ndarray, dof: float) -> np.ndarray:
    from scipy.special import gammaln

    d = mean.shape[0]
    chol = np.linalg.cholesky(cov)
    diff = X - mean
    w = np.linalg.solve(chol, diff.T)
    delta = np.sum(w * w, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return (
        gammaln(0.5 * (dof + d))
        - gammaln(0.5 * dof)
        - 0.5 * d * np.log(dof * np.pi)
        - 0.5 * logdet
        - 0.5 * (dof + d) * np.log1p(delta / dof)
    )


def episode_stream_seed(run_seed: int, client_id: int, step: int, stream: str = "train") -> int:
    """Stable per-step episode seed shared by the centralized and federated
    training paths, so matched runs consume identical episode streams."""
    return int(
        np.random.SeedSequence(
            [run_seed, 104729, _SPLIT_CODES.get(stream, 0), client_id, step]
        ).generate_state(1, dtype=np.uint64)[0]
        >> 1
    )


def oracle_scores(task: TaskSpec, X: np.ndarray) -> np.ndarray:
    """True log-likelihood ratio anomalous/normal under the generators.

    This is the Bayes-optimal ranking score for the task and upper-bounds the
    achievable ranking quality of any detector.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    log_norm = _gaussian_logpdf(X, task.normal_mean, task.normal_cov)
    if task.anomaly_kind == "mean-shift":
        center = task.normal_mean + task.anomaly_params["shift"]
        log_anom = _gaussian_logpdf(X, center, task.normal_cov)
    elif task.anomaly_kind == "covariance-inflation":
        c = task.anomaly_params["factor"]
        log_anom = _gaussian_logpdf(X, task.normal_mean, c * task.normal_cov)
    else:
        log_anom = _studentt_logpdf(
            X, task.normal_mean, task.normal_cov, task.anomaly_params["dof"]
        )
    return log_anom - log_norm
