"""Federated meta-training simulator with convergence diagnostics.

One round: broadcast the global parameter vector, let each participating
client compute a stochastic meta-gradient on one locally sampled episode,
average the gradients, and take a single descent step with rate
``eta = gamma * beta``.  Clients share nothing and are addressed purely
through gradients: the server-side trace holds aggregate norms, losses,
participation sets, and parameter snapshots -- never task parameters or raw
samples.

Determinism contract: per-client randomness is derived from (run seed,
client id, round index), participation sets from (run seed, round index),
and the reduction order is fixed by sorted client id.  Trajectories are
therefore bitwise identical regardless of how many workers execute the
clients, and a single-client full-participation run reproduces centralized
training exactly.

For empirical verification of the stationarity bound, a closed-form
quadratic client (known smoothness, noise, and heterogeneity constants) can
be swapped in anywhere an episode client is used.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .bayescore import AnomalyReference, NIWPrior
from .diffnet import EmbeddingNet, ParamVector
from .episodes import TaskFamily, episode_stream_seed, gen_task, sample_episode
from .metalearn import HyperParams, episode_meta_gradient, _guard


class FederatedClient(Protocol):
    """What the server needs from a client: stochastic round gradients plus
    (for diagnostics only) estimates of its expected gradient and objective."""

    client_id: int

    def round_gradient(self, values: np.ndarray, round_idx: int) -> tuple[np.ndarray, float]: ...

    def gradient_samples(self, values: np.ndarray, n: int, seed: int) -> np.ndarray: ...

    def expected_gradient(self, values: np.ndarray, n: int, seed: int) -> np.ndarray: ...

    def objective_value(self, values: np.ndarray, n: int, seed: int) -> float: ...


@dataclass
class EpisodeClient:
    """Client whose objective is the episode meta-loss over its local task
    distribution (the base family recentred by the client's offset)."""

    client_id: int
    net: EmbeddingNet
    prior: NIWPrior
    ref: AnomalyReference
    hp: HyperParams
    family: TaskFamily
    run_seed: int

    def _episode(self, round_idx: int, stream: str = "train"):
        task = gen_task(self.family, self.client_id, "train", task_index=round_idx)
        return sample_episode(
            task, self.hp.support_size, self.hp.query_normals, self.hp.query_anomalies,
            seed=episode_stream_seed(self.run_seed, self.client_id, round_idx, stream),
        )

    def _params(self, values: np.ndarray) -> ParamVector:
        layout = self.net.layout
        return ParamVector(values=np.array(values), layout=layout)

    def round_gradient(self, values: np.ndarray, round_idx: int) -> tuple[np.ndarray, float]:
        episode = self._episode(round_idx)
        return episode_meta_gradient(
            self.net, self._params(values), episode, self.prior, self.ref, self.hp
        )

    def gradient_samples(self, values: np.ndarray, n: int, seed: int) -> np.ndarray:
        params = self._params(values)
        out = np.empty((n, values.size))
        for i in range(n):
            task = gen_task(self.family, self.client_id, "val", task_index=seed * 1_000_003 + i)
            episode = sample_episode(
                task, self.hp.support_size, self.hp.query_normals, self.hp.query_anomalies,
                seed=episode_stream_seed(self.run_seed, self.client_id, seed * 1_000_003 + i, "val"),
            )
            out[i], _ = episode_meta_gradient(
                self.net, params, episode, self.prior, self.ref, self.hp
            )
        return out

    def expected_gradient(self, values: np.ndarray, n: int, seed: int) -> np.ndarray:
        return self.gradient_samples(values, n, seed).mean(axis=0)

    def objective_value(self, values: np.ndarray, n: int, seed: int) -> float:
        from .metalearn import episode_loss

        params = self._params(values)
        losses = []
        for i in range(n):
            task = gen_task(self.family, self.client_id, "val", task_index=seed * 2_000_003 + i)
            episode = sample_episode(
                task, self.hp.support_size, self.hp.query_normals, self.hp.query_anomalies,
                seed=episode_stream_seed(self.run_seed, self.client_id, seed * 2_000_003 + i, "val"),
            )
            losses.append(episode_loss(self.net, params, episode, self.prior, self.ref, self.hp))
        return float(np.mean(losses))


@dataclass
class QuadraticClient:
    """Closed-form test client: objective ``0.5 ||theta - a_c||^2`` with
    additive Gaussian gradient noise of total variance ``sigma^2``.

    Per-client smoothness is exactly 1, the heterogeneity constant is the
    dispersion of the anchors, and the global optimum is the anchor mean --
    everything the stationarity bound needs is known in closed form.
    """

    client_id: int
    anchor: np.ndarray
    noise_sigma: float = 0.0
    run_seed: int = 0

    def _noise(self, round_idx: int, extra: int = 0) -> np.ndarray:
        if self.noise_sigma == 0:
            return np.zeros_like(self.anchor)
        rng = np.random.default_rng(
            np.random.SeedSequence([self.run_seed, self.client_id, round_idx, extra])
        )
        p = self.anchor.size
        return self.noise_sigma / np.sqrt(p) * rng.standard_normal(p)

    def round_gradient(self, values: np.ndarray, round_idx: int) -> tuple[np.ndarray, float]:
        grad = values - self.anchor + self._noise(round_idx)
        loss = 0.5 * float(np.sum((values - self.anchor) ** 2))
        return grad, loss

    def gradient_samples(self, values: np.ndarray, n: int, seed: int) -> np.ndarray:
        base = values - self.anchor
        return np.stack([base + self._noise(i, extra=seed + 1) for i in range(n)])

    def expected_gradient(self, values: np.ndarray, n: int, seed: int) -> np.ndarray:
        return values - self.anchor

    def objective_value(self, values: np.ndarray, n: int, seed: int) -> float:
        return 0.5 * float(np.sum((values - self.anchor) ** 2))


# --------------------------------------------------------------------------
# server
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FedRound:
    round: int
    grad_norm: float
    mean_loss: float
    participants: tuple[int, ...]
    params_hash: str


@dataclass
class FedTrace:
    """Round-by-round server record.  Holds only aggregates and global
    parameter snapshots; by construction there is no field that can carry a
    task specification or raw samples."""

    rounds: list[FedRound] = field(default_factory=list)
    checkpoints: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float, int]]:
        return [(r.round, r.grad_norm, r.mean_loss, len(r.participants)) for r in self.rounds]


def aggregate(grads: Sequence[np.ndarray], eta: float, values: np.ndarray) -> np.ndarray:
    """Average the client gradients (fixed stacking order) and descend."""
    if len(grads) == 0:
        raise ValueError("cannot aggregate an empty participation set")
    mean_grad = np.mean(np.stack(grads), axis=0)
    return values - eta * mean_grad


def _participants(n_clients: int, participation, seed: int, round_idx: int) -> list[int]:
    if participation is None:
        return list(range(n_clients))
    m = participation if isinstance(participation, int) else max(1, round(participation * n_clients))
    m = min(m, n_clients)
    if m == n_clients:
        return list(range(n_clients))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 15485863, round_idx]))
    return sorted(rng.choice(n_clients, size=m, replace=False).tolist())


def run_federated(
    clients: Sequence[FederatedClient],
    init_values: np.ndarray,
    eta: float,
    rounds: int,
    participation: int | float | None = None,
    seed: int = 0,
    checkpoint_every: int | None = None,
    workers: int = 1,
) -> tuple[np.ndarray, FedTrace]:
    """Run the round loop; returns the final parameter vector and the trace.

    ``participation`` is a client count (int), a fraction, or None for full
    participation.  Checkpoints store the iterate at the *start* of selected
    rounds plus the final iterate, for later gradient-norm estimation.
    """
    clients = sorted(clients, key=lambda c: c.client_id)
    values = np.array(init_values, dtype=float)
    trace = FedTrace()
    if checkpoint_every:
        trace.checkpoints.append((0, values.copy()))

    for r in range(rounds):
        chosen = _participants(len(clients), participation, seed, r)
        active = [clients[i] for i in chosen]
        if workers > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda c: c.round_gradient(values, r), active))
        else:
            results = [c.round_gradient(values, r) for c in active]
        grads = [g for g, _ in results]
        losses = [loss for _, loss in results]
        for loss in losses:
            _guard(loss)
        mean_grad_norm = float(np.linalg.norm(np.mean(np.stack(grads), axis=0)))
        values = aggregate(grads, eta, values)
        trace.rounds.append(
            FedRound(
                round=r + 1,
                grad_norm=mean_grad_norm,
                mean_loss=float(np.mean(losses)),
                participants=tuple(c.client_id for c in active),
                params_hash=hashlib.sha256(values.tobytes()).hexdigest(),
            )
        )
        if checkpoint_every and ((r + 1) % checkpoint_every == 0 or r + 1 == rounds):
            trace.checkpoints.append((r + 1, values.copy()))
    return values, trace


def make_episode_clients(
    net: EmbeddingNet,
    prior: NIWPrior,
    family: TaskFamily,
    hp: HyperParams,
    n_clients: int,
    run_seed: int,
    ref: AnomalyReference | None = None,
) -> list[EpisodeClient]:
    ref = ref or AnomalyReference(dim=net.output_dim)
    return [
        EpisodeClient(
            client_id=c, net=net, prior=prior, ref=ref, hp=hp,
            family=family, run_seed=run_seed,
        )
        for c in range(n_clients)
    ]


def federated_train(
    net: EmbeddingNet,
    prior: NIWPrior,
    family: TaskFamily,
    hp: HyperParams,
    n_clients: int,
    rounds: int,
    seed: int,
    participation: int | float | None = None,
    ref: AnomalyReference | None = None,
    checkpoint_every: int | None = None,
    workers: int = 1,
) -> tuple[ParamVector, FedTrace]:
    """High-level entry: build episode clients, run rounds, return parameters."""
    clients = make_episode_clients(net, prior, family, hp, n_clients, seed, ref)
    init = net.init_params(seed)
    values, trace = run_federated(
        clients, init.values, eta=hp.gamma * hp.beta, rounds=rounds,
        participation=participation, seed=seed,
        checkpoint_every=checkpoint_every, workers=workers,
    )
    return init.replace_values(values), trace


# --------------------------------------------------------------------------
# assumption constants and the stationarity bound
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantsEstimate:
    L_hat: float
    sigma2_hat: float
    zeta2_hat: float


def estimate_assumption_constants(
    clients: Sequence[FederatedClient],
    probe_points: Sequence[np.ndarray],
    n_samples: int = 50,
    seed: int = 0,
) -> ConstantsEstimate:
    """Monte-Carlo estimates of the smoothness, episode-noise, and
    heterogeneity constants from gradient samples at probe parameters.

    Smoothness is a max of gradient-difference ratios over probe pairs (a
    lower bound on the true Lipschitz constant); noise is the mean per-client
    gradient variance (unbiased estimator); heterogeneity is the mean squared
    dispersion of client mean-gradients around the global mean-gradient.
    """
    if len(probe_points) < 2:
        raise ValueError("need at least 2 probe points to estimate smoothness")
    probes = [np.asarray(p, dtype=float) for p in probe_points]

    mean_grads = np.empty((len(probes), len(clients), probes[0].size))
    variances = []
    for j, theta in enumerate(probes):
        for i, client in enumerate(clients):
            samples = client.gradient_samples(theta, n_samples, seed + j)
            g_bar = samples.mean(axis=0)
            mean_grads[j, i] = g_bar
            if n_samples > 1:
                variances.append(
                    float(np.sum((samples - g_bar) ** 2) / (n_samples - 1))
                )
    sigma2 = float(np.mean(variances)) if variances else 0.0

    zeta_terms = []
    for j in range(len(probes)):
        global_grad = mean_grads[j].mean(axis=0)
        zeta_terms.append(float(np.mean(np.sum((mean_grads[j] - global_grad) ** 2, axis=1))))
    zeta2 = float(np.mean(zeta_terms))

    L = 0.0
    for i in range(len(clients)):
        for j in range(len(probes)):
            for k in range(j + 1, len(probes)):
                denom = float(np.linalg.norm(probes[j] - probes[k]))
                if denom == 0:
                    continue
                L = max(L, float(np.linalg.norm(mean_grads[j, i] - mean_grads[k, i])) / denom)
    return ConstantsEstimate(L_hat=L, sigma2_hat=sigma2, zeta2_hat=zeta2)


@dataclass(frozen=True)
class ConvergenceReport:
    lhs: float
    rhs: float | None
    satisfied: bool | None
    precondition_ok: bool
    eta: float
    rounds: int
    participation_size: int
    f0: float
    f_star: float | None


def global_gradient_norms(
    clients: Sequence[FederatedClient],
    checkpoints: Sequence[tuple[int, np.ndarray]],
    n_samples: int = 200,
    seed: int = 0,
) -> list[float]:
    """Squared norm of the estimated global gradient at each checkpoint."""
    out = []
    for r, values in checkpoints:
        grads = [c.expected_gradient(values, n_samples, seed + r) for c in clients]
        out.append(float(np.sum(np.mean(np.stack(grads), axis=0) ** 2)))
    return out


def convergence_report(
    trace: FedTrace,
    clients: Sequence[FederatedClient],
    constants: ConstantsEstimate,
    eta: float,
    rounds: int,
    participation_size: int,
    f_star: float | None = None,
    n_samples: int = 200,
    seed: int = 0,
) -> ConvergenceReport:
    """Compare the mean squared global gradient norm along the trajectory with

        2 (F(theta_0) - F_star) / (eta R) + L eta (sigma^2 / |C_r| + zeta^2).

    The check requires ``eta <= 1/L``; if that precondition fails the report
    flags it and leaves the comparison unasserted.  Without a known optimum
    value the right-hand side is also left unset.
    """
    if not trace.checkpoints:
        raise ValueError("trace has no checkpoints: run with checkpoint_every set")
    # iterates before the final update approximate the running average
    pre_final = [(r, v) for r, v in trace.checkpoints if r < rounds]
    lhs = float(np.mean(global_gradient_norms(clients, pre_final, n_samples, seed)))
    theta0 = trace.checkpoints[0][1]
    f0 = float(np.mean([c.objective_value(theta0, n_samples, seed) for c in clients]))
    precondition_ok = constants.L_hat <= 0 or eta <= 1.0 / constants.L_hat

    rhs = None
    satisfied = None
    if f_star is not None:
        rhs = 2.0 * (f0 - f_star) / (eta * rounds) + constants.L_hat * eta * (
            constants.sigma2_hat / participation_size + constants.zeta2_hat
        )
        if precondition_ok:
            satisfied = lhs <= rhs
    return ConvergenceReport(
        lhs=lhs, rhs=rhs, satisfied=satisfied, precondition_ok=precondition_ok,
        eta=eta, rounds=rounds, participation_size=participation_size,
        f0=f0, f_star=f_star,
    )


def fit_rate(ladder: Sequence[tuple[int, float]]) -> float:
    """Log-log slope of (rounds, min squared gradient norm) pairs."""
    R = np.array([r for r, _ in ladder], dtype=float)
    m = np.array([v for _, v in ladder], dtype=float)
    slope, _ = np.polyfit(np.log(R), np.log(m), 1)
    return float(slope)
