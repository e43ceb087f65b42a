"""Episodic meta-training and scoring loops.

Two methods share the same outer loop:

* the Bayesian route adapts the embedding with one gradient step on the
  support negative log-likelihood, then scores queries with the conjugate
  posterior predictive against a fixed heavy-tailed reference, optionally
  regularized by a supervised contrastive term on the adapted query
  embeddings;
* the prototype baseline adapts by shrinking support embeddings toward their
  mean and scores queries by squared distance to the prototype, trained with
  binary cross-entropy on negated squared distances.

Meta-gradients flow through the adaptation step (exact second order by
default, detached first-order variant behind a flag).  The outer update is
plain gradient descent, matching the convergence analysis; an
adaptive-moment option is available for parity with common practice.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import bayescore
from .autodiff import Tensor
from .bayescore import AnomalyReference, NIWPrior
from .diffnet import (
    EmbeddingNet,
    ParamVector,
    adapt_tensors,
    embed,
    inner_update,
    posterior_predictive_t,
    reference_predictive,
    studentt_logpdf_t,
)
from .episodes import Episode, TaskFamily, episode_stream_seed, gen_task, sample_episode

LOSS_ABORT_THRESHOLD = 1e8


class DivergenceError(RuntimeError):
    """Training produced a non-finite or absurdly large loss."""


@dataclass(frozen=True)
class HyperParams:
    """Optimization and episode hyperparameters (defaults follow the
    reference configuration: alpha 5e-4, beta 1e-4, gamma 1.0, tau 0.07,
    lambda 0.1, one inner step, 50x50 episodes, seed handled by callers)."""

    alpha: float = 5e-4
    beta: float = 1e-4
    gamma: float = 1.0
    lam: float = 0.1
    tau: float = 0.07
    inner_steps: int = 1
    epochs: int = 50
    episodes_per_epoch: int = 50
    val_episodes: int = 20
    second_order: bool = True
    meta_batch: int = 1
    optimizer: str = "sgd"
    normalize_contrastive: bool = False
    support_size: int = 5
    query_normals: int = 12
    query_anomalies: int = 4

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")

    def without_contrastive(self) -> "HyperParams":
        return replace(self, lam=0.0)


@dataclass
class LossTrace:
    """Per-epoch mean training and validation losses."""

    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float]]:
        return [(i, t, v) for i, (t, v) in enumerate(zip(self.train, self.val))]


# --------------------------------------------------------------------------
# losses (graph-valued)
# --------------------------------------------------------------------------

def supcon_loss_t(Z: Tensor, labels: np.ndarray, tau: float,
                  normalize: bool = False) -> Tensor:
    """Supervised contrastive loss with raw inner products.

    Each anchor attracts its same-label partners relative to all other
    samples, softmax-weighted at temperature ``tau``.  Anchors without any
    same-label partner contribute zero.  Every per-anchor term is the
    negative log of a softmax probability, so the loss is non-negative.
    """
    n = Z.shape[0]
    y = np.asarray(labels)
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 samples")
    if normalize:
        norms = ad.sqrt(ad.sum_(ad.mul(Z, Z), axis=1, keepdims=True))
        Z = ad.div(Z, norms)

    sims = ad.div(ad.matmul(Z, ad.transpose(Z)), ad.constant(tau))
    off_diag = 1.0 - np.eye(n)
    pos_mask = (y[:, None] == y[None, :]).astype(float) * off_diag
    pos_counts = pos_mask.sum(axis=1)
    active = pos_counts > 0
    if not active.any():
        return ad.constant(0.0)

    # stabilized per-row log-sum-exp over k != i: the diagonal is pushed to
    # -inf additively (its exp is exactly zero, in value and gradient) and
    # the constant shift cancels, so the computed function is unchanged
    shift = np.where(off_diag > 0, sims.value, -np.inf).max(axis=1, keepdims=True)
    diag_to_neg_inf = ad.constant(np.where(off_diag > 0, 0.0, -np.inf))
    expd = ad.exp(ad.sub(ad.add(sims, diag_to_neg_inf), ad.constant(shift)))
    log_denom = ad.add(ad.log(ad.sum_(expd, axis=1)), ad.constant(shift[:, 0]))

    pos_sum = ad.sum_(ad.mul(sims, ad.constant(pos_mask)), axis=1)
    inv_counts = np.where(active, 1.0 / np.maximum(pos_counts, 1.0), 0.0)
    per_anchor = ad.sub(
        ad.mul(ad.constant(active.astype(float)), log_denom),
        ad.mul(ad.constant(inv_counts), pos_sum),
    )
    return ad.sum_(per_anchor)


def query_loss_t(
    net: EmbeddingNet,
    theta_adapted: dict[str, Tensor],
    prior: NIWPrior,
    ref: AnomalyReference,
    X_support: np.ndarray,
    X_query: np.ndarray,
    labels: np.ndarray,
) -> Tensor:
    """Label-weighted negative log-likelihood of adapted query embeddings:
    normal queries under the support posterior predictive (rebuilt from the
    adapted support embeddings), anomalous queries under the fixed reference."""
    y = np.asarray(labels, dtype=float)
    Zs = net.forward(theta_adapted, ad.constant(np.asarray(X_support, dtype=float)))
    pred0 = posterior_predictive_t(prior, Zs)
    Zq = net.forward(theta_adapted, ad.constant(np.asarray(X_query, dtype=float)))
    lp0 = studentt_logpdf_t(pred0, Zq)
    lp1 = studentt_logpdf_t(reference_predictive(ref.dim, ref.scale_value, ref.dof), Zq)
    weighted = ad.add(ad.mul(ad.constant(1.0 - y), lp0), ad.mul(ad.constant(y), lp1))
    return ad.neg(ad.sum_(weighted))


def episode_loss_t(
    net: EmbeddingNet,
    theta: dict[str, Tensor],
    episode: Episode,
    prior: NIWPrior,
    ref: AnomalyReference,
    hp: HyperParams,
) -> Tensor:
    """Adapt on the support, then query loss plus the weighted contrastive
    term on adapted query embeddings."""
    adapted = adapt_tensors(
        net, theta, prior, episode.support, hp.alpha,
        second_order=hp.second_order, inner_steps=hp.inner_steps,
    )
    loss = query_loss_t(net, adapted, prior, ref, episode.support,
                        episode.query_x, episode.query_y)
    if hp.lam > 0:
        Zq = net.forward(adapted, ad.constant(episode.query_x))
        contrast = supcon_loss_t(Zq, episode.query_y, hp.tau,
                                 normalize=hp.normalize_contrastive)
        loss = ad.add(loss, ad.mul(ad.constant(hp.lam), contrast))
    return loss


# --------------------------------------------------------------------------
# losses (value-level convenience)
# --------------------------------------------------------------------------

def inner_loss(net: EmbeddingNet, params: ParamVector, prior: NIWPrior,
               X_support: np.ndarray) -> float:
    """Support negative log-likelihood at fixed parameters (the quantity the
    inner step descends), via the plain-numpy density path."""
    Zs = embed(net, params, X_support)
    pred = bayescore.predictive(bayescore.niw_posterior(prior, Zs))
    return -float(np.sum(bayescore.studentt_logpdf(pred, Zs)))


def query_loss(
    net: EmbeddingNet,
    adapted_params: ParamVector,
    prior: NIWPrior,
    ref: AnomalyReference,
    X_support: np.ndarray,
    X_query: np.ndarray,
    labels: np.ndarray,
) -> float:
    theta = net.param_tensors(adapted_params)
    return query_loss_t(net, theta, prior, ref, X_support, X_query, labels).item()


def supcon_loss(embeddings: np.ndarray, labels: np.ndarray, tau: float,
                normalize: bool = False) -> float:
    Z = ad.constant(np.asarray(embeddings, dtype=float))
    return supcon_loss_t(Z, labels, tau, normalize=normalize).item()


def episode_loss(net: EmbeddingNet, params: ParamVector, episode: Episode,
                 prior: NIWPrior, ref: AnomalyReference, hp: HyperParams) -> float:
    return episode_loss_t(net, net.param_tensors(params), episode, prior, ref, hp).item()


# --------------------------------------------------------------------------
# meta-gradients
# --------------------------------------------------------------------------

def episode_meta_gradient(
    net: EmbeddingNet,
    params: ParamVector,
    episode: Episode,
    prior: NIWPrior,
    ref: AnomalyReference,
    hp: HyperParams,
) -> tuple[np.ndarray, float]:
    """Gradient of the episode loss with respect to the meta-parameters,
    flattened; raises :class:`DivergenceError` on non-finite losses."""
    theta = net.param_tensors(params)
    loss = episode_loss_t(net, theta, episode, prior, ref, hp)
    _guard(loss.item())
    grads = ad.grad(loss, [theta[name] for name, _ in params.layout])
    flat = np.concatenate([g.value.ravel() for g in grads])
    return flat, loss.item()


def _guard(loss: float) -> None:
    if not np.isfinite(loss) or abs(loss) > LOSS_ABORT_THRESHOLD:
        raise DivergenceError(f"loss diverged: {loss}")


class _Optimizer:
    """Plain descent, or adaptive moments when requested."""

    def __init__(self, hp: HyperParams, n: int):
        self.hp = hp
        self.t = 0
        if hp.optimizer == "adam":
            self.m = np.zeros(n)
            self.v = np.zeros(n)

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.hp.optimizer == "sgd":
            return values - self.hp.beta * grad
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        return values - self.hp.beta * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

def _train_loop(grad_fn, val_fn, net: EmbeddingNet, family: TaskFamily,
                hp: HyperParams, seed: int, client_id: int = 0,
                param_hashes: list[str] | None = None) -> tuple[ParamVector, LossTrace]:
    params = net.init_params(seed)
    opt = _Optimizer(hp, params.size)
    trace = LossTrace()
    step = 0
    for epoch in range(hp.epochs):
        epoch_losses = []
        pending: list[np.ndarray] = []
        for _ in range(hp.episodes_per_epoch):
            task = gen_task(family, client_id, "train", task_index=step)
            episode = sample_episode(
                task, hp.support_size, hp.query_normals, hp.query_anomalies,
                seed=episode_stream_seed(seed, client_id, step),
            )
            g, loss = grad_fn(params, episode)
            epoch_losses.append(loss)
            pending.append(g)
            if len(pending) == hp.meta_batch:
                params = params.replace_values(
                    opt.step(params.values, np.mean(pending, axis=0))
                )
                pending = []
                if param_hashes is not None:
                    param_hashes.append(_hash_values(params.values))
            step += 1
        if pending:
            params = params.replace_values(opt.step(params.values, np.mean(pending, axis=0)))
            if param_hashes is not None:
                param_hashes.append(_hash_values(params.values))
        val_losses = []
        for v in range(hp.val_episodes):
            task = gen_task(family, client_id, "val", task_index=epoch * hp.val_episodes + v)
            episode = sample_episode(
                task, hp.support_size, hp.query_normals, hp.query_anomalies,
                seed=episode_stream_seed(seed, client_id, epoch * hp.val_episodes + v, "val"),
            )
            val_losses.append(val_fn(params, episode))
        trace.train.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        trace.val.append(float(np.mean(val_losses)) if val_losses else float("nan"))
    return params, trace


def _hash_values(values: np.ndarray) -> str:
    import hashlib

    return hashlib.sha256(values.tobytes()).hexdigest()


def train_centralized(
    net: EmbeddingNet,
    prior: NIWPrior,
    family: TaskFamily,
    hp: HyperParams,
    seed: int,
    ref: AnomalyReference | None = None,
    param_hashes: list[str] | None = None,
) -> tuple[ParamVector, LossTrace]:
    """Episodic meta-training of the Bayesian detector; validation episodes
    use the same loss (contrastive term included) so the traces compare."""
    ref = ref or AnomalyReference(dim=net.output_dim)

    def grad_fn(params, episode):
        return episode_meta_gradient(net, params, episode, prior, ref, hp)

    def val_fn(params, episode):
        loss = episode_loss(net, params, episode, prior, ref, hp)
        _guard(loss)
        return loss

    return _train_loop(grad_fn, val_fn, net, family, hp, seed,
                       param_hashes=param_hashes)


def adapt_and_score(
    net: EmbeddingNet,
    params: ParamVector,
    X_support: np.ndarray,
    X_test: np.ndarray,
    prior: NIWPrior,
    hp: HyperParams,
    ref: AnomalyReference | None = None,
) -> np.ndarray:
    """Test-time scoring: one-step adaptation on the support, then the
    log-likelihood-ratio score for each test input.  No contrastive term."""
    ref = ref or AnomalyReference(dim=net.output_dim)
    adapted = inner_update(net, params, prior, X_support, hp.alpha, hp.inner_steps)
    Zs = embed(net, adapted, X_support)
    pred0 = bayescore.predictive(bayescore.niw_posterior(prior, Zs))
    Zt = embed(net, adapted, np.atleast_2d(X_test))
    return np.asarray(bayescore.anomaly_score(pred0, ref, Zt))


# --------------------------------------------------------------------------
# prototype baseline
# --------------------------------------------------------------------------

def proto_inner_loss_t(net: EmbeddingNet, theta: dict[str, Tensor],
                       X_support: np.ndarray) -> Tensor:
    """Mean squared distance of support embeddings to their prototype."""
    Z = net.forward(theta, ad.constant(np.asarray(X_support, dtype=float)))
    c = ad.mean(Z, axis=0)
    diff = ad.sub(Z, ad.reshape(c, (1, Z.shape[1])))
    return ad.mean(ad.sum_(ad.mul(diff, diff), axis=1))


def proto_adapt_tensors(net: EmbeddingNet, theta: dict[str, Tensor],
                        X_support: np.ndarray, alpha: float,
                        second_order: bool = True, inner_steps: int = 1) -> dict[str, Tensor]:
    names = list(theta.keys())
    current = dict(theta)
    for _ in range(inner_steps):
        loss = proto_inner_loss_t(net, current, X_support)
        grads = ad.grad(loss, [current[n] for n in names], create_graph=second_order)
        current = {
            n: ad.sub(current[n], ad.mul(ad.constant(alpha), g))
            for n, g in zip(names, grads)
        }
    return current


def proto_episode_loss_t(net: EmbeddingNet, theta: dict[str, Tensor],
                         episode: Episode, hp: HyperParams) -> Tensor:
    """Binary cross-entropy on negated squared distances to the prototype,
    computed in the adapted embedding space."""
    adapted = proto_adapt_tensors(net, theta, episode.support, hp.alpha,
                                  second_order=hp.second_order,
                                  inner_steps=hp.inner_steps)
    Zs = net.forward(adapted, ad.constant(episode.support))
    c = ad.mean(Zs, axis=0)
    Zq = net.forward(adapted, ad.constant(episode.query_x))
    diff = ad.sub(Zq, ad.reshape(c, (1, Zq.shape[1])))
    logits = ad.neg(ad.sum_(ad.mul(diff, diff), axis=1))
    y = episode.query_y.astype(float)
    # logits are <= 0, so log(1 + exp(logit)) never overflows
    bce = ad.sub(ad.log(ad.add(ad.constant(1.0), ad.exp(logits))),
                 ad.mul(ad.constant(y), logits))
    return ad.sum_(bce)


def proto_meta_gradient(net: EmbeddingNet, params: ParamVector, episode: Episode,
                        hp: HyperParams) -> tuple[np.ndarray, float]:
    theta = net.param_tensors(params)
    loss = proto_episode_loss_t(net, theta, episode, hp)
    _guard(loss.item())
    grads = ad.grad(loss, [theta[name] for name, _ in params.layout])
    return np.concatenate([g.value.ravel() for g in grads]), loss.item()


def train_protomaml(
    net: EmbeddingNet,
    family: TaskFamily,
    hp: HyperParams,
    seed: int,
) -> tuple[ParamVector, LossTrace]:
    """Meta-training of the prototype baseline under the same protocol."""

    def grad_fn(params, episode):
        return proto_meta_gradient(net, params, episode, hp)

    def val_fn(params, episode):
        loss = proto_episode_loss_t(net, net.param_tensors(params), episode, hp).item()
        _guard(loss)
        return loss

    return _train_loop(grad_fn, val_fn, net, family, hp, seed)


def proto_inner_update(net: EmbeddingNet, params: ParamVector, X_support: np.ndarray,
                       alpha: float, inner_steps: int = 1) -> ParamVector:
    if alpha == 0:
        return params
    theta = net.param_tensors(params)
    adapted = proto_adapt_tensors(net, theta, X_support, alpha,
                                  second_order=False, inner_steps=inner_steps)
    from .diffnet import flatten_tensors

    return params.replace_values(flatten_tensors(params.layout, adapted))


def proto_scores_from_embeddings(Z_support: np.ndarray, Z_test: np.ndarray) -> np.ndarray:
    """Squared distance to the support prototype, at the embedding level."""
    c = np.mean(np.asarray(Z_support, dtype=float), axis=0)
    diff = np.atleast_2d(Z_test) - c
    return np.sum(diff * diff, axis=1)


def proto_adapt_and_score(net: EmbeddingNet, params: ParamVector,
                          X_support: np.ndarray, X_test: np.ndarray,
                          hp: HyperParams) -> np.ndarray:
    adapted = proto_inner_update(net, params, X_support, hp.alpha, hp.inner_steps)
    Zs = embed(net, adapted, X_support)
    Zt = embed(net, adapted, np.atleast_2d(X_test))
    return proto_scores_from_embeddings(Zs, Zt)
