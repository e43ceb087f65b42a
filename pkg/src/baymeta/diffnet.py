"""Embedding network with differentiable one-step adaptation.

The network is a small MLP mapping raw feature vectors to embeddings, with an
optional affine-free layer normalization on the output.  Parameters live in a
flat immutable vector (:class:`ParamVector`) whose layout names each weight
and bias, so optimizer updates are single vector operations and checkpoints
are trivial to serialize.

The adaptation step builds the conjugate posterior predictive from the
support embeddings *inside* the autodiff graph and takes one gradient step on
the negative support log-likelihood.  Because the engine differentiates
through its own backward pass, an outer objective evaluated at the adapted
parameters yields exact second-order meta-gradients; a first-order switch
detaches the inner gradient instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import Tensor
from .bayescore import NIWPrior

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector plus the (name, shape) layout that maps segments
    to network weights.  Immutable: updates produce new vectors."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        expect = sum(int(np.prod(shape)) for _, shape in self.layout)
        if values.size != expect:
            raise ValueError(f"layout describes {expect} values, vector has {values.size}")
        if not np.isfinite(values).all():
            raise ValueError("parameter values must be finite")

    @property
    def size(self) -> int:
        return self.values.size

    def to_dict(self) -> dict[str, np.ndarray]:
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[offset : offset + n].reshape(shape)
            offset += n
        return out

    def replace_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values=np.array(values, dtype=float), layout=self.layout)

    @staticmethod
    def from_dict(layout: Layout, mapping: Mapping[str, np.ndarray]) -> "ParamVector":
        flat = np.concatenate([np.asarray(mapping[name], dtype=float).ravel() for name, _ in layout])
        return ParamVector(values=flat, layout=layout)


def flatten_tensors(layout: Layout, tensors: Mapping[str, Tensor]) -> np.ndarray:
    return np.concatenate([tensors[name].value.ravel() for name, _ in layout])


@dataclass(frozen=True)
class EmbeddingNet:
    """MLP feature embedder: affine layers with tanh between, affine-free
    layer normalization on the output when ``layer_norm`` is set."""

    input_dim: int = 16
    hidden_dims: tuple[int, ...] = (32,)
    output_dim: int = 8
    layer_norm: bool = True
    ln_eps: float = 1e-5

    @property
    def layout(self) -> Layout:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        entries = []
        for i in range(len(dims) - 1):
            entries.append((f"W{i}", (dims[i], dims[i + 1])))
            entries.append((f"b{i}", (dims[i + 1],)))
        return tuple(entries)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def init_params(self, seed: int = 42) -> ParamVector:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        parts = {}
        for name, shape in self.layout:
            if name.startswith("W"):
                bound = 1.0 / math.sqrt(shape[0])
                parts[name] = rng.uniform(-bound, bound, size=shape)
            else:
                parts[name] = np.zeros(shape)
        return ParamVector.from_dict(self.layout, parts)

    def forward(self, theta: Mapping[str, Tensor], x: Tensor) -> Tensor:
        """Batched forward pass: (n, input_dim) -> (n, output_dim)."""
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input dim {x.shape[-1]} != expected {self.input_dim}")
        h = x
        for i in range(self.n_layers):
            h = ad.add(ad.matmul(h, theta[f"W{i}"]), theta[f"b{i}"])
            if i < self.n_layers - 1:
                h = ad.tanh(h)
        if self.layer_norm:
            mu = ad.mean(h, axis=1, keepdims=True)
            centered = ad.sub(h, mu)
            var = ad.mean(ad.mul(centered, centered), axis=1, keepdims=True)
            h = ad.div(centered, ad.sqrt(ad.add(var, ad.constant(self.ln_eps))))
        return h

    def param_tensors(self, params: ParamVector) -> dict[str, Tensor]:
        """Fresh leaf tensors for each parameter block."""
        return {name: ad.constant(arr) for name, arr in params.to_dict().items()}


def embed(net: EmbeddingNet, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass; accepts a single vector or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    out = net.forward(net.param_tensors(params), ad.constant(X)).value
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite activations in forward pass")
    return out[0] if single else out


def gradient(scalar_fn: Callable[[dict[str, Tensor]], Tensor], at: ParamVector) -> ParamVector:
    """Gradient of a scalar function of the parameters, as a ParamVector."""
    theta = {name: ad.constant(arr) for name, arr in at.to_dict().items()}
    out = scalar_fn(theta)
    grads = ad.grad(out, [theta[name] for name, _ in at.layout])
    flat = np.concatenate([g.value.ravel() for g in grads])
    return at.replace_values(flat)


# --------------------------------------------------------------------------
# differentiable conjugate posterior predictive
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictiveT:
    """Student-t predictive with graph-valued mean and scale (dof is a
    plain float: it depends only on the support count)."""

    mean: Tensor
    scale: Tensor
    dof: float
    dim: int


def posterior_predictive_t(prior: NIWPrior, Z: Tensor) -> PredictiveT:
    """Graph version of the conjugate update + predictive conversion.

    Gradients flow through everything the support embeddings touch: the
    posterior mean, the scale matrix, and later the density arguments.
    """
    K, d = Z.shape
    kappa_n = prior.kappa0 + K
    nu_n = prior.nu0 + K
    dof = nu_n - d + 1
    if not dof > 0:
        raise ValueError("predictive dof must be positive")

    zbar = ad.div(ad.sum_(Z, axis=0), ad.constant(float(K)))
    mu_n = ad.div(
        ad.add(ad.constant(prior.kappa0 * prior.mu0), ad.mul(ad.constant(float(K)), zbar)),
        ad.constant(kappa_n),
    )
    centered = ad.sub(Z, ad.reshape(zbar, (1, d)))
    scatter = ad.matmul(ad.transpose(centered), centered)
    dev = ad.sub(zbar, ad.constant(prior.mu0))
    rank1 = ad.mul(ad.constant(prior.kappa0 * K / kappa_n), ad.outer(dev, dev))
    lambda_n = ad.add(ad.constant(prior.lambda0), ad.add(scatter, rank1))
    lambda_n = ad.mul(ad.constant(0.5), ad.add(lambda_n, ad.transpose(lambda_n)))
    a_n = (kappa_n + 1.0) / (kappa_n * dof)
    return PredictiveT(mean=mu_n, scale=ad.mul(ad.constant(a_n), lambda_n), dof=dof, dim=d)


def studentt_logpdf_t(pred: PredictiveT, Z: Tensor) -> Tensor:
    """Batched Student-t log-density of the rows of ``Z``, on the graph."""
    n_rows, d = Z.shape
    if d != pred.dim:
        raise ValueError(f"input dim {d} != distribution dim {pred.dim}")
    nu = pred.dof
    const = float(gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu)) - 0.5 * d * math.log(nu * math.pi)
    diff = ad.sub(Z, ad.reshape(pred.mean, (1, d)))
    w = ad.solve_spd(pred.scale, ad.transpose(diff))
    delta = ad.sum_(ad.mul(diff, ad.transpose(w)), axis=1)
    return ad.sub(
        ad.constant(np.full(n_rows, const)),
        ad.add(
            ad.mul(ad.constant(0.5), ad.logdet_spd(pred.scale)),
            ad.mul(ad.constant(0.5 * (nu + d)), ad.log1p(ad.div(delta, ad.constant(nu)))),
        ),
    )


def reference_predictive(dim: int, scale_value: float, dof: float) -> PredictiveT:
    """Constant (non-adapting) predictive for the anomaly reference model."""
    return PredictiveT(
        mean=ad.constant(np.zeros(dim)),
        scale=ad.constant(scale_value * np.eye(dim)),
        dof=float(dof),
        dim=dim,
    )


# --------------------------------------------------------------------------
# one-step adaptation
# --------------------------------------------------------------------------

def support_nll(net: EmbeddingNet, theta: Mapping[str, Tensor], prior: NIWPrior,
                X_support: np.ndarray) -> Tensor:
    """Negative log-likelihood of the support embeddings under their own
    posterior predictive (the adaptation objective)."""
    Z = net.forward(theta, ad.constant(np.asarray(X_support, dtype=float)))
    pred = posterior_predictive_t(prior, Z)
    return ad.neg(ad.sum_(studentt_logpdf_t(pred, Z)))


def adapt_tensors(
    net: EmbeddingNet,
    theta: dict[str, Tensor],
    prior: NIWPrior,
    X_support: np.ndarray,
    alpha: float,
    second_order: bool = True,
    inner_steps: int = 1,
) -> dict[str, Tensor]:
    """One (or more) gradient steps on the support objective, on the graph.

    With ``second_order`` the returned parameters stay connected to ``theta``
    through the inner gradient; otherwise the gradient is detached and only
    the identity term survives (first-order variant).
    """
    if not alpha >= 0:
        raise ValueError("alpha must be non-negative")
    names = list(theta.keys())
    current = dict(theta)
    for _ in range(inner_steps):
        loss = support_nll(net, current, prior, X_support)
        if not np.isfinite(loss.value):
            raise FloatingPointError("non-finite adaptation loss")
        grads = ad.grad(loss, [current[n] for n in names], create_graph=second_order)
        current = {
            n: ad.sub(current[n], ad.mul(ad.constant(alpha), g))
            for n, g in zip(names, grads)
        }
    return current


def inner_update(
    net: EmbeddingNet,
    params: ParamVector,
    prior: NIWPrior,
    X_support: np.ndarray,
    alpha: float,
    inner_steps: int = 1,
) -> ParamVector:
    """Value-level adaptation: returns the adapted parameters as a new
    ParamVector (used at test time, where no outer gradient is needed)."""
    if alpha == 0:
        return params
    theta = net.param_tensors(params)
    adapted = adapt_tensors(net, theta, prior, X_support, alpha,
                            second_order=False, inner_steps=inner_steps)
    return params.replace_values(flatten_tensors(params.layout, adapted))
