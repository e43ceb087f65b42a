"""Scikit-learn style detectors over the episode-level scoring paths.

Each detector fits on a support set of normal samples and scores new points,
so they slot into pipelines, cross-validation over thresholds, and other
ecosystem tooling.  Meta-training is a separate, heavier step (see
``metalearn.train_centralized`` / ``fedsim.federated_train``); its output
parameters are constructor arguments here, the way a pretrained backbone
would be.

Convention: higher ``score_samples`` means more anomalous, and ``predict``
returns 1 for anomalous, matching the episode labels used everywhere else.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .bayescore import AnomalyReference, NIWPrior, niw_posterior, predictive, anomaly_score
from .diffnet import EmbeddingNet, ParamVector, embed, inner_update
from .metalearn import proto_inner_update, proto_scores_from_embeddings
from .evalmetrics import kcenter_coreset, nn_score


class _ThresholdMixin:
    def predict(self, X) -> np.ndarray:
        """Binary anomaly labels from ``score_samples`` at the configured
        threshold (1 = anomalous, decided by score >= threshold)."""
        if self.threshold is None:
            raise ValueError("set `threshold` to use predict; score_samples needs none")
        return (self.score_samples(X) >= self.threshold).astype(int)

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X)


class BayPrAnoMetaDetector(_ThresholdMixin, BaseEstimator):
    """Likelihood-ratio anomaly detector with one-step Bayesian adaptation.

    ``fit`` adapts the embedding network on the (normal-only) support set and
    builds the conjugate posterior predictive from the adapted support
    embeddings; ``score_samples`` returns the log-ratio of the fixed
    heavy-tailed reference to that predictive.
    """

    def __init__(self, net: EmbeddingNet, params: ParamVector,
                 prior: NIWPrior | None = None, ref: AnomalyReference | None = None,
                 alpha: float = 5e-4, inner_steps: int = 1,
                 threshold: float | None = None):
        self.net = net
        self.params = params
        self.prior = prior
        self.ref = ref
        self.alpha = alpha
        self.inner_steps = inner_steps
        self.threshold = threshold

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        prior = self.prior or NIWPrior.default(self.net.output_dim)
        self.ref_ = self.ref or AnomalyReference(dim=self.net.output_dim)
        self.adapted_params_ = inner_update(
            self.net, self.params, prior, X, self.alpha, self.inner_steps
        )
        Zs = embed(self.net, self.adapted_params_, X)
        self.predictive_ = predictive(niw_posterior(prior, Zs))
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X) -> np.ndarray:
        check_is_fitted(self, "predictive_")
        X = check_array(X, dtype=np.float64)
        Z = embed(self.net, self.adapted_params_, X)
        return np.asarray(anomaly_score(self.predictive_, self.ref_, Z))


class ProtoMamlDetector(_ThresholdMixin, BaseEstimator):
    """Squared-distance-to-prototype detector with one-step adaptation."""

    def __init__(self, net: EmbeddingNet, params: ParamVector,
                 alpha: float = 5e-4, inner_steps: int = 1,
                 threshold: float | None = None):
        self.net = net
        self.params = params
        self.alpha = alpha
        self.inner_steps = inner_steps
        self.threshold = threshold

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.adapted_params_ = proto_inner_update(
            self.net, self.params, X, self.alpha, self.inner_steps
        )
        self.support_embeddings_ = embed(self.net, self.adapted_params_, X)
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X) -> np.ndarray:
        check_is_fitted(self, "support_embeddings_")
        X = check_array(X, dtype=np.float64)
        Z = embed(self.net, self.adapted_params_, X)
        return proto_scores_from_embeddings(self.support_embeddings_, Z)


class CoresetNNDetector(_ThresholdMixin, BaseEstimator):
    """Greedy k-center coreset of the normal samples, scored by distance to
    the nearest retained point.  Operates on whatever feature vectors it is
    given (raw inputs or embeddings); no training."""

    def __init__(self, fraction: float = 0.25, seed: int = 0,
                 threshold: float | None = None):
        self.fraction = fraction
        self.seed = seed
        self.threshold = threshold

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        idx = kcenter_coreset(X, self.fraction, seed=self.seed)
        self.coreset_ = X[idx]
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X) -> np.ndarray:
        check_is_fitted(self, "coreset_")
        X = check_array(X, dtype=np.float64)
        return np.asarray(nn_score(self.coreset_, X))
