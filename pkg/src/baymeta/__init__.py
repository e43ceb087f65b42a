"""Few-shot anomaly detection via Bayesian episodic meta-learning.

Normal embeddings get a conjugate Normal-Inverse-Wishart model whose
Student-t predictive scores queries against a fixed heavy-tailed reference;
the embedding network meta-learns through a differentiable one-step
adaptation, either centralized or across simulated federated clients with
supervised contrastive regularization.
"""

from .bayescore import (
    AnomalyReference,
    NIWPosterior,
    NIWPrior,
    StudentT,
    anomaly_score,
    hessian_bound_check,
    niw_posterior,
    predictive,
    studentt_logpdf,
    wellposedness_check,
)
from .diffnet import EmbeddingNet, ParamVector, embed, gradient, inner_update
from .episodes import Episode, TaskFamily, TaskSpec, gen_task, oracle_scores, sample_episode
from .estimators import BayPrAnoMetaDetector, CoresetNNDetector, ProtoMamlDetector
from .evalmetrics import auprc, auroc, episode_report, f1_optimal, kcenter_coreset, nn_score
from .fedsim import (
    EpisodeClient,
    QuadraticClient,
    aggregate,
    convergence_report,
    estimate_assumption_constants,
    federated_train,
    run_federated,
)
from .metalearn import (
    HyperParams,
    LossTrace,
    adapt_and_score,
    episode_loss,
    inner_loss,
    query_loss,
    supcon_loss,
    train_centralized,
    train_protomaml,
)

__version__ = "0.1.0"

__all__ = [
    "AnomalyReference",
    "BayPrAnoMetaDetector",
    "CoresetNNDetector",
    "EmbeddingNet",
    "Episode",
    "EpisodeClient",
    "HyperParams",
    "LossTrace",
    "NIWPosterior",
    "NIWPrior",
    "ParamVector",
    "ProtoMamlDetector",
    "QuadraticClient",
    "StudentT",
    "TaskFamily",
    "TaskSpec",
    "adapt_and_score",
    "aggregate",
    "anomaly_score",
    "auprc",
    "auroc",
    "convergence_report",
    "embed",
    "episode_loss",
    "episode_report",
    "estimate_assumption_constants",
    "f1_optimal",
    "federated_train",
    "gen_task",
    "gradient",
    "hessian_bound_check",
    "inner_loss",
    "inner_update",
    "kcenter_coreset",
    "niw_posterior",
    "nn_score",
    "oracle_scores",
    "predictive",
    "query_loss",
    "run_federated",
    "sample_episode",
    "studentt_logpdf",
    "supcon_loss",
    "train_centralized",
    "train_protomaml",
    "wellposedness_check",
]
