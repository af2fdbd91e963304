"""scikit-learn compatible front end for the staged adaptation procedure."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adaptation import TrainConfig, forward, run_cda
from .clustering import ClusterConfig
from .embedding_io import EmbeddingSet


class ClusteringDomainAdapter(TransformerMixin, BaseEstimator):
    """Adapt a feature map from a labeled source domain to an unlabeled target.

    ``fit(X, y, X_target=...)`` runs source pre-training, MMD alignment,
    threshold-graph clustering of the target and pseudo-label fine-tuning.
    ``transform`` returns the adapted hidden features, ``predict`` the
    target pseudo-class of each row.

    Parameters
    ----------
    lam : float, default=0.5
        Weight of the MMD term.
    learning_rate : float, default=0.1
    max_iters : int, default=1500
        Iterations for stages 1+2 together; stage 4 uses the same count.
    batch_size : int, default=64
    n_kernels : int, default=5
        Gaussian kernels on the median-bandwidth ladder.
    mmd_layers : {"last", "last_two"}, default="last_two"
    alpha, beta, min_component_size
        Clustering thresholds, see :class:`SimplifiedSpectralClustering`.
    hidden_dim : int or None
        Adapter output width; defaults to the input width.
    random_state : int, default=0

    Attributes
    ----------
    params_ : AdapterParams
    pseudo_labels_ : ndarray of shape (n_target,)
        Stage-3 cluster id per target row, ``-1`` if discarded.
    kernel_spec_ : KernelSpec
    history_ : dict of per-stage loss histories
    """

    def __init__(self, lam=0.5, learning_rate=0.1, max_iters=1500, batch_size=64, n_kernels=5,
                 mmd_layers="last_two", alpha=0.675, beta=0.8, min_component_size=3,
                 hidden_dim=None, momentum=0.0, random_state=0):
        self.lam = lam
        self.learning_rate = learning_rate
        self.max_iters = max_iters
        self.batch_size = batch_size
        self.n_kernels = n_kernels
        self.mmd_layers = mmd_layers
        self.alpha = alpha
        self.beta = beta
        self.min_component_size = min_component_size
        self.hidden_dim = hidden_dim
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X, y, X_target=None):
        if X_target is None:
            raise ValueError("X_target is required")
        X, y = check_X_y(X, y, dtype=np.float64)
        Xt = check_array(X_target, dtype=np.float64)
        if Xt.shape[1] != X.shape[1]:
            raise ValueError(f"X_target has {Xt.shape[1]} features, X has {X.shape[1]}")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        tcfg = TrainConfig(lam=self.lam, learning_rate=self.learning_rate, max_iters=self.max_iters,
                           batch_size=self.batch_size, seed=self.random_state, mmd_layers=self.mmd_layers,
                           momentum=self.momentum, hidden_dim=self.hidden_dim, n_kernels=self.n_kernels)
        ccfg = ClusterConfig(self.alpha, self.beta, self.min_component_size)
        res = run_cda(EmbeddingSet(X, y_enc), EmbeddingSet(Xt), tcfg, ccfg)
        self.result_ = res
        self.params_ = res.params
        self.pseudo_labels_ = res.pseudo.assignments
        self.kernel_spec_ = res.spec
        self.history_ = res.histories
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return forward(self.params_, X).hidden

    def predict(self, X):
        """Most likely target pseudo-class per row."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return np.argmax(forward(self.params_, X).target_logits, axis=1)

    def predict_source(self, X):
        """Most likely source class per row, in the original label values."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return self.classes_[np.argmax(forward(self.params_, X).source_logits, axis=1)]
