"""Linear probing: multinomial logistic regression on frozen embeddings.

The regularization strength follows the inverse convention of common
toolkits: with strength ``C`` the objective is

    sum_i CE(softmax(W x_i + b), y_i) + ||W||^2 / (2 C)

and the automatic rule sets ``C = M * n_classes / 100`` for feature dimension
``M``. Larger ``C`` means a weaker penalty. The bias is not penalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_vector
from .exceptions import DataError, DegenerateLabels, RangeError, ShapeError
from .store import EmbeddingMatrix


def auto_strength(n_features: int, n_classes: int) -> float:
    return n_features * n_classes / 100.0


@dataclass(frozen=True)
class ProbeModel:
    weights: np.ndarray  # (C, M)
    bias: np.ndarray  # (C,)
    l2_strength: float


def probe_objective(params, X, Y, l2_strength):
    """Objective value and gradient at flat ``params = [W.ravel(), b]``.

    ``Y`` is the one-hot label matrix (n, C).
    """
    n, M = X.shape
    C = Y.shape[1]
    W = params[: C * M].reshape(C, M)
    b = params[C * M :]
    logits = X @ W.T + b
    lse = logsumexp(logits, axis=1)
    loss = np.sum(lse - np.sum(logits * Y, axis=1)) + 0.5 * np.sum(W * W) / l2_strength
    P = np.exp(logits - lse[:, None])
    G = P - Y
    gW = G.T @ X + W / l2_strength
    gb = G.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def fit_probe(X, y, l2_strength="auto", max_iter=1000, tol=1e-6, init=None) -> ProbeModel:
    """Fit with L-BFGS; ``y`` must hold integer class indices ``0..C-1``."""
    X = np.asarray(X.data if isinstance(X, EmbeddingMatrix) else X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("features must be 2-D")
    if not np.all(np.isfinite(X)):
        raise DataError("features contain NaN or infinite values")
    y = check_vector(y, n=X.shape[0], name="labels", dtype=np.int64)
    if np.unique(y).size < 2:
        raise DegenerateLabels("training labels contain a single class")
    n, M = X.shape
    C = int(y.max()) + 1
    if l2_strength == "auto":
        l2_strength = auto_strength(M, C)
    l2_strength = float(l2_strength)
    if not l2_strength > 0:
        raise RangeError("l2_strength must be positive")
    Y = np.zeros((n, C))
    Y[np.arange(n), y] = 1.0
    x0 = np.zeros(C * M + C) if init is None else np.asarray(init, dtype=np.float64)
    res = minimize(
        probe_objective,
        x0,
        args=(X, Y, l2_strength),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-15, "maxcor": 20},
    )
    params = res.x
    if res.fun > probe_objective(x0, X, Y, l2_strength)[0]:
        params = x0
    return ProbeModel(params[: C * M].reshape(C, M).copy(), params[C * M :].copy(), l2_strength)


def predict_probe(model: ProbeModel, X):
    """Return ``(probabilities, labels)``."""
    X = check_matrix(X, dim=model.weights.shape[1], name="features")
    logits = X @ model.weights.T + model.bias
    P = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return P, np.argmax(P, axis=1)


def stratified_subsample(labels, fraction, seed=42) -> np.ndarray:
    """Sorted row indices keeping ``round_half_up(fraction * n_c)`` rows per class.

    Every present class keeps at least one row.
    """
    if not 0 < fraction <= 1:
        raise RangeError(f"fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels).ravel()
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_keep = max(1, int(np.floor(fraction * idx.size + 0.5)))
        keep.append(rng.permutation(idx)[:n_keep])
    return np.sort(np.concatenate(keep))


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Logistic-regression probe on frozen features.

    Parameters
    ----------
    C : float or "auto", default="auto"
        Inverse L2 strength; ``"auto"`` uses ``n_features * n_classes / 100``.
    max_iter : int, default=1000
    tol : float, default=1e-6
        Projected-gradient tolerance for L-BFGS.
    normalize : bool, default=False
        L2-normalize feature rows before fitting and predicting.
    """

    def __init__(self, C="auto", max_iter=1000, tol=1e-6, normalize=False):
        self.C = C
        self.max_iter = max_iter
        self.tol = tol
        self.normalize = normalize

    def _prep(self, X):
        X = np.asarray(X.data if isinstance(X, EmbeddingMatrix) else X, dtype=np.float64)
        if self.normalize:
            X = X / np.linalg.norm(X, axis=1, keepdims=True)
        return X

    def fit(self, X, y):
        y = np.asarray(y).ravel()
        self.classes_, codes = np.unique(y, return_inverse=True)
        X = self._prep(X)
        self.model_ = fit_probe(X, codes, self.C, self.max_iter, self.tol)
        self.coef_ = self.model_.weights
        self.intercept_ = self.model_.bias
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_probe(self.model_, self._prep(X))[0]

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
