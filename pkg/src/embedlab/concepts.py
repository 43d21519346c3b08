"""Discover-then-name: sparse concept filtering, assignment-based naming,
SAE concept-bottleneck classification and artifact-latent suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_vector
from .exceptions import CapacityError, DataError, DegenerateLabels, RangeError, ShapeError
from .sae import SaeModel, sae_decode, sae_encode
from .store import Vocabulary, normalize_rows


# --------------------------------------------------------------------------
# Sparse logistic concept filter


@dataclass(frozen=True, eq=False)
class SparseLinearModel:
    """One weight row per one-vs-rest task (a single row for binary labels)."""

    weights: np.ndarray  # (K, m)
    bias: np.ndarray  # (K,)
    alpha: float
    classes: np.ndarray | None = None

    @property
    def support(self) -> np.ndarray:
        """Latent indices carrying a nonzero weight in any row."""
        return np.flatnonzero(np.any(self.weights != 0, axis=0))

    def row_support(self, k=0) -> np.ndarray:
        return np.flatnonzero(self.weights[k] != 0)

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "support": self.support.tolist(),
            "classes": None if self.classes is None else self.classes.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        classes = d.get("classes")
        return cls(
            np.asarray(d["weights"], dtype=np.float64).reshape(len(d["bias"]), -1),
            np.asarray(d["bias"], dtype=np.float64),
            float(d["alpha"]),
            None if classes is None else np.asarray(classes),
        )


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _prox_sgd_binary(A, y, alpha, lr, n_epochs, batch_size, rng):
    """Proximal SGD on mean log loss + alpha * ||w||_1 (bias unpenalized).

    Step ``t`` (1-based, over all mini-batches) uses ``lr / sqrt(t)``; the
    soft threshold after every gradient step keeps zeros exact.
    """
    n, m = A.shape
    w = np.zeros(m)
    b = 0.0
    t = 0
    for _ in range(n_epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            t += 1
            eta = lr / math.sqrt(t)
            Ab = A[idx]
            r = _sigmoid(Ab @ w + b) - y[idx]
            w -= eta * (Ab.T @ r) / idx.size
            b -= eta * r.mean()
            if alpha > 0:
                w = np.sign(w) * np.maximum(np.abs(w) - eta * alpha, 0.0)
    return w, b


def fit_concept_filter(
    latents, labels, alpha=0.001, lr=1e-2, n_epochs=200, batch_size=32, seed=0
) -> SparseLinearModel:
    """L1-regularized logistic regression on latent activations.

    Binary labels give a single weight row; more classes are handled
    one-vs-rest, one row per class in sorted label order.
    """
    A = check_matrix(latents, name="latents")
    y = check_vector(labels, n=A.shape[0], name="labels", dtype=None)
    if alpha < 0:
        raise RangeError("alpha must be nonnegative")
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateLabels("concept filter needs both classes present")
    rng = np.random.default_rng(seed)
    targets = [y == classes[1]] if classes.size == 2 else [y == c for c in classes]
    rows, biases = [], []
    for target in targets:
        w, b = _prox_sgd_binary(A, target.astype(np.float64), alpha, lr, n_epochs, batch_size, rng)
        rows.append(w)
        biases.append(b)
    return SparseLinearModel(np.vstack(rows), np.asarray(biases), float(alpha), classes)


class ConceptFilter(ClassifierMixin, BaseEstimator):
    """Sparse logistic classifier over SAE latents.

    Parameters
    ----------
    alpha : float, default=0.001
        L1 penalty strength.
    learning_rate : float, default=1e-2
        Initial step, decayed as ``1/sqrt(t)``.
    n_epochs : int, default=200
    batch_size : int, default=32
    seed : int, default=0
    """

    def __init__(self, alpha=0.001, learning_rate=1e-2, n_epochs=200, batch_size=32, seed=0):
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, A, y):
        self.model_ = fit_concept_filter(
            A, y, self.alpha, self.learning_rate, self.n_epochs, self.batch_size, self.seed
        )
        self.classes_ = self.model_.classes
        self.coef_ = self.model_.weights
        self.intercept_ = self.model_.bias
        self.support_ = self.model_.support
        self.n_features_in_ = self.coef_.shape[1]
        return self

    def decision_function(self, A):
        check_is_fitted(self, "model_")
        return linear_scores(self.model_, check_matrix(A, dim=self.n_features_in_))

    def predict_proba(self, A):
        z = self.decision_function(A)
        if z.shape[1] == 1:
            p = _sigmoid(z[:, 0])
            return np.column_stack([1.0 - p, p])
        p = _sigmoid(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, A):
        return self.classes_[np.argmax(self.predict_proba(A), axis=1)]


def linear_scores(model: SparseLinearModel, A) -> np.ndarray:
    """Logits using only support columns, so off-support latents never enter."""
    out = np.empty((A.shape[0], model.weights.shape[0]))
    for k in range(model.weights.shape[0]):
        sup = model.row_support(k)
        out[:, k] = A[:, sup] @ model.weights[k, sup] + model.bias[k]
    return out


# --------------------------------------------------------------------------
# Assignment


def linear_assignment(cost) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Shortest-augmenting-path Kuhn-Munkres with row/column potentials,
    ``O(n^2 m)`` for an ``n x m`` cost matrix with ``n <= m``. Returns the
    column assigned to each row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise CapacityError(f"{n} rows cannot be assigned to {m} distinct columns")
    if not np.all(np.isfinite(cost)):
        raise DataError("cost matrix must be finite")
    # 1-based bookkeeping with column 0 as the virtual source
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = row assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cols = np.flatnonzero(free) + 1
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            used_idx = np.flatnonzero(used)
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[cols] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while True:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
            if j0 == 0:
                break
    assignment = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            assignment[owner[j] - 1] = j - 1
    return assignment


def max_similarity_assignment(sim) -> tuple[np.ndarray, float]:
    """Injective row-to-column map maximizing total similarity, and that total."""
    sim = np.asarray(sim, dtype=np.float64)
    cols = linear_assignment(-sim)
    total = math.fsum(sim[np.arange(sim.shape[0]), cols])
    return cols, total


@dataclass(frozen=True)
class ConceptName:
    concept: int
    term_index: int
    term: str
    sim: float


@dataclass(frozen=True)
class ConceptAssignment:
    pairs: tuple[ConceptName, ...]

    @property
    def total_similarity(self) -> float:
        return math.fsum(p.sim for p in self.pairs)

    def to_json(self):
        return [{"concept": p.concept, "term": p.term, "sim": p.sim} for p in self.pairs]

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def concept_similarity(directions, term_embeddings) -> np.ndarray:
    """Cosine similarity between concept directions and term embeddings."""
    P = normalize_rows(check_matrix(directions, name="concept directions")).data.astype(np.float64)
    E = normalize_rows(check_matrix(term_embeddings, dim=P.shape[1], name="term embeddings"))
    return P @ E.data.astype(np.float64).T


def name_concepts(sae: SaeModel, retained, vocab: Vocabulary) -> ConceptAssignment:
    """Name each retained latent after a distinct vocabulary term.

    A latent is represented by its decoder row; the assignment maximizes
    the summed cosine similarity over all injective concept-to-term maps.
    """
    retained = np.asarray(sorted(set(int(c) for c in retained)), dtype=np.int64)
    if retained.size and (retained[0] < 0 or retained[-1] >= sae.m):
        raise RangeError(f"concept index outside [0, {sae.m})")
    if retained.size > len(vocab):
        raise CapacityError(f"{retained.size} concepts but only {len(vocab)} vocabulary terms")
    if retained.size == 0:
        return ConceptAssignment(())
    sim = concept_similarity(sae.concept_directions()[retained], vocab.term_embeddings)
    cols, _ = max_similarity_assignment(sim)
    pairs = tuple(
        ConceptName(int(c), int(j), vocab.terms[j], float(sim[r, j]))
        for r, (c, j) in enumerate(zip(retained, cols))
    )
    return ConceptAssignment(pairs)


# --------------------------------------------------------------------------
# Concept bottleneck and intervention


def _suppress(A, suppress, m):
    idx = np.asarray(sorted(set(int(i) for i in suppress)), dtype=np.int64)
    if idx.size == 0:
        return A
    if idx[0] < 0 or idx[-1] >= m:
        raise RangeError(f"suppressed latent index outside [0, {m})")
    A = A.copy()
    A[:, idx] = 0.0
    return A


def cbm_predict(sae: SaeModel, clf: SparseLinearModel, X, suppress=()) -> np.ndarray:
    """Positive-class probability ``sigmoid(w . relu(x W_E) + b)``.

    Multi-row (one-vs-rest) models return one column per class.
    """
    if clf.weights.shape[1] != sae.m:
        raise ShapeError(f"classifier has {clf.weights.shape[1]} weights, SAE has {sae.m} latents")
    A = _suppress(sae_encode(sae, X), suppress, sae.m)
    p = _sigmoid(linear_scores(clf, A))
    return p[:, 0] if p.shape[1] == 1 else p


def latent_scores(sae: SaeModel, artifact_set, statistic="mean") -> np.ndarray:
    A = sae_encode(sae, check_matrix(artifact_set, dim=sae.d, name="artifact set"))
    if statistic == "mean":
        return A.mean(axis=0)
    if statistic == "frequency":
        return (A > 0).mean(axis=0)
    raise ValueError(f"unknown statistic {statistic!r}")


def find_artifact_neurons(sae: SaeModel, artifact_set, k=5, statistic="mean") -> np.ndarray:
    """The ``k`` latents most activated by the artifact images (ties by index)."""
    if not 1 <= k <= sae.m:
        raise RangeError(f"k={k} outside [1, {sae.m}]")
    scores = latent_scores(sae, artifact_set, statistic)
    return np.argsort(-scores, kind="stable")[:k]


def intervene(sae: SaeModel, suppress, X) -> np.ndarray:
    """Reconstruct ``X`` through the SAE with the given latents zeroed."""
    A = _suppress(sae_encode(sae, X), suppress, sae.m)
    return sae_decode(sae, A)


class ConceptBottleneck(ClassifierMixin, BaseEstimator):
    """SAE-based concept bottleneck: encode, then a sparse linear read-out.

    Parameters
    ----------
    sae : SaeModel
        A trained autoencoder; it is not refit.
    alpha, learning_rate, n_epochs, batch_size, seed
        Passed to the concept filter.
    suppress : sequence of int, default=()
        Latents zeroed at inference (not during fitting).
    """

    def __init__(self, sae=None, alpha=0.001, learning_rate=1e-2, n_epochs=200, batch_size=32, seed=0, suppress=()):
        self.sae = sae
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.seed = seed
        self.suppress = suppress

    def fit(self, X, y):
        if self.sae is None:
            raise DataError("ConceptBottleneck needs a trained SaeModel")
        A = sae_encode(self.sae, X)
        self.filter_ = ConceptFilter(
            self.alpha, self.learning_rate, self.n_epochs, self.batch_size, self.seed
        ).fit(A, y)
        self.classes_ = self.filter_.classes_
        self.support_ = self.filter_.support_
        self.n_features_in_ = self.sae.d
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "filter_")
        p = cbm_predict(self.sae, self.filter_.model_, X, self.suppress)
        if p.ndim == 1:
            return np.column_stack([1.0 - p, p])
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
