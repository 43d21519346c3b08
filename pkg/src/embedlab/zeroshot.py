"""Prompt-ensemble zero-shot classification in a shared embedding space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_vector, map_blocks
from .exceptions import DegenerateRow, EmptyClass, RangeError, ShapeError
from .store import ZERO_NORM, EmbeddingMatrix, normalize_rows


@dataclass(frozen=True, eq=False)
class ClassPrototypeMatrix:
    prototypes: EmbeddingMatrix
    class_names: tuple[str, ...]

    @property
    def n_classes(self):
        return self.prototypes.rows


@dataclass(frozen=True)
class ZeroShotConfig:
    temperature: float = 0.01

    def __post_init__(self):
        if not self.temperature > 0:
            raise RangeError(f"temperature must be positive, got {self.temperature}")


def build_prototypes(class_text_embeddings, class_names=None, renorm=True) -> ClassPrototypeMatrix:
    """Average each class's template embeddings into one prototype row.

    With ``renorm=True`` (default) the mean is unit-normalized, so classifying
    against the prototypes is a pure cosine comparison; with
    ``renorm=False`` the raw mean is kept and its length acts as a per-class
    logit scale.
    """
    mats = list(class_text_embeddings)
    if not mats:
        raise EmptyClass("no classes given")
    if class_names is None:
        class_names = [str(i) for i in range(len(mats))]
    if len(class_names) != len(mats):
        raise ShapeError(f"{len(class_names)} class names for {len(mats)} classes")
    dim = None
    rows = []
    for c, m in enumerate(mats):
        arr = check_matrix(m, name=f"class {c} templates", allow_empty=True)
        if arr.shape[0] == 0:
            raise EmptyClass(f"class {class_names[c]!r} has no template embeddings")
        if dim is None:
            dim = arr.shape[1]
        elif arr.shape[1] != dim:
            raise ShapeError(f"class {class_names[c]!r} has dim {arr.shape[1]}, expected {dim}")
        rows.append(arr.mean(axis=0))
    protos = np.vstack(rows)
    if renorm:
        pm = normalize_rows(protos)
    else:
        pm = EmbeddingMatrix(protos, normalized=False)
    return ClassPrototypeMatrix(pm, tuple(class_names))


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def similarities(images, protos: ClassPrototypeMatrix, threads=1) -> np.ndarray:
    """Cosine similarity of each (re-normalized) image row to each prototype."""
    P = protos.prototypes.data.astype(np.float64)
    X = check_matrix(images, dim=P.shape[1], name="images")
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] < ZERO_NORM)
    if bad.size:
        raise DegenerateRow(bad[0])
    X = X / norms
    blocks = map_blocks(lambda s, e: X[s:e] @ P.T, X.shape[0], threads)
    return np.vstack(blocks)


def classify(images, protos: ClassPrototypeMatrix, cfg: ZeroShotConfig | None = None, threads=1):
    """Return ``(probabilities, predicted_labels)``.

    Logits are ``cos / temperature``; the argmax does not depend on the
    temperature.
    """
    cfg = cfg or ZeroShotConfig()
    sims = similarities(images, protos, threads=threads)
    probs = _softmax(sims / cfg.temperature)
    return probs, np.argmax(sims, axis=1)


class ZeroShotClassifier(ClassifierMixin, BaseEstimator):
    """Zero-shot classifier over precomputed text and image embeddings.

    ``fit`` takes the stacked template embeddings of all classes together
    with the class index of every template row; it learns nothing beyond
    the per-class prototypes.

    Parameters
    ----------
    temperature : float, default=0.01
        Softmax temperature applied to cosine similarities.
    renorm_prototypes : bool, default=True
        Re-normalize the averaged template embedding of each class.
    class_names : sequence of str, optional
        Human-readable names, one per class in sorted label order.
    """

    def __init__(self, temperature=0.01, renorm_prototypes=True, class_names=None, threads=1):
        self.temperature = temperature
        self.renorm_prototypes = renorm_prototypes
        self.class_names = class_names
        self.threads = threads

    def fit(self, X, y):
        X = check_matrix(X, name="template embeddings")
        y = check_vector(y, n=X.shape[0], name="y", dtype=None)
        ZeroShotConfig(self.temperature)
        self.classes_ = np.unique(y)
        groups = [X[y == c] for c in self.classes_]
        names = self.class_names if self.class_names is not None else [str(c) for c in self.classes_]
        self.prototypes_ = build_prototypes(groups, names, renorm=self.renorm_prototypes)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "prototypes_")
        return similarities(X, self.prototypes_, threads=self.threads)

    def predict_proba(self, X):
        check_is_fitted(self, "prototypes_")
        probs, _ = classify(X, self.prototypes_, ZeroShotConfig(self.temperature), self.threads)
        return probs

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

