"""Pretraining objectives with analytic gradients.

* ``infonce_loss``: symmetric image-text contrastive loss over a batch of N
  pairs, averaged over pairs, both directions summed per pair.
* ``mim_loss``: masked latent alignment, the summed cosine distance
  ``D(a, b) = 1 - cos(a, b)`` (range [0, 2]) between student and teacher
  vectors over visible and masked patches.

Everything is computed in float64 regardless of input precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from ._validation import check_matrix
from .exceptions import DataError, DegenerateRow, RangeError, ShapeError
from .store import ZERO_NORM


@dataclass(frozen=True, eq=False)
class ContrastiveBatch:
    u: np.ndarray
    v: np.ndarray
    tau: float = 0.07

    def __post_init__(self):
        u = check_matrix(self.u, name="u")
        v = check_matrix(self.v, name="v")
        if u.shape != v.shape:
            raise ShapeError(f"u {u.shape} and v {v.shape} differ")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True, eq=False)
class MaskedBatch:
    student_visible: np.ndarray
    teacher_visible: np.ndarray
    student_masked: np.ndarray
    teacher_masked: np.ndarray

    def __post_init__(self):
        for side in ("visible", "masked"):
            s = check_matrix(getattr(self, f"student_{side}"), name=f"student_{side}", allow_empty=True)
            t = check_matrix(getattr(self, f"teacher_{side}"), name=f"teacher_{side}", allow_empty=True)
            if s.shape != t.shape:
                raise ShapeError(f"{side} student {s.shape} and teacher {t.shape} differ")
            object.__setattr__(self, f"student_{side}", s)
            object.__setattr__(self, f"teacher_{side}", t)


def infonce_loss(u, v=None, tau=None):
    """Symmetric InfoNCE loss and its gradients ``(loss, d_u, d_v)``.

    Accepts either a :class:`ContrastiveBatch` or ``(u, v, tau)``. Gradients
    are taken with respect to ``u`` and ``v`` as free variables.
    """
    if isinstance(u, ContrastiveBatch):
        batch = u
    else:
        batch = ContrastiveBatch(u, v, tau)
    tau = float(batch.tau)
    if not tau > 0:
        raise RangeError(f"temperature must be positive, got {tau}")
    u, v = batch.u, batch.v
    N = u.shape[0]
    S = (u @ v.T) / tau
    diag = np.arange(N)
    loss = -(log_softmax(S, axis=1)[diag, diag].sum() + log_softmax(S.T, axis=1)[diag, diag].sum()) / N
    eye = np.eye(N)
    dS = ((softmax(S, axis=1) - eye) + (softmax(S.T, axis=1) - eye).T) / N
    return float(loss), dS @ v / tau, dS.T @ u / tau


def _cosine_distance(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    for norms, name in ((na, "student"), (nb, "teacher")):
        bad = np.flatnonzero(norms < ZERO_NORM)
        if bad.size:
            raise DegenerateRow(bad[0], f"{name} patch {int(bad[0])} has zero norm")
    cos = np.sum(a * b, axis=1) / (na * nb)
    # d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|^2)
    grad = -(b / (na * nb)[:, None] - cos[:, None] * a / (na**2)[:, None])
    return np.sum(1.0 - cos), grad


def mim_loss(batch_or_sv, teacher_visible=None, student_masked=None, teacher_masked=None):
    """Masked latent loss and gradients ``(loss, d_student_visible, d_student_masked)``."""
    if isinstance(batch_or_sv, MaskedBatch):
        batch = batch_or_sv
    else:
        batch = MaskedBatch(batch_or_sv, teacher_visible, student_masked, teacher_masked)
    if batch.student_visible.shape[0] + batch.student_masked.shape[0] == 0:
        raise DataError("batch has no patches")
    loss_v, g_v = _cosine_distance(batch.student_visible, batch.teacher_visible)
    loss_m, g_m = _cosine_distance(batch.student_masked, batch.teacher_masked)
    return float(loss_v + loss_m), g_v, g_m
