"""Exact cross-modal retrieval with Recall@K and Precision@K."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_matrix, check_vector, map_blocks
from .exceptions import DegenerateRow, ManifestError, RangeError, ShapeError
from .store import ZERO_NORM


@dataclass(frozen=True)
class RetrievalResult:
    ranked: np.ndarray  # top-k candidate indices, best first
    rank_of_match: int | None = None


def _unit(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] < ZERO_NORM)
    if bad.size:
        raise DegenerateRow(bad[0])
    return x / norms


def _rank_rows(sims, k, matches):
    # Stable sort on negated similarity: ties resolve to the lower index.
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    ranks = None
    if matches is not None:
        m_sim = sims[np.arange(sims.shape[0]), matches][:, None]
        idx = np.arange(sims.shape[1])[None, :]
        ahead = (sims > m_sim) | ((sims == m_sim) & (idx < matches[:, None]))
        ranks = 1 + ahead.sum(axis=1)
    return order, ranks


def retrieve(queries, candidates, k, matches=None, threads=1) -> list[RetrievalResult]:
    """Rank candidates for every query by cosine similarity.

    ``matches`` optionally gives the ground-truth candidate index of each
    query; its 1-based rank over the full pool is then recorded.
    """
    C = check_matrix(candidates, name="candidates")
    Q = check_matrix(queries, dim=C.shape[1], name="queries")
    if not 1 <= k <= C.shape[0]:
        raise RangeError(f"k={k} outside [1, {C.shape[0]}]")
    if matches is not None:
        matches = check_vector(matches, n=Q.shape[0], name="matches", dtype=np.int64)
        if matches.min() < 0 or matches.max() >= C.shape[0]:
            raise ManifestError("match index outside candidate pool")
    Qn, Cn = _unit(Q), _unit(C)

    def block(s, e):
        return _rank_rows(Qn[s:e] @ Cn.T, k, None if matches is None else matches[s:e])

    out = []
    for order, ranks in map_blocks(block, Q.shape[0], threads):
        for i in range(order.shape[0]):
            r = None if ranks is None else int(ranks[i])
            out.append(RetrievalResult(order[i].copy(), r))
    return out


def match_ranks(results) -> np.ndarray:
    ranks = [r.rank_of_match for r in results]
    if any(r is None for r in ranks):
        raise ManifestError("every query needs a ground-truth pairing")
    return np.asarray(ranks, dtype=np.int64)


def recall_at_k(results, k) -> float:
    """Fraction of queries whose match ranks within the top ``k``."""
    ranks = results if isinstance(results, np.ndarray) else match_ranks(results)
    if ranks.size == 0:
        raise ManifestError("no queries")
    return float(np.mean(ranks <= k))


def mean_recall(results, ks) -> float:
    return float(np.mean([recall_at_k(results, k) for k in ks]))


def precision_at_k(activations, positives, k) -> float:
    """Fraction of the ``k`` highest-activation items that are positive."""
    act = check_vector(activations, name="activations")
    pos = np.asarray(positives, dtype=bool).ravel()
    if pos.shape != act.shape:
        raise ShapeError("activations and positives differ in length")
    if not 1 <= k <= act.size:
        raise RangeError(f"k={k} outside [1, {act.size}]")
    top = np.argsort(-act, kind="stable")[:k]
    return float(pos[top].mean())
