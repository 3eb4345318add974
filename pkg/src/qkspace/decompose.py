"""Ranks and subspaces from contrastive covariances, plus QK interaction analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .attnmodel import AttentionHead
from .contrastive import DeltaC
from .datagen import LatentMaps
from .errors import DimensionError, ZeroMatrixError
from .tensorcore import as_matrix, pca, svd

ENERGY_THRESHOLD = 0.99


@dataclass(frozen=True)
class SubspaceBasis:
    rank: int
    u: np.ndarray                 # d_head x rank, query side
    v: np.ndarray                 # d_head x rank, key side
    singular_values: np.ndarray
    energy_threshold: float = ENERGY_THRESHOLD
    label: str = ""

    @property
    def d_head(self) -> int:
        return self.u.shape[0]


def energy_rank(singular_values, threshold: float = ENERGY_THRESHOLD) -> int:
    """Smallest k whose leading squared singular values reach ``threshold`` of the total."""
    s2 = np.asarray(singular_values, dtype=np.float64) ** 2
    total = s2.sum()
    if total <= 0:
        raise ZeroMatrixError("all singular values are zero")
    cum = np.cumsum(s2)
    # the value that crosses the threshold is included
    return int(np.searchsorted(cum, threshold * total, side="left") + 1)


def estimate_rank(delta, threshold: float = ENERGY_THRESHOLD, label: str = "") -> SubspaceBasis:
    if isinstance(delta, DeltaC):
        if delta.n <= 0:
            raise ZeroMatrixError("empty estimate")
        label = label or delta.target
        delta = delta.delta
    m = as_matrix(delta, "delta")
    if not np.any(m):
        raise ZeroMatrixError("contrastive covariance is identically zero")
    res = svd(m)
    r = min(energy_rank(res.s, threshold), len(res.s))
    return SubspaceBasis(r, res.u[:, :r].copy(), res.vt[:r].T.copy(), res.s.copy(), threshold, label)


# --------------------------------------------------------------------------
# interaction matrix

@dataclass(frozen=True)
class InteractionMatrix:
    g: np.ndarray
    r1: int
    r2: int

    @property
    def labels(self) -> list[str]:
        return [f"z1[{i}]" for i in range(self.r1)] + [f"z2[{i}]" for i in range(self.r2)]

    def block(self, row: str, col: str) -> np.ndarray:
        sl = {"z1": slice(0, self.r1), "z2": slice(self.r1, self.r1 + self.r2)}
        return self.g[sl[row], sl[col]]


def interaction_matrix(head: AttentionHead, maps: LatentMaps) -> InteractionMatrix:
    """``B^T W_Q^T W_K A`` for the stacked selector and payload maps."""
    b, a = maps.b, maps.a
    g = (head.w_q @ b).T @ (head.w_k @ a)
    return InteractionMatrix(g, maps.a1.shape[1], maps.a2.shape[1])


def superposition_score(g) -> float:
    """Fraction of squared mass off the best-aligned diagonal of ``g``.

    Columns are assigned to rows (Hungarian, maximizing summed ``|g|`` on the
    matched entries); the score is the share of ``sum g^2`` outside those
    matched entries. 0 means one-to-one interactions, values near 1 mean each
    latent coordinate interacts with many others.
    """
    if isinstance(g, InteractionMatrix):
        g = g.g
    g = as_matrix(g, "g")
    if g.shape[0] != g.shape[1]:
        raise DimensionError("interaction matrix must be square")
    total = float((g ** 2).sum())
    if total == 0.0:
        return 0.0
    mag = np.abs(g)
    rows, cols = linear_sum_assignment(mag, maximize=True)
    matched = float((g[rows, cols] ** 2).sum())
    return max(0.0, 1.0 - matched / total)


# --------------------------------------------------------------------------
# visualisation data

def subspace_pca(queries, keys, basis: SubspaceBasis, k: int = 3):
    """Project queries on ``u`` and keys on ``v``, pool, center jointly, PCA.

    Returns ``(scores, roles)`` where rows are the queries followed by the keys
    and ``roles`` holds "query"/"key" per row.
    """
    q = as_matrix(queries, "queries") @ basis.u
    kk = as_matrix(keys, "keys") @ basis.v
    pooled = np.vstack([q, kk])
    k = min(k, pooled.shape[1])
    roles = np.array(["query"] * len(q) + ["key"] * len(kk))
    return pca(pooled, k), roles
