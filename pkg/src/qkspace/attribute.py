"""Split queries across feature subspaces and attribute attention logits.

Logits are linear in the query, so a decomposition ``q = sum_f q_f + q_perp``
gives an exact per-token split ``l_i = sum_f l_i^(f) + l_i^(perp)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .decompose import SubspaceBasis
from .errors import DimensionError


@dataclass
class QueryDecomposition:
    components: list[tuple[str, np.ndarray]]
    residual: np.ndarray
    query: np.ndarray

    @property
    def labels(self) -> list[str]:
        return [name for name, _ in self.components]

    def total(self) -> np.ndarray:
        out = self.residual.copy()
        for _, c in self.components:
            out = out + c
        return out


@dataclass
class LogitAttribution:
    total: np.ndarray                 # T
    parts: dict[str, np.ndarray]      # feature label -> T
    residual: np.ndarray              # T

    def to_json(self, tokens=None) -> dict:
        T = len(self.total)
        tokens = list(tokens) if tokens is not None else [str(i) for i in range(T)]
        return {
            "tokens": tokens,
            "total": self.total.tolist(),
            "features": {k: v.tolist() for k, v in self.parts.items()},
            "residual": self.residual.tolist(),
        }


def order_by_rank(bases: list[SubspaceBasis]) -> list[SubspaceBasis]:
    """Lower-rank features first; equal ranks keep the caller's order."""
    return sorted(bases, key=lambda b: b.rank)


def decompose_query(q, bases: list[SubspaceBasis], labels: list[str] | None = None) -> QueryDecomposition:
    """Peel off each basis' query-side projection in order, then the residual.

    Where subspaces overlap, the shared part is credited to the earlier basis.
    """
    q = np.asarray(q, dtype=np.float64)
    if labels is None:
        labels = [b.label or f"f{i}" for i, b in enumerate(bases)]
    comps = []
    rest = q.copy()
    for name, b in zip(labels, bases):
        if b.u.shape[0] != q.shape[0]:
            raise DimensionError(f"basis {name!r} has d_head {b.u.shape[0]}, query {q.shape[0]}")
        c = b.u @ (b.u.T @ rest)
        comps.append((name, c))
        rest = rest - c
    return QueryDecomposition(comps, rest, q)


def attribute_logits(keys, decomposition: QueryDecomposition, d_head: int | None = None) -> LogitAttribution:
    keys = np.asarray(keys, dtype=np.float64)
    if d_head is None:
        d_head = keys.shape[1]
    if keys.shape[1] != decomposition.residual.shape[0]:
        raise DimensionError("keys and query dimensions differ")
    scale = 1.0 / np.sqrt(d_head)
    parts = {name: keys @ c * scale for name, c in decomposition.components}
    resid = keys @ decomposition.residual * scale
    total = keys @ decomposition.query * scale
    return LogitAttribution(total, parts, resid)


def write_attribution_json(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)
        fh.write("\n")
