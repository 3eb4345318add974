"""Contrastive query-key covariances.

For a target latent, each triplet pairs a query with a key whose target latent
matches the query's and a key whose target latent differs, the other latent
being shared by both keys. The positive and negative covariances are raw
(uncentered) means of ``q k^T`` and their difference isolates how the target
latent enters the QK bilinear form.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .attnmodel import AttentionHead
from .datagen import LatentMaps, TaskConfig, Variant, draw_latents
from .errors import DimensionError, EmptyEstimateError, MergeError, SchemaError
from .tensorcore import make_rng

TARGETS = ("z1", "z2")
DEFAULT_N = 100_000


@dataclass
class Triplet:
    q: np.ndarray
    k_plus: np.ndarray
    k_minus: np.ndarray
    # latents behind the triplet (None when built from external activations)
    q_latent: tuple[np.ndarray, np.ndarray] | None = None
    plus_latent: tuple[np.ndarray, np.ndarray] | None = None
    minus_latent: tuple[np.ndarray, np.ndarray] | None = None


@dataclass
class TripletBatch:
    """Stacked triplets with the latents used to build them."""
    q: np.ndarray          # n x d_head
    k_plus: np.ndarray     # n x d_head
    k_minus: np.ndarray    # n x d_head
    target: str
    q_z1: np.ndarray
    q_z2: np.ndarray
    plus_z1: np.ndarray
    plus_z2: np.ndarray
    minus_z1: np.ndarray
    minus_z2: np.ndarray

    def __len__(self):
        return len(self.q)

    def __getitem__(self, i) -> Triplet:
        return Triplet(self.q[i], self.k_plus[i], self.k_minus[i],
                       (self.q_z1[i], self.q_z2[i]),
                       (self.plus_z1[i], self.plus_z2[i]),
                       (self.minus_z1[i], self.minus_z2[i]))


def _check_target(target: str) -> str:
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    return target


def _contrast(cfg: TaskConfig, rng, matched: np.ndarray, r: int) -> np.ndarray:
    """Latents that differ from ``matched`` row-wise."""
    n = len(matched)
    out = draw_latents(cfg, rng, (n,), r)
    if cfg.variant is Variant.CONTINUOUS:
        return out
    same = np.all(out == matched, axis=1)
    while same.any():
        out[same] = draw_latents(cfg, rng, (int(same.sum()),), r)
        same = np.all(out == matched, axis=1)
    return out


def make_triplets(cfg: TaskConfig, maps: LatentMaps, head: AttentionHead, target: str,
                  rng: np.random.Generator, n: int) -> TripletBatch:
    """Draw ``n`` independent triplets for ``target`` in one vectorized pass."""
    _check_target(target)
    d, sigma = cfg.d, cfg.noise_sigma
    qz1 = draw_latents(cfg, rng, (n,), cfg.r1)
    qz2 = draw_latents(cfg, rng, (n,), cfg.r2)
    if target == "z1":
        held = draw_latents(cfg, rng, (n,), cfg.r2)
        neg = _contrast(cfg, rng, qz1, cfg.r1)
        pz1, pz2, mz1, mz2 = qz1, held, neg, held
    else:
        held = draw_latents(cfg, rng, (n,), cfg.r1)
        neg = _contrast(cfg, rng, qz2, cfg.r2)
        pz1, pz2, mz1, mz2 = held, qz2, held, neg
    y_plus = rng.integers(0, cfg.P, size=n)
    y_minus = rng.integers(0, cfg.P, size=n)
    eps = sigma * rng.standard_normal((3, n, d))
    xq = qz1 @ maps.b1.T + qz2 @ maps.b2.T + eps[0]
    x_plus = pz1 @ maps.a1.T + pz2 @ maps.a2.T + maps.ay.T[y_plus] + eps[1]
    x_minus = mz1 @ maps.a1.T + mz2 @ maps.a2.T + maps.ay.T[y_minus] + eps[2]
    return TripletBatch(
        q=xq @ head.w_q.T, k_plus=x_plus @ head.w_k.T, k_minus=x_minus @ head.w_k.T,
        target=target, q_z1=qz1, q_z2=qz2, plus_z1=pz1, plus_z2=pz2,
        minus_z1=mz1, minus_z2=mz2,
    )


def make_triplet(cfg: TaskConfig, maps: LatentMaps, head: AttentionHead, target: str,
                 rng: np.random.Generator) -> Triplet:
    return make_triplets(cfg, maps, head, target, rng, 1)[0]


# --------------------------------------------------------------------------
# accumulation

@dataclass
class DeltaC:
    c_plus: np.ndarray
    c_minus: np.ndarray
    n: int
    target: str
    fingerprint: str = ""

    @property
    def delta(self) -> np.ndarray:
        return self.c_plus - self.c_minus

    @property
    def d_head(self) -> int:
        return self.c_plus.shape[0]

    def to_json(self) -> dict:
        return {"format": "qkspace-deltac", "version": 1, "target": self.target, "n": self.n,
                "fingerprint": self.fingerprint, "c_plus": self.c_plus.tolist(),
                "c_minus": self.c_minus.tolist(), "delta": self.delta.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "DeltaC":
        if doc.get("format") != "qkspace-deltac":
            raise SchemaError("not a contrastive-covariance file")
        return cls(np.asarray(doc["c_plus"], dtype=np.float64),
                   np.asarray(doc["c_minus"], dtype=np.float64),
                   int(doc["n"]), doc["target"], doc.get("fingerprint", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "DeltaC":
        return cls.from_json(json.loads(Path(path).read_text()))


class CovarianceAccumulator:
    """Running sums of ``q k+^T`` and ``q k-^T``; no centering."""

    def __init__(self, d_head: int | None = None, target: str = "", fingerprint: str = ""):
        self.d_head = d_head
        self.target = target
        self.fingerprint = fingerprint
        self.n = 0
        self._sp = None
        self._sm = None

    def _init(self, d_head):
        if self.d_head is None:
            self.d_head = d_head
        if d_head != self.d_head:
            raise DimensionError(f"triplet of dimension {d_head}, expected {self.d_head}")
        if self._sp is None:
            self._sp = np.zeros((d_head, d_head))
            self._sm = np.zeros((d_head, d_head))

    def add(self, q, k_plus, k_minus) -> None:
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        kp = np.atleast_2d(np.asarray(k_plus, dtype=np.float64))
        km = np.atleast_2d(np.asarray(k_minus, dtype=np.float64))
        if not (q.shape == kp.shape == km.shape):
            raise DimensionError("q, k_plus, k_minus shapes differ")
        self._init(q.shape[1])
        self._sp += q.T @ kp
        self._sm += q.T @ km
        self.n += len(q)

    def add_triplet(self, t: Triplet) -> None:
        self.add(t.q, t.k_plus, t.k_minus)

    def result(self) -> DeltaC:
        if self.n == 0:
            raise EmptyEstimateError("no triplets accumulated")
        return DeltaC(self._sp / self.n, self._sm / self.n, self.n, self.target, self.fingerprint)


def accumulate(triplets: Iterable, target: str = "", fingerprint: str = "",
               chunk: int = 4096) -> DeltaC:
    """Mean outer products over a stream of triplets or triplet batches."""
    if isinstance(triplets, TripletBatch):
        triplets = [triplets]
    acc = CovarianceAccumulator(target=target, fingerprint=fingerprint)
    buf: list[Triplet] = []

    def flush():
        if buf:
            acc.add(np.stack([t.q for t in buf]), np.stack([t.k_plus for t in buf]),
                    np.stack([t.k_minus for t in buf]))
            buf.clear()

    for t in triplets:
        if isinstance(t, TripletBatch):
            flush()
            if not acc.target:
                acc.target = t.target
            elif t.target != acc.target:
                raise MergeError(f"mixed targets {acc.target!r} and {t.target!r}")
            acc.add(t.q, t.k_plus, t.k_minus)
        else:
            buf.append(t)
            if len(buf) >= chunk:
                flush()
    flush()
    return acc.result()


def merge(a: DeltaC, b: DeltaC) -> DeltaC:
    """Count-weighted combination, equal to accumulating both streams together."""
    if a.target != b.target:
        raise MergeError(f"cannot merge targets {a.target!r} and {b.target!r}")
    if a.c_plus.shape != b.c_plus.shape:
        raise MergeError("d_head mismatch")
    if a.n <= 0 or b.n <= 0:
        raise MergeError("cannot merge an empty estimate")
    n = a.n + b.n
    wa, wb = a.n / n, b.n / n
    fp = a.fingerprint if a.fingerprint == b.fingerprint else ""
    return DeltaC(wa * a.c_plus + wb * b.c_plus, wa * a.c_minus + wb * b.c_minus, n,
                  a.target, fp)


def fingerprint(cfg: TaskConfig, head: AttentionHead) -> str:
    h = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    h.update(head.fingerprint().encode())
    return h.hexdigest()[:16]


def estimate_delta(cfg: TaskConfig, maps: LatentMaps, head: AttentionHead, target: str,
                   seed: int, n: int = DEFAULT_N, shard_size: int = 10_000) -> DeltaC:
    """Contrastive covariance from ``n`` triplets, drawn in seeded shards.

    Shards use independent sub-streams and are merged in shard order, so the
    result does not depend on how shards are scheduled.
    """
    _check_target(target)
    fp = fingerprint(cfg, head)
    result = None
    for i, start in enumerate(range(0, n, shard_size)):
        m = min(shard_size, n - start)
        tb = make_triplets(cfg, maps, head, target, make_rng(seed, "triplets", target, i), m)
        part = accumulate(tb, target, fp)
        result = part if result is None else merge(result, part)
    if result is None:
        raise EmptyEstimateError("n must be positive")
    return result
