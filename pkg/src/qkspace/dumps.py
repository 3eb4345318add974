"""Labeled query/key activation dumps and label-driven contrastive pairing.

Dump files are JSON lines. The first line is a header::

    {"schema": "qkspace-activations", "schema_version": 1, "d_head": 128}

and every following line is one record::

    {"role": "query" | "key", "vector": [...], "labels": {"prompt_id": "17", ...},
     "source": {"model": "...", "layer": 12, "head": 3}}

Label values are strings. ``prompt_id`` is required; keys are only ever
paired with queries of the same prompt, or of a counterfactual partner prompt
(a prompt whose ``counterfactual_of`` label names the query's prompt).
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .contrastive import DeltaC, Triplet, TripletBatch, accumulate
from .decompose import ENERGY_THRESHOLD, SubspaceBasis, estimate_rank
from .errors import EmptyEstimateError, ParseError, SchemaError
from .tensorcore import orthonormalize

SCHEMA = "qkspace-activations"
SCHEMA_VERSION = 1
ROLES = ("query", "key")


@dataclass
class ActivationRecord:
    role: str
    vector: np.ndarray
    labels: dict[str, str]
    source: dict = field(default_factory=dict)

    @property
    def prompt_id(self) -> str:
        return self.labels["prompt_id"]

    def to_json(self) -> dict:
        return {"role": self.role, "vector": self.vector.tolist(),
                "labels": self.labels, "source": self.source}


def _parse_record(obj, lineno: int) -> ActivationRecord:
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", lineno)
    for name in ("role", "vector", "labels"):
        if name not in obj:
            raise ParseError(f"missing field '{name}'", lineno, name)
    role = obj["role"]
    if role not in ROLES:
        raise ParseError(f"field 'role' must be one of {ROLES}, got {role!r}", lineno, "role")
    vec = obj["vector"]
    if not isinstance(vec, list) or not vec or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec):
        raise ParseError("field 'vector' must be a non-empty list of numbers", lineno, "vector")
    arr = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParseError("field 'vector' has non-finite entries", lineno, "vector")
    labels = obj["labels"]
    if not isinstance(labels, dict):
        raise ParseError("field 'labels' must be an object", lineno, "labels")
    if "prompt_id" not in labels:
        raise ParseError("missing field 'labels.prompt_id'", lineno, "labels.prompt_id")
    labels = {str(k): str(v) for k, v in labels.items()}
    source = obj.get("source", {})
    if not isinstance(source, dict):
        raise ParseError("field 'source' must be an object", lineno, "source")
    return ActivationRecord(role, arr, labels, source)


def load_dump(path) -> list[ActivationRecord]:
    """Read and validate a dump; vectors are widened to float64."""
    records: list[ActivationRecord] = []
    d_head = None
    header_seen = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not header_seen:
                header_seen = True
                if isinstance(obj, dict) and "schema" in obj:
                    if obj.get("schema") != SCHEMA:
                        raise SchemaError(f"unknown schema {obj.get('schema')!r}")
                    if obj.get("schema_version") != SCHEMA_VERSION:
                        raise SchemaError(f"unsupported schema version {obj.get('schema_version')!r}")
                    d_head = obj.get("d_head")
                    continue
            rec = _parse_record(obj, lineno)
            if d_head is None:
                d_head = len(rec.vector)
            elif len(rec.vector) != d_head:
                raise SchemaError(f"line {lineno}: vector has dimension {len(rec.vector)}, expected {d_head}")
            records.append(rec)
    return records


def write_dump(path, records: list[ActivationRecord], d_head: int | None = None) -> None:
    if d_head is None:
        d_head = len(records[0].vector) if records else 0
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": SCHEMA, "schema_version": SCHEMA_VERSION,
                             "d_head": d_head}) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


# --------------------------------------------------------------------------
# pairing rules

Labels = dict[str, str]


@dataclass(frozen=True)
class PairRule:
    """How to pick positive and negative keys for a query.

    ``positive`` and ``negative`` receive ``(query_labels, key_labels)``. With
    ``negative_from="counterfactual"`` negatives are searched in partner
    prompts instead of the query's own prompt. ``held_fixed`` label keys must
    agree between the chosen positive and negative keys.
    """
    positive: Callable[[Labels, Labels], bool]
    negative: Callable[[Labels, Labels], bool]
    query_selector: Callable[[Labels], bool] = lambda labels: True
    held_fixed: tuple[str, ...] = ()
    negative_from: str = "same"
    name: str = ""


def match_rule(label: str, held_fixed=(), name: str | None = None, query_where: dict | None = None) -> PairRule:
    """Positive keys share the query's ``label`` value, negatives carry a different one.

    Category matching and order-index matching are both of this form.
    """
    where = dict(query_where or {})

    def selector(q):
        return label in q and all(q.get(k) == v for k, v in where.items())

    return PairRule(
        positive=lambda q, k: k.get(label) == q[label],
        negative=lambda q, k: label in k and k[label] != q[label],
        query_selector=selector,
        held_fixed=tuple(held_fixed),
        name=name or label,
    )


def counterfactual_rule(label: str, value: str = "true", held_fixed=(), name: str | None = None) -> PairRule:
    """Positive: the flagged key in the query's prompt; negative: the flagged key
    in a counterfactual copy of that prompt.

    With keys flagged ``answer=true`` on the box that answers their own prompt,
    this contrasts the original queried entity against its replacement.
    """
    return PairRule(
        positive=lambda q, k: k.get(label) == value,
        negative=lambda q, k: k.get(label) == value,
        held_fixed=tuple(held_fixed),
        negative_from="counterfactual",
        name=name or f"{label}-counterfactual",
    )


def rule_from_dict(spec: dict) -> PairRule:
    kind = spec.get("type", "match")
    held = tuple(spec.get("held_fixed", ()))
    if kind == "match":
        return match_rule(spec["label"], held, spec.get("name"), spec.get("query_where"))
    if kind == "counterfactual":
        return counterfactual_rule(spec["label"], str(spec.get("value", "true")), held, spec.get("name"))
    raise SchemaError(f"unknown rule type {kind!r}")


@dataclass
class PairingStats:
    queries: int = 0
    skipped: int = 0
    triplets: int = 0

    def to_dict(self) -> dict:
        return {"queries": self.queries, "skipped": self.skipped, "triplets": self.triplets}


def _held_agree(a: Labels, b: Labels, keys) -> bool:
    return all(k in a and k in b and a[k] == b[k] for k in keys)


def build_triplets(records: list[ActivationRecord], rule: PairRule,
                   rng: np.random.Generator) -> tuple[list[Triplet], PairingStats]:
    """One (query, positive, negative) triplet per eligible query, in file order.

    When several valid (positive, negative) pairs exist, one is drawn
    uniformly. Queries without a valid pair are skipped and counted.
    """
    keys_by_prompt: dict[str, list[ActivationRecord]] = defaultdict(list)
    partners: dict[str, list[str]] = defaultdict(list)
    queries = []
    for r in records:
        if r.role == "key":
            keys_by_prompt[r.prompt_id].append(r)
        else:
            queries.append(r)
    seen_partner = set()
    for r in records:
        cf = r.labels.get("counterfactual_of")
        if cf is not None and (cf, r.prompt_id) not in seen_partner:
            seen_partner.add((cf, r.prompt_id))
            partners[cf].append(r.prompt_id)

    stats = PairingStats()
    triplets = []
    for qr in queries:
        ql = qr.labels
        if not rule.query_selector(ql):
            continue
        stats.queries += 1
        own = keys_by_prompt.get(qr.prompt_id, [])
        pos = [k for k in own if rule.positive(ql, k.labels)]
        if rule.negative_from == "counterfactual":
            pool = [k for pid in partners.get(qr.prompt_id, []) for k in keys_by_prompt.get(pid, [])]
            neg = [k for k in pool if rule.negative(ql, k.labels)]
        else:
            pos_ids = {id(k) for k in pos}
            neg = [k for k in own if id(k) not in pos_ids and rule.negative(ql, k.labels)]
        pairs = [(p, n) for p in pos for n in neg if _held_agree(p.labels, n.labels, rule.held_fixed)]
        if not pairs:
            stats.skipped += 1
            continue
        p, n = pairs[int(rng.integers(len(pairs)))] if len(pairs) > 1 else pairs[0]
        triplets.append(Triplet(qr.vector, p.vector, n.vector))
    stats.triplets = len(triplets)
    if not triplets:
        raise EmptyEstimateError(
            f"rule {rule.name!r} produced no triplets ({stats.queries} queries, {stats.skipped} skipped)")
    return triplets, stats


def dump_delta(records, rule: PairRule, rng) -> tuple[DeltaC, PairingStats]:
    triplets, stats = build_triplets(records, rule, rng)
    return accumulate(triplets, target=rule.name), stats


def _code(z) -> str:
    return ",".join(repr(float(x)) for x in z)


def records_from_triplets(tb: TripletBatch, source: dict | None = None,
                          prefix: str | None = None) -> list[ActivationRecord]:
    """Toy triplets as a labeled dump: one prompt per triplet.

    Every record carries its ``z1`` and ``z2`` codes, so ``match_rule(target,
    held_fixed=(other,))`` pairs each query with exactly its own two keys.
    Prompt ids are ``<prefix><index>``, the prefix defaulting to ``"<target>-"``.
    """
    source = dict(source or {"model": "toy"})
    prefix = f"{tb.target}-" if prefix is None else prefix
    out = []
    for i in range(len(tb)):
        pid = f"{prefix}{i}"
        out.append(ActivationRecord("query", tb.q[i], {"prompt_id": pid, "z1": _code(tb.q_z1[i]),
                                                       "z2": _code(tb.q_z2[i])}, source))
        out.append(ActivationRecord("key", tb.k_plus[i], {"prompt_id": pid, "z1": _code(tb.plus_z1[i]),
                                                          "z2": _code(tb.plus_z2[i])}, source))
        out.append(ActivationRecord("key", tb.k_minus[i], {"prompt_id": pid, "z1": _code(tb.minus_z1[i]),
                                                           "z2": _code(tb.minus_z2[i])}, source))
    return out


def category_subspace(deltas: list[DeltaC], threshold: float = ENERGY_THRESHOLD,
                      tol: float = 1e-8) -> SubspaceBasis:
    """Joint basis spanned by the leading directions of several contrastive covariances."""
    if not deltas:
        raise EmptyEstimateError("no covariances given")
    dims = {dc.d_head for dc in deltas}
    if len(dims) != 1:
        raise SchemaError(f"inconsistent d_head across covariances: {sorted(dims)}")
    bases = [estimate_rank(dc, threshold) for dc in deltas]
    u = orthonormalize(np.hstack([b.u for b in bases]), tol)
    v = orthonormalize(np.hstack([b.v for b in bases]), tol)
    r = min(u.shape[1], v.shape[1])
    sv = np.concatenate([b.singular_values[:b.rank] for b in bases])
    label = "+".join(dc.target for dc in deltas if dc.target)
    return SubspaceBasis(r, u[:, :r], v[:, :r], -np.sort(-sv), threshold, label)


def restrict(records: list[ActivationRecord], label: str, allowed) -> list[ActivationRecord]:
    """Drop records whose ``label`` value is outside ``allowed``; unlabeled records stay."""
    allowed = set(allowed)
    return [r for r in records if label not in r.labels or r.labels[label] in allowed]


def rank_curve(records, rule: PairRule, rng, label: str, sizes, threshold: float = ENERGY_THRESHOLD):
    """Estimated rank when only the first ``m`` distinct ``label`` values are kept."""
    values = []
    for r in records:
        v = r.labels.get(label)
        if v is not None and v not in values:
            values.append(v)
    out = []
    for m in sizes:
        sub = restrict(records, label, values[:m])
        try:
            dc, stats = dump_delta(sub, rule, rng)
            out.append({"size": m, "rank": estimate_rank(dc, threshold).rank, "triplets": stats.triplets})
        except EmptyEstimateError:
            out.append({"size": m, "rank": 0, "triplets": 0})
    return out

