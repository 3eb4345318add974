"""Key-side subspace swaps and the attention shift they cause."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .attnmodel import AttentionHead, attention_weights
from .datagen import LatentMaps, Sample, TaskConfig, draw_chunked
from .decompose import SubspaceBasis
from .errors import DimensionError, NotEnoughKeysError, ProjectorError
from .tensorcore import make_rng, orthonormalize, random_orthonormal, random_orthonormal_stack

SUITE_SAMPLES = 51_200
PROJECTOR_TOL = 1e-10


@dataclass
class InterventionSpec:
    bases: list[SubspaceBasis] = field(default_factory=list)
    use_random_baseline: bool = False
    baseline_rank: int = 0
    seed: int = 0


@dataclass
class InterventionResult:
    alpha_before: np.ndarray
    alpha_after: np.ndarray
    i_orig: int
    i_target: int

    @property
    def mass_shifted(self) -> float:
        return float(self.alpha_after[self.i_target] - self.alpha_before[self.i_target])


def key_projector(bases: list[SubspaceBasis], d_head: int | None = None) -> np.ndarray:
    """Projector onto the union of the bases' key-side spans (re-orthonormalized)."""
    if not bases:
        if d_head is None:
            raise DimensionError("d_head required for an empty basis list")
        return np.zeros((d_head, d_head))
    dims = {b.v.shape[0] for b in bases}
    if len(dims) != 1 or (d_head is not None and dims != {d_head}):
        raise DimensionError("bases disagree on d_head")
    q = orthonormalize(np.hstack([b.v for b in bases]))
    return q @ q.T


def check_projector(p: np.ndarray, tol: float = PROJECTOR_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ProjectorError("projector must be square")
    scale = max(1.0, float(np.abs(p).max()))
    if np.abs(p - p.T).max() > tol * scale:
        raise ProjectorError("projector is not symmetric")
    if np.abs(p @ p - p).max() > tol * scale:
        raise ProjectorError("projector is not idempotent")
    return p


def swap_keys(k_orig, k_target, projector) -> tuple[np.ndarray, np.ndarray]:
    """Exchange the components of two keys that lie in the projector's range."""
    p = check_projector(projector)
    k_orig = np.asarray(k_orig, dtype=np.float64)
    k_target = np.asarray(k_target, dtype=np.float64)
    shift = p @ (k_target - k_orig)
    return k_orig + shift, k_target - shift


def _other_index(rng: np.random.Generator, T: int, i_star: np.ndarray) -> np.ndarray:
    return (i_star + 1 + rng.integers(0, T - 1, size=np.shape(i_star))) % T


def run_intervention(head: AttentionHead, sample: Sample, spec: InterventionSpec,
                     rng: np.random.Generator | None = None) -> InterventionResult:
    T = sample.x.shape[0]
    if T < 2:
        raise NotEnoughKeysError("need at least two keys to swap")
    if rng is None:
        rng = make_rng(spec.seed, "intervention")
    i_orig = int(sample.i_star)
    i_target = int(_other_index(rng, T, np.array(i_orig)))
    q = head.w_q @ sample.xq
    k = sample.x @ head.w_k.T
    dh = head.d_head
    if spec.use_random_baseline:
        basis = random_orthonormal(rng, dh, spec.baseline_rank)
        p = basis @ basis.T
    else:
        p = key_projector(spec.bases, dh)
    before = attention_weights(q[None], k[None])[0]
    k2 = k.copy()
    k2[i_orig], k2[i_target] = swap_keys(k[i_orig], k[i_target], p)
    after = attention_weights(q[None], k2[None])[0]
    return InterventionResult(before, after, i_orig, i_target)


# --------------------------------------------------------------------------
# suite

@dataclass
class ConditionSummary:
    condition: str
    mean_mass_shifted: float
    ci_low: float
    ci_high: float
    n: int
    mean_alpha_target_before: float
    mean_alpha_target_after: float


def _summary(name, shifted, before, after) -> ConditionSummary:
    n = len(shifted)
    mean = float(np.mean(shifted))
    if n > 1:
        half = 1.96 * float(np.std(shifted, ddof=1)) / math.sqrt(n)
        lo, hi = mean - half, mean + half
    else:
        lo = hi = float("nan")
    return ConditionSummary(name, mean, lo, hi, n, float(np.mean(before)), float(np.mean(after)))


def suite_conditions(z1: SubspaceBasis, z2: SubspaceBasis):
    """The six standard conditions: feature swaps and equal-rank random swaps."""
    return [
        ("z1", [z1]),
        ("z2", [z2]),
        ("z1+z2", [z1, z2]),
        ("rand_r1", z1.rank),
        ("rand_r2", z2.rank),
        ("rand_r1+r2", z1.rank + z2.rank),
    ]


def intervention_suite(head: AttentionHead, cfg: TaskConfig, maps: LatentMaps,
                       bases: dict[str, SubspaceBasis], n_samples: int = SUITE_SAMPLES,
                       seed: int = 0, chunk: int = 2048) -> list[ConditionSummary]:
    """Mean attention shift per condition over a fresh test set.

    ``bases`` maps "z1"/"z2" to recovered subspaces. Random conditions draw an
    independent random subspace per test sample.
    """
    if cfg.T < 2:
        raise NotEnoughKeysError("need at least two keys to swap")
    conditions = suite_conditions(bases["z1"], bases["z2"])
    dh = head.d_head
    results = {name: ([], [], []) for name, _ in conditions}
    for ci, b in enumerate(draw_chunked(cfg, maps, seed, "intervention-test", n_samples, chunk)):
        n = len(b)
        rows = np.arange(n)
        rng = make_rng(seed, "intervention-targets", ci)
        i_orig = b.i_star
        i_target = _other_index(rng, cfg.T, i_orig)
        q = b.xq @ head.w_q.T
        k = (b.x.reshape(-1, cfg.d) @ head.w_k.T).reshape(n, cfg.T, dh)
        before = attention_weights(q, k)
        ko = k[rows, i_orig]
        kt = k[rows, i_target]
        diff = kt - ko
        for name, what in conditions:
            if isinstance(what, int):
                r = make_rng(seed, "intervention-random", name, ci)
                basis = random_orthonormal_stack(r, n, dh, what)
                shift = np.einsum("nij,nj->ni", basis, np.einsum("nji,nj->ni", basis, diff))
            else:
                shift = diff @ key_projector(what, dh)
            k2 = k.copy()
            k2[rows, i_orig] = ko + shift
            k2[rows, i_target] = kt - shift
            after = attention_weights(q, k2)
            a_before = before[rows, i_target]
            a_after = after[rows, i_target]
            res = results[name]
            res[0].append(a_after - a_before)
            res[1].append(a_before)
            res[2].append(a_after)
    return [_summary(name, *(np.concatenate(x) for x in results[name])) for name, _ in conditions]


SUITE_COLUMNS = ["condition", "mean_mass_shifted", "ci_low", "ci_high", "n",
                 "mean_alpha_target_before", "mean_alpha_target_after"]


def write_suite_csv(path, rows: list[ConditionSummary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUITE_COLUMNS)
        for r in rows:
            w.writerow([r.condition, repr(r.mean_mass_shifted),
                        "" if math.isnan(r.ci_low) else repr(r.ci_low),
                        "" if math.isnan(r.ci_high) else repr(r.ci_high), r.n,
                        repr(r.mean_alpha_target_before), repr(r.mean_alpha_target_after)])
