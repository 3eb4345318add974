"""Payload-retrieval task generator.

Each context holds ``T`` payload embeddings built from two latent keys and a
class label; the selector embedding re-embeds the latent keys of one target
position through a different pair of maps and carries no payload term.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensorcore import make_rng


class Variant(str, Enum):
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class TaskConfig:
    d: int = 32
    d_head: int = 16
    T: int = 16
    P: int = 10
    r1: int = 3
    r2: int = 5
    variant: Variant = Variant.DISCRETE
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        self.validate()

    def validate(self):
        if self.T < 2:
            raise ConfigError("T must be >= 2")
        if self.P < 2:
            raise ConfigError("P must be >= 2")
        if self.r1 < 1 or self.r2 < 1:
            raise ConfigError("latent ranks must be >= 1")
        if self.d < self.r1 + self.r2 + self.P:
            raise ConfigError(f"d={self.d} < r1 + r2 + P = {self.r1 + self.r2 + self.P}")
        if self.d_head < 1:
            raise ConfigError("d_head must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TaskConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown task keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class LatentMaps:
    a1: np.ndarray  # d x r1, payload embedding of z1
    a2: np.ndarray  # d x r2
    ay: np.ndarray  # d x P
    b1: np.ndarray  # d x r1, selector embedding of z1
    b2: np.ndarray  # d x r2

    @property
    def a(self) -> np.ndarray:
        return np.hstack([self.a1, self.a2])

    @property
    def b(self) -> np.ndarray:
        return np.hstack([self.b1, self.b2])


def build_maps(cfg: TaskConfig, rng: np.random.Generator | None = None) -> LatentMaps:
    if rng is None:
        rng = make_rng(cfg.seed, "maps")
    a1 = rng.standard_normal((cfg.d, cfg.r1))
    a2 = rng.standard_normal((cfg.d, cfg.r2))
    ay = rng.standard_normal((cfg.d, cfg.P))
    b1 = rng.standard_normal((cfg.d, cfg.r1))
    b2 = rng.standard_normal((cfg.d, cfg.r2))
    for m in (a1, a2, ay, b1, b2):
        m.setflags(write=False)
    return LatentMaps(a1, a2, ay, b1, b2)


def draw_latents(cfg: TaskConfig, rng: np.random.Generator, shape, r: int) -> np.ndarray:
    if cfg.variant is Variant.DISCRETE:
        return 2.0 * rng.integers(0, 2, size=(*shape, r)) - 1.0
    return rng.standard_normal((*shape, r))


@dataclass
class Sample:
    x: np.ndarray       # T x d
    xq: np.ndarray      # d
    i_star: int
    y: np.ndarray       # T, labels in [0, P)
    z1: np.ndarray      # T x r1
    z2: np.ndarray      # T x r2
    eps: np.ndarray     # T x d, payload noise
    eps_q: np.ndarray   # d, selector noise

    @property
    def target(self) -> int:
        return int(self.y[self.i_star])

    def to_json(self) -> dict:
        return {
            "x": self.x.tolist(), "xq": self.xq.tolist(), "i_star": int(self.i_star),
            "y": self.y.tolist(), "z1": self.z1.tolist(), "z2": self.z2.tolist(),
            "eps": self.eps.tolist(), "eps_q": self.eps_q.tolist(),
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Sample":
        return cls(
            x=np.asarray(rec["x"], dtype=np.float64),
            xq=np.asarray(rec["xq"], dtype=np.float64),
            i_star=int(rec["i_star"]),
            y=np.asarray(rec["y"], dtype=np.int64),
            z1=np.asarray(rec["z1"], dtype=np.float64),
            z2=np.asarray(rec["z2"], dtype=np.float64),
            eps=np.asarray(rec["eps"], dtype=np.float64),
            eps_q=np.asarray(rec["eps_q"], dtype=np.float64),
        )


@dataclass
class Batch:
    """Stacked samples; leading axis is the sample index."""
    x: np.ndarray       # n x T x d
    xq: np.ndarray      # n x d
    i_star: np.ndarray  # n
    y: np.ndarray       # n x T
    z1: np.ndarray
    z2: np.ndarray
    eps: np.ndarray = field(repr=False)
    eps_q: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.i_star)

    @property
    def target(self) -> np.ndarray:
        return self.y[np.arange(len(self)), self.i_star]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], self.xq[i], int(self.i_star[i]), self.y[i],
                      self.z1[i], self.z2[i], self.eps[i], self.eps_q[i])

    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def stack(cls, samples: list[Sample]) -> "Batch":
        return cls(*(np.stack([getattr(s, f) for s in samples]) for f in
                     ("x", "xq", "i_star", "y", "z1", "z2", "eps", "eps_q")))


def _mix(z, m) -> np.ndarray:
    # flattened 2-D product: rows come out bitwise identical whatever the
    # batch shape (stacked 3-D matmul does not guarantee this)
    z = np.asarray(z, dtype=np.float64)
    flat = z.reshape(-1, z.shape[-1])
    if len(flat) == 1:
        # a single row would be routed to gemv, whose rounding differs from gemm
        return (np.vstack([flat, flat]) @ m.T)[0].reshape(*z.shape[:-1], m.shape[0])
    return (flat @ m.T).reshape(*z.shape[:-1], m.shape[0])


def embed_payload(maps: LatentMaps, z1, z2, y, eps) -> np.ndarray:
    return _mix(z1, maps.a1) + _mix(z2, maps.a2) + maps.ay.T[y] + eps


def embed_selector(maps: LatentMaps, z1, z2, eps_q) -> np.ndarray:
    return _mix(z1, maps.b1) + _mix(z2, maps.b2) + eps_q


def draw_batch(cfg: TaskConfig, maps: LatentMaps, rng: np.random.Generator, n: int) -> Batch:
    """Draw ``n`` independent samples as stacked arrays."""
    T, d = cfg.T, cfg.d
    z1 = draw_latents(cfg, rng, (n, T), cfg.r1)
    z2 = draw_latents(cfg, rng, (n, T), cfg.r2)
    y = rng.integers(0, cfg.P, size=(n, T))
    i_star = rng.integers(0, T, size=n)
    eps = cfg.noise_sigma * rng.standard_normal((n, T, d))
    eps_q = cfg.noise_sigma * rng.standard_normal((n, d))
    rows = np.arange(n)
    x = embed_payload(maps, z1, z2, y, eps)
    xq = embed_selector(maps, z1[rows, i_star], z2[rows, i_star], eps_q)
    return Batch(x, xq, i_star, y, z1, z2, eps, eps_q)


def sample(cfg: TaskConfig, maps: LatentMaps, rng: np.random.Generator) -> Sample:
    return draw_batch(cfg, maps, rng, 1)[0]


def batch(cfg: TaskConfig, maps: LatentMaps, rng: np.random.Generator, n: int) -> list[Sample]:
    if n == 0:
        return []
    return draw_batch(cfg, maps, rng, n).samples()


def stream_batch(cfg: TaskConfig, maps: LatentMaps, seed: int, tag: str, index: int, n: int) -> Batch:
    """Batch ``index`` of the named stream; independent of any other batch."""
    return draw_batch(cfg, maps, make_rng(seed, tag, index), n)


def draw_chunked(cfg: TaskConfig, maps: LatentMaps, seed: int, tag: str, n: int,
                 chunk: int = 2048):
    """Yield ``n`` samples in chunks, each chunk from its own sub-stream."""
    done = 0
    index = 0
    while done < n:
        m = min(chunk, n - done)
        yield stream_batch(cfg, maps, seed, tag, index, m)
        done += m
        index += 1


def write_jsonl(path, samples) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_jsonl(path) -> list[Sample]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(Sample.from_json(json.loads(line)))
    return out
