"""Single attention head for the payload task: forward, exact gradients, AdamW.

All computations are batched over a leading sample axis; the single-sample
``forward``/``backward`` helpers wrap the batched versions.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Batch, LatentMaps, Sample, TaskConfig, stream_batch
from .errors import ConfigError, EmptyEvalSet, NumericalError, SchemaError, TrainingError
from .tensorcore import make_rng

CHECKPOINT_FORMAT = "qkspace-head"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("w_q", "w_k", "w_v", "w_o")


@dataclass
class AttentionHead:
    w_q: np.ndarray  # d_head x d
    w_k: np.ndarray  # d_head x d
    w_v: np.ndarray  # d_head x d
    w_o: np.ndarray  # P x d_head

    @property
    def d_head(self) -> int:
        return self.w_q.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "AttentionHead":
        return AttentionHead(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for n in PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, n)).tobytes())
        return h.hexdigest()[:16]


def init_head(cfg: TaskConfig, rng: np.random.Generator) -> AttentionHead:
    """Gaussian init with variance ``1 / fan_in`` for every weight."""
    d, dh, P = cfg.d, cfg.d_head, cfg.P
    return AttentionHead(
        w_q=rng.standard_normal((dh, d)) / np.sqrt(d),
        w_k=rng.standard_normal((dh, d)) / np.sqrt(d),
        w_v=rng.standard_normal((dh, d)) / np.sqrt(d),
        w_o=rng.standard_normal((P, dh)) / np.sqrt(dh),
    )


# --------------------------------------------------------------------------
# forward / backward

@dataclass
class ForwardTrace:
    q: np.ndarray       # (n,) d_head
    k: np.ndarray       # (n,) T x d_head
    v: np.ndarray       # (n,) T x d_head
    alpha: np.ndarray   # (n,) T
    h: np.ndarray       # (n,) d_head, attention-weighted value
    o: np.ndarray       # (n,) P, class scores
    probs: np.ndarray   # (n,) P
    loss: np.ndarray | float


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Softmax of scaled logits; ``q`` is (n, dh), ``k`` is (n, T, dh)."""
    logits = (k @ q[..., None])[..., 0] / np.sqrt(q.shape[-1])
    return softmax(logits)


def forward_batch(head: AttentionHead, x: np.ndarray, xq: np.ndarray, y: np.ndarray) -> ForwardTrace:
    n, T, d = x.shape
    dh = head.d_head
    x2 = x.reshape(n * T, d)
    q = xq @ head.w_q.T
    k = (x2 @ head.w_k.T).reshape(n, T, dh)
    v = (x2 @ head.w_v.T).reshape(n, T, dh)
    alpha = attention_weights(q, k)
    h = (alpha[:, None, :] @ v)[:, 0, :]
    o = h @ head.w_o.T
    probs = softmax(o)
    o_shift = o - o.max(axis=1, keepdims=True)
    logz = np.log(np.exp(o_shift).sum(axis=1))
    loss = logz - o_shift[np.arange(n), y]
    if not (np.all(np.isfinite(loss)) and np.all(np.isfinite(alpha))):
        raise NumericalError("non-finite values in forward pass")
    return ForwardTrace(q, k, v, alpha, h, o, probs, loss)


def backward_batch(head: AttentionHead, x: np.ndarray, xq: np.ndarray, y: np.ndarray,
                   trace: ForwardTrace) -> dict[str, np.ndarray]:
    """Gradients of the mean cross-entropy over the batch."""
    n, T, d = x.shape
    dh = head.d_head
    x2 = x.reshape(n * T, d)
    d_o = trace.probs.copy()
    d_o[np.arange(n), y] -= 1.0
    d_o /= n
    g_o = d_o.T @ trace.h
    d_h = d_o @ head.w_o                                  # n x dh
    d_v = trace.alpha[:, :, None] * d_h[:, None, :]       # n x T x dh
    g_v = d_v.reshape(n * T, dh).T @ x2
    d_alpha = (trace.v @ d_h[:, :, None])[..., 0]         # n x T
    a = trace.alpha
    d_s = a * (d_alpha - (a * d_alpha).sum(axis=1, keepdims=True)) / np.sqrt(dh)
    d_q = (d_s[:, None, :] @ trace.k)[:, 0, :]            # n x dh
    g_q = d_q.T @ xq
    d_k = d_s[:, :, None] * trace.q[:, None, :]
    g_k = d_k.reshape(n * T, dh).T @ x2
    return {"w_q": g_q, "w_k": g_k, "w_v": g_v, "w_o": g_o}


def _single(sample: Sample):
    return sample.x[None], sample.xq[None], np.array([sample.target])


def forward(head: AttentionHead, sample: Sample) -> ForwardTrace:
    tr = forward_batch(head, *_single(sample))
    return ForwardTrace(tr.q[0], tr.k[0], tr.v[0], tr.alpha[0], tr.h[0], tr.o[0],
                        tr.probs[0], float(tr.loss[0]))


def backward(head: AttentionHead, sample: Sample, trace: ForwardTrace) -> dict[str, np.ndarray]:
    batched = ForwardTrace(trace.q[None], trace.k[None], trace.v[None], trace.alpha[None],
                           trace.h[None], trace.o[None], trace.probs[None],
                           np.array([trace.loss]))
    return backward_batch(head, *_single(sample), batched)


def loss_batch(head: AttentionHead, b: Batch) -> float:
    return float(forward_batch(head, b.x, b.xq, b.target).loss.mean())


# --------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adam with decoupled weight decay, updating arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-4, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0.0:
                continue
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.01
    val_every: int = 200
    val_batches: int = 20
    val_batch_size: int = 512
    patience: int = 5
    max_batches: int = 50_000
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "val_every", "val_batches", "val_batch_size",
                     "patience", "max_batches"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainingReport:
    curve: list[dict] = field(default_factory=list)
    best_batch: int = 0
    best_val_loss: float = float("inf")
    batches_run: int = 0
    stop_reason: str = ""

    def write_csv(self, path) -> None:
        cols = ["batch", "train_loss", "val_loss", "val_accuracy"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in self.curve:
                w.writerow({c: repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols})


def validation_set(cfg: TaskConfig, maps: LatentMaps, tcfg: TrainConfig) -> list[Batch]:
    return [stream_batch(cfg, maps, tcfg.seed, "val", i, tcfg.val_batch_size)
            for i in range(tcfg.val_batches)]


def _evaluate(head: AttentionHead, batches: list[Batch]) -> tuple[float, float]:
    losses, correct, n = 0.0, 0, 0
    for b in batches:
        tr = forward_batch(head, b.x, b.xq, b.target)
        losses += float(tr.loss.sum())
        correct += int((tr.o.argmax(axis=1) == b.target).sum())
        n += len(b)
    return losses / n, correct / n


def train(cfg: TaskConfig, tcfg: TrainConfig, maps: LatentMaps,
          head: AttentionHead | None = None, callback=None) -> tuple[AttentionHead, TrainingReport]:
    """Train on an online stream with early stopping on validation loss.

    Returns the head with the best validation loss seen. ``callback``, if
    given, is called as ``callback(row, head)`` after every validation check.
    """
    if head is None:
        head = init_head(cfg, make_rng(tcfg.seed, "init"))
    head = head.copy()
    params = head.params()
    opt = AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    val = validation_set(cfg, maps, tcfg)
    report = TrainingReport()
    best = head.copy()
    bad = 0
    running = 0.0
    for step in range(1, tcfg.max_batches + 1):
        b = stream_batch(cfg, maps, tcfg.seed, "train", step, tcfg.batch_size)
        try:
            tr = forward_batch(head, b.x, b.xq, b.target)
        except NumericalError as exc:
            raise TrainingError(f"divergence at batch {step}", batch_index=step) from exc
        grads = backward_batch(head, b.x, b.xq, b.target, tr)
        opt.step(params, grads)
        running += float(tr.loss.mean())
        report.batches_run = step
        if step % tcfg.val_every == 0:
            try:
                vloss, vacc = _evaluate(head, val)
            except NumericalError as exc:
                raise TrainingError(f"divergence at batch {step}", batch_index=step) from exc
            report.curve.append({"batch": step, "train_loss": running / tcfg.val_every,
                                 "val_loss": vloss, "val_accuracy": vacc})
            running = 0.0
            if callback is not None:
                callback(report.curve[-1], head)
            if vloss < report.best_val_loss:
                report.best_val_loss = vloss
                report.best_batch = step
                best = head.copy()
                bad = 0
            else:
                bad += 1
                if bad >= tcfg.patience:
                    report.stop_reason = "early_stop"
                    break
    else:
        report.stop_reason = "max_batches"
    if report.best_batch == 0:
        best = head.copy()
    return best, report


def accuracy(head: AttentionHead, samples, chunk: int = 4096) -> float:
    """Fraction of samples whose argmax class score equals the target label."""
    if isinstance(samples, Batch):
        batches = [samples]
    else:
        samples = list(samples)
        if samples and isinstance(samples[0], Batch):
            batches = samples
        else:
            batches = [Batch.stack(samples[i:i + chunk]) for i in range(0, len(samples), chunk)]
    n = sum(len(b) for b in batches)
    if n == 0:
        raise EmptyEvalSet("accuracy needs at least one sample")
    correct = 0
    for b in batches:
        o = forward_batch(head, b.x, b.xq, b.target).o
        correct += int((o.argmax(axis=1) == b.target).sum())
    return correct / n


# --------------------------------------------------------------------------
# checkpoints

def save_head(path, head: AttentionHead, cfg: TaskConfig, tcfg: TrainConfig | None = None,
              extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "task": cfg.to_dict(),
        "train": asdict(tcfg) if tcfg is not None else None,
        "shapes": {n: list(getattr(head, n).shape) for n in PARAM_NAMES},
        "weights": {n: getattr(head, n).tolist() for n in PARAM_NAMES},
        "fingerprint": head.fingerprint(),
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_head(path) -> tuple[AttentionHead, TaskConfig, TrainConfig | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: not a version-{CHECKPOINT_VERSION} head checkpoint")
    weights = {}
    for n in PARAM_NAMES:
        w = np.asarray(doc["weights"][n], dtype=np.float64)
        if list(w.shape) != doc["shapes"][n]:
            raise SchemaError(f"{path}: shape mismatch for {n}")
        weights[n] = w
    cfg = TaskConfig.from_dict(doc["task"])
    tcfg = TrainConfig(**doc["train"]) if doc.get("train") else None
    return AttentionHead(**weights), cfg, tcfg

