"""Stand-alone plotting scripts written next to figure data.

The package itself never imports a plotting library; each script reads the
CSV/JSON beside it and needs only matplotlib (and numpy) to run::

    python3 render_sweep.py
"""
from __future__ import annotations

from pathlib import Path

_PRELUDE = '''\
import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

HERE = Path(__file__).resolve().parent
'''

SCRIPTS = {
    "train_curve": '''
rows = list(csv.DictReader(open(HERE / "train_report.csv")))
b = [int(r["batch"]) for r in rows]
fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
ax[0].plot(b, [float(r["train_loss"]) for r in rows], label="train")
ax[0].plot(b, [float(r["val_loss"]) for r in rows], label="validation")
ax[0].set_xlabel("batch"); ax[0].set_ylabel("loss"); ax[0].legend()
ax[1].plot(b, [float(r["val_accuracy"]) for r in rows])
ax[1].set_xlabel("batch"); ax[1].set_ylabel("validation accuracy")
fig.tight_layout(); fig.savefig(HERE / "train_curve.png", dpi=150)
''',
    "sweep": '''
rows = [r for r in csv.DictReader(open(HERE / "sweep.csv")) if r["status"] == "ok"]
r1s = sorted({int(r["r1"]) for r in rows}); r2s = sorted({int(r["r2"]) for r in rows})
def grid(fn):
    g = np.full((len(r1s), len(r2s)), np.nan); n = np.zeros_like(g)
    for r in rows:
        i, j = r1s.index(int(r["r1"])), r2s.index(int(r["r2"]))
        g[i, j] = np.nan_to_num(g[i, j]) + fn(r); n[i, j] += 1
    return g / np.maximum(n, 1)
exact = grid(lambda r: float(int(r["recovered_r1"]) == int(r["r1"]) and int(r["recovered_r2"]) == int(r["r2"])))
sup = grid(lambda r: float(r["superposition_score"]))
fig, ax = plt.subplots(1, 2, figsize=(9, 4))
for a, g, title in ((ax[0], exact, "exact rank recovery"), (ax[1], sup, "superposition score")):
    im = a.imshow(g, origin="lower", cmap="Greens" if a is ax[0] else "magma")
    a.set_xticks(range(len(r2s)), r2s); a.set_yticks(range(len(r1s)), r1s)
    a.set_xlabel("r2"); a.set_ylabel("r1"); a.set_title(title); fig.colorbar(im, ax=a)
fig.tight_layout(); fig.savefig(HERE / "sweep.png", dpi=150)
''',
    "pca": '''
rows = list(csv.DictReader(open(HERE / "pca.csv")))
latents = sorted({r["latent"] for r in rows})
fig, axes = plt.subplots(1, len(latents), figsize=(5 * len(latents), 4), squeeze=False)
for ax, lat in zip(axes[0], latents):
    sub = [r for r in rows if r["latent"] == lat]
    codes = sorted({r["latent_code"] for r in sub}); cmap = plt.get_cmap("tab20")
    for role, marker in (("query", "o"), ("key", "^")):
        pts = [r for r in sub if r["role"] == role]
        c = [cmap(codes.index(r["latent_code"]) % 20) for r in pts]
        ax.scatter([float(r["pc1"]) for r in pts], [float(r["pc2"]) for r in pts], c=c, s=6, marker=marker, label=role)
    ax.set_title(lat); ax.set_xlabel("PC1"); ax.set_ylabel("PC2"); ax.legend()
fig.tight_layout(); fig.savefig(HERE / "pca.png", dpi=150)
''',
    "interaction": '''
rows = list(csv.reader(open(HERE / "interaction_matrix.csv")))
cols = rows[0][1:]; names = [r[0] for r in rows[1:]]
g = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
fig, ax = plt.subplots(figsize=(4, 4))
lim = np.abs(g).max(); im = ax.imshow(g, cmap="RdBu_r", vmin=-lim, vmax=lim)
ax.set_xticks(range(len(cols)), cols); ax.set_yticks(range(len(names)), names)
ax.set_xlabel("key latent (A)"); ax.set_ylabel("query latent (B)"); fig.colorbar(im)
fig.tight_layout(); fig.savefig(HERE / "interaction_matrix.png", dpi=150)
''',
    "interventions": '''
rows = list(csv.DictReader(open(HERE / "interventions.csv")))
names = [r["condition"] for r in rows]
after = np.array([float(r["mean_alpha_target_after"]) for r in rows])
lo = [float(r["ci_low"] or "nan") for r in rows]; hi = [float(r["ci_high"] or "nan") for r in rows]
shift = np.array([float(r["mean_mass_shifted"]) for r in rows])
err = np.nan_to_num(np.array([shift - np.array(lo), np.array(hi) - shift]))
fig, ax = plt.subplots(figsize=(6, 3.5))
ax.bar(names, after, yerr=err, capsize=3)
ax.set_ylabel("attention at swap target"); ax.set_ylim(0, 1)
fig.tight_layout(); fig.savefig(HERE / "interventions.png", dpi=150)
''',
    "attribution": '''
records = json.load(open(HERE / "attribution.json"))
n = min(4, len(records))
fig, axes = plt.subplots(n, 1, figsize=(8, 2.2 * n), squeeze=False)
for ax, rec in zip(axes[:, 0], records):
    x = np.arange(len(rec["tokens"])); bottom_pos = np.zeros(len(x)); bottom_neg = np.zeros(len(x))
    parts = dict(rec["features"]); parts["residual"] = rec["residual"]
    for name, vals in parts.items():
        v = np.array(vals); base = np.where(v >= 0, bottom_pos, bottom_neg)
        ax.bar(x, v, bottom=base, label=name)
        bottom_pos += np.clip(v, 0, None); bottom_neg += np.clip(v, None, 0)
    ax.plot(x, rec["total"], "k.", label="total")
    ax.set_xticks(x, rec["tokens"], fontsize=7); ax.axhline(0, color="gray", lw=0.5)
axes[0, 0].legend(fontsize=7, ncol=4)
fig.tight_layout(); fig.savefig(HERE / "attribution.png", dpi=150)
''',
}


def emit(out, name: str) -> Path:
    """Write ``render_<name>.py`` into ``out`` and return its path."""
    path = Path(out) / f"render_{name}.py"
    path.write_text(_PRELUDE + SCRIPTS[name])
    return path
