import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

HERE = Path(__file__).resolve().parent

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
