import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

HERE = Path(__file__).resolve().parent

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
