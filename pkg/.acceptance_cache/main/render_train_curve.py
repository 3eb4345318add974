import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

HERE = Path(__file__).resolve().parent

rows = list(csv.DictReader(open(HERE / "train_report.csv")))
b = [int(r["batch"]) for r in rows]
fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
ax[0].plot(b, [float(r["train_loss"]) for r in rows], label="train")
ax[0].plot(b, [float(r["val_loss"]) for r in rows], label="validation")
ax[0].set_xlabel("batch"); ax[0].set_ylabel("loss"); ax[0].legend()
ax[1].plot(b, [float(r["val_accuracy"]) for r in rows])
ax[1].set_xlabel("batch"); ax[1].set_ylabel("validation accuracy")
fig.tight_layout(); fig.savefig(HERE / "train_curve.png", dpi=150)
