"""Training dynamics of one full-method run: per-epoch target accuracy,
mean selected certainty and mean sampled k, printed as a table and
optionally plotted.

    python3 scripts/dynamics.py --seed 0 --epochs 40 --plot dynamics.png
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from domadapt.config import TrainConfig
from domadapt.data import generate_two_moons_shift
from domadapt.train import run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--plot", type=Path, default=None, help="write a PNG (needs matplotlib)")
    args = ap.parse_args()

    source, target = generate_two_moons_shift(2000, 35.0, 0.1, seed=args.seed)
    res = run_experiment(TrainConfig(epochs=args.epochs, seed=args.seed), source, target)

    by_epoch: dict[int, list[dict]] = {}
    for rec in res.log.iterations:
        by_epoch.setdefault(rec["epoch"], []).append(rec)
    acc = {e["epoch"]: e["target_acc"] for e in res.log.epochs}
    print("epoch  target_acc  certainty  k")
    rows = []
    for epoch, recs in sorted(by_epoch.items()):
        c = float(np.mean([r["mean_certainty"] for r in recs]))
        k = float(np.mean([r["k"] for r in recs]))
        rows.append((epoch, acc[epoch], c, k))
        print(f"{epoch:5d}  {acc[epoch]:.4f}      {c:.4f}     {k:.2f}")

    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        e, a, c, k = map(np.array, zip(*rows))
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
        for ax, y, title in zip(axes, (a, c, k), ("target accuracy", "mean selected certainty", "mean k")):
            ax.plot(e, y)
            ax.set_title(title)
            ax.set_xlabel("epoch")
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
        print(f"wrote {args.plot}")


if __name__ == "__main__":
    main()
