#!/usr/bin/env python3
"""Plot trajectory files written by ``posttest simulate --trajectories``.

Single-test files get one panel of running-minimum p-values per effect size;
multiple-test files get mean FDR and TPR against the batch index.
"""
import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def load(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_single(rows, ax_list, alpha):
    by_b = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_b[float(r["b"])][int(r["replication"])].append((int(r["n_treat"]), float(r["running_min_p"])))
    for ax, (b, reps) in zip(ax_list, sorted(by_b.items())):
        for traj in reps.values():
            n, p = zip(*traj)
            ax.step(n, p, where="post", color="tab:blue", alpha=0.25, lw=0.8)
        ax.axhline(alpha, color="tab:red", ls="--", lw=1)
        ax.set_yscale("log")
        ax.set_title(f"b = {b:g}")
        ax.set_xlabel("per-arm sample size")
    ax_list[0].set_ylabel("always-valid p-value")


def plot_multi(rows, ax):
    fdr, tpr = defaultdict(list), defaultdict(list)
    for r in rows:
        k = int(r["batch"])
        fdr[k].append(float(r["fdr"]))
        if r["tpr"]:
            tpr[k].append(float(r["tpr"]))
    ks = sorted(fdr)
    ax.plot(ks, [sum(fdr[k]) / len(fdr[k]) for k in ks], marker="o", label="FDR")
    if tpr:
        ax.plot(ks, [sum(tpr[k]) / len(tpr[k]) for k in ks], marker="s", label="TPR")
    ax.set_xlabel("batch")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("files", nargs="+", type=Path)
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--out", type=Path, default=Path("figures"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for path in args.files:
        rows = load(path)
        if not rows:
            continue
        if "fdr" in rows[0]:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            plot_multi(rows, ax)
        else:
            n_b = len({r["b"] for r in rows})
            fig, axes = plt.subplots(1, n_b, figsize=(4.5 * n_b, 3.5), squeeze=False, sharey=True)
            plot_single(rows, list(axes[0]), args.alpha)
        fig.suptitle(path.stem.replace("_trajectory", ""))
        fig.tight_layout()
        target = args.out / f"{path.stem}.png"
        fig.savefig(target, dpi=120)
        plt.close(fig)
        print(target)


if __name__ == "__main__":
    main()
