"""Scratch vs transfer convergence: perception transfer (addition -> XOR) and
knowledge transfer (hard glyphs -> easy glyphs), paired by seed.

    python scripts/transfer.py --seeds 0 1 2 3 4 --out results/transfer.csv
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from abl import experiments as X


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="transfer.csv")
    a = ap.parse_args()
    rows = []
    for seed in a.seeds:
        add = X.run("binary_add", "easy", seed)
        hard = X.run("binary_add", "hard", seed)
        runs = {
            ("perception", "scratch"): X.run("xor", "easy", seed),
            ("perception", "transfer"): X.run("xor", "easy", seed, mode="transfer_perception", source=add.model),
            ("knowledge", "scratch"): add,
            ("knowledge", "transfer"): X.run("binary_add", "easy", seed, mode="transfer_knowledge",
                                             source=hard.model),
        }
        for (task, mode), r in runs.items():
            rows.append([seed, task, mode, r.convergence if r.convergence is not None else "",
                         round(r.mean_accuracy(), 4)])
            print(seed, task, mode, r.convergence, round(r.mean_accuracy(), 3), flush=True)
    for task in ("perception", "knowledge"):
        for mode in ("scratch", "transfer"):
            conv = [r[3] for r in rows if r[1] == task and r[2] == mode and r[3] != ""]
            print(f"{task:10s} {mode:8s} median convergence {np.median(conv) if conv else 'n/a'}")
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "task", "mode", "convergence_iteration", "mean_accuracy"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
