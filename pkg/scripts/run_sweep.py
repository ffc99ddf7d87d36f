"""Train N=1,4,8 on the held-out-rotation task and print the accuracy trend.

    python3 scripts/run_sweep.py [out_dir] [extra eposenet flags...]
"""
import csv
import sys
from pathlib import Path

from eposenet.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(out: str, extra: list[str]) -> int:
    code = main(["sweep", "--config", str(ROOT / "configs" / "sweep.txt"), "--out", out, *extra])
    if code:
        return code
    with open(Path(out) / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    print("\nN    acc    median_t  median_r")
    for r in rows:
        print(f"{r['N']:<4} {float(r['acc']):.3f}  {float(r['median_t']):.3f}     {float(r['median_r']):.2f}")
    acc = {int(r["N"]): float(r["acc"]) for r in rows}
    if {1, 4, 8} <= set(acc):
        trend = acc[8] >= acc[1] + 0.10 and acc[1] - 0.02 <= acc[4] <= acc[8] + 0.02
        print(f"trend N=1 < N=4 <= N=8: {'holds' if trend else 'does not hold'}")
    return 0


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/sweep"
    sys.exit(run(out, sys.argv[2:]))
