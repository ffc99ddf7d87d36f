"""Per-layer equivariance defects for random C1, C4 and C8 backbones in 32 and 64 bit."""
import sys

from eposenet.cli import equivariance_report, verify_images
from eposenet.config import load_config
from eposenet.model import EPoseNet


def main() -> int:
    print(f"{'N':>2} {'dtype':>8} {'90 deg':>10} {'180 deg':>10} {'270 deg':>10}  worst non-quarter step")
    for N in (1, 4, 8):
        for dtype in ("float32", "float64"):
            cfg, _ = load_config(overrides=[f"N={N}", f"dtype={dtype}"])
            rep = equivariance_report(cfg, EPoseNet(cfg.model_config(), seed=cfg.seed), verify_images(cfg))
            q = [s["end_to_end"] for s in rep["quarter_turns"]]
            inexact = [s["end_to_end"] for s in rep["steps"] if s["status"] == "INEXACT"]
            other = f"{max(inexact):.3g}" if inexact else "-"
            print(f"{N:>2} {dtype:>8} {q[0]:>10.3g} {q[1]:>10.3g} {q[2]:>10.3g}  {other}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
