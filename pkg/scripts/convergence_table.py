"""Spatial convergence table for the two-species bump test on any interval.

The preset runs on (-pi, pi); pass --domain 0 1 to repeat the study on the
unit interval.  Use --reference and --cells to shrink the run.
"""
import argparse
import math
import time

import numpy as np

from sktfv.analysis import convergence_harness
from sktfv.initial import Bump, Constant, Sum
from sktfv.model import pattern_coefficients, skt_model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--domain", nargs=2, type=float, default=[-math.pi, math.pi])
    ap.add_argument("--cells", nargs="+", type=int, default=[40, 80, 160, 320, 640, 1280])
    ap.add_argument("--reference", type=int, default=5120)
    ap.add_argument("--t-end", type=float, default=1e-3)
    args = ap.parse_args()

    model = skt_model(pattern_coefficients())
    u1 = Sum((Constant(2.0), Bump((0.25,), 0.31), Bump((0.75,), 0.31)))
    t0 = time.time()
    tab = convergence_harness(model, tuple(args.domain), args.cells, (1.0 / args.reference) ** 2, args.t_end,
                              [u1, Constant(0.5)], reference_cells=args.reference,
                              progress=lambda N, k: print(f"  {N} cells done ({time.time() - t0:.0f}s)", flush=True))
    print(f"{'cells':>6} {'err u1':>12} {'order':>6} {'err u2':>12} {'order':>6}")
    for c, e, o in zip(tab.cells, tab.errors, tab.orders):
        o = ["-" if np.isnan(x) else f"{x:.2f}" for x in o]
        print(f"{c:6d} {e[0]:12.4e} {o[0]:>6} {e[1]:12.4e} {o[1]:>6}")


if __name__ == "__main__":
    main()
