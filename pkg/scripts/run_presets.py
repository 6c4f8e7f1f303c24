"""Run bundled presets and print a one-line status for each.

    python3 scripts/run_presets.py                # all presets into runs/<name>
    python3 scripts/run_presets.py testcase2 -o out
"""
import argparse
import logging
import time
from pathlib import Path

from sktfv import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", help="preset names (default: all)")
    ap.add_argument("-o", "--output", default="runs", help="parent output directory")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    for name in args.names or cli.preset_names():
        t0 = time.time()
        cfg = cli.load_config(name)
        res = cli.execute(cfg, Path(args.output) / name)
        extra = ""
        if "convergence" in res.meta:
            extra = f" errors(u1)={[f'{e[0]:.3e}' for e in res.meta['convergence']['errors']]}"
        elif "decay" in res.meta:
            extra = f" lambda={res.meta['decay']['fitted_lambda']:.3f} R2={res.meta['decay']['r_squared']:.5f}"
        elif "niche" in res.meta:
            extra = f" niche={res.meta['niche']['center_average']} vs {res.meta['niche']['domain_average']}"
        print(f"{name}: {res.meta['status']} in {time.time() - t0:.0f}s ({res.meta.get('steps', '-')} steps){extra}")


if __name__ == "__main__":
    main()
