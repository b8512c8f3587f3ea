"""Run every figure pipeline with its bundled config.

Usage: python scripts/run_all.py [--reps N] [--out results]
"""

import argparse
from pathlib import Path

from congest.cli import main as cli

ROOT = Path(__file__).resolve().parent.parent


def run(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default=str(ROOT / "results"))
    ap.add_argument("names", nargs="*", default=["fig2", "fig4", "fig3", "fig5"])
    args = ap.parse_args(argv)
    for name in args.names:
        cmd = ["experiment", "--name", name, "--config", str(ROOT / "configs" / f"{name}.json"),
               "--jobs", str(args.jobs), "--out", str(Path(args.out) / name)]
        if args.reps:
            cmd += ["--reps", str(args.reps)]
        print("congest", " ".join(cmd), flush=True)
        code = cli(cmd)
        if code:
            return code
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
