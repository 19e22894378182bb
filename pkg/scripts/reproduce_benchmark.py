"""Run the benchmark at both data budgets (T=20 and T=2000) and compare them.

    python3 scripts/reproduce_benchmark.py --out out/reproduce [--seed 0]

Writes <out>/T20 and <out>/T2000 (full artifact layouts) plus comparison.json.
Exit status 0 when the larger budget passes every check and has the smaller
worst-case grid error.
"""

import argparse
import sys
from pathlib import Path

from mrgpr import cli


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("out/reproduce"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    return cli.main(["run", "--paper", "--out", str(args.out), "--seed", str(args.seed)])


if __name__ == "__main__":
    sys.exit(main())
