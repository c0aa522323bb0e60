"""IHDP benchmark: CBDT against the S-, T-, X- and DR-learners over 10 seeds.

Uses real replicates from $IHDP_DIR (ihdp_npci_<r>.csv) when present and the
IHDP-shaped surrogate otherwise. Extra arguments go to the CLI, e.g.

    python scripts/run_ihdp_benchmark.py --seeds 0-4 --out runs/ihdp_quick
"""
import sys

from cbdt.cli import main

if __name__ == "__main__":
    sys.exit(main(["benchmark", "--source", "ihdp", "--seeds", "0-9", "--out", "runs/ihdp_benchmark",
                   *sys.argv[1:]]))
