"""48-cell lambda x alpha x eta sensitivity grid on IHDP, one process per CPU.
Extra arguments go to the CLI, e.g. --workers 4."""
import os
import sys

from cbdt.cli import main

if __name__ == "__main__":
    sys.exit(main(["sensitivity", "--source", "ihdp", "--seeds", "0-9", "--workers", str(os.cpu_count() or 1),
                   "--out", "runs/sensitivity", *sys.argv[1:]]))
