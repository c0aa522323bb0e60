"""Ablation on the synthetic benchmark (n=2000, 10 seeds): full model, lam=0,
alpha=0 and a static schedule. Extra arguments go to the CLI."""
import sys

from cbdt.cli import main

if __name__ == "__main__":
    sys.exit(main(["ablate", "--source", "synthetic", "--seeds", "0-9", "--set", "data.synthetic={n: 2000}",
                   "--out", "runs/ablation", *sys.argv[1:]]))
