"""Train CBDT on the step-effect synthetic data and print the extracted rules."""
import sys

from cbdt.cli import main

if __name__ == "__main__":
    sys.exit(main(["rules", "--source", "synthetic", "--seeds", "0",
                   "--set", "data.synthetic={surface: step, n: 2000}", "--out", "runs/rules", *sys.argv[1:]]))
