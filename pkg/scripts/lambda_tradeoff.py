#!/usr/bin/env python3
"""Sweep the contrastive weight on the synthetic benchmark and print the
head/tail tradeoff table (medians over five seeds)."""

import sys
from pathlib import Path

from ltlab import cli

if __name__ == "__main__":
    spec = Path(__file__).resolve().parent.parent / "configs" / "lambda_sweep.toml"
    sys.exit(cli.main(["sweep", "--spec", str(spec), "--jobs", "4"]))
