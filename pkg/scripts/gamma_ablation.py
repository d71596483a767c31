#!/usr/bin/env python3
"""Sweep the cosine-classifier temperature on the synthetic benchmark."""

import sys
from pathlib import Path

from ltlab import cli

if __name__ == "__main__":
    spec = Path(__file__).resolve().parent.parent / "configs" / "gamma_sweep.toml"
    sys.exit(cli.main(["sweep", "--spec", str(spec), "--jobs", "4"]))
