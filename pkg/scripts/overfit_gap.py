#!/usr/bin/env python3
"""Train the cosine-head benchmark for 50 and 150 epochs and compare the
per-class train-test gap lines: longer schedules overfit the tail harder,
raising both the slope and the intercept of the fit."""

from statistics import median

from ltlab.config import load_config
from ltlab.metrics import overfit_fit
from ltlab.trainer import train

SEEDS = (0, 1, 2, 3, 4)

if __name__ == "__main__":
    base = load_config("configs/ncibl_synthetic.toml")
    print(f"{'epochs':>7} {'slope':>10} {'intercept':>10}")
    for epochs in (50, 150):
        slopes, intercepts = [], []
        for seed in SEEDS:
            cfg = base.copy()
            cfg.optim.epochs = epochs
            cfg.run.seed = seed
            log = train(cfg)
            fit = overfit_fit(log, log.profile)
            slopes.append(fit.slope)
            intercepts.append(fit.intercept)
        print(f"{epochs:>7} {median(slopes):>10.5f} {median(intercepts):>10.5f}")
