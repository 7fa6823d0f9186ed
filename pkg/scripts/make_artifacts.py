#!/usr/bin/env python3
"""Produce the shipped experiment CSVs and figures from trained weights.

Runs the CLI end to end (simulate, eval, waypoints) against runs/final.txt,
collects the training log of a short demonstration run, and copies everything
the plot scripts need into plots/data/.
"""

import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from zdp.cli import main as cli_main
from zdp.config import load_config, make_problem
from zdp.policy import NetPolicy, load_weights
from zdp.training import TrainConfig, train, write_train_log


def main():
    weights = ROOT / "runs" / "final.txt"
    if not weights.exists():
        sys.exit("run scripts/train_policy.py (plus refinement) first; "
                 f"missing {weights}")
    out = ROOT / "runs" / "artifacts"
    out.mkdir(parents=True, exist_ok=True)
    data = ROOT / "plots" / "data"
    data.mkdir(parents=True, exist_ok=True)

    # offset rollout for the decay plot
    assert cli_main(["simulate", "--weights", str(weights), "--hops", "30",
                     "--x0", "0.5,0.0,0.0,0.0", "--seed", "0",
                     "--log", str(out / "offset_hops.csv")]) == 0

    # square tracking run for overhead + velocity bands
    assert cli_main(["waypoints", "--weights", str(weights),
                     "--waypoints", str(ROOT / "configs" / "square_waypoints.csv"),
                     "--seed", "0", "--log", str(out / "square_hops.csv")]) == 0

    # certification report with the LQR scatter table
    assert cli_main(["eval", "--weights", str(weights), "--seed", "0",
                     "--out", str(out)]) == 0

    # short demonstration training run for the loss curve
    cfg = load_config(str(ROOT / "configs" / "default.yaml"))
    problem = make_problem(cfg)
    policy = NetPolicy(load_weights(weights))
    tc = TrainConfig(batch_size=30, learning_rate=2e-4, num_steps=60, seed=7)
    _, records = train(policy, tc, problem)
    write_train_log(out / "train_log.csv", records)

    for name in ("offset_hops.csv", "square_hops.csv", "square_hops.legs.csv",
                 "lqr_scatter.csv", "train_log.csv"):
        shutil.copy(out / name, data / name)
    shutil.copy(ROOT / "configs" / "square_waypoints.csv", data / "square_waypoints.csv")
    print(f"artifacts in {out}, plot inputs in {data}")


if __name__ == "__main__":
    main()
