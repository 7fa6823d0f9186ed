#!/usr/bin/env python3
"""Pretrain and train the hopper policy with the default curriculum.

Writes runs/pretrained.txt and runs/final.txt plus the held-out loss trace.
The curriculum is a full-box phase (stops once the held-out invariance loss
has dropped 20-fold from the pretrained baseline) followed by the fixed
near-origin refinement phases; everything is seeded and reproducible.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from zdp.config import load_config, make_problem
from zdp.policy import NetPolicy, init_policy, pretrain, save_weights
from zdp.training import run_default_curriculum, sample_batch, write_train_log


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--out-dir", default="runs")
    args = ap.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = make_problem(cfg)

    t0 = time.perf_counter()
    params = pretrain(init_policy(4, 2, cfg.policy_hidden, cfg.input_box, seed=cfg.seed),
                      cfg.raibert, cfg.hopper, cfg.train.z_lower, cfg.train.z_upper,
                      steps=cfg.pretrain_steps, rate=cfg.pretrain_rate, seed=cfg.seed,
                      target_mse=cfg.pretrain_target)
    print(f"pretrain {time.perf_counter() - t0:.1f}s", flush=True)
    save_weights(params, out / "pretrained.txt")

    heldout = sample_batch(cfg.train.z_lower, cfg.train.z_upper, 256,
                           np.random.default_rng(1234))
    policy = NetPolicy(params)
    t0 = time.perf_counter()
    policy, records, trace = run_default_curriculum(policy, problem, heldout,
                                                    jobs=cfg.train.jobs)
    save_weights(policy.params, out / "final.txt")
    write_train_log(out / "train_curriculum.csv", records)
    for steps, mean in trace:
        print(f"step {steps:4d}: held-out loss {mean:.5e} "
              f"(ratio {mean / trace[0][1]:.4f})", flush=True)
    print(f"curriculum {time.perf_counter() - t0:.1f}s; weights in {out}/final.txt",
          flush=True)


if __name__ == "__main__":
    main()
