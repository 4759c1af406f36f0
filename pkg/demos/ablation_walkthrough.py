"""Ablation walk-through: train M1 (semantic stream only) through M4 (full
model) on shared seeds at toy scale, then print the seed-mean final rewards
and the M4 - M1 margin against its pooled standard error.

The acceptance-scale sweep uses configs/ablation_jw.ini and takes about an
hour; this demo shrinks everything so it runs in a few minutes.

    python demos/ablation_walkthrough.py [--out runs/ablation_demo]
"""
import argparse

import torch

from dualstream.ablation import ORDER, run_ablation, summarize
from dualstream.config import RunConfig

TOY = {
    "env": {"image_size": 24, "max_steps": 40, "action_repeat": 4},
    "model": {"channels": 8, "feature_dim": 16, "reduced_channels": 4},
    "replay": {"capacity": 5000, "t_decay": 1000},
    "train": {"total_frames": 1200, "prefill_frames": 200, "eval_interval": 600, "eval_episodes": 3},
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablation_demo")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    args = p.parse_args()
    torch.set_num_threads(1)

    results = run_ablation(RunConfig().replace(**TOY), args.out, tags=ORDER, seeds=args.seeds, progress=print)
    summary = summarize(results)
    print(summary.text(), end="")
    print("at this scale the margin is noise; see configs/ablation_jw.ini for the real sweep")


if __name__ == "__main__":
    main()
