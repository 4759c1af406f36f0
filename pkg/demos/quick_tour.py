"""Quick tour: drive the synthetic world, query the mask oracle, train a tiny
agent for a few hundred frames and evaluate the saved policy.

    python demos/quick_tour.py [--out runs/tour]
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from dualstream.config import RunConfig
from dualstream.evaluation import always_brake, evaluate, evaluate_policy
from dualstream.oracle import GroundTruthBackend, compute_mask
from dualstream.trainer import train
from dualstream.worldsim import Action, DrivingWorld

TINY = {
    "env": {"image_size": 32, "max_steps": 60, "action_repeat": 2},
    "model": {"channels": 8, "feature_dim": 16, "reduced_channels": 4},
    "train": {"total_frames": 400, "prefill_frames": 100, "eval_interval": 200, "eval_episodes": 2},
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/tour")
    args = p.parse_args()
    torch.set_num_threads(1)
    config = RunConfig().replace(**TINY)

    # the world: a stack of three ego-centred top-down frames per observation
    env = DrivingWorld(config.env)
    obs = env.reset(seed=0)
    print("observation frames:", obs.frames.shape)
    obs, reward, done, info = env.step(Action(steer=0.0, accel=1.0))
    print(f"one step at full throttle: reward {reward:.3f}, distance {info.distance_delta:.3f}")

    # the oracle: phrases present in the scene, then their summed mask
    mask = compute_mask(GroundTruthBackend(), obs, "what matters for driving?")
    print("phrases:", mask.phrases, "mask peak:", float(mask.aggregate.max()))

    # a baseline policy that never moves
    report = evaluate_policy(always_brake, config, episodes=2, seeds=[0])
    print("always-brake distance:", report.aggregate["distance"][0])

    # train the full model briefly, then evaluate the saved policy
    policy_path, log = train(config, Path(args.out))
    print("policy checkpoint:", policy_path)
    print("eval rewards during training:", [round(e["episode_reward"], 2) for e in log.evals])
    report = evaluate(policy_path, episodes=2, seeds=[0])
    for metric, (mean, std) in report.aggregate.items():
        print(f"  {metric}: {mean:.3f} +- {std:.3f}")
    print("mean reward is finite:", bool(np.isfinite(report.aggregate["episode_reward"][0])))


if __name__ == "__main__":
    main()
