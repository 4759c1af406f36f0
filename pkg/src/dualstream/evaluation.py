"""Episode metrics, deterministic evaluation and plots.

Metric definitions (also written into every report header):

* ``episode_reward``: sum of step rewards.
* ``distance``: forward progress along the road, world units.
* ``crash_intensity``: sum over steps of 100 x overlap depth x relative speed.
* ``avg_steer_pct``: mean of |steer| over steps, times 100.
* ``avg_brake_pct``: percentage of steps with accel < 0.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import load_archive, load_module
from .config import RunConfig
from .model import DualStreamModel, frames_to_tensor
from .sac import SACAgent
from .worldsim import Action, DrivingWorld, Observation, StepInfo

REPORT_SCHEMA_VERSION = 1
METRICS = ("episode_reward", "distance", "crash_intensity", "avg_steer_pct", "avg_brake_pct")
EPISODE_COLUMNS = ("seed", "episode", "env_seed", "steps") + METRICS
METRIC_DEFINITIONS = {
    "episode_reward": "sum of step rewards",
    "distance": "forward progress along the road (world units)",
    "crash_intensity": "sum over steps of 100 * overlap depth * relative speed",
    "avg_steer_pct": "mean |steer| over steps * 100",
    "avg_brake_pct": "percentage of steps with accel < 0",
}

Policy = Callable[[Observation], Action]


@dataclass
class EpisodeMetrics:
    episode_reward: float
    distance: float
    crash_intensity: float
    avg_steer_pct: float
    avg_brake_pct: float
    steps: int = 0

    @classmethod
    def from_infos(cls, infos: Sequence[StepInfo]) -> "EpisodeMetrics":
        if not infos:
            return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0)
        reward = distance = crash = 0.0
        for info in infos:
            reward += info.reward
            distance += info.distance_delta
            crash += info.crash_intensity
        steer = 100.0 * float(np.mean([i.steer_used for i in infos]))
        brake = 100.0 * float(np.mean([float(i.brake_used) for i in infos]))
        return cls(reward, distance, crash, steer, brake, len(infos))


def eval_env_seed(seed: int, episode: int) -> int:
    """Layout seed for evaluation episodes, disjoint from training layouts."""
    return 1_000_000_000 + 1000 * seed + episode


def rollout(env: DrivingWorld, policy: Policy, env_seed: int) -> tuple[EpisodeMetrics, list[StepInfo]]:
    obs = env.reset(env_seed)
    infos = []
    done = False
    while not done:
        obs, _, done, info = env.step(policy(obs))
        infos.append(info)
    return EpisodeMetrics.from_infos(infos), infos


def always_brake(obs: Observation) -> Action:
    return Action(0.0, -1.0)


def model_policy(model: DualStreamModel, agent: SACAgent) -> Policy:
    """Deterministic policy: squashed mean action, attention keyed by F_s."""

    def act(obs: Observation) -> Action:
        with torch.no_grad():
            x = frames_to_tensor(obs.frames[None])
            f = model(x, training=False).f
            return Action.from_array(agent.select_action(f, deterministic=True).action[0].numpy())

    return act


@dataclass
class Report:
    scenario: str
    rows: list[dict] = field(default_factory=list)

    def add(self, seed: int, episode: int, env_seed: int, m: EpisodeMetrics) -> None:
        self.rows.append({"seed": seed, "episode": episode, "env_seed": env_seed, "steps": m.steps,
                          **{k: getattr(m, k) for k in METRICS}})

    @property
    def aggregate(self) -> dict[str, tuple[float, float]]:
        return aggregate_rows(self.rows)

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}_episodes.csv"
        with open(csv_path, "w", newline="") as fh:
            fh.write(f"# report-schema: {REPORT_SCHEMA_VERSION}\n")
            w = csv.DictWriter(fh, fieldnames=EPISODE_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        txt_path = out_dir / f"{stem}.txt"
        txt_path.write_text(self.text())
        return csv_path, txt_path

    def text(self) -> str:
        lines = [f"# report-schema: {REPORT_SCHEMA_VERSION}", f"scenario: {self.scenario}",
                 f"episodes: {len(self.rows)}", "definitions:"]
        lines += [f"  {k}: {v}" for k, v in METRIC_DEFINITIONS.items()]
        lines.append("metric,mean,std")
        for k, (mu, sd) in self.aggregate.items():
            lines.append(f"{k},{mu!r},{sd!r}")
        return "\n".join(lines) + "\n"


def aggregate_rows(rows: Sequence[dict]) -> dict[str, tuple[float, float]]:
    """Mean and population std of every metric over episode rows."""
    out = {}
    for k in METRICS:
        vals = np.array([float(r[k]) for r in rows], dtype=np.float64)
        out[k] = (float(vals.mean()), float(vals.std())) if len(vals) else (float("nan"), float("nan"))
    return out


def read_episode_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# report-schema:"):
            raise ValueError(f"{path} lacks a report-schema line")
        version = int(first.split(":", 1)[1])
        if version != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {version}")
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != EPISODE_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        return [{k: (float(v) if k in METRICS else int(v)) for k, v in r.items()} for r in reader]


def evaluate_policy(policy: Policy, config: RunConfig, episodes: int, seeds: Sequence[int],
                    scenario: str | None = None) -> Report:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env_cfg = config.env if scenario is None else RunConfig.from_dict(
        {**config.to_dict(), "env": {**asdict(config.env), "scenario": scenario}}).env
    env = DrivingWorld(env_cfg)
    report = Report(env_cfg.scenario)
    for s in seeds:
        for e in range(episodes):
            env_seed = eval_env_seed(s, e)
            metrics, _ = rollout(env, policy, env_seed)
            report.add(s, e, env_seed, metrics)
    return report


def load_policy(checkpoint: str | Path) -> tuple[DualStreamModel, SACAgent, RunConfig]:
    arrays, header = load_archive(checkpoint)
    if "config" not in header:
        raise ValueError(f"{checkpoint} carries no run config")
    config = RunConfig.from_dict(header["config"])
    model = DualStreamModel(config.env.image_size, config.model)
    agent = SACAgent(model.feature_dim, 2, config.sac.actor_hidden, config.sac.critic_hidden,
                     config.sac.init_alpha, config.sac.alpha_mode)
    load_module(model, arrays, "model")
    load_module(agent, arrays, "agent")
    model.eval()
    agent.eval()
    return model, agent, config


def evaluate(checkpoint: str | Path, scenario: str | None = None, episodes: int = 10,
             seeds: Sequence[int] = (0,)) -> Report:
    """Deterministic-policy rollouts of a saved agent."""
    model, agent, config = load_policy(checkpoint)
    return evaluate_policy(model_policy(model, agent), config, episodes, seeds, scenario)


# --------------------------------------------------------------------------
# plots

def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        parsed = {}
        for k, v in r.items():
            try:
                parsed[k] = float(v)
            except (TypeError, ValueError):
                parsed[k] = v
        out.append(parsed)
    return out


def draw_reward(ax, evals: Sequence[list[dict]], total_frames: int | None = None) -> None:
    """Mean reward curve over runs; a min/max band once there are two or more."""
    curves = [e for e in evals if e]
    if not curves:
        return
    n = min(len(c) for c in curves)
    xs = np.array([row["frames"] for row in curves[0][:n]])
    ys = np.array([[c[i]["episode_reward"] for i in range(n)] for c in curves])
    ax.plot(xs, ys.mean(0), label=f"mean of {len(curves)}")
    if len(curves) > 1:
        ax.fill_between(xs, ys.min(0), ys.max(0), alpha=0.25, label="min/max")
    ax.set_xlim(0, total_frames if total_frames else max(float(xs.max()), 1.0))


def _logged_total_frames(dirs: Sequence[Path]) -> int | None:
    """``train.total_frames`` from the final policy checkpoint of the first log that has one."""
    for d in dirs:
        path = d / "policy_final.npz"
        if path.exists():
            _, header = load_archive(path)
            return int(header["config"]["train"]["total_frames"])
    return None


def plot(logs: Sequence[str | Path], out_dir: str | Path, total_frames: int | None = None) -> list[Path]:
    """Reward-vs-frames curves (mean with min/max band across logs),
    loss-component curves and the delta trace.

    Each entry of ``logs`` is a training-log directory (holding
    ``losses.csv`` / ``eval.csv``) from one seed.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not logs:
        raise ValueError("plot needs at least one log")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dirs = [Path(p) for p in logs]
    evals = [read_log(d / "eval.csv") for d in dirs if (d / "eval.csv").exists()]
    losses = [read_log(d / "losses.csv") for d in dirs if (d / "losses.csv").exists()]
    written = []

    if total_frames is None:
        total_frames = _logged_total_frames(dirs)
    fig, ax = plt.subplots(figsize=(6, 4))
    draw_reward(ax, evals, total_frames)
    ax.set_xlabel("frames")
    ax.set_ylabel("episode reward")
    ax.legend(loc="best")
    path = out_dir / "reward.png"
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    if losses and losses[0]:
        fig, ax = plt.subplots(figsize=(6, 4))
        rows = losses[0]
        xs = [r["frames"] for r in rows]
        for key in ("L_trans", "L_SG", "L_R", "L_pi", "L_Q", "total"):
            ax.plot(xs, [r[key] for r in rows], label=key, lw=0.8)
        ax.set_xlabel("frames")
        ax.set_ylabel("loss")
        ax.legend(loc="best")
        path = out_dir / "losses.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(xs, [r["delta"] for r in rows])
        ax.set_xlabel("frames")
        ax.set_ylabel("delta")
        path = out_dir / "delta.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def dump_json(path: str | Path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, default=float))
