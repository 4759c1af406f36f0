"""Training loop: collect -> push -> sample -> losses -> update -> target update.

Everything runs sequentially in one thread so a run is reproducible from its
config and seed.  ``Trainer.save_state`` / ``Trainer.load_state`` capture the
complete run (weights, optimiser moments, RNG streams, simulator, replay
buffer), so a resumed run continues exactly as an uninterrupted one would.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig, apply_ablation
from .evaluation import EpisodeMetrics, evaluate_policy, model_policy
from .losses import COMPONENTS, NonFiniteLossError, reward_loss, similarity_loss, total_loss, transition_loss
from .model import DualStreamModel, frames_to_tensor
from .oracle import OracleError, compute_mask, make_backend
from .replay import SelectiveReplayBuffer, TransitionRecord
from .sac import SACAgent, actor_loss, alpha_loss, critic_loss, target_update
from .worldsim import Action, DrivingWorld, StepInfo, to_uint8

log = logging.getLogger(__name__)

LOG_DIR_ENV = "DUALSTREAM_LOG_DIR"
LOSS_COLUMNS = ("step", "frames") + COMPONENTS + ("total", "sg_skipped", "alpha", "delta",
                                                   "admitted", "rejected", "advisor_failures")
EPISODE_COLUMNS = ("episode", "step", "frames", "episode_reward", "distance", "crash_intensity",
                   "avg_steer_pct", "avg_brake_pct", "steps")
EVAL_COLUMNS = ("step", "frames", "episode_reward", "episode_reward_std", "distance",
                "crash_intensity", "avg_steer_pct", "avg_brake_pct")


def default_log_dir() -> Path:
    return Path(os.environ.get(LOG_DIR_ENV, "runs"))


@dataclass
class TrainLog:
    """Append-only record of a run."""

    losses: list[dict] = field(default_factory=list)
    episodes: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    started: float = field(default_factory=time.time)

    def loss_trace(self) -> list[tuple]:
        return [tuple(r[c] for c in COMPONENTS + ("total",)) for r in self.losses]

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, cols, rows in (("losses", LOSS_COLUMNS, self.losses),
                                 ("episodes", EPISODE_COLUMNS, self.episodes),
                                 ("eval", EVAL_COLUMNS, self.evals)):
            with open(out_dir / f"{name}.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                for r in rows:
                    w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        (out_dir / "wallclock.txt").write_text(f"{time.time() - self.started:.3f}\n")


def _batch_tensors(batch: dict, dtype=torch.float32) -> dict[str, torch.Tensor]:
    out = {
        "frames": frames_to_tensor(batch["frames"], dtype),
        "action": torch.as_tensor(batch["action"], dtype=dtype),
        "reward": torch.as_tensor(batch["reward"], dtype=dtype),
        "done": torch.as_tensor(batch["done"], dtype=dtype),
    }
    if "mask" in batch:
        out["mask"] = torch.as_tensor(batch["mask"], dtype=dtype)
    return out


class Trainer:
    def __init__(self, config: RunConfig, log_dir: str | Path | None = None, backend=None):
        # the ablation tag is authoritative for the stream and loss switches
        self.config = apply_ablation(config, config.train.ablation)
        cfg = self.config
        self.log_dir = Path(log_dir) if log_dir is not None else None
        seed = cfg.train.seed

        torch.manual_seed(seed)
        self.model = DualStreamModel(cfg.env.image_size, cfg.model)
        self.agent = SACAgent(self.model.feature_dim, 2, cfg.sac.actor_hidden, cfg.sac.critic_hidden,
                              cfg.sac.init_alpha, cfg.sac.alpha_mode)
        self.generator = torch.Generator().manual_seed(seed + 1)
        self.rng = np.random.default_rng(seed + 2)

        self.backend = backend or make_backend(cfg.train.oracle, cfg.train.oracle_url, cfg.train.oracle_timeout,
                                               cfg.replay.cone_length, cfg.replay.cone_half_angle_deg)
        self.needs_mask = cfg.loss.w_sg > 0 or cfg.model.use_interaction
        self.buffer = SelectiveReplayBuffer(
            cfg.replay.capacity, cfg.env.image_size, cfg.replay.t_decay,
            advisor=self.backend if cfg.replay.selective else None, seed=seed + 3,
            store_masks=self.needs_mask, selective=cfg.replay.selective, min_sample_size=cfg.sac.batch_size)

        self.model_opt = torch.optim.Adam(self.model.parameters(), lr=cfg.sac.lr, foreach=True)
        self.critic_opt = torch.optim.Adam(self.agent.critic.parameters(), lr=cfg.sac.critic_lr, foreach=True)
        self.actor_opt = torch.optim.Adam(self.agent.actor.parameters(), lr=cfg.sac.actor_lr, foreach=True)
        self.alpha_opt = torch.optim.Adam([self.agent.log_alpha], lr=cfg.sac.alpha_lr)

        self.env = DrivingWorld(cfg.env)
        self.step = 0
        self.episode = 0
        self.mask_failures = 0
        self.log = TrainLog()
        self._episode_infos: list[StepInfo] = []
        self.obs = self.env.reset(self._train_env_seed(0))

    # ------------------------------------------------------------------
    @property
    def frames(self) -> int:
        return self.step * self.config.env.action_repeat

    @property
    def total_steps(self) -> int:
        return self.config.train.total_frames // self.config.env.action_repeat

    def _train_env_seed(self, episode: int) -> int:
        return self.config.train.seed * 1_000_000 + episode

    def _mask_for(self, obs) -> np.ndarray | None:
        if not self.needs_mask:
            return None
        try:
            km = compute_mask(self.backend, obs, self.config.train.prompt, self.config.model.hard_mask)
        except OracleError as exc:
            self.mask_failures += 1
            log.warning("mask oracle failed; storing an empty mask: %s", exc)
            return np.zeros(obs.frames.shape[1:3], dtype=np.float32)
        return km.aggregate.astype(np.float32)

    def act(self, obs, explore: bool = True) -> Action:
        if explore and self.frames < self.config.train.prefill_frames:
            return Action.from_array(self.rng.uniform(-1.0, 1.0, size=2))
        with torch.no_grad():
            f = self.model(frames_to_tensor(obs.frames[None]), training=False).f
            out = self.agent.select_action(f, deterministic=not explore, generator=self.generator)
        return Action.from_array(out.action[0].numpy())

    def collect(self) -> None:
        obs = self.obs
        action = self.act(obs)
        next_obs, reward, done, info = self.env.step(action)
        window = to_uint8(np.concatenate([obs.frames, next_obs.frames[-1:]], axis=0))
        # time-limit ends still bootstrap; only collisions are terminal
        record = TransitionRecord(window, action.to_array(), reward, self.env.state.terminated, self._mask_for(obs),
                                  obs.step_index, self.episode)
        self.buffer.push(record, self.step, obs)
        self._episode_infos.append(info)
        self.step += 1
        if done:
            m = EpisodeMetrics.from_infos(self._episode_infos)
            self.log.episodes.append({"episode": self.episode, "step": self.step, "frames": self.frames,
                                      "episode_reward": m.episode_reward, "distance": m.distance,
                                      "crash_intensity": m.crash_intensity, "avg_steer_pct": m.avg_steer_pct,
                                      "avg_brake_pct": m.avg_brake_pct, "steps": m.steps})
            self.episode += 1
            self._episode_infos = []
            self.obs = self.env.reset(self._train_env_seed(self.episode))
        else:
            self.obs = next_obs

    # ------------------------------------------------------------------
    def representation_losses(self, b: dict[str, torch.Tensor]):
        """Forward pass on a batch; returns (components, feats, sg_skipped)."""
        cfg = self.config
        frames = b["frames"]
        obs_t, obs_next = frames[:, :3], frames[:, 1:]
        feats = self.model(obs_t, b.get("mask"), training=True)
        with torch.no_grad():
            feats_next = self.model(obs_next, training=False)

        comps: dict[str, torch.Tensor] = {}
        comps["L_Q"] = critic_loss(self.agent.critic, self.agent.critic_target, self.agent.policy_fn(self.generator),
                                   feats.f, b["action"], b["reward"], feats_next.f, b["done"],
                                   cfg.sac.gamma, self.agent.alpha)
        skipped = 0
        if cfg.loss.w_sg > 0 and feats.H_hat is not None:
            comps["L_SG"], skipped = similarity_loss(feats.F_s_raw, feats.H_hat)
        if cfg.loss.w_trans > 0 and cfg.model.use_motion:
            comps["L_trans"] = transition_loss(self.model.predictor, feats.f_m, b["action"], feats_next.f_m)
        if cfg.loss.w_reward > 0:
            comps["L_R"] = reward_loss(self.model.reward_head, feats.f, b["action"], b["reward"],
                                       cfg.loss.reward_norm)
        return comps, feats, skipped

    def update(self) -> dict:
        cfg = self.config
        b = _batch_tensors(self.buffer.sample(cfg.sac.batch_size))
        comps, feats, skipped = self.representation_losses(b)
        objective, _ = total_loss(comps, cfg.loss, step=self.step)

        self.model_opt.zero_grad(set_to_none=True)
        self.critic_opt.zero_grad(set_to_none=True)
        objective.backward()
        self.model_opt.step()
        self.critic_opt.step()

        alpha = self.agent.alpha
        for p in self.agent.critic.parameters():
            p.requires_grad_(False)
        l_pi, out = actor_loss(self.agent.actor, self.agent.critic, feats.f, alpha, self.generator)
        for p in self.agent.critic.parameters():
            p.requires_grad_(True)
        if not math.isfinite(l_pi.item()):
            raise NonFiniteLossError("L_pi", l_pi.item(), self.step)
        self.actor_opt.zero_grad(set_to_none=True)
        (cfg.loss.w_pi * l_pi).backward()
        self.actor_opt.step()

        if self.agent.alpha_mode == "auto":
            self.alpha_opt.zero_grad(set_to_none=True)
            alpha_loss(self.agent.log_alpha, out.log_prob, self.agent.target_entropy).backward()
            self.alpha_opt.step()

        target_update(self.agent.critic, self.agent.critic_target, cfg.sac.tau)

        comps["L_pi"] = l_pi
        _, report = total_loss(comps, cfg.loss, step=self.step)
        row = {"step": self.step, "frames": self.frames}
        row.update({k: getattr(report, k) for k in COMPONENTS + ("total",)})
        row.update({"sg_skipped": skipped, "alpha": float(self.agent.alpha),
                    "delta": self.buffer.delta(self.step), "admitted": self.buffer.stats["admitted"],
                    "rejected": self.buffer.stats["rejected"],
                    "advisor_failures": self.buffer.stats["advisor_failures"]})
        self.log.losses.append(row)
        return row

    def ready(self) -> bool:
        return (self.frames >= self.config.train.prefill_frames
                and len(self.buffer) >= self.config.sac.batch_size)

    def evaluate(self, episodes: int | None = None, seeds=(0,)):
        self.model.eval()
        report = evaluate_policy(model_policy(self.model, self.agent), self.config,
                                 episodes or self.config.train.eval_episodes, seeds)
        self.model.train()
        return report

    def run_steps(self, n: int, evaluate: bool = True) -> None:
        interval = max(1, self.config.train.eval_interval // self.config.env.action_repeat)
        for _ in range(n):
            self.collect()
            if self.ready():
                self.update()
            if evaluate and self.step % interval == 0:
                self._periodic_eval()

    def _periodic_eval(self) -> None:
        report = self.evaluate(seeds=(self.config.train.seed,))
        agg = report.aggregate
        self.log.evals.append({"step": self.step, "frames": self.frames,
                               "episode_reward": agg["episode_reward"][0],
                               "episode_reward_std": agg["episode_reward"][1],
                               **{k: agg[k][0] for k in ("distance", "crash_intensity",
                                                         "avg_steer_pct", "avg_brake_pct")}})
        if self.log_dir is not None:
            self.save_policy(self.log_dir / f"policy_step{self.step}.npz")
            self.log.write(self.log_dir)

    def train(self, evaluate: bool = True) -> tuple[Path | None, TrainLog]:
        """Run to ``total_frames``; returns the final policy checkpoint path
        (``None`` without a log dir) and the log."""
        self.run_steps(max(0, self.total_steps - self.step), evaluate=evaluate)
        path = None
        if self.log_dir is not None:
            path = self.save_policy(self.log_dir / "policy_final.npz")
            self.log.write(self.log_dir)
        return path, self.log

    # ------------------------------------------------------------------
    def _meta(self, kind: str) -> dict:
        return {"kind": kind, "config": self.config.to_dict(), "step": self.step}

    def save_policy(self, path: str | Path) -> Path:
        arrays = {**ckpt.module_arrays(self.model, "model"), **ckpt.module_arrays(self.agent, "agent")}
        return ckpt.save_archive(path, arrays, self._meta("policy"))

    def save_state(self, path: str | Path) -> Path:
        arrays = {**ckpt.module_arrays(self.model, "model"), **ckpt.module_arrays(self.agent, "agent")}
        optim_meta = {}
        for name in ("model_opt", "critic_opt", "actor_opt", "alpha_opt"):
            a, m = ckpt.optimizer_arrays(getattr(self, name), f"optim.{name}")
            arrays.update(a)
            optim_meta[name] = m
        buf = self.buffer.state_dict()
        arrays.update({f"buffer.{k}": v for k, v in buf["arrays"].items()})
        env_state = self.env.get_state()
        arrays["env.frames"] = env_state.pop("frames")
        arrays["rng.torch_generator"] = self.generator.get_state().numpy()
        meta = self._meta("train_state")
        meta.update({
            "optim": optim_meta, "buffer": buf["meta"], "env": env_state, "episode": self.episode,
            "rng": self.rng.bit_generator.state, "mask_failures": self.mask_failures,
            "episode_infos": [i.to_row() for i in self._episode_infos],
            "log": {"losses": self.log.losses, "episodes": self.log.episodes, "evals": self.log.evals},
        })
        return ckpt.save_archive(path, arrays, json.loads(json.dumps(meta, default=_jsonable)))

    @classmethod
    def load_state(cls, path: str | Path, log_dir: str | Path | None = None, backend=None) -> "Trainer":
        arrays, meta = ckpt.load_archive(path)
        if meta.get("kind") != "train_state":
            raise ckpt.CheckpointError(f"{path} is a {meta.get('kind')!r} checkpoint, not a training state")
        trainer = cls(RunConfig.from_dict(meta["config"]), log_dir, backend)
        ckpt.load_module(trainer.model, arrays, "model")
        ckpt.load_module(trainer.agent, arrays, "agent")
        for name in ("model_opt", "critic_opt", "actor_opt", "alpha_opt"):
            ckpt.load_optimizer(getattr(trainer, name), arrays, meta["optim"][name], f"optim.{name}")
        trainer.buffer.load_state_dict({
            "arrays": {k[len("buffer."):]: v for k, v in arrays.items() if k.startswith("buffer.")},
            "meta": meta["buffer"]})
        env_state = dict(meta["env"])
        env_state["frames"] = arrays["env.frames"]
        trainer.env.set_state(env_state)
        trainer.obs = trainer.env._observation()
        trainer.generator.set_state(torch.from_numpy(arrays["rng.torch_generator"].copy()))
        trainer.rng.bit_generator.state = meta["rng"]
        trainer.step = int(meta["step"])
        trainer.episode = int(meta["episode"])
        trainer.mask_failures = int(meta["mask_failures"])
        trainer._episode_infos = [StepInfo(int(r["step_index"]), r["distance_delta"], r["crash_intensity"],
                                           r["steer_used"], bool(r["brake_used"]), r["reward"])
                                  for r in meta["episode_infos"]]
        trainer.log = TrainLog(**meta["log"])
        return trainer


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def train(config: RunConfig, log_dir: str | Path | None = None, backend=None) -> tuple[Path | None, TrainLog]:
    return Trainer(config, log_dir, backend).train()


def wiring_audit(trainer: Trainer, batch_size: int = 4) -> set[str]:
    """Names of model/critic parameters receiving a nonzero gradient from the
    representation objective on one batch (no parameters are changed)."""
    b = _batch_tensors(trainer.buffer.sample(batch_size))
    comps, _, _ = trainer.representation_losses(b)
    objective, _ = total_loss(comps, trainer.config.loss)
    named = [(f"model.{n}", p) for n, p in trainer.model.named_parameters()]
    named += [(f"critic.{n}", p) for n, p in trainer.agent.critic.named_parameters()]
    grads = torch.autograd.grad(objective, [p for _, p in named], allow_unused=True)
    return {n for (n, _), g in zip(named, grads) if g is not None and bool(torch.any(g != 0))}
