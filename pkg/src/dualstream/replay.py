"""Selective replay buffer.

During warm-up an advisor judges each (observation, action) pair.  With
probability ``delta(step)`` the advisor's verdict decides admission; otherwise
the pair is admitted unconditionally.  ``delta`` decays linearly from 1 to
0.5, after which every transition is admitted.

Storage is a ring of fixed-size numpy arrays holding four-frame windows
``(o_{t-2}, o_{t-1}, o_t, o_{t+1})`` as uint8.
"""
from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass

import numpy as np

from .oracle import OracleError
from .worldsim import Action

log = logging.getLogger(__name__)


def delta(step: int, t_decay: int) -> float:
    """Probability that the advisor filter is consulted at ``step``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return max(0.5, 1.0 - 0.5 * step / t_decay)


@dataclass
class TransitionRecord:
    frames: np.ndarray  # (4, H, W, 3) uint8
    action: np.ndarray  # (2,)
    reward: float
    done: bool
    mask: np.ndarray | None = None  # (H, W) knowledge-mask aggregate of o_t
    step_index: int = 0
    episode: int = 0


class BufferUnderfullError(ValueError):
    pass


class SelectiveReplayBuffer:
    """Single-writer / single-reader ring buffer with advisor-gated admission."""

    def __init__(self, capacity: int, image_size: int, t_decay: int = 10_000, advisor=None,
                 seed: int = 0, store_masks: bool = True, selective: bool = True, min_sample_size: int = 1):
        self.capacity = capacity
        # sampling is with replacement, so one record suffices; a learner can
        # demand more (the trainer asks for a full batch)
        self.min_sample_size = max(1, min_sample_size)
        self.image_size = image_size
        self.t_decay = t_decay
        self.advisor = advisor
        self.selective = selective
        self.store_masks = store_masks

        s = image_size
        self.frames = np.zeros((capacity, 4, s, s, 3), dtype=np.uint8)
        self.actions = np.zeros((capacity, 2), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self.steps = np.zeros(capacity, dtype=np.int64)
        self.episodes = np.zeros(capacity, dtype=np.int64)
        self.masks = np.zeros((capacity, s, s), dtype=np.float32) if store_masks else None

        self.ptr = 0
        self.size = 0
        admit_seq, sample_seq = np.random.SeedSequence(seed).spawn(2)
        self._admit_rng = np.random.default_rng(admit_seq)
        self._sample_rng = np.random.default_rng(sample_seq)
        self._verdicts: dict[tuple, bool] = {}
        self._lock = threading.Lock()
        self.stats = {"pushed": 0, "admitted": 0, "rejected": 0, "advisor_calls": 0,
                      "advisor_failures": 0, "cache_hits": 0}

    def __len__(self) -> int:
        return self.size

    def delta(self, step: int) -> float:
        return delta(step, self.t_decay) if self.selective else 0.5

    def _verdict(self, obs, action: Action) -> bool:
        key = (hashlib.blake2b(np.ascontiguousarray(obs.latest).tobytes(), digest_size=16).hexdigest(),
               round(action.steer, 2), round(action.accel, 2))
        if key in self._verdicts:
            self.stats["cache_hits"] += 1
            return self._verdicts[key]
        self.stats["advisor_calls"] += 1
        ok = self.advisor.judge(obs, action).reasonable
        self._verdicts[key] = ok
        return ok

    def admit(self, record: TransitionRecord, step: int, obs=None) -> bool:
        """Admission decision alone.  One uniform draw is consumed per call
        whatever the regime, so the draw sequence does not depend on delta."""
        u = self._admit_rng.random()
        d = self.delta(step)
        if d <= 0.5 or u >= d or self.advisor is None:
            return True
        try:
            return self._verdict(obs, Action.from_array(record.action))
        except OracleError as exc:
            self.stats["advisor_failures"] += 1
            log.warning("advisor unavailable, admitting transition unconditionally: %s", exc)
            return True

    def push(self, record: TransitionRecord, step: int, obs=None) -> bool:
        if record.frames.shape != (4, self.image_size, self.image_size, 3):
            raise ValueError(f"record frames have shape {record.frames.shape}")
        admitted = self.admit(record, step, obs)
        with self._lock:
            self.stats["pushed"] += 1
            if not admitted:
                self.stats["rejected"] += 1
                return False
            i = self.ptr
            self.frames[i] = record.frames
            self.actions[i] = record.action
            self.rewards[i] = record.reward
            self.dones[i] = float(record.done)
            self.steps[i] = record.step_index
            self.episodes[i] = record.episode
            if self.masks is not None:
                if record.mask is None:
                    self.masks[i] = 0.0
                else:
                    if record.mask.shape != (self.image_size, self.image_size):
                        raise ValueError(f"mask shape {record.mask.shape} does not match frames")
                    self.masks[i] = record.mask
            self.ptr = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
            self.stats["admitted"] += 1
            return True

    def sample_indices(self, batch_size: int) -> np.ndarray:
        with self._lock:
            if self.size < self.min_sample_size:
                raise BufferUnderfullError(
                    f"buffer holds {self.size} records; sampling needs at least {self.min_sample_size}")
            return self._sample_rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int) -> dict[str, np.ndarray]:
        idx = self.sample_indices(batch_size)
        with self._lock:
            batch = {
                "frames": self.frames[idx],
                "action": self.actions[idx],
                "reward": self.rewards[idx],
                "done": self.dones[idx],
                "step_index": self.steps[idx],
                "episode": self.episodes[idx],
                "index": idx,
            }
            if self.masks is not None:
                batch["mask"] = self.masks[idx]
        return batch

    def record(self, i: int) -> TransitionRecord:
        return TransitionRecord(
            self.frames[i].copy(), self.actions[i].copy(), float(self.rewards[i]), bool(self.dones[i]),
            None if self.masks is None else self.masks[i].copy(), int(self.steps[i]), int(self.episodes[i]),
        )

    # checkpoint support ----------------------------------------------------
    def state_dict(self) -> dict:
        n = self.size
        arrays = {
            "frames": self.frames[:n], "actions": self.actions[:n], "rewards": self.rewards[:n],
            "dones": self.dones[:n], "steps": self.steps[:n], "episodes": self.episodes[:n],
        }
        if self.masks is not None:
            arrays["masks"] = self.masks[:n]
        meta = {
            "ptr": self.ptr, "size": self.size, "stats": dict(self.stats),
            "admit_rng": self._admit_rng.bit_generator.state,
            "sample_rng": self._sample_rng.bit_generator.state,
            "verdicts": [[list(k), v] for k, v in self._verdicts.items()],
        }
        return {"arrays": arrays, "meta": meta}

    def load_state_dict(self, state: dict) -> None:
        arrays, meta = state["arrays"], state["meta"]
        n = int(meta["size"])
        if n > self.capacity:
            raise ValueError(f"saved buffer holds {n} records, capacity is {self.capacity}")
        self.frames[:n] = arrays["frames"]
        self.actions[:n] = arrays["actions"]
        self.rewards[:n] = arrays["rewards"]
        self.dones[:n] = arrays["dones"]
        self.steps[:n] = arrays["steps"]
        self.episodes[:n] = arrays["episodes"]
        if self.masks is not None and "masks" in arrays:
            self.masks[:n] = arrays["masks"]
        self.ptr, self.size = int(meta["ptr"]), n
        self.stats = dict(meta["stats"])
        self._admit_rng.bit_generator.state = meta["admit_rng"]
        self._sample_rng.bit_generator.state = meta["sample_rng"]
        self._verdicts = {tuple(k): v for k, v in meta["verdicts"]}
