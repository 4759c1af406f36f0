"""Synthetic top-down driving world.

The ego car drives up a straight road (``+y``) populated with pedestrians,
vehicles and static obstacles.  Each step renders an ego-centred RGB frame
and the last three frames form the observation.  Because the world is flat,
ground-truth per-object masks can be rasterised exactly from the scene, and
those masks stand in for a segmentation model's confidence maps.

Geometry (world units): the road spans ``x in [0, ROAD_WIDTH]``; the camera
sees ``VIEW_SIZE`` units across, ``VIEW_BEHIND`` units behind the ego and the
rest ahead of it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import EnvConfig

KINDS = ("pedestrian", "vehicle", "static")

ROAD_WIDTH = 16.0
ROAD_LENGTH = 1000.0
VIEW_SIZE = 24.0
VIEW_BEHIND = 4.0
VIEW_LEFT = -4.0
LANE_DASH = 4.0

EGO_RADIUS = 1.0
EGO_MAX_SPEED = 1.0
ACCEL_GAIN = 0.1
BRAKE_GAIN = 0.2
STEER_GAIN = 0.15
MAX_HEADING = math.pi / 3
CRASH_SCALE = 100.0

RADIUS = {"pedestrian": 1.0, "vehicle": 1.4, "static": 1.2}
CONFIDENCE_MARGIN = 8.0

PALETTE = {
    "grass": (40, 110, 40),
    "road": (90, 90, 90),
    "lane": (210, 210, 210),
    "ego": (30, 80, 230),
    "pedestrian": (230, 50, 50),
    "vehicle": (235, 205, 30),
    "static": (140, 90, 40),
}

Frames = np.ndarray


class EpisodeFinishedError(RuntimeError):
    """Raised when ``step`` is called after the episode has ended."""


@dataclass(frozen=True)
class Action:
    steer: float = 0.0
    accel: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steer", float(np.clip(self.steer, -1.0, 1.0)))
        object.__setattr__(self, "accel", float(np.clip(self.accel, -1.0, 1.0)))

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Action":
        return cls(float(a[0]), float(a[1]))

    def to_array(self) -> np.ndarray:
        return np.array([self.steer, self.accel], dtype=np.float32)


@dataclass(frozen=True)
class Obstacle:
    id: int
    kind: str
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0

    @property
    def radius(self) -> float:
        return RADIUS[self.kind]


@dataclass(frozen=True)
class Scene:
    """Everything needed to render one frame; also what the ground-truth
    oracle backend reads.  Policies never see it."""

    ego_x: float
    ego_y: float
    heading: float
    speed: float
    obstacles: tuple[Obstacle, ...]


@dataclass
class WorldState:
    ego_x: float
    ego_y: float
    heading: float
    speed: float
    obstacles: list[Obstacle]
    step_index: int = 0
    crash_total: float = 0.0
    done: bool = False
    terminated: bool = False  # ended by collision, as opposed to the step limit

    def scene(self) -> Scene:
        return Scene(self.ego_x, self.ego_y, self.heading, self.speed, tuple(self.obstacles))


@dataclass(frozen=True)
class Observation:
    frames: np.ndarray  # (3, H, W, 3) float32 in [0, 1], oldest first
    step_index: int
    scene: Scene = field(repr=False, compare=False)

    @property
    def latest(self) -> np.ndarray:
        return self.frames[-1]


@dataclass(frozen=True)
class StepInfo:
    step_index: int
    distance_delta: float
    crash_intensity: float
    steer_used: float
    brake_used: bool
    reward: float

    CSV_FIELDS = ("step_index", "distance_delta", "crash_intensity", "steer_used", "brake_used", "reward")

    def to_row(self) -> dict:
        row = asdict(self)
        row["brake_used"] = int(self.brake_used)
        return row


def step_reward(cfg: EnvConfig, distance_delta: float, crash: float, steer_used: float) -> float:
    """Reward of one step; the same expression is used to recompute episode
    rewards from info records."""
    return cfg.k_progress * distance_delta - cfg.k_crash * crash - cfg.k_steer * steer_used


def write_info_csv(path: str | Path, infos: Iterable[StepInfo]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=StepInfo.CSV_FIELDS)
        writer.writeheader()
        for info in infos:
            writer.writerow(info.to_row())


def read_info_csv(path: str | Path) -> list[StepInfo]:
    with open(path, newline="") as fh:
        return [
            StepInfo(
                step_index=int(r["step_index"]),
                distance_delta=float(r["distance_delta"]),
                crash_intensity=float(r["crash_intensity"]),
                steer_used=float(r["steer_used"]),
                brake_used=bool(int(r["brake_used"])),
                reward=float(r["reward"]),
            )
            for r in csv.DictReader(fh)
        ]


# --------------------------------------------------------------------------
# scenario layouts

# obstacles per 100 world units of road
DENSITY = {
    "JW": (("pedestrian", 5.5), ("static", 2.5)),
    "HB": (("vehicle", 3.0), ("pedestrian", 2.0)),
    "HW": (("vehicle", 7.0), ("static", 1.0)),
}


def sample_obstacles(scenario: str, rng: np.random.Generator, length: float = 200.0) -> list[Obstacle]:
    """Obstacle layout for a scenario preset, spread over ``[15, 15 + length]``.

    JW: crossing pedestrians plus static debris.  HB: slow same-direction
    riders with a few pedestrians.  HW: dense same-direction traffic.
    """
    if scenario not in DENSITY:
        raise ValueError(f"unknown scenario {scenario!r}")
    lanes = np.array([ROAD_WIDTH / 6, ROAD_WIDTH / 2, 5 * ROAD_WIDTH / 6])
    out = []
    for kind, per100 in DENSITY[scenario]:
        for _ in range(max(1, int(round(per100 * length / 100.0)))):
            y = float(rng.uniform(15.0, 15.0 + length))
            if kind == "pedestrian":
                x = float(rng.uniform(1.0, ROAD_WIDTH - 1.0))
                vx = float(rng.uniform(0.1, 0.25) * rng.choice([-1.0, 1.0]))
                vy = 0.0
            elif kind == "vehicle":
                x = float(rng.choice(lanes))
                vx = 0.0
                vy = float(rng.uniform(0.15, 0.3) if scenario == "HB" else rng.uniform(0.3, 0.6))
            else:
                x = float(rng.uniform(1.5, ROAD_WIDTH - 1.5))
                vx = vy = 0.0
            out.append(Obstacle(len(out), kind, x, y, vx, vy))
    return out


# --------------------------------------------------------------------------
# rendering

def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """World offsets of pixel centres: (dx from road origin, dy from ego)."""
    scale = VIEW_SIZE / size
    centres = (np.arange(size) + 0.5) * scale
    xs = VIEW_LEFT + centres
    dys = (VIEW_SIZE - VIEW_BEHIND) - centres  # row 0 is furthest ahead
    return np.meshgrid(xs, dys, indexing="xy")


_GRIDS: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    if size not in _GRIDS:
        _GRIDS[size] = _pixel_grid(size)
    return _GRIDS[size]


def object_coverage(scene: Scene, size: int, kind: str | None = None) -> np.ndarray:
    """Boolean (size, size) map of pixels covered by obstacles (of ``kind``)."""
    gx, gdy = pixel_grid(size)
    cover = np.zeros((size, size), dtype=bool)
    for ob in scene.obstacles:
        if kind is not None and ob.kind != kind:
            continue
        r = ob.radius
        dy = ob.y - scene.ego_y
        if dy < -VIEW_BEHIND - r or dy > VIEW_SIZE - VIEW_BEHIND + r:
            continue
        cover |= (gx - ob.x) ** 2 + (gdy - dy) ** 2 <= r * r
    return cover


def render(scene: Scene, size: int) -> np.ndarray:
    """Render one frame as uint8 (size, size, 3)."""
    gx, gdy = pixel_grid(size)
    img = np.empty((size, size, 3), dtype=np.uint8)
    offroad = (gx < 0) | (gx > ROAD_WIDTH)
    img[...] = PALETTE["road"]
    img[offroad] = PALETTE["grass"]

    lane_w = VIEW_SIZE / size
    wy = gdy + scene.ego_y
    dashes = np.floor(wy / LANE_DASH).astype(np.int64) % 2 == 0
    for lx in (ROAD_WIDTH / 3, 2 * ROAD_WIDTH / 3):
        img[(np.abs(gx - lx) <= 0.6 * lane_w + 0.1) & dashes] = PALETTE["lane"]

    ego = (gx - scene.ego_x) ** 2 + gdy**2 <= EGO_RADIUS**2
    img[ego] = PALETTE["ego"]
    for ob in scene.obstacles:
        r = ob.radius
        dy = ob.y - scene.ego_y
        if dy < -VIEW_BEHIND - r or dy > VIEW_SIZE - VIEW_BEHIND + r:
            continue
        img[(gx - ob.x) ** 2 + (gdy - dy) ** 2 <= r * r] = PALETTE[ob.kind]
    return img


def confidence_logits(scene: Scene, kind: str, size: int) -> np.ndarray:
    """Ground-truth confidence logits for one object kind: +margin on covered
    pixels, -margin elsewhere."""
    if kind not in KINDS:
        raise ValueError(f"unknown object kind {kind!r}; expected one of {KINDS}")
    cover = object_coverage(scene, size, kind)
    return np.where(cover, CONFIDENCE_MARGIN, -CONFIDENCE_MARGIN).astype(np.float32)


def to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 255.0


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(frames) * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------
# the environment

class DrivingWorld:
    """Single-episode-at-a-time driving POMDP.

    Not thread-safe; run one instance per worker.
    """

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.config.validate()
        self.size = self.config.image_size
        self._state: WorldState | None = None
        self._frames: list[np.ndarray] = []

    @property
    def state(self) -> WorldState:
        if self._state is None:
            raise RuntimeError("call reset() first")
        return self._state

    def reset(self, seed: int, obstacles: Sequence[Obstacle] | None = None,
              ego_x: float = ROAD_WIDTH / 2, ego_speed: float = 0.0) -> Observation:
        """Start an episode.  ``obstacles`` overrides the seeded layout (used
        for scripted scenes)."""
        if seed < 0:
            raise ValueError("seed must be >= 0")
        rng = np.random.default_rng(seed)
        if obstacles is None:
            reach = self.config.max_steps * self.config.action_repeat * EGO_MAX_SPEED
            obstacles = sample_obstacles(self.config.scenario, rng, min(reach, ROAD_LENGTH - 15.0))
        self._state = WorldState(
            ego_x=float(ego_x), ego_y=2.0, heading=0.0, speed=float(ego_speed),
            obstacles=list(obstacles),
        )
        first = to_float(render(self._state.scene(), self.size))
        self._frames = [first, first, first]
        return self._observation()

    def _observation(self) -> Observation:
        return Observation(np.stack(self._frames), self._state.step_index, self._state.scene())

    def _tick(self, steer: float, accel: float) -> tuple[float, float]:
        s = self._state
        gain = ACCEL_GAIN if accel >= 0 else BRAKE_GAIN
        s.speed = float(np.clip(s.speed + gain * accel, 0.0, EGO_MAX_SPEED))
        s.heading = float(np.clip(s.heading + STEER_GAIN * steer, -MAX_HEADING, MAX_HEADING))
        vx = s.speed * math.sin(s.heading)
        vy = s.speed * math.cos(s.heading)
        old_y = s.ego_y
        s.ego_x = float(np.clip(s.ego_x + vx, EGO_RADIUS, ROAD_WIDTH - EGO_RADIUS))
        s.ego_y = float(min(s.ego_y + vy, ROAD_LENGTH))
        progress = s.ego_y - old_y

        moved = []
        for ob in s.obstacles:
            x, ovx = ob.x + ob.vx, ob.vx
            if x < ob.radius or x > ROAD_WIDTH - ob.radius:
                ovx = -ovx
                x = float(np.clip(x, ob.radius, ROAD_WIDTH - ob.radius))
            moved.append(replace(ob, x=x, y=ob.y + ob.vy, vx=ovx))
        s.obstacles = moved

        crash = 0.0
        for ob in s.obstacles:
            dist = math.hypot(s.ego_x - ob.x, s.ego_y - ob.y)
            overlap = EGO_RADIUS + ob.radius - dist
            if overlap > 0:
                rel = math.hypot(vx - ob.vx, vy - ob.vy)
                crash += CRASH_SCALE * overlap * rel
        if crash > 0:
            s.speed = 0.0
        return progress, crash

    def step(self, action: Action | Sequence[float]) -> tuple[Observation, float, bool, StepInfo]:
        if self._state is None:
            raise RuntimeError("call reset() first")
        if self._state.done:
            raise EpisodeFinishedError("episode is finished; call reset()")
        if not isinstance(action, Action):
            action = Action.from_array(action)
        s = self._state
        progress = crash = 0.0
        for _ in range(self.config.action_repeat):
            p, c = self._tick(action.steer, action.accel)
            progress += p
            crash += c
        s.step_index += 1
        s.crash_total += crash
        steer_used = abs(action.steer)
        reward = step_reward(self.config, progress, crash, steer_used)
        s.terminated = s.crash_total >= self.config.crash_terminal
        s.done = s.terminated or s.step_index >= self.config.max_steps
        self._frames = self._frames[1:] + [to_float(render(s.scene(), self.size))]
        info = StepInfo(s.step_index, progress, crash, steer_used, action.accel < 0, reward)
        return self._observation(), reward, s.done, info

    def ground_truth_confidence(self, kind: str) -> np.ndarray:
        """Confidence logits for ``kind`` on the latest frame."""
        return confidence_logits(self.state.scene(), kind, self.size)

    # state capture for checkpoints -----------------------------------------
    def get_state(self) -> dict:
        s = self.state
        return {
            "ego": [s.ego_x, s.ego_y, s.heading, s.speed],
            "step_index": s.step_index,
            "crash_total": s.crash_total,
            "done": s.done,
            "terminated": s.terminated,
            "obstacles": [asdict(o) for o in s.obstacles],
            "frames": to_uint8(np.stack(self._frames)),
        }

    def set_state(self, data: dict) -> None:
        ex, ey, h, v = data["ego"]
        self._state = WorldState(
            ego_x=ex, ego_y=ey, heading=h, speed=v,
            obstacles=[Obstacle(**o) for o in data["obstacles"]],
            step_index=int(data["step_index"]), crash_total=float(data["crash_total"]),
            done=bool(data["done"]), terminated=bool(data["terminated"]),
        )
        self._frames = [to_float(f) for f in np.asarray(data["frames"])]
