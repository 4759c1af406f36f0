"""Run configuration.

A :class:`RunConfig` is a tree of small dataclasses, one per section of the
plain-text config file::

    [env]
    scenario = JW
    image_size = 64

    [train]
    total_frames = 110000

Unknown sections or keys are rejected, every field is validated when the
config is built, and ``--set section.key=value`` style overrides go through
the same parser.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

SCENARIOS = ("JW", "HB", "HW")
ABLATIONS = ("M1", "M2", "M3", "M4", "full")


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    scenario: str = "JW"
    image_size: int = 64
    max_steps: int = 200
    action_repeat: int = 1
    k_progress: float = 1.0
    k_crash: float = 0.01
    k_steer: float = 0.05
    crash_terminal: float = 50.0

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"env.scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.image_size < 16 or self.image_size % 8:
            raise ConfigError("env.image_size must be a multiple of 8 and >= 16")
        if self.max_steps < 1 or self.action_repeat < 1:
            raise ConfigError("env.max_steps and env.action_repeat must be >= 1")
        if min(self.k_progress, self.k_crash, self.k_steer) < 0:
            raise ConfigError("reward constants must be nonnegative")
        if self.crash_terminal <= 0:
            raise ConfigError("env.crash_terminal must be positive")


@dataclass
class ModelConfig:
    channels: int = 32
    feature_dim: int = 64
    reduced_channels: int = 16
    hidden_dim: int = 128
    use_motion: bool = True
    use_interaction: bool = True
    # attention keyed by F_s instead of the knowledge-aware map during training too
    interaction_train_on_semantic: bool = False
    mask_grad: bool = False
    hard_mask: bool = False

    def validate(self) -> None:
        for name in ("channels", "feature_dim", "reduced_channels", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.use_interaction and not self.use_motion:
            raise ConfigError("model.use_interaction requires model.use_motion")


@dataclass
class LossConfig:
    w_trans: float = 1.0
    w_sg: float = 1.0
    w_reward: float = 1.0
    w_pi: float = 1.0
    w_q: float = 1.0
    reward_norm: str = "l1"

    def validate(self) -> None:
        for f in fields(self):
            if f.name.startswith("w_") and getattr(self, f.name) < 0:
                raise ConfigError(f"loss.{f.name} must be nonnegative")
        if self.reward_norm not in ("l1", "l2"):
            raise ConfigError("loss.reward_norm must be 'l1' or 'l2'")


@dataclass
class SACConfig:
    gamma: float = 0.99
    tau: float = 0.01
    alpha_mode: str = "auto"
    init_alpha: float = 0.1
    lr: float = 3e-4
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    batch_size: int = 32
    actor_hidden: int = 256
    critic_hidden: int = 256

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("sac.gamma must lie in [0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("sac.tau must lie in [0, 1]")
        if self.alpha_mode not in ("auto", "fixed"):
            raise ConfigError("sac.alpha_mode must be 'auto' or 'fixed'")
        if self.init_alpha < 0:
            raise ConfigError("sac.init_alpha must be nonnegative")
        if min(self.lr, self.actor_lr, self.critic_lr, self.alpha_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("sac.batch_size must be >= 1")


@dataclass
class ReplayConfig:
    capacity: int = 100_000
    selective: bool = True
    t_decay: int = 10_000
    cone_length: float = 12.0
    cone_half_angle_deg: float = 20.0

    def validate(self) -> None:
        if self.capacity < 1:
            raise ConfigError("replay.capacity must be >= 1")
        if self.t_decay < 1:
            raise ConfigError("replay.t_decay must be >= 1")


@dataclass
class TrainConfig:
    total_frames: int = 110_000
    prefill_frames: int = 1000
    eval_interval: int = 5000
    eval_episodes: int = 10
    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    ablation: str = "full"
    oracle: str = "ground_truth"
    oracle_url: str = ""
    oracle_timeout: float = 10.0
    prompt: str = (
        "List every traffic participant or obstacle on the road in this "
        "image that the driver must pay attention to, one short phrase each."
    )

    def validate(self) -> None:
        if self.total_frames < 0 or self.prefill_frames < 0:
            raise ConfigError("train.total_frames and train.prefill_frames must be >= 0")
        if self.eval_interval < 1 or self.eval_episodes < 1:
            raise ConfigError("train.eval_interval and train.eval_episodes must be >= 1")
        if self.seed < 0 or any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"train.ablation must be one of {ABLATIONS}")
        if self.oracle not in ("ground_truth", "external"):
            raise ConfigError("train.oracle must be 'ground_truth' or 'external'")
        if self.oracle == "external" and not self.oracle_url:
            raise ConfigError("train.oracle = external needs train.oracle_url")


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sac: SACConfig = field(default_factory=SACConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for section in self.sections():
            getattr(self, section).validate()

    @staticmethod
    def sections() -> tuple[str, ...]:
        return tuple(f.name for f in fields(RunConfig))

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return dataclasses.asdict(self)

    def replace(self, **sections: Mapping[str, Any]) -> "RunConfig":
        """Return a copy with per-section field overrides, e.g.
        ``cfg.replace(train={"seed": 3})``."""
        data = self.to_dict()
        for section, values in sections.items():
            if section not in data:
                raise ConfigError(f"unknown config section {section!r}")
            for key, value in values.items():
                if key not in data[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                data[section][key] = value
        return RunConfig.from_dict(data)

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, Any]]) -> "RunConfig":
        kwargs = {}
        for f in fields(cls):
            section_cls = f.default_factory
            values = dict(data.get(f.name, {}))
            known = {sf.name for sf in fields(section_cls)}
            unknown = set(values) - known
            if unknown:
                raise ConfigError(f"unknown config key(s) in [{f.name}]: {sorted(unknown)}")
            if "seeds" in values:
                values["seeds"] = tuple(values["seeds"])
            kwargs[f.name] = section_cls(**values)
        unknown_sections = set(data) - {f.name for f in fields(cls)}
        if unknown_sections:
            raise ConfigError(f"unknown config section(s): {sorted(unknown_sections)}")
        return cls(**kwargs)

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                if isinstance(value, (tuple, list)):
                    value = ",".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def _coerce(section_cls, key: str, raw: str) -> Any:
    default = {f.name: f for f in fields(section_cls)}[key]
    proto = default.default if default.default is not dataclasses.MISSING else None
    raw = raw.strip()
    try:
        if isinstance(proto, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(proto, int):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_overrides(items: Iterable[str]) -> dict[str, dict[str, str]]:
    """Parse ``section.key=value`` strings into a nested raw mapping."""
    out: dict[str, dict[str, str]] = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        out.setdefault(section.strip(), {})[key.strip()] = value
    return out


def from_raw(raw: Mapping[str, Mapping[str, str]], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    data = base.to_dict()
    section_types = {f.name: f.default_factory for f in fields(RunConfig)}
    for section, values in raw.items():
        if section not in section_types:
            raise ConfigError(f"unknown config section {section!r}")
        known = {f.name for f in fields(section_types[section])}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}")
            data[section][key] = _coerce(section_types[section], key, value)
    return RunConfig.from_dict(data)


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    parser.read(path)
    raw = {s: dict(parser.items(s)) for s in parser.sections()}
    for section, values in parse_overrides(overrides).items():
        raw.setdefault(section, {}).update(values)
    return from_raw(raw)


def build_ablation(tag: str) -> dict[str, dict[str, Any]]:
    """Config deltas for an ablation tag.

    M1 is the semantic stream alone; M2 adds the motion stream with plain
    concatenation; M3 adds the similarity loss; M4 (== ``full``) adds the
    transition loss and the cross-stream interaction.
    """
    if tag not in ABLATIONS:
        raise ConfigError(f"unknown ablation tag {tag!r}; expected one of {ABLATIONS}")
    if tag == "M1":
        model = {"use_motion": False, "use_interaction": False}
        loss = {"w_trans": 0.0, "w_sg": 0.0}
    elif tag == "M2":
        model = {"use_motion": True, "use_interaction": False}
        loss = {"w_trans": 0.0, "w_sg": 0.0}
    elif tag == "M3":
        model = {"use_motion": True, "use_interaction": False}
        loss = {"w_trans": 0.0, "w_sg": 1.0}
    else:
        model = {"use_motion": True, "use_interaction": True}
        loss = {"w_trans": 1.0, "w_sg": 1.0}
    return {"model": model, "loss": loss, "train": {"ablation": tag}}


def apply_ablation(config: RunConfig, tag: str) -> RunConfig:
    """Switch streams and losses for ``tag``.  Terms the ablation removes get
    weight 0; terms it keeps retain their configured weight."""
    deltas = build_ablation(tag)
    loss = {k: (0.0 if v == 0.0 else getattr(config.loss, k)) for k, v in deltas["loss"].items()}
    return config.replace(model=deltas["model"], loss=loss, train=deltas["train"])
