"""
Run configuration: JSON file + environment overrides, canonical serialization
and the FNV-1a component hashes that tie checkpoints to the config that wrote them.
"""

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from svam.errors import ConfigError
from svam.tensor_autograd import fnv1a64

load_dotenv()

logger = logging.getLogger(__name__)

TASK_REACH = 0
TASK_PLACE = 1
TASK_PLACE_DISTRACTORS = 2


@dataclass
class WorldConfig:
    tasks: List[int] = field(default_factory=lambda: [TASK_REACH, TASK_PLACE, TASK_PLACE_DISTRACTORS])
    dataset_tasks: List[int] = field(default_factory=lambda: [TASK_PLACE])
    episode_length: int = 64
    frame_size: int = 32
    n_classes: int = 3
    object_radius: List[float] = field(default_factory=lambda: [0.06, 0.08])
    goal_radius: float = 0.1
    grasp_radius: float = 0.06
    max_delta: float = 0.1
    gripper_start: List[float] = field(default_factory=lambda: [0.5, 0.1])
    n_episodes: int = 500
    frame_stride: int = 2


@dataclass
class VDMConfig:
    frames: int = 4
    latent_channels: int = 8
    patch: int = 4
    tap_channels: List[int] = field(default_factory=lambda: [16, 16, 8])
    base_width: int = 16
    bottleneck_width: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    steps: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_steps: int = 1000
    feature_size: int = 8


@dataclass
class DecouplerSettings:
    blocks: int = 2
    hidden: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    geo_channels: int = 4
    sem_channels: int = 8
    mode: str = "self"
    pool: int = 512


@dataclass
class PolicyConfig:
    queries: int = 16
    width: int = 64
    heads: int = 4
    blocks: int = 2
    mlp_ratio: int = 2
    steps: int = 16
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_steps: int = 1000
    chunk: int = 8
    context_stride: int = 8


@dataclass
class TrainingConfig:
    seed: int = 0
    batch: int = 16
    lr: float = 1e-3
    checkpoint_every: int = 500
    vdm_steps: int = 5000
    decoupler_steps: int = 2000
    policy_steps: int = 5000
    target_batch: int = 64
    eval_episodes: int = 100
    eval_seeds: int = 3
    eval_tasks: List[int] = field(default_factory=lambda: [TASK_PLACE])
    max_rollout_steps: int = 64
    bench_trials: int = 50
    bench_warmup: int = 5


@dataclass
class GateConfig:
    vdm_loss: float = 0.5
    distill_drop: float = 0.8
    policy_loss: float = 0.3
    full_success: float = 0.5
    ablation_margin: float = 0.05
    sampler_ratio: float = 8.0
    overhead: float = 1.0
    random_success: float = 0.1


@dataclass
class PathsConfig:
    out_dir: str = "runs/smoke"
    dataset: str = "dataset.svds"
    teacher_cache: str = "teacher_cache"


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    vdm: VDMConfig = field(default_factory=VDMConfig)
    decouplers: DecouplerSettings = field(default_factory=DecouplerSettings)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    gates: GateConfig = field(default_factory=GateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    # -- derived quantities -------------------------------------------------

    @property
    def latent_size(self) -> int:
        return self.world.frame_size // self.vdm.patch

    @property
    def feature_channels(self) -> int:
        """C_sigma: sum of tap channels."""
        return int(sum(self.vdm.tap_channels))

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out_dir)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def canonical_json(self, sections: Optional[List[str]] = None) -> str:
        payload = self.to_dict()
        if sections is not None:
            payload = {name: payload[name] for name in sections}
        return json.dumps(_canonical(payload), sort_keys=True, separators=(",", ":"))

    def config_hash(self, sections: Optional[List[str]] = None) -> int:
        return fnv1a64(self.canonical_json(sections).encode("utf-8"))

    def stage_hash(self, stage: int) -> int:
        """Hash of the config sections a stage's checkpoint depends on."""
        return self.config_hash(STAGE_SECTIONS[stage])

    def validate(self):
        if self.world.frame_size % self.vdm.patch:
            raise ConfigError("frame_size must be a multiple of the codec patch")
        if self.latent_size % 2:
            raise ConfigError("latent size must be even for the 2x2 patch merge")
        if len(self.vdm.tap_channels) != 3:
            raise ConfigError("the denoiser exposes exactly three up-path taps")
        if self.decouplers.hidden % self.decouplers.heads:
            raise ConfigError("decoupler hidden width must be divisible by heads")
        if self.policy.width % self.policy.heads:
            raise ConfigError("policy width must be divisible by heads")
        if self.decouplers.mode not in ("self", "gt"):
            raise ConfigError(f"unknown distillation mode: {self.decouplers.mode}")
        if self.decouplers.pool < 1:
            raise ConfigError("decoupler sample pool must be positive")
        unknown = set(self.world.dataset_tasks) - set(self.world.tasks)
        if unknown:
            raise ConfigError(f"dataset tasks not configured: {sorted(unknown)}")
        if self.vdm.steps < 1 or self.policy.steps < 1:
            raise ConfigError("diffusion step counts must be positive")
        self._validate_encoders()

    def _validate_encoders(self):
        # world_sim and decouplers import this module
        from svam.decouplers import get_target_encoder
        from svam.world_sim import CLASS_COLORS, OBJECTS_PER_TASK

        if not self.world.tasks:
            raise ConfigError("world.tasks must name at least one task")
        unknown = set(self.world.tasks) - set(OBJECTS_PER_TASK)
        if unknown:
            raise ConfigError(f"unknown task ids: {sorted(unknown)}")
        if not 1 <= self.world.n_classes <= len(CLASS_COLORS):
            raise ConfigError(f"world.n_classes must be in 1..{len(CLASS_COLORS)}, got {self.world.n_classes}")
        needed = max(OBJECTS_PER_TASK[task] for task in self.world.tasks)
        if self.world.n_classes < needed:
            raise ConfigError(f"world.n_classes={self.world.n_classes} but a configured task places {needed} objects")
        for branch, channels in (("geo", self.decouplers.geo_channels), ("sem", self.decouplers.sem_channels)):
            expected = get_target_encoder(branch).channels
            if channels != expected:
                raise ConfigError(f"decouplers.{branch}_channels is {channels} but the {branch} target encoder "
                                  f"emits {expected}")


STAGE_SECTIONS = {
    1: ["world", "vdm"],
    2: ["world", "vdm", "decouplers"],
    3: ["world", "vdm", "decouplers", "policy"],
}


def _canonical(value):
    if isinstance(value, float):
        return format(value, ".12g")
    if isinstance(value, dict):
        return {k: _canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    return value


def _build(cls, payload: Dict[str, Any], where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {where} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in payload.items():
        default = getattr(cls(), name)
        if isinstance(default, bool) or not isinstance(default, (int, float)):
            kwargs[name] = value
        elif isinstance(default, int) and not isinstance(value, int):
            raise ConfigError(f"{where}.{name} must be an integer")
        elif isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.{name} must be a number")
        else:
            kwargs[name] = float(value) if isinstance(default, float) else value
    return cls(**kwargs)


def config_from_dict(payload: Dict[str, Any]) -> RunConfig:
    sections = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    unknown = set(payload) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    defaults = RunConfig()
    kwargs = {}
    for name in sections:
        cls = type(getattr(defaults, name))
        kwargs[name] = _build(cls, payload.get(name, {}), name)
    config = RunConfig(**kwargs)
    config.validate()
    return config


def load_config(path: Optional[str] = None, seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
    """
    Load a RunConfig.

    Precedence: explicit arguments (CLI flags) > SVAM_* environment variables
    (a .env file is honoured) > JSON file > dataclass defaults.

    Args:
        path: JSON config path; falls back to SVAM_CONFIG, then defaults
        seed: Run seed override
        out_dir: Output directory override

    Returns:
        Validated RunConfig
    """
    path = path or os.getenv("SVAM_CONFIG")
    payload: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {path}: {e}")
        if not isinstance(payload, dict):
            raise ConfigError("config root must be a JSON object")
    config = config_from_dict(payload)

    env_seed = os.getenv("SVAM_SEED")
    env_out = os.getenv("SVAM_OUT_DIR")
    if seed is None and env_seed:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"SVAM_SEED is not an integer: {env_seed}")
    if out_dir is None and env_out:
        out_dir = env_out
    if seed is not None:
        config.training.seed = int(seed)
    if out_dir is not None:
        config.paths.out_dir = str(out_dir)

    logger.info(f"Loaded config {path or '<defaults>'} (seed={config.training.seed}, out={config.paths.out_dir})")
    return config


def save_config(config: RunConfig, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
