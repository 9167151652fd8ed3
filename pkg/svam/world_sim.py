#!/usr/bin/env python3
"""
World Simulator
Deterministic top-down 2D tabletop: reset/step/render, a scripted expert that
produces demonstrations, success judging, the dataset file, and the two
parameter-free encoders whose outputs serve as distillation targets
(signed-distance geometry and palette semantics).
"""

import dataclasses
import functools
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from svam.config import TASK_PLACE, TASK_PLACE_DISTRACTORS, TASK_REACH, WorldConfig
from svam.errors import DatasetError, ShapeError, WorldError
from svam.tensor_autograd import Tensor, resize_array, rng_stream

logger = logging.getLogger(__name__)

# Label ids shared by the renderer palette and the semantic encoder.
LABEL_BACKGROUND = 0
LABEL_GOAL = 1
LABEL_GRIPPER = 2
FIRST_CLASS_LABEL = 3

BACKGROUND_COLOR = (0.0, 0.0, 0.0)
GOAL_COLOR = (0.0, 0.0, 0.8)
GRIPPER_OPEN_COLOR = (0.55, 0.55, 0.55)
GRIPPER_CLOSED_COLOR = (1.0, 1.0, 1.0)
CLASS_COLORS = (
    (0.9, 0.2, 0.1),
    (0.1, 0.8, 0.2),
    (0.9, 0.8, 0.1),
    (0.7, 0.2, 0.8),
    (0.1, 0.7, 0.9),
)
PALETTE_TOLERANCE = 0.1
SEMANTIC_CHANNELS = 8
GEOMETRY_CHANNELS = 4
EMBEDDING_SEED = 0x5EED

OBJECTS_PER_TASK = {TASK_REACH: 1, TASK_PLACE: 1, TASK_PLACE_DISTRACTORS: 3}
MIN_GAP = 0.05
RESET_TRIES = 1000
EXPERT_SNAP = 0.02

DATASET_MAGIC = b"SVAMDS1\0"
ACTION_DIM = 3


@dataclass(frozen=True)
class WorldObject:
    class_id: int
    x: float
    y: float
    radius: float
    held: bool = False


@dataclass(frozen=True)
class WorldState:
    gripper: Tuple[float, float]
    grip_closed: bool
    objects: Tuple[WorldObject, ...]
    goal: Tuple[float, float, float]
    task_id: int
    step_index: int = 0

    @property
    def target(self) -> WorldObject:
        return self.objects[0]


@dataclass(frozen=True)
class Action:
    dx: float = 0.0
    dy: float = 0.0
    dgrip: int = 0

    @classmethod
    def from_array(cls, values: Sequence[float], max_delta: float = 0.1) -> "Action":
        dx, dy, dgrip = (float(v) for v in values)
        return cls(
            dx=float(np.clip(dx, -max_delta, max_delta)),
            dy=float(np.clip(dy, -max_delta, max_delta)),
            dgrip=int(np.clip(round(dgrip), -1, 1)),
        )

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, float(self.dgrip)], dtype=np.float32)


@dataclass
class Episode:
    frames: np.ndarray
    actions: np.ndarray
    task_id: int
    success: bool
    states: Optional[List[WorldState]] = None


@dataclass
class EpisodeSet:
    """Stacked demonstrations: frames (N, H_ep, H, W, 3), actions (N, H_ep-1, 3)."""

    frames: np.ndarray
    actions: np.ndarray
    task_ids: np.ndarray
    success: np.ndarray

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def episode_length(self) -> int:
        return int(self.frames.shape[1])

    def episode(self, index: int) -> Episode:
        return Episode(frames=self.frames[index], actions=self.actions[index],
                       task_id=int(self.task_ids[index]), success=bool(self.success[index]))


def _distance(ax: float, ay: float, bx: float, by: float) -> float:
    return math.hypot(ax - bx, ay - by)


class TabletopWorld:
    """Physics, rendering and the scripted expert for one WorldConfig."""

    def __init__(self, config: WorldConfig):
        self.config = config
        self.size = config.frame_size
        centers = (np.arange(self.size) + 0.5) / self.size
        self._ys, self._xs = np.meshgrid(centers, centers, indexing="ij")

    # -- physics ------------------------------------------------------------

    def reset(self, seed: int, task_id: int) -> WorldState:
        """Sample objects and goal without overlap; gripper at the fixed start."""
        if task_id not in self.config.tasks:
            raise WorldError(f"task {task_id} is not configured (tasks: {self.config.tasks})")
        n_objects = OBJECTS_PER_TASK[task_id]
        if n_objects > self.config.n_classes:
            raise WorldError(f"task {task_id} needs {n_objects} object classes")
        rng = rng_stream(seed, "world", "reset", task_id)
        r_lo, r_hi = self.config.object_radius
        goal_r = self.config.goal_radius

        for _ in range(RESET_TRIES):
            gx, gy = rng.uniform(goal_r + 0.02, 1.0 - goal_r - 0.02, size=2)
            circles = [(gx, gy, goal_r)]
            objects = []
            for k in range(n_objects):
                radius = float(rng.uniform(r_lo, r_hi))
                ox, oy = rng.uniform(radius + 0.02, 1.0 - radius - 0.02, size=2)
                objects.append(WorldObject(class_id=k + 1, x=float(ox), y=float(oy), radius=radius))
                circles.append((ox, oy, radius))
            if self._separated(circles):
                return WorldState(
                    gripper=tuple(float(v) for v in self.config.gripper_start),
                    grip_closed=False,
                    objects=tuple(objects),
                    goal=(float(gx), float(gy), goal_r),
                    task_id=task_id,
                )
        raise WorldError(f"could not place objects for task {task_id} after {RESET_TRIES} tries")

    @staticmethod
    def _separated(circles) -> bool:
        for i in range(len(circles)):
            for j in range(i + 1, len(circles)):
                xi, yi, ri = circles[i]
                xj, yj, rj = circles[j]
                if _distance(xi, yi, xj, yj) <= ri + rj + MIN_GAP:
                    return False
        return True

    def step(self, state: WorldState, action: Action) -> WorldState:
        """Pure transition: translate, grasp/release, advance the step index."""
        action = Action.from_array(action.to_array(), self.config.max_delta)
        gx = float(np.clip(state.gripper[0] + action.dx, 0.0, 1.0))
        gy = float(np.clip(state.gripper[1] + action.dy, 0.0, 1.0))
        objects = [dataclasses.replace(o, x=gx, y=gy) if o.held else o for o in state.objects]
        closed = state.grip_closed

        if action.dgrip > 0:
            closed = True
            if not any(o.held for o in objects):
                candidates = [(_distance(gx, gy, o.x, o.y), i) for i, o in enumerate(objects)]
                dist, index = min(candidates)
                if dist <= self.config.grasp_radius:
                    objects[index] = dataclasses.replace(objects[index], x=gx, y=gy, held=True)
        elif action.dgrip < 0:
            closed = False
            objects = [dataclasses.replace(o, held=False) for o in objects]

        return dataclasses.replace(state, gripper=(gx, gy), grip_closed=closed,
                                   objects=tuple(objects), step_index=state.step_index + 1)

    def is_success(self, state: WorldState) -> bool:
        gx, gy, goal_r = state.goal
        if state.task_id == TASK_REACH:
            return _distance(state.gripper[0], state.gripper[1], gx, gy) <= goal_r
        target = state.target
        return (not target.held) and _distance(target.x, target.y, gx, gy) <= goal_r

    # -- rendering ----------------------------------------------------------

    def render(self, state: WorldState) -> np.ndarray:
        """H x W x 3 frame in [0, 1]: goal ring, class-coloured disks, gripper cross."""
        frame = np.zeros((self.size, self.size, 3), dtype=np.float32)
        gx, gy, goal_r = state.goal
        ring = np.abs(np.hypot(self._xs - gx, self._ys - gy) - goal_r) <= 0.75 / self.size
        frame[ring] = GOAL_COLOR

        for obj in sorted(state.objects, key=lambda o: o.held):
            disk = np.hypot(self._xs - obj.x, self._ys - obj.y) <= obj.radius
            frame[disk] = CLASS_COLORS[obj.class_id - 1]

        row = min(int(state.gripper[1] * self.size), self.size - 1)
        col = min(int(state.gripper[0] * self.size), self.size - 1)
        color = GRIPPER_CLOSED_COLOR if state.grip_closed else GRIPPER_OPEN_COLOR
        for dr, dc in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
            r, c = row + dr, col + dc
            if 0 <= r < self.size and 0 <= c < self.size:
                frame[r, c] = color
        return np.clip(frame, 0.0, 1.0)

    # -- expert -------------------------------------------------------------

    def _move_toward(self, gripper: Tuple[float, float], point: Tuple[float, float]) -> Action:
        limit = self.config.max_delta
        return Action(dx=float(np.clip(point[0] - gripper[0], -limit, limit)),
                      dy=float(np.clip(point[1] - gripper[1], -limit, limit)), dgrip=0)

    def scripted_expert(self, state: WorldState) -> Action:
        """Proportional controller: reach target, close, carry to goal, open."""
        gx, gy, _ = state.goal
        grip = state.gripper
        if state.task_id == TASK_REACH:
            if _distance(grip[0], grip[1], gx, gy) <= EXPERT_SNAP:
                return Action()
            return self._move_toward(grip, (gx, gy))

        target = state.target
        if target.held:
            if _distance(grip[0], grip[1], gx, gy) <= EXPERT_SNAP:
                return Action(dgrip=-1)
            return self._move_toward(grip, (gx, gy))
        if self.is_success(state):
            return Action()
        if _distance(grip[0], grip[1], target.x, target.y) <= EXPERT_SNAP:
            return Action(dgrip=1)
        return self._move_toward(grip, (target.x, target.y))

    def rollout_expert(self, seed: int, task_id: int, length: int) -> Episode:
        """Run the expert for `length` frames (length-1 actions), padding with its own no-ops."""
        state = self.reset(seed, task_id)
        states = [state]
        frames = [self.render(state)]
        actions = []
        for _ in range(length - 1):
            action = self.scripted_expert(state)
            state = self.step(state, action)
            actions.append(action.to_array())
            states.append(state)
            frames.append(self.render(state))
        return Episode(frames=np.stack(frames), actions=np.stack(actions).astype(np.float32),
                       task_id=task_id, success=self.is_success(state), states=states)


# ---------------------------------------------------------------------------
# Procedural target encoders
# ---------------------------------------------------------------------------

def palette(n_classes: int) -> np.ndarray:
    """(n_labels, 3) colours indexed by label id; gripper uses the open colour."""
    colors = [BACKGROUND_COLOR, GOAL_COLOR, GRIPPER_OPEN_COLOR] + list(CLASS_COLORS[:n_classes])
    return np.asarray(colors, dtype=np.float32)


def decode_labels(frames: np.ndarray, n_classes: int) -> np.ndarray:
    """
    Nearest-palette decode of (..., H, W, 3) pixels to label ids.

    Pixels farther than PALETTE_TOLERANCE from every palette colour are background.
    """
    colors = np.concatenate([palette(n_classes), np.asarray([GRIPPER_CLOSED_COLOR], dtype=np.float32)])
    label_of_color = np.concatenate([np.arange(3 + n_classes), [LABEL_GRIPPER]])
    dist = np.linalg.norm(frames[..., None, :] - colors, axis=-1)
    nearest = dist.argmin(axis=-1)
    labels = label_of_color[nearest]
    labels[np.take_along_axis(dist, nearest[..., None], axis=-1)[..., 0] > PALETTE_TOLERANCE] = LABEL_BACKGROUND
    return labels


@functools.lru_cache(maxsize=8)
def semantic_embeddings(n_labels: int, dim: int = SEMANTIC_CHANNELS, seed: int = EMBEDDING_SEED) -> np.ndarray:
    """Frozen unit-norm class embeddings with pairwise |cos| < 0.5."""
    rng = np.random.default_rng(seed)
    table: List[np.ndarray] = []
    while len(table) < n_labels:
        candidate = rng.standard_normal(dim)
        candidate /= np.linalg.norm(candidate)
        if all(abs(float(candidate @ e)) < 0.5 for e in table):
            table.append(candidate)
    out = np.stack(table).astype(np.float32)
    out.setflags(write=False)
    return out


def _frames_array(frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError("encoder", "(T, H, W, 3) frames", frames.shape)
    return frames


def phi_sem(frames, target: Tuple[int, int], n_classes: int = 3) -> Tensor:
    """Palette semantics: per-pixel frozen class embedding, resized to `target`. Returns T x 8 x h x w."""
    frames = _frames_array(frames)
    table = semantic_embeddings(3 + n_classes)
    labels = decode_labels(frames, n_classes)
    volume = np.transpose(table[labels], (0, 3, 1, 2))
    return Tensor(resize_array(volume, target))


def _square_sdf(mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Signed distance (pixel units) from each pixel centre to the boundary of the
    union of `mask` pixel squares, negative inside, plus the unit vector toward
    that boundary. Exact, hence 1-Lipschitz.
    """
    h, w = mask.shape
    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    coords = np.stack([cols, rows], axis=-1)
    sdf = np.zeros((h, w))
    direction = np.zeros((h, w, 2))
    for side, sign in ((~mask, 1.0), (mask, -1.0)):
        points = coords[side]
        squares = coords[~side]
        if points.size == 0 or squares.size == 0:
            continue
        delta = points[:, None, :] - squares[None, :, :]
        excess = np.sign(delta) * np.maximum(np.abs(delta) - 0.5, 0.0)
        dist = np.linalg.norm(excess, axis=-1)
        nearest = dist.argmin(axis=1)
        best = dist[np.arange(len(points)), nearest]
        toward = -excess[np.arange(len(points)), nearest] / best[:, None]
        sdf[side] = sign * best
        direction[side] = toward
    return sdf, direction


def geometry_maps(frame: np.ndarray, n_classes: int) -> np.ndarray:
    """4 x H x W geometry of one frame: SDF/diag, nearest-object radius, unit vector (x, y)."""
    labels = decode_labels(frame, n_classes)
    silhouette = (labels == LABEL_GRIPPER) | (labels >= FIRST_CLASS_LABEL)
    objects = labels >= FIRST_CLASS_LABEL
    h, w = labels.shape
    out = np.zeros((GEOMETRY_CHANNELS, h, w))

    if not silhouette.any():
        out[0] = 1.0
    elif silhouette.all():
        out[0] = -1.0
    else:
        sdf, direction = _square_sdf(silhouette)
        out[0] = sdf / math.hypot(h, w)
        out[2] = direction[..., 0]
        out[3] = direction[..., 1]

    if objects.any():
        components, count = ndimage.label(objects)
        areas = ndimage.sum(objects, components, index=np.arange(1, count + 1))
        radii = np.sqrt(np.asarray(areas) / math.pi) / w
        _, (near_r, near_c) = ndimage.distance_transform_edt(~objects, return_indices=True)
        out[1] = radii[components[near_r, near_c] - 1]
    return out


def phi_geo(frames, target: Tuple[int, int], n_classes: int = 3) -> Tensor:
    """Signed-distance geometry resized to `target`. Returns T x 4 x h x w."""
    frames = _frames_array(frames)
    volume = np.stack([geometry_maps(frame, n_classes) for frame in frames])
    return Tensor(resize_array(volume, target))


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def generate_dataset(world: TabletopWorld, n_episodes: int, task_ids: Sequence[int], seed: int,
                     path: Optional[Path] = None, length: Optional[int] = None) -> EpisodeSet:
    """
    Collect successful expert demonstrations, topping up with fresh seeds until
    `n_episodes` are kept, and optionally write them to `path`.
    """
    if n_episodes < 1:
        raise DatasetError("n_episodes must be at least 1")
    length = length or world.config.episode_length
    kept: List[Episode] = []
    attempt = 0
    max_attempts = 10 * n_episodes + 100
    with tqdm(total=n_episodes, desc="demos", disable=None) as bar:
        while len(kept) < n_episodes:
            if attempt >= max_attempts:
                raise DatasetError(f"expert succeeded on only {len(kept)} of {attempt} episodes")
            task = task_ids[len(kept) % len(task_ids)]
            episode_seed = int(rng_stream(seed, "dataset", "episode", attempt).integers(0, 2 ** 63))
            attempt += 1
            episode = world.rollout_expert(episode_seed, task, length)
            if episode.success:
                kept.append(episode)
                bar.update(1)
    logger.info(f"Kept {len(kept)} successful episodes out of {attempt} attempts")

    dataset = EpisodeSet(
        frames=np.stack([e.frames for e in kept]).astype(np.float32),
        actions=np.stack([e.actions for e in kept]).astype(np.float32),
        task_ids=np.asarray([e.task_id for e in kept], dtype=np.int64),
        success=np.ones(len(kept), dtype=bool),
    )
    if path is not None:
        write_dataset(dataset, Path(path), n_tasks=len(world.config.tasks))
    return dataset


def write_dataset(dataset: EpisodeSet, path: Path, n_tasks: int):
    n, length, h, w, _ = dataset.frames.shape
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(DATASET_MAGIC)
            f.write(struct.pack("<6I", n, length, h, w, ACTION_DIM, n_tasks))
            for i in range(n):
                f.write(struct.pack("<IB", int(dataset.task_ids[i]), int(bool(dataset.success[i]))))
                f.write(dataset.frames[i].astype("<f4").tobytes())
                f.write(dataset.actions[i].astype("<f4").tobytes())
    except OSError as e:
        raise DatasetError(f"cannot write dataset {path}: {e}")
    logger.info(f"Wrote {n} episodes to {path}")


def read_dataset(path: Path) -> EpisodeSet:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read dataset {path}: {e}")
    if payload[:8] != DATASET_MAGIC:
        raise DatasetError(f"{path} is not a dataset file")
    try:
        n, length, h, w, action_dim, _ = struct.unpack_from("<6I", payload, 8)
    except struct.error:
        raise DatasetError(f"{path} is truncated")
    offset = 8 + 24
    frame_count = length * h * w * 3
    action_count = (length - 1) * action_dim
    frames = np.empty((n, length, h, w, 3), dtype=np.float32)
    actions = np.empty((n, length - 1, action_dim), dtype=np.float32)
    task_ids = np.empty(n, dtype=np.int64)
    success = np.empty(n, dtype=bool)
    try:
        for i in range(n):
            task_ids[i], success[i] = struct.unpack_from("<IB", payload, offset)
            offset += 5
            frames[i] = np.frombuffer(payload, "<f4", frame_count, offset).reshape(length, h, w, 3)
            offset += 4 * frame_count
            actions[i] = np.frombuffer(payload, "<f4", action_count, offset).reshape(length - 1, action_dim)
            offset += 4 * action_count
    except (struct.error, ValueError):
        raise DatasetError(f"{path} is truncated")
    return EpisodeSet(frames=frames, actions=actions, task_ids=task_ids, success=success)
