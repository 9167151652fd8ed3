#!/usr/bin/env python3
"""
Decouplers
Map entangled one-step denoiser features, anchored on the encoded current
observation, into the geometric and semantic target spaces; plus the
stage-2 self-distillation trainer and its on-disk teacher-video cache.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from svam import nn
from svam import tensor_autograd as ta
from svam.config import DecouplerSettings, RunConfig
from svam.errors import ConfigError, DatasetError, GradientError, ShapeError, SvamError
from svam.tensor_autograd import AdamState, Tensor, fnv1a64, rng_stream
from svam.video_diffusion import (NoiseSchedule, PatchCodec, VideoDenoiser, future_clip_indices,
                                  initial_noise, latent_shape, noise_digest, one_step_features_batch,
                                  sample_latents)
from svam.world_sim import EpisodeSet, phi_geo, phi_sem

logger = logging.getLogger(__name__)

BRANCHES = ("geo", "sem")
TEACHER_CACHE_MAGIC = b"SVAMTC1\0"


# ---------------------------------------------------------------------------
# Target encoders
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TargetEncoder:
    """Frames (T, H, W, 3) + target (h, w) + n_classes -> Tensor (T, channels, h, w)."""

    name: str
    channels: int
    fn: Callable[..., Tensor]

    def __call__(self, frames, target: Tuple[int, int], n_classes: int) -> Tensor:
        out = self.fn(frames, target, n_classes)
        if out.shape[1] != self.channels:
            raise ShapeError(f"target encoder {self.name}", f"{self.channels} channels", out.shape)
        return out


_TARGET_ENCODERS: Dict[str, TargetEncoder] = {}


def register_target_encoder(branch: str, fn: Callable[..., Tensor], channels: int):
    """Install the target encoder a decoupler branch distills toward."""
    _TARGET_ENCODERS[branch] = TargetEncoder(name=branch, channels=channels, fn=fn)
    logger.debug(f"Registered target encoder '{branch}' ({channels} channels)")


def unregister_target_encoder(branch: str):
    if branch in BRANCHES:
        raise ConfigError(f"built-in target encoder '{branch}' cannot be removed")
    _TARGET_ENCODERS.pop(branch, None)


def get_target_encoder(branch: str) -> TargetEncoder:
    try:
        return _TARGET_ENCODERS[branch]
    except KeyError:
        raise ConfigError(f"no target encoder registered for branch '{branch}'")


register_target_encoder("geo", phi_geo, 4)
register_target_encoder("sem", phi_sem, 8)


def branch_channels(settings: DecouplerSettings, branch: str) -> int:
    return settings.geo_channels if branch == "geo" else settings.sem_channels


# ---------------------------------------------------------------------------
# Forward path
# ---------------------------------------------------------------------------

@dataclass
class ForesightBundle:
    """Decoupled foresight plus the raw features; every member is (B, T, C, h, w)."""

    geo: Tensor
    sem: Tensor
    features: Tensor

    def __post_init__(self):
        shapes = {name: t.shape for name, t in (("geo", self.geo), ("sem", self.sem), ("features", self.features))}
        frames = {(s[0], s[1], s[3], s[4]) for s in shapes.values() if len(s) == 5}
        if len(frames) != 1 or any(len(s) != 5 for s in shapes.values()):
            raise ShapeError("ForesightBundle", "shared (B, T, h, w)", shapes)

    def take(self, index) -> "ForesightBundle":
        return ForesightBundle(geo=Tensor(self.geo.data[index]), sem=Tensor(self.sem.data[index]),
                               features=Tensor(self.features.data[index]))


def reference_anchor(obs: np.ndarray, branch: str, size: int, n_classes: int = 3) -> Tensor:
    """Target-encoder view of the observation frame: (1, C_i, size, size)."""
    encoder = get_target_encoder(branch)
    return encoder(np.asarray(obs)[None], (size, size), n_classes)


def fuse_input(features: Tensor, anchor: Tensor) -> Tensor:
    """
    Replicate the anchor over time and append it on channels.

    Args:
        features: (..., T, C_Σ, h, w)
        anchor: (..., 1, C_i, h, w)

    Returns:
        (..., T, C_Σ + C_i, h, w)
    """
    if features.ndim != anchor.ndim or features.shape[-2:] != anchor.shape[-2:] or anchor.shape[-4] != 1:
        raise ShapeError("fuse_input", f"anchor (..., 1, C, {features.shape[-2]}, {features.shape[-1]})", anchor.shape)
    frames = features.shape[-4]
    return ta.concat([features, ta.repeat(anchor, frames, axis=-4)], axis=-3)


class Decoupler(nn.Module):
    """Input projection, K factorized spatio-temporal blocks, output projection."""

    def __init__(self, in_channels: int, out_channels: int, settings: DecouplerSettings,
                 frames: int, size: int, rng: np.random.Generator):
        if settings.hidden % settings.heads:
            raise ConfigError("decoupler hidden width must be divisible by heads")
        self.out_channels = out_channels
        self.size = size
        self.in_proj = nn.Linear(in_channels, settings.hidden, rng)
        self.pos = nn.positional_table((frames, size * size, settings.hidden), rng)
        self.blocks = [nn.FactorizedBlock(settings.hidden, settings.heads, settings.mlp_ratio, rng)
                       for _ in range(settings.blocks)]
        self.out_norm = nn.LayerNorm(settings.hidden)
        self.out_proj = nn.Linear(settings.hidden, out_channels, rng)

    def forward(self, fused: Tensor) -> Tensor:
        """(B, T, C_Σ + C_i, h, w) or unbatched (T, ...) -> same layout with C_i channels."""
        squeeze = fused.ndim == 4
        if squeeze:
            fused = ta.reshape(fused, (1,) + fused.shape)
        _, _, _, h, w = fused.shape
        x = self.in_proj(nn.volume_to_tokens(fused)) + self.pos
        for block in self.blocks:
            x = block(x)
        out = nn.tokens_to_volume(self.out_proj(self.out_norm(x)), h, w)
        return ta.reshape(out, out.shape[1:]) if squeeze else out


def build_decouplers(config: RunConfig, seed: int) -> Dict[str, Decoupler]:
    settings = config.decouplers
    size = config.vdm.feature_size
    return {
        branch: Decoupler(config.feature_channels + branch_channels(settings, branch),
                          branch_channels(settings, branch), settings, config.vdm.frames, size,
                          rng_stream(seed, "init", "decoupler", branch))
        for branch in BRANCHES
    }


def predict_foresight(decouplers: Dict[str, Decoupler], features: Tensor,
                      anchors: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {branch: decouplers[branch](fuse_input(features, anchors[branch])) for branch in BRANCHES}


def distill_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    return ta.mse(prediction, target)


# ---------------------------------------------------------------------------
# Teacher cache and targets
# ---------------------------------------------------------------------------

class TeacherCache:
    """
    One file per (episode, anchor): magic, seed u64, model hash u64, the
    8-byte digest of the z_S the video was generated from, f32 video (T, H, W, 3).
    """

    HEADER = 32

    def __init__(self, directory: Path, model_hash: int, video_shape: Tuple[int, int, int, int]):
        self.directory = Path(directory)
        self.model_hash = model_hash
        self.video_shape = tuple(video_shape)
        self.hits = 0
        self.misses = 0

    def path(self, episode: int, anchor: int) -> Path:
        return self.directory / f"{episode:05d}_{anchor:03d}.svtc"

    def load(self, episode: int, anchor: int, seed: int) -> Optional[Tuple[np.ndarray, str]]:
        """(video, z_S digest), or None when absent or written for another seed/model."""
        path = self.path(episode, anchor)
        if not path.exists():
            self.misses += 1
            return None
        payload = path.read_bytes()
        count = int(np.prod(self.video_shape))
        if payload[:8] != TEACHER_CACHE_MAGIC or len(payload) != self.HEADER + 4 * count:
            logger.warning(f"Ignoring malformed teacher cache file {path}")
            self.misses += 1
            return None
        stored_seed, stored_hash = struct.unpack_from("<QQ", payload, 8)
        if stored_seed != seed or stored_hash != self.model_hash:
            self.misses += 1
            return None
        self.hits += 1
        video = np.frombuffer(payload, "<f4", count, self.HEADER).reshape(self.video_shape).astype(np.float32)
        return video, payload[24:self.HEADER].hex()

    def store(self, episode: int, anchor: int, seed: int, video: np.ndarray, z_digest: str):
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            with open(self.path(episode, anchor), "wb") as f:
                f.write(TEACHER_CACHE_MAGIC)
                f.write(struct.pack("<QQ", seed, self.model_hash))
                f.write(bytes.fromhex(z_digest))
                f.write(np.ascontiguousarray(video, dtype="<f4").tobytes())
        except OSError as e:
            raise DatasetError(f"cannot write teacher cache {self.directory}: {e}")


def model_hash(denoiser: VideoDenoiser) -> int:
    return fnv1a64(denoiser.checksum().encode("utf-8"))


def sample_seed(seed: int, episode: int, anchor: int) -> int:
    """Per-sample seed of the z_S draw shared by features and teacher video."""
    return int(rng_stream(seed, "sample", episode, anchor).integers(0, 2 ** 63))


def distill_targets(obs: np.ndarray, task_id: int, mode: str, branch: str, seed: int, size: int,
                    denoiser: Optional[VideoDenoiser] = None, codec: Optional[PatchCodec] = None,
                    schedule: Optional[NoiseSchedule] = None, future_frames: Optional[np.ndarray] = None,
                    n_classes: int = 3) -> Tensor:
    """
    Distillation target Y_i (T, C_i, size, size) for one sample.

    self mode encodes the model's own S-step generation from the z_S of `seed`;
    gt mode encodes the stored future frames.
    """
    encoder = get_target_encoder(branch)
    if mode == "gt":
        if future_frames is None:
            raise DatasetError("gt distillation targets need the episode's future frames")
        return encoder(future_frames, (size, size), n_classes)
    if mode != "self":
        raise ConfigError(f"unknown distillation mode: {mode}")
    if denoiser is None or codec is None or schedule is None:
        raise SvamError("self-distillation targets need a trained video model")
    z_start = initial_noise(seed, (denoiser.frames, codec.channels, codec.latent_size, codec.latent_size))
    z0 = sample_latents(denoiser, schedule, codec.encode(obs[None]), np.array([task_id]), z_start[None], [seed])
    return encoder(codec.decode(z0[0]), (size, size), n_classes)


@dataclass
class DistillationBank:
    """Precomputed stage-2 samples: features (P, T, C_Σ, h, w), anchors and targets per branch."""

    episodes: np.ndarray
    anchors_t: np.ndarray
    seeds: np.ndarray
    features: np.ndarray
    anchors: Dict[str, np.ndarray] = field(default_factory=dict)
    targets: Dict[str, np.ndarray] = field(default_factory=dict)
    teacher_generated: int = 0
    teacher_cache_verified: int = 0

    def __len__(self) -> int:
        return int(self.features.shape[0])


def build_distillation_bank(denoiser: VideoDenoiser, codec: PatchCodec, schedule: NoiseSchedule,
                            dataset: EpisodeSet, config: RunConfig, mode: str,
                            cache: Optional[TeacherCache] = None) -> DistillationBank:
    """
    Draw the stage-2 sample pool and compute, per sample, the one-step features
    and (self mode) the teacher video from the same z_S, or (gt mode) the
    stored future frames, then encode anchors and targets for both branches.
    """
    size = config.vdm.feature_size
    n_classes = config.world.n_classes
    frames = config.vdm.frames
    rng = rng_stream(config.training.seed, "stage2", "pool")
    pool = config.decouplers.pool
    episodes = rng.integers(0, len(dataset), size=pool)
    anchors_t = rng.integers(0, dataset.episode_length - 1, size=pool)
    seeds = np.array([sample_seed(config.training.seed, e, a) for e, a in zip(episodes, anchors_t)], dtype=np.uint64)

    feature_chunks, video_chunks = [], []
    generated = verified = 0
    chunk = config.training.target_batch
    for start in tqdm(range(0, pool, chunk), desc=f"stage2 targets ({mode})", disable=None):
        rows = np.arange(start, min(start + chunk, pool))
        obs = dataset.frames[episodes[rows], anchors_t[rows]]
        task_ids = dataset.task_ids[episodes[rows]]
        z_features = np.stack([initial_noise(int(seeds[i]), latent_shape(config)) for i in rows])
        feature_chunks.append(one_step_features_batch(denoiser, codec, schedule, obs, task_ids, z_features, size).data)

        if mode == "gt":
            video_chunks.append(np.stack([
                dataset.frames[episodes[i], future_clip_indices(anchors_t[i], frames, config.world.frame_stride,
                                                                dataset.episode_length)]
                for i in rows]))
            continue

        videos: Dict[int, np.ndarray] = {}
        missing = []
        for j, i in enumerate(rows):
            entry = cache.load(int(episodes[i]), int(anchors_t[i]), int(seeds[i])) if cache else None
            if entry is None:
                missing.append(j)
                continue
            video, z_digest = entry
            if z_digest != noise_digest(z_features[j]):
                raise SvamError(f"cached teacher video for sample {i} was generated from another z_S")
            videos[j] = video
            verified += 1
        if missing:
            # teacher trajectories start from the exact z_S the feature pass consumed
            z0 = sample_latents(denoiser, schedule, codec.encode(obs[missing]), task_ids[missing],
                                z_features[missing], [int(seeds[rows[j]]) for j in missing])
            for k, j in enumerate(missing):
                videos[j] = codec.decode(z0[k])
                generated += 1
                if cache:
                    i = rows[j]
                    cache.store(int(episodes[i]), int(anchors_t[i]), int(seeds[i]), videos[j],
                                noise_digest(z_features[j]))
        video_chunks.append(np.stack([videos[j] for j in range(len(rows))]))

    bank = DistillationBank(episodes=episodes, anchors_t=anchors_t, seeds=seeds,
                            features=np.concatenate(feature_chunks), teacher_generated=generated,
                            teacher_cache_verified=verified)
    videos = np.concatenate(video_chunks)
    for branch in BRANCHES:
        encoder = get_target_encoder(branch)
        bank.targets[branch] = np.stack([encoder(v, (size, size), n_classes).data for v in videos])
        bank.anchors[branch] = np.stack([
            reference_anchor(dataset.frames[e, a], branch, size, n_classes).data
            for e, a in zip(episodes, anchors_t)])
    if mode == "self":
        logger.info(f"Teacher videos: {generated} generated from the feature z_S, {verified} cached and verified"
                    + (f" (cache hits {cache.hits}, misses {cache.misses})" if cache else ""))
    return bank


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _branch_batch(bank: DistillationBank, branch: str, index: np.ndarray) -> Tuple[Tensor, Tensor]:
    fused = fuse_input(Tensor(bank.features[index]), Tensor(bank.anchors[branch][index]))
    return fused, Tensor(bank.targets[branch][index])


def decoupler_step(decoupler: Decoupler, optimizer: AdamState, fused: Tensor, target: Tensor,
                   others: Optional[List[Decoupler]] = None) -> float:
    """One update of one branch; `others` are checked to have received no gradient."""
    params = decoupler.parameters()
    ta.zero_grads(params.values())
    loss = distill_loss(decoupler(fused), target)
    loss.backward()
    for other in others or []:
        touched = [name for name, p in other.named_parameters() if p.grad is not None]
        if touched:
            raise GradientError(touched)
    ta.adam_step(params, optimizer)
    ta.zero_grads(params.values())
    return loss.item()


def train_decouplers(decouplers: Dict[str, Decoupler], bank: DistillationBank, config: RunConfig,
                     optimizers: Dict[str, AdamState], steps: int,
                     losses: Optional[Dict[str, List[Tuple[int, float]]]] = None) -> Dict[str, List[Tuple[int, float]]]:
    """
    Stage 2: optimize each branch independently on minibatches of the bank
    until the optimizers reach `steps`.
    """
    losses = {branch: list((losses or {}).get(branch, [])) for branch in BRANCHES}
    start = optimizers["geo"].step_count
    seed = config.training.seed
    for step in tqdm(range(start, steps), desc="stage2", initial=start, total=steps, disable=None):
        index = rng_stream(seed, "stage2", "step", step).integers(0, len(bank), size=config.training.batch)
        for branch in BRANCHES:
            fused, target = _branch_batch(bank, branch, index)
            others = [decouplers[b] for b in BRANCHES if b != branch]
            losses[branch].append((step, decoupler_step(decouplers[branch], optimizers[branch], fused, target, others)))
    for branch in BRANCHES:
        if losses[branch]:
            logger.info(f"Stage 2 {branch} loss {losses[branch][0][1]:.4f} -> {losses[branch][-1][1]:.4f}")
    return losses


def bank_foresight(decouplers: Dict[str, Decoupler], bank_features: np.ndarray,
                   bank_anchors: Dict[str, np.ndarray], chunk: int = 64) -> Dict[str, np.ndarray]:
    """Run both decouplers over precomputed features without recording a tape."""
    out = {branch: [] for branch in BRANCHES}
    with ta.no_grad():
        for start in range(0, bank_features.shape[0], chunk):
            rows = slice(start, start + chunk)
            anchors = {b: Tensor(bank_anchors[b][rows]) for b in BRANCHES}
            pred = predict_foresight(decouplers, Tensor(bank_features[rows]), anchors)
            for branch in BRANCHES:
                out[branch].append(pred[branch].data)
    return {branch: np.concatenate(parts) for branch, parts in out.items()}
