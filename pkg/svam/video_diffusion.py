#!/usr/bin/env python3
"""
Video Diffusion
Toy latent video diffusion: frozen patchify codec, DDPM schedule and reverse
sampler, an attention-only denoiser whose up path exposes three feature taps,
and the single-pass feature extractor the policy conditions on.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from svam import nn
from svam import tensor_autograd as ta
from svam.config import RunConfig
from svam.errors import ConfigError, NumericalError, ShapeError, SvamError
from svam.tensor_autograd import AdamState, Tensor, rng_stream
from svam.world_sim import EpisodeSet, TabletopWorld

logger = logging.getLogger(__name__)

CODEC_SEED = 0xC0DEC
CODEC_EPISODES = 8
EMBED_DIM = 32


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients for steps s = 1..S (stored 0-based)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.betas.shape[0])

    def _check(self, s: int):
        if not 1 <= s <= self.steps:
            raise SvamError(f"diffusion step {s} outside 1..{self.steps}")

    def alpha(self, s: int) -> float:
        self._check(s)
        return float(self.alphas[s - 1])

    def alpha_bar(self, s: int) -> float:
        self._check(s)
        return float(self.alpha_bars[s - 1])

    def sigma(self, s: int) -> float:
        self._check(s)
        return float(self.sigmas[s - 1])

    def diffuse(self, x0: np.ndarray, noise: np.ndarray, steps: np.ndarray) -> np.ndarray:
        """Forward process q(x_s | x_0) for a batch with one step per leading row."""
        ab = self.alpha_bars[np.asarray(steps) - 1].reshape((-1,) + (1,) * (x0.ndim - 1))
        return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(np.float32)


def make_noise_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                        base_steps: int = 1000) -> NoiseSchedule:
    """
    S-step chain strided out of a `base_steps` linear-beta process.

    ᾱ_s is the base ᾱ at index round(s·base/S); α_s = ᾱ_s/ᾱ_{s-1}, β_s = 1-α_s and
    σ_s = √β_s. With S == base_steps this is the plain linear schedule.

    Args:
        steps: S, number of sampler steps
        beta_start: First beta of the base process
        beta_end: Last beta of the base process
        base_steps: Length of the base process

    Returns:
        NoiseSchedule with strictly decreasing ᾱ
    """
    if steps < 1:
        raise ConfigError("diffusion step count must be positive")
    if steps > base_steps:
        raise ConfigError(f"{steps} sampler steps exceed the {base_steps}-step base process")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"invalid beta range [{beta_start}, {beta_end}]")
    base_bars = np.cumprod(1.0 - np.linspace(beta_start, beta_end, base_steps))
    index = np.round(np.arange(1, steps + 1) * base_steps / steps).astype(np.int64) - 1
    alpha_bars = base_bars[index]
    alphas = alpha_bars / np.concatenate([[1.0], alpha_bars[:-1]])
    betas = 1.0 - alphas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigmas=np.sqrt(betas))


def reverse_process(eps_fn: Callable[[np.ndarray, int], np.ndarray], x_start: np.ndarray,
                    schedule: NoiseSchedule, noise_fn: Optional[Callable[[int], np.ndarray]] = None,
                    deterministic: bool = False, site: str = "reverse_process") -> np.ndarray:
    """
    Iterate x_{s-1} = (x_s - (1-α_s)/√(1-ᾱ_s)·ε(x_s, s))/√α_s + σ_s·n for s = S..1.

    No noise is added on the final step; `deterministic` drops it on every step.
    """
    x = np.asarray(x_start, dtype=np.float64)
    for s in range(schedule.steps, 0, -1):
        try:
            eps = np.asarray(eps_fn(x, s), dtype=np.float64)
        except NumericalError:
            raise NumericalError(site, s)
        alpha, alpha_bar = schedule.alpha(s), schedule.alpha_bar(s)
        x = (x - (1.0 - alpha) / math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha)
        if s > 1 and not deterministic:
            x = x + schedule.sigma(s) * noise_fn(s)
        if not np.all(np.isfinite(x)):
            raise NumericalError(site, s)
    return x


def initial_noise(seed: int, shape: Sequence[int]) -> np.ndarray:
    """z_S draw shared by the one-step features and the teacher video of one sample."""
    return rng_stream(seed, "z_S").standard_normal(tuple(shape)).astype(np.float32)


def noise_digest(z: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(z, dtype=np.float32).tobytes(), digest_size=8).hexdigest()


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

class PatchCodec:
    """
    Frozen linear codec: non-overlapping p×p patches mapped through an
    orthonormal (3p², C) basis. Decoding applies the transpose and clips.
    """

    def __init__(self, basis: np.ndarray, patch: int, frame_size: int):
        if basis.shape[0] != 3 * patch * patch:
            raise ShapeError("PatchCodec", f"({3 * patch * patch}, C) basis", basis.shape)
        self.basis = basis.astype(np.float32)
        self.patch = patch
        self.frame_size = frame_size
        self.latent_size = frame_size // patch

    @property
    def channels(self) -> int:
        return int(self.basis.shape[1])

    @classmethod
    def fitted(cls, config: RunConfig) -> "PatchCodec":
        """Leading right-singular vectors of uncentred patches from seeded expert rollouts."""
        world = TabletopWorld(config.world)
        p = config.vdm.patch
        frames = []
        for i in range(CODEC_EPISODES):
            task = config.world.tasks[i % len(config.world.tasks)]
            episode = world.rollout_expert(CODEC_SEED + i, task, config.world.episode_length)
            frames.append(episode.frames)
        patches = cls._patchify(np.concatenate(frames), p).reshape(-1, 3 * p * p).astype(np.float64)
        _, _, vt = np.linalg.svd(patches, full_matrices=False)
        basis = vt[:config.vdm.latent_channels].T
        signs = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(basis.shape[1])])
        return cls(basis * signs, p, config.world.frame_size)

    @staticmethod
    def _patchify(frames: np.ndarray, p: int) -> np.ndarray:
        """(..., H, W, 3) -> (..., H/p, W/p, p*p*3)."""
        lead = frames.shape[:-3]
        h, w = frames.shape[-3] // p, frames.shape[-2] // p
        x = frames.reshape(lead + (h, p, w, p, 3))
        k = len(lead)
        x = np.transpose(x, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
        return x.reshape(lead + (h, w, p * p * 3))

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """(..., T, H, W, 3) frames -> (..., T, C, h, w) latents."""
        frames = np.asarray(frames, dtype=np.float32)
        if frames.shape[-3:] != (self.frame_size, self.frame_size, 3):
            raise ShapeError("encode_latent", f"(..., {self.frame_size}, {self.frame_size}, 3)", frames.shape)
        codes = self._patchify(frames, self.patch) @ self.basis
        return np.moveaxis(codes, -1, -3)

    def decode(self, z: np.ndarray) -> np.ndarray:
        """(..., C, h, w) latents -> (..., H, W, 3) frames in [0, 1]."""
        z = np.asarray(z, dtype=np.float32)
        if z.shape[-3:] != (self.channels, self.latent_size, self.latent_size):
            raise ShapeError("decode_latent", f"(..., {self.channels}, {self.latent_size}, {self.latent_size})", z.shape)
        p = self.patch
        codes = np.moveaxis(z, -3, -1) @ self.basis.T
        lead = codes.shape[:-3]
        k = len(lead)
        x = codes.reshape(lead + (self.latent_size, self.latent_size, p, p, 3))
        x = np.transpose(x, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
        return np.clip(x.reshape(lead + (self.frame_size, self.frame_size, 3)), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

def merge_2x2(x: Tensor, h: int, w: int) -> Tensor:
    """(B, T, h*w, D) -> (B, T, h*w/4, 4D) by folding 2×2 cell neighbourhoods."""
    b, t, _, d = x.shape
    x = ta.reshape(x, (b, t, h // 2, 2, w // 2, 2, d))
    x = ta.permute(x, (0, 1, 2, 4, 3, 5, 6))
    return ta.reshape(x, (b, t, (h // 2) * (w // 2), 4 * d))


def unmerge_2x2(x: Tensor, h: int, w: int) -> Tensor:
    """Inverse of merge_2x2: (B, T, h*w/4, 4D) -> (B, T, h*w, D)."""
    b, t, _, d4 = x.shape
    d = d4 // 4
    x = ta.reshape(x, (b, t, h // 2, w // 2, 2, 2, d))
    x = ta.permute(x, (0, 1, 2, 4, 3, 5, 6))
    return ta.reshape(x, (b, t, h * w, d))


def _heads(width: int, heads: int) -> int:
    return math.gcd(width, heads)


class VideoDenoiser(nn.Module):
    """
    ε-prediction network over (B, T, C, h, w) latents conditioned on the
    observation latent, the diffusion step and the task id.

    forward returns (eps_pred, taps) with taps F_0 (h/2 × w/2), F_1 and F_2 (h × w).
    """

    def __init__(self, config: RunConfig, rng: np.random.Generator):
        vdm = config.vdm
        self.frames = vdm.frames
        self.latent_size = config.latent_size
        self.n_steps = vdm.steps
        c = vdm.latent_channels
        base, mid = vdm.base_width, vdm.bottleneck_width
        tap0, tap1, tap2 = vdm.tap_channels
        n_full = self.latent_size ** 2
        n_half = n_full // 4
        n_tasks = max(config.world.tasks) + 1

        self.step_proj = nn.Linear(EMBED_DIM, EMBED_DIM, rng)
        self.task_table = nn.Parameter(rng.normal(0.0, 0.02, size=(n_tasks, EMBED_DIM)))
        self.cond_in = nn.Linear(EMBED_DIM, base, rng)
        self.cond_mid = nn.Linear(EMBED_DIM, mid, rng)

        self.in_proj = nn.Linear(2 * c, base, rng)
        self.pos_in = nn.positional_table((self.frames, n_full, base), rng)
        self.down = nn.Linear(4 * base, mid, rng)
        self.pos_mid = nn.positional_table((self.frames, n_half, mid), rng)
        self.mid_block = nn.FactorizedBlock(mid, _heads(mid, vdm.heads), vdm.mlp_ratio, rng)

        self.up0_proj = nn.Linear(mid, tap0, rng)
        self.pos_up0 = nn.positional_table((self.frames, n_half, tap0), rng)
        self.up0_block = nn.FactorizedBlock(tap0, _heads(tap0, vdm.heads), vdm.mlp_ratio, rng)

        self.unmerge = nn.Linear(tap0, 4 * tap1, rng)
        self.skip = nn.Linear(base, tap1, rng)
        self.pos_up1 = nn.positional_table((self.frames, n_full, tap1), rng)
        self.up1_block = nn.FactorizedBlock(tap1, _heads(tap1, vdm.heads), vdm.mlp_ratio, rng)

        self.up2_proj = nn.Linear(tap1, tap2, rng)
        self.pos_up2 = nn.positional_table((self.frames, n_full, tap2), rng)
        self.up2_block = nn.FactorizedBlock(tap2, _heads(tap2, vdm.heads), vdm.mlp_ratio, rng)

        self.head_norm = nn.LayerNorm(tap2)
        self.head = nn.Linear(tap2, c, rng, init_scale=0.05)
        self._calls = 0

    @property
    def calls(self) -> int:
        """Number of forward evaluations since construction or the last reset."""
        return self._calls

    def reset_calls(self):
        self._calls = 0

    def _conditioning(self, steps: np.ndarray, task_ids: np.ndarray) -> Tensor:
        emb = Tensor(nn.sinusoidal_embedding(steps, EMBED_DIM))
        return ta.gelu(self.step_proj(emb) + ta.take_rows(self.task_table, task_ids))

    def forward(self, z_s: Tensor, steps, obs_latent, task_ids) -> Tuple[Tensor, List[Tensor]]:
        """
        Args:
            z_s: (B, T, C, h, w) noisy latents
            steps: (B,) diffusion steps in 1..S
            obs_latent: (B, C, h, w) encoded observation frame
            task_ids: (B,) task ids

        Returns:
            (eps_pred of z_s's shape, [F_0, F_1, F_2] as (B, T, C_l, h_l, w_l))
        """
        steps = np.atleast_1d(np.asarray(steps, dtype=np.int64))
        task_ids = np.atleast_1d(np.asarray(task_ids, dtype=np.int64))
        b, t, c, h, w = z_s.shape
        if t != self.frames or h != self.latent_size or w != self.latent_size:
            raise ShapeError("denoiser_forward", (self.frames, c, self.latent_size, self.latent_size), z_s.shape[1:])
        if steps.min() < 1 or steps.max() > self.n_steps:
            raise SvamError(f"diffusion step outside 1..{self.n_steps}: {steps.tolist()}")
        self._calls += 1

        obs = obs_latent if isinstance(obs_latent, Tensor) else Tensor(obs_latent)
        obs = ta.broadcast_to(ta.reshape(obs, (b, 1, c, h, w)), (b, t, c, h, w))
        x = nn.volume_to_tokens(ta.concat([z_s, obs], axis=2))

        cond = self._conditioning(steps, task_ids)
        cond_in = ta.reshape(self.cond_in(cond), (b, 1, 1, -1))
        cond_mid = ta.reshape(self.cond_mid(cond), (b, 1, 1, -1))

        x0 = self.in_proj(x) + self.pos_in + cond_in
        x = self.down(merge_2x2(x0, h, w)) + self.pos_mid + cond_mid
        x = self.mid_block(x)

        f0 = self.up0_block(self.up0_proj(x) + self.pos_up0)
        x = unmerge_2x2(self.unmerge(f0), h, w) + self.skip(x0) + self.pos_up1
        f1 = self.up1_block(x)
        f2 = self.up2_block(self.up2_proj(f1) + self.pos_up2)

        eps = nn.tokens_to_volume(self.head(self.head_norm(f2)), h, w)
        taps = [nn.tokens_to_volume(f0, h // 2, w // 2), nn.tokens_to_volume(f1, h, w), nn.tokens_to_volume(f2, h, w)]
        return eps, taps


def build_video_model(config: RunConfig, seed: int) -> Tuple[VideoDenoiser, PatchCodec, NoiseSchedule]:
    vdm = config.vdm
    denoiser = VideoDenoiser(config, rng_stream(seed, "init", "vdm"))
    codec = PatchCodec.fitted(config)
    schedule = make_noise_schedule(vdm.steps, vdm.beta_start, vdm.beta_end, vdm.base_steps)
    return denoiser, codec, schedule


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class VideoBatch:
    """Observation frames (B, H, W, 3), future clips (B, T, H, W, 3) and their provenance."""

    obs: np.ndarray
    clips: np.ndarray
    task_ids: np.ndarray
    episodes: np.ndarray
    anchors: np.ndarray


def future_clip_indices(anchor: int, frames: int, stride: int, length: int) -> np.ndarray:
    """Frame indices anchor + k·stride for k = 1..frames, clamped to the episode."""
    return np.minimum(anchor + stride * np.arange(1, frames + 1), length - 1)


def make_video_batch(dataset: EpisodeSet, episodes: np.ndarray, anchors: np.ndarray,
                     frames: int, stride: int) -> VideoBatch:
    length = dataset.episode_length
    clips = np.stack([dataset.frames[e, future_clip_indices(a, frames, stride, length)]
                      for e, a in zip(episodes, anchors)])
    return VideoBatch(obs=dataset.frames[episodes, anchors], clips=clips,
                      task_ids=dataset.task_ids[episodes], episodes=np.asarray(episodes),
                      anchors=np.asarray(anchors))


def sample_video_batch(dataset: EpisodeSet, size: int, rng: np.random.Generator,
                       frames: int, stride: int) -> VideoBatch:
    episodes = rng.integers(0, len(dataset), size=size)
    anchors = rng.integers(0, dataset.episode_length - 1, size=size)
    return make_video_batch(dataset, episodes, anchors, frames, stride)


def train_vdm_step(denoiser: VideoDenoiser, codec: PatchCodec, schedule: NoiseSchedule,
                   batch: VideoBatch, optimizer: AdamState, rng: np.random.Generator) -> float:
    """One ε-prediction update on a batch; returns the loss before the update."""
    z0 = codec.encode(batch.clips)
    obs_latent = codec.encode(batch.obs)
    steps = rng.integers(1, schedule.steps + 1, size=z0.shape[0])
    noise = rng.standard_normal(z0.shape).astype(np.float32)
    z_s = schedule.diffuse(z0, noise, steps)

    pred, _ = denoiser(Tensor(z_s), steps, obs_latent, batch.task_ids)
    loss = ta.mse(pred, Tensor(noise))
    params = denoiser.parameters()
    ta.zero_grads(params.values())
    loss.backward()
    ta.adam_step(params, optimizer)
    return loss.item()


def train_vdm(denoiser: VideoDenoiser, codec: PatchCodec, schedule: NoiseSchedule, dataset: EpisodeSet,
              config: RunConfig, optimizer: AdamState, steps: int,
              losses: Optional[List[Tuple[int, float]]] = None) -> List[Tuple[int, float]]:
    """
    Stage 1: run until `optimizer.step_count == steps`. Each step draws from its
    own (seed, "stage1", step) stream, so a resumed run sees the same batches.
    """
    losses = list(losses or [])
    seed = config.training.seed
    start = optimizer.step_count
    for step in tqdm(range(start, steps), desc="stage1", initial=start, total=steps, disable=None):
        rng = rng_stream(seed, "stage1", "step", step)
        batch = sample_video_batch(dataset, config.training.batch, rng, config.vdm.frames, config.world.frame_stride)
        losses.append((step, train_vdm_step(denoiser, codec, schedule, batch, optimizer, rng)))
    if losses:
        logger.info(f"Stage 1 finished at step {steps}, final loss {losses[-1][1]:.4f}")
    return losses


# ---------------------------------------------------------------------------
# Sampling and one-step features
# ---------------------------------------------------------------------------

def latent_shape(config: RunConfig) -> Tuple[int, int, int, int]:
    return (config.vdm.frames, config.vdm.latent_channels, config.latent_size, config.latent_size)


def sample_latents(denoiser: VideoDenoiser, schedule: NoiseSchedule, obs_latent: np.ndarray,
                   task_ids: np.ndarray, z_start: np.ndarray, seeds: Sequence[int],
                   deterministic: bool = False) -> np.ndarray:
    """
    Batched reverse process from `z_start` (B, T, C, h, w). Step noise for row b
    comes from its own seed, so batching never changes a sample.
    """
    def eps_fn(z, s):
        steps = np.full(z.shape[0], s)
        eps, _ = denoiser(Tensor(z.astype(np.float32)), steps, obs_latent, task_ids)
        return eps.data

    def noise_fn(s):
        return np.stack([rng_stream(seed, "ddpm", s).standard_normal(z_start.shape[1:]) for seed in seeds])

    with ta.no_grad():
        z0 = reverse_process(eps_fn, z_start, schedule, noise_fn, deterministic, site="ddpm_sample")
    return z0.astype(np.float32)


def ddpm_sample(denoiser: VideoDenoiser, codec: PatchCodec, schedule: NoiseSchedule, obs: np.ndarray,
                task_id: int, seed: int, z_start: Optional[np.ndarray] = None,
                deterministic: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generate a future clip for one observation.

    Args:
        obs: (H, W, 3) observation frame
        task_id: Task id
        seed: Sample seed; z_S comes from initial_noise(seed, ...) unless z_start is given
        z_start: Optional (T, C, h, w) starting latent
        deterministic: Drop the per-step noise term

    Returns:
        (video_hat (T, H, W, 3), z0 (T, C, h, w))
    """
    shape = (denoiser.frames, codec.channels, codec.latent_size, codec.latent_size)
    z_start = initial_noise(seed, shape) if z_start is None else np.asarray(z_start, dtype=np.float32)
    obs_latent = codec.encode(obs[None])
    z0 = sample_latents(denoiser, schedule, obs_latent, np.array([task_id]), z_start[None], [seed],
                        deterministic)[0]
    return codec.decode(z0), z0


def gather_features(taps: List[Tensor], size: int) -> Tensor:
    """Resize every tap to size × size and concatenate on channels: (B, T, ΣC_l, size, size)."""
    return ta.concat([ta.interpolate_bilinear(tap, (size, size)) for tap in taps], axis=2)


def one_step_features_batch(denoiser: VideoDenoiser, codec: PatchCodec, schedule: NoiseSchedule,
                            obs: np.ndarray, task_ids: np.ndarray, z_start: np.ndarray,
                            size: int) -> Tensor:
    """One denoiser evaluation at s = S on (B, ...) inputs; returns (B, T, C_Σ, size, size)."""
    steps = np.full(obs.shape[0], schedule.steps)
    with ta.no_grad():
        _, taps = denoiser(Tensor(z_start), steps, codec.encode(obs), task_ids)
        return gather_features(taps, size)


def one_step_features(denoiser: VideoDenoiser, codec: PatchCodec, schedule: NoiseSchedule, obs: np.ndarray,
                      task_id: int, seed: int, size: int = 8) -> Tensor:
    """Raw one-step features F (T, C_Σ, size, size) for one observation, z_S drawn from `seed`."""
    shape = (denoiser.frames, codec.channels, codec.latent_size, codec.latent_size)
    z_start = initial_noise(seed, shape)
    features = one_step_features_batch(denoiser, codec, schedule, obs[None], np.array([task_id]),
                                       z_start[None], size)
    return ta.reshape(features, features.shape[1:])
