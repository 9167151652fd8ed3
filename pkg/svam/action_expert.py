#!/usr/bin/env python3
"""
Action Expert
Holistic context assembly, latent-query token condensation, the action-chunk
diffusion policy, stage-3 training over a precomputed context bank, and the
closed-loop controller that runs one backbone pass per action chunk.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from svam import nn
from svam import tensor_autograd as ta
from svam.config import RunConfig
from svam.decouplers import (BRANCHES, Decoupler, ForesightBundle, bank_foresight, predict_foresight,
                             reference_anchor, sample_seed)
from svam.errors import ConfigError, ShapeError, SvamError
from svam.tensor_autograd import AdamState, Tensor, rng_stream
from svam.video_diffusion import (NoiseSchedule, PatchCodec, VideoDenoiser, initial_noise, latent_shape,
                                  make_noise_schedule, one_step_features_batch, reverse_process)
from svam.world_sim import ACTION_DIM, Action, EpisodeSet, TabletopWorld

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_geo", "no_sem", "gt_targets", "no_uniperceiver", "no_raw_feature", "raw_only")


def check_variant(variant: str):
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant '{variant}' (choose from {', '.join(VARIANTS)})")


def uses_decouplers(variant: str) -> bool:
    return variant != "raw_only"


# ---------------------------------------------------------------------------
# Context
# ---------------------------------------------------------------------------

def context_channels(config: RunConfig, variant: str = "full") -> int:
    """C_hol for a variant: geo + sem + raw features, minus dropped components."""
    check_variant(variant)
    foresight = config.decouplers.geo_channels + config.decouplers.sem_channels
    if variant == "raw_only":
        return config.feature_channels
    if variant == "no_raw_feature":
        return foresight
    return foresight + config.feature_channels


def build_context(bundle: ForesightBundle, variant: str = "full") -> Tensor:
    """
    Concatenate (geo, sem, F) on channels, in that order.

    no_geo / no_sem zero their slice; no_raw_feature drops F; raw_only keeps F alone.
    """
    check_variant(variant)
    if variant == "raw_only":
        return bundle.features
    geo = ta.zeros_like(bundle.geo) if variant == "no_geo" else bundle.geo
    sem = ta.zeros_like(bundle.sem) if variant == "no_sem" else bundle.sem
    if variant == "no_raw_feature":
        return ta.concat([geo, sem], axis=2)
    return ta.concat([geo, sem, bundle.features], axis=2)


def context_tokens(context: Tensor) -> Tensor:
    """(B, T, C, h, w) -> (B, T*h*w, C)."""
    b, t, c, h, w = context.shape
    return ta.reshape(nn.volume_to_tokens(context), (b, t * h * w, c))


@dataclass
class ActionNormalizer:
    """Per-dimension dataset statistics for the diffusion space of actions."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, actions: np.ndarray, floor: float = 1e-3) -> "ActionNormalizer":
        flat = np.asarray(actions, dtype=np.float64).reshape(-1, actions.shape[-1])
        return cls(mean=flat.mean(axis=0), std=np.maximum(flat.std(axis=0), floor))

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return ((actions - self.mean) / self.std).astype(np.float32)

    def denormalize(self, actions: np.ndarray) -> np.ndarray:
        return actions * self.std + self.mean


# ---------------------------------------------------------------------------
# Condensation
# ---------------------------------------------------------------------------

class UniPerceiver(nn.Module):
    """
    N learnable queries attend to the positional-encoded context tokens, then
    to each other, then pass an FFN; residual + LayerNorm around each.
    """

    def __init__(self, context_channels: int, n_tokens: int, queries: int, width: int, heads: int,
                 mlp_ratio: int, rng: np.random.Generator):
        self.n_tokens = n_tokens
        self.pos = nn.positional_table((n_tokens, context_channels), rng)
        self.kv_proj = nn.Linear(context_channels, width, rng)
        self.queries = nn.Parameter(rng.normal(0.0, 1.0, size=(queries, width)))
        self.cross = nn.MultiHeadAttention(width, heads, rng)
        self.norm_cross = nn.LayerNorm(width)
        self.self_attn = nn.MultiHeadAttention(width, heads, rng)
        self.norm_self = nn.LayerNorm(width)
        self.ffn = nn.FeedForward(width, mlp_ratio, rng)
        self.norm_ffn = nn.LayerNorm(width)

    def forward(self, context: Tensor) -> Tensor:
        """(B, T, C_hol, h, w) -> (B, N, C_agg)."""
        tokens = context_tokens(context)
        if tokens.shape[1] != self.n_tokens:
            raise ShapeError("uni_perceiver", f"{self.n_tokens} context tokens", tokens.shape[1])
        kv = self.kv_proj(tokens + self.pos)
        b = tokens.shape[0]
        q = ta.broadcast_to(self.queries, (b,) + self.queries.shape)
        x = self.norm_cross(q + self.cross(q, context=kv))
        x = self.norm_self(x + self.self_attn(x))
        return self.norm_ffn(x + self.ffn(x))

    @property
    def cross_weights(self) -> Optional[np.ndarray]:
        """(B, heads, N, n_tokens) weights of the latest cross-attention."""
        return self.cross.last_weights


class MeanPoolCondenser(nn.Module):
    """Parameter-free stand-in: token mean, zero-padded or truncated to C_agg, repeated N times."""

    def __init__(self, queries: int, width: int):
        self.queries = queries
        self.width = width

    def forward(self, context: Tensor) -> Tensor:
        pooled = ta.mean(context_tokens(context), axis=1, keepdims=True)
        # rectangular identity: zero-pads or truncates channels to the query width
        pooled = ta.matmul(pooled, Tensor(np.eye(pooled.shape[-1], self.width)))
        return ta.repeat(pooled, self.queries, axis=1)

    @property
    def cross_weights(self) -> Optional[np.ndarray]:
        return None


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------

class PolicyBlock(nn.Module):
    """Pre-norm self-attention over action tokens, cross-attention to the condition tokens, MLP."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, context_dim: int, rng: np.random.Generator):
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = nn.MultiHeadAttention(width, heads, rng)
        self.norm_cross = nn.LayerNorm(width)
        self.cross = nn.MultiHeadAttention(width, heads, rng, context_dim=context_dim)
        self.norm_mlp = nn.LayerNorm(width)
        self.mlp = nn.FeedForward(width, mlp_ratio, rng)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        x = x + self.self_attn(self.norm_self(x))
        x = x + self.cross(self.norm_cross(x), context=context)
        return x + self.mlp(self.norm_mlp(x))


class PolicyNet(nn.Module):
    """ε-prediction over a chunk of noisy normalized actions."""

    def __init__(self, config: RunConfig, rng: np.random.Generator):
        policy = config.policy
        self.chunk = policy.chunk
        self.n_steps = policy.steps
        self.width = policy.width
        n_tasks = max(config.world.tasks) + 1
        self.in_proj = nn.Linear(ACTION_DIM, policy.width, rng)
        self.pos = nn.positional_table((policy.chunk, policy.width), rng)
        self.step_proj = nn.Linear(policy.width, policy.width, rng)
        self.task_table = nn.Parameter(rng.normal(0.0, 1.0, size=(n_tasks, policy.width)))
        self.blocks = [PolicyBlock(policy.width, policy.heads, policy.mlp_ratio, policy.width, rng)
                       for _ in range(policy.blocks)]
        self.head_norm = nn.LayerNorm(policy.width)
        self.head = nn.Linear(policy.width, ACTION_DIM, rng, init_scale=0.05)
        self._calls = 0

    @property
    def calls(self) -> int:
        return self._calls

    def forward(self, a_j: Tensor, steps, f_agg: Tensor, task_ids) -> Tensor:
        """
        Args:
            a_j: (B, chunk, 3) noisy normalized actions
            steps: (B,) policy diffusion steps in 1..J
            f_agg: (B, N, C_agg) condensed context
            task_ids: (B,) task ids; their embedding E joins f_agg as token N+1

        Returns:
            (B, chunk, 3) predicted noise
        """
        steps = np.atleast_1d(np.asarray(steps, dtype=np.int64))
        task_ids = np.atleast_1d(np.asarray(task_ids, dtype=np.int64))
        if steps.min() < 1 or steps.max() > self.n_steps:
            raise SvamError(f"policy step outside 1..{self.n_steps}: {steps.tolist()}")
        if a_j.shape[1:] != (self.chunk, ACTION_DIM):
            raise ShapeError("policy_denoise", (self.chunk, ACTION_DIM), a_j.shape[1:])
        self._calls += 1
        b = a_j.shape[0]
        task = ta.reshape(ta.take_rows(self.task_table, task_ids), (b, 1, self.width))
        context = ta.concat([f_agg, task], axis=1)
        step = self.step_proj(Tensor(nn.sinusoidal_embedding(steps, self.width)))
        x = self.in_proj(a_j) + self.pos + ta.reshape(step, (b, 1, self.width))
        for block in self.blocks:
            x = block(x, context)
        return self.head(self.head_norm(x))


class ActionExpert(nn.Module):
    """Condenser + policy + action statistics for one ablation variant."""

    def __init__(self, config: RunConfig, variant: str, rng: np.random.Generator):
        check_variant(variant)
        policy = config.policy
        self.variant = variant
        n_tokens = config.vdm.frames * config.vdm.feature_size ** 2
        if variant == "no_uniperceiver":
            self.condenser = MeanPoolCondenser(policy.queries, policy.width)
        else:
            self.condenser = UniPerceiver(context_channels(config, variant), n_tokens, policy.queries,
                                          policy.width, policy.heads, policy.mlp_ratio, rng)
        self.policy = PolicyNet(config, rng)
        self.normalizer: Optional[ActionNormalizer] = None

    def require_normalizer(self) -> ActionNormalizer:
        if self.normalizer is None:
            raise SvamError("action normalization statistics are missing")
        return self.normalizer


def build_action_expert(config: RunConfig, variant: str, seed: int) -> Tuple[ActionExpert, NoiseSchedule]:
    expert = ActionExpert(config, variant, rng_stream(seed, "init", "action_expert", variant))
    p = config.policy
    return expert, make_noise_schedule(p.steps, p.beta_start, p.beta_end, p.base_steps)


def policy_loss(expert: ActionExpert, context: Tensor, actions: np.ndarray, task_ids: np.ndarray,
                schedule: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """ε-prediction loss on normalized action chunks (B, chunk, 3)."""
    a0 = expert.require_normalizer().normalize(actions)
    steps = rng.integers(1, schedule.steps + 1, size=a0.shape[0])
    noise = rng.standard_normal(a0.shape).astype(np.float32)
    a_j = schedule.diffuse(a0, noise, steps)
    pred = expert.policy(Tensor(a_j), steps, expert.condenser(context), task_ids)
    return ta.mse(pred, Tensor(noise))


def policy_step(expert: ActionExpert, optimizer: AdamState, context: Tensor, actions: np.ndarray,
                task_ids: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator) -> float:
    params = expert.parameters()
    ta.zero_grads(params.values())
    loss = policy_loss(expert, context, actions, task_ids, schedule, rng)
    loss.backward()
    ta.adam_step(params, optimizer)
    return loss.item()


def denoise_actions(eps_fn, schedule: NoiseSchedule, seed: int, shape: Tuple[int, ...],
                    deterministic: bool = False) -> np.ndarray:
    """Reverse process over normalized action chunks from the seed's a_J draw."""
    start = rng_stream(seed, "action", "a_J").standard_normal(shape)
    return reverse_process(eps_fn, start, schedule,
                           lambda j: rng_stream(seed, "action", j).standard_normal(shape),
                           deterministic, site="sample_actions")


def sample_actions(expert: ActionExpert, context: Tensor, task_id: int, seed: int, schedule: NoiseSchedule,
                   max_delta: float = 0.1, deterministic: bool = False) -> np.ndarray:
    """
    Draw one action chunk for a single (1, T, C_hol, h, w) context.

    Returns:
        (chunk, 3) denormalized actions, dx/dy clipped to ±max_delta and dgrip to [-1, 1]
    """
    normalizer = expert.require_normalizer()
    shape = (1, expert.policy.chunk, ACTION_DIM)
    with ta.no_grad():
        f_agg = expert.condenser(context)

        def eps_fn(a, j):
            return expert.policy(Tensor(a), [j], f_agg, [task_id]).data

        a0 = denoise_actions(eps_fn, schedule, seed, shape, deterministic)
    actions = normalizer.denormalize(a0[0])
    actions[:, :2] = np.clip(actions[:, :2], -max_delta, max_delta)
    actions[:, 2] = np.clip(actions[:, 2], -1.0, 1.0)
    return actions.astype(np.float32)


def attention_center(weights: Optional[np.ndarray], frames: int, size: int) -> Optional[List[int]]:
    """[t, row, col] of the context token with the largest head- and query-averaged weight."""
    if weights is None:
        return None
    averaged = weights.reshape(-1, weights.shape[-1]).mean(axis=0)
    t, r, c = np.unravel_index(int(averaged.argmax()), (frames, size, size))
    return [int(t), int(r), int(c)]


# ---------------------------------------------------------------------------
# Stage 3 context bank and training
# ---------------------------------------------------------------------------

@dataclass
class ContextBank:
    """Frozen-module outputs for every (episode, chunk start) plus the expert chunk that follows."""

    features: np.ndarray
    geo: Optional[np.ndarray]
    sem: Optional[np.ndarray]
    actions: np.ndarray
    task_ids: np.ndarray
    geo_channels: int = 4
    sem_channels: int = 8

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def bundle(self, index: np.ndarray) -> ForesightBundle:
        """Foresight bundle of the given rows; absent branches come back as zeros."""
        features = self.features[index]
        t, h, w = features.shape[1], features.shape[3], features.shape[4]

        def part(values: Optional[np.ndarray], channels: int) -> Tensor:
            if values is None:
                return Tensor(np.zeros((len(index), t, channels, h, w)))
            return Tensor(values[index])

        return ForesightBundle(geo=part(self.geo, self.geo_channels), sem=part(self.sem, self.sem_channels),
                               features=Tensor(features))


def action_chunk(actions: np.ndarray, start: int, chunk: int) -> np.ndarray:
    """Expert actions start..start+chunk, zero-padded past the episode end."""
    out = np.zeros((chunk, actions.shape[-1]), dtype=np.float32)
    part = actions[start:start + chunk]
    out[:len(part)] = part
    return out


def build_context_bank(denoiser: VideoDenoiser, codec: PatchCodec, schedule: NoiseSchedule,
                       decouplers: Optional[Dict[str, Decoupler]], dataset: EpisodeSet,
                       config: RunConfig) -> ContextBank:
    """Run the frozen backbone (and decouplers) once per (episode, chunk start)."""
    size = config.vdm.feature_size
    chunk = config.policy.chunk
    starts = np.arange(0, dataset.episode_length - 1, config.policy.context_stride)
    episodes = np.repeat(np.arange(len(dataset)), len(starts))
    anchors = np.tile(starts, len(dataset))
    features, geo, sem = [], [], []
    step = config.training.target_batch
    for begin in tqdm(range(0, len(episodes), step), desc="stage3 context", disable=None):
        rows = np.arange(begin, min(begin + step, len(episodes)))
        obs = dataset.frames[episodes[rows], anchors[rows]]
        z = np.stack([initial_noise(sample_seed(config.training.seed, int(episodes[i]), int(anchors[i])),
                                    latent_shape(config)) for i in rows])
        feats = one_step_features_batch(denoiser, codec, schedule, obs,
                                        dataset.task_ids[episodes[rows]], z, size).data
        features.append(feats)
        if decouplers is not None:
            ref = {b: np.stack([reference_anchor(o, b, size, config.world.n_classes).data for o in obs])
                   for b in BRANCHES}
            pred = bank_foresight(decouplers, feats, ref)
            geo.append(pred["geo"])
            sem.append(pred["sem"])

    actions = np.stack([action_chunk(dataset.actions[e], int(a), chunk) for e, a in zip(episodes, anchors)])
    bank = ContextBank(features=np.concatenate(features),
                       geo=np.concatenate(geo) if geo else None,
                       sem=np.concatenate(sem) if sem else None,
                       actions=actions, task_ids=dataset.task_ids[episodes],
                       geo_channels=config.decouplers.geo_channels,
                       sem_channels=config.decouplers.sem_channels)
    logger.info(f"Stage 3 context bank: {len(bank)} samples")
    return bank


def train_policy(expert: ActionExpert, bank: ContextBank, config: RunConfig, schedule: NoiseSchedule,
                 optimizer: AdamState, steps: int,
                 losses: Optional[List[Tuple[int, float]]] = None) -> List[Tuple[int, float]]:
    """Stage 3: condenser, policy and task embeddings train; everything upstream is frozen."""
    losses = list(losses or [])
    start = optimizer.step_count
    seed = config.training.seed
    for step in tqdm(range(start, steps), desc="stage3", initial=start, total=steps, disable=None):
        rng = rng_stream(seed, "stage3", "step", step)
        index = rng.integers(0, len(bank), size=config.training.batch)
        context = build_context(bank.bundle(index), expert.variant)
        losses.append((step, policy_step(expert, optimizer, context, bank.actions[index], bank.task_ids[index],
                                         schedule, rng)))
    if losses:
        logger.info(f"Stage 3 ({expert.variant}) loss {losses[0][1]:.4f} -> {losses[-1][1]:.4f}")
    return losses


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

@dataclass
class ShortcutPolicy:
    """Everything one control step needs: frozen backbone, decouplers, trained expert."""

    config: RunConfig
    denoiser: VideoDenoiser
    codec: PatchCodec
    video_schedule: NoiseSchedule
    decouplers: Optional[Dict[str, Decoupler]]
    expert: ActionExpert
    action_schedule: NoiseSchedule

    def perceive(self, obs: np.ndarray, task_id: int, seed: int) -> Tuple[ForesightBundle, Dict[str, float]]:
        """One-step features plus decoupled foresight for one frame, with per-stage wall times."""
        size = self.config.vdm.feature_size
        t0 = time.perf_counter()
        z = initial_noise(seed, latent_shape(self.config))[None]
        features = one_step_features_batch(self.denoiser, self.codec, self.video_schedule, obs[None],
                                           np.array([task_id]), z, size)
        t1 = time.perf_counter()
        b, t, _, h, w = features.shape
        if self.decouplers is None:
            geo = Tensor(np.zeros((b, t, self.config.decouplers.geo_channels, h, w)))
            sem = Tensor(np.zeros((b, t, self.config.decouplers.sem_channels, h, w)))
        else:
            anchors = {branch: ta.reshape(reference_anchor(obs, branch, size, self.config.world.n_classes),
                                          (1, 1, -1, h, w)) for branch in BRANCHES}
            with ta.no_grad():
                foresight = predict_foresight(self.decouplers, features, anchors)
            geo, sem = foresight["geo"], foresight["sem"]
        t2 = time.perf_counter()
        timings = {"backbone": 1000.0 * (t1 - t0), "decouplers": 1000.0 * (t2 - t1)}
        return ForesightBundle(geo=geo, sem=sem, features=features), timings

    def act(self, obs: np.ndarray, task_id: int, seed: int) -> Tuple[np.ndarray, Dict]:
        bundle, timings = self.perceive(obs, task_id, seed)
        t0 = time.perf_counter()
        context = build_context(bundle, self.expert.variant)
        actions = sample_actions(self.expert, context, task_id, seed, self.action_schedule,
                                 self.config.world.max_delta)
        timings["expert"] = 1000.0 * (time.perf_counter() - t0)
        center = attention_center(self.expert.condenser.cross_weights, self.config.vdm.frames,
                                  self.config.vdm.feature_size)
        return actions, {"wall_ms": timings, "attention_center": center}


@dataclass
class RolloutResult:
    success: bool
    steps: int
    denoiser_calls: int
    trace: List[Dict] = field(default_factory=list)


def closed_loop_rollout(stack: ShortcutPolicy, world: TabletopWorld, env_seed: int, task_id: int,
                        max_steps: int = 64) -> RolloutResult:
    """
    Render, plan one chunk from a single backbone pass, execute it, repeat until
    success or `max_steps` actions have run.
    """
    state = world.reset(env_seed, task_id)
    chunk_len = stack.config.policy.chunk
    calls_before = stack.denoiser.calls
    steps = 0
    trace: List[Dict] = []
    chunk_index = 0
    while steps < max_steps and not world.is_success(state):
        obs = world.render(state)
        seed = int(rng_stream(env_seed, "rollout", task_id, chunk_index).integers(0, 2 ** 63))
        actions, info = stack.act(obs, task_id, seed)
        chunk = np.asarray(actions[:chunk_len], dtype=np.float64)
        executed = 0
        for row in chunk:
            if steps >= max_steps or world.is_success(state):
                break
            state = world.step(state, Action.from_array(row, world.config.max_delta))
            executed += 1
            steps += 1
        trace.append({
            "chunk_index": chunk_index,
            "wall_ms": info["wall_ms"],
            "actions": chunk.tolist(),
            "executed": executed,
            "success_so_far": world.is_success(state),
            "attention_center": info["attention_center"],
        })
        chunk_index += 1

    calls = stack.denoiser.calls - calls_before
    if calls != math.ceil(steps / chunk_len):
        raise SvamError(f"rollout made {calls} backbone passes for {steps} steps")
    return RolloutResult(success=world.is_success(state), steps=steps, denoiser_calls=calls, trace=trace)
