#!/usr/bin/env python3
"""
Pipeline CLI
Dataset generation, the three training stages, closed-loop evaluation,
ablations, the latency benchmark and gradient checks. Every command reads a
RunConfig and writes its artifacts under the run's output directory.

Usage:
    python -m svam gen-data --config config/smoke.json
    python -m svam train --stage 1 --config config/smoke.json
    python -m svam eval --config config/smoke.json
    python -m svam ablate --variant raw_only --config config/smoke.json
"""

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from svam import nn
from svam import tensor_autograd as ta
from svam.action_expert import (VARIANTS, ActionNormalizer, PolicyNet, ShortcutPolicy, UniPerceiver,
                                build_action_expert, build_context, build_context_bank, check_variant,
                                closed_loop_rollout, sample_actions, train_policy, uses_decouplers)
from svam.checkpoint import Checkpoint, load_checkpoint
from svam.config import RunConfig, config_from_dict, load_config, save_config
from svam.decouplers import (BRANCHES, Decoupler, TeacherCache, build_decouplers, build_distillation_bank,
                             model_hash, predict_foresight, reference_anchor, train_decouplers)
from svam.errors import CheckpointMismatchError, ConfigError, NumericalError, SvamError
from svam.tensor_autograd import AdamState, Tensor, rng_stream
from svam.video_diffusion import (VideoDenoiser, build_video_model, ddpm_sample, initial_noise, latent_shape,
                                  one_step_features_batch, train_vdm)
from svam.world_sim import ACTION_DIM, TabletopWorld, generate_dataset, read_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_NUMERICAL = 4

BOOTSTRAP_RESAMPLES = 2000
SUMMARY_WINDOW = 20

# Shapes for gradient checks: two frames, 4×4 latents, 2×2 feature maps.
MICRO_CONFIG = {
    "world": {"frame_size": 16, "episode_length": 16},
    "vdm": {"frames": 2, "latent_channels": 4, "tap_channels": [8, 8, 4], "base_width": 8,
            "bottleneck_width": 8, "heads": 2, "steps": 4, "feature_size": 2},
    "decouplers": {"blocks": 1, "hidden": 8, "heads": 2, "pool": 8},
    "policy": {"queries": 4, "width": 8, "heads": 2, "blocks": 1, "steps": 4},
}


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, CheckpointMismatchError):
        return EXIT_CHECKPOINT
    if isinstance(error, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_FAILURE


# ---------------------------------------------------------------------------
# Paths and persistence helpers
# ---------------------------------------------------------------------------

def variant_config(config: RunConfig, variant: str) -> RunConfig:
    """Copy of the config as a variant trains it; gt_targets distills from ground-truth frames."""
    check_variant(variant)
    cfg = copy.deepcopy(config)
    if variant == "gt_targets":
        cfg.decouplers.mode = "gt"
    return cfg


def checkpoint_path(config: RunConfig, stage: int, variant: str = "full") -> Path:
    if stage == 1:
        return config.path("stage1.ckpt")
    if stage == 2:
        mode = variant_config(config, variant).decouplers.mode
        return config.path("stage2.ckpt" if mode == "self" else f"stage2_{mode}.ckpt")
    if stage == 3:
        return config.path("stage3.ckpt" if variant == "full" else f"stage3_{variant}.ckpt")
    raise ConfigError(f"unknown stage {stage}")


def loss_csv_path(config: RunConfig, stage: int, variant: str = "full", branch: Optional[str] = None) -> Path:
    name = f"stage{stage}"
    if stage == 2 and variant_config(config, variant).decouplers.mode == "gt":
        name += "_gt"
    if stage == 3 and variant != "full":
        name += f"_{variant}"
    if branch:
        name += f"_{branch}"
    return config.path(f"{name}_loss.csv")


def write_loss_csv(path: Path, losses: Sequence[Tuple[int, float]]):
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(losses), columns=["step", "loss"]).to_csv(path, index=False)


def read_loss_csv(path: Path, until_step: int) -> List[Tuple[int, float]]:
    if not path.exists():
        return []
    frame = pd.read_csv(path, float_precision="round_trip")
    frame = frame[frame["step"] < until_step]
    return [(int(s), float(v)) for s, v in zip(frame["step"], frame["loss"])]


def write_json(path: Path, payload: Dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def milestones(start: int, total: int, every: int) -> List[int]:
    """Step counts at which a stage saves: every `every` steps and at `total`."""
    if start >= total:
        return []
    points = list(range((start // every + 1) * every, total, every)) if every > 0 else []
    return points + [total]


def loss_summary(losses: Sequence[Tuple[int, float]]) -> Dict[str, float]:
    values = [v for _, v in losses]
    if not values:
        return {"initial": float("nan"), "final": float("nan"), "drop": 0.0}
    window = min(SUMMARY_WINDOW, len(values))
    initial = float(np.mean(values[:window]))
    final = float(np.mean(values[-window:]))
    return {"initial": initial, "final": final, "drop": 1.0 - final / initial if initial > 0 else 0.0}


def load_dataset(config: RunConfig):
    return read_dataset(config.path(config.paths.dataset))


def make_optimizer(module: nn.Module, config: RunConfig) -> AdamState:
    return AdamState.for_parameters(module.parameters(), lr=config.training.lr)


# ---------------------------------------------------------------------------
# Stage loading
# ---------------------------------------------------------------------------

def load_video_stage(config: RunConfig, allow_untrained: bool = False):
    denoiser, codec, schedule = build_video_model(config, config.training.seed)
    path = checkpoint_path(config, 1)
    if allow_untrained and not path.exists():
        logger.warning(f"No stage-1 checkpoint at {path}; using an untrained video model")
        return denoiser, codec, schedule
    load_checkpoint(path, expected_hash=config.stage_hash(1)).load_module("vdm", denoiser)
    return denoiser, codec, schedule


def load_decoupler_stage(config: RunConfig, variant: str = "full",
                         allow_untrained: bool = False) -> Dict[str, Decoupler]:
    cfg = variant_config(config, variant)
    decouplers = build_decouplers(cfg, cfg.training.seed)
    path = checkpoint_path(cfg, 2, variant)
    if allow_untrained and not path.exists():
        logger.warning(f"No stage-2 checkpoint at {path}; using untrained decouplers")
        return decouplers
    checkpoint = load_checkpoint(path, expected_hash=cfg.stage_hash(2))
    for branch in BRANCHES:
        checkpoint.load_module(f"decoupler.{branch}", decouplers[branch])
    return decouplers


def load_expert_stage(config: RunConfig, variant: str = "full"):
    cfg = variant_config(config, variant)
    expert, schedule = build_action_expert(cfg, variant, cfg.training.seed)
    checkpoint = load_checkpoint(checkpoint_path(cfg, 3, variant), expected_hash=cfg.stage_hash(3))
    checkpoint.load_module("expert", expert)
    try:
        expert.normalizer = ActionNormalizer(mean=checkpoint.tensors["normalizer.mean"].astype(np.float64),
                                             std=checkpoint.tensors["normalizer.std"].astype(np.float64))
    except KeyError:
        raise CheckpointMismatchError("stage-3 checkpoint lacks action normalization statistics")
    return expert, schedule


def build_stack(config: RunConfig, variant: str = "full", untrained_policy: bool = False) -> ShortcutPolicy:
    """Assemble the closed-loop controller from stage checkpoints."""
    cfg = variant_config(config, variant)
    denoiser, codec, video_schedule = load_video_stage(cfg, allow_untrained=untrained_policy)
    decouplers = load_decoupler_stage(cfg, variant, allow_untrained=untrained_policy) \
        if uses_decouplers(variant) else None
    if untrained_policy:
        expert, action_schedule = build_action_expert(cfg, variant, cfg.training.seed)
        dataset_file = cfg.path(cfg.paths.dataset)
        if dataset_file.exists():
            expert.normalizer = ActionNormalizer.fit(read_dataset(dataset_file).actions)
        else:
            expert.normalizer = ActionNormalizer(mean=np.zeros(ACTION_DIM), std=np.ones(ACTION_DIM))
    else:
        expert, action_schedule = load_expert_stage(cfg, variant)
    return ShortcutPolicy(config=cfg, denoiser=denoiser, codec=codec, video_schedule=video_schedule,
                          decouplers=decouplers, expert=expert, action_schedule=action_schedule)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(config: RunConfig, n_episodes: Optional[int] = None) -> Path:
    """Write the expert demonstration file for the configured dataset tasks."""
    world = TabletopWorld(config.world)
    path = config.path(config.paths.dataset)
    n = n_episodes or config.world.n_episodes
    start = time.perf_counter()
    generate_dataset(world, n, config.world.dataset_tasks, config.training.seed, path)
    logger.info(f"Generated {n} episodes in {time.perf_counter() - start:.1f}s -> {path}")
    save_config(config, config.path("config.json"))
    return path


def _train_stage1(config: RunConfig, resume: bool) -> Path:
    dataset = load_dataset(config)
    denoiser, codec, schedule = build_video_model(config, config.training.seed)
    optimizer = make_optimizer(denoiser, config)
    path = checkpoint_path(config, 1)
    csv = loss_csv_path(config, 1)
    losses: List[Tuple[int, float]] = []
    if resume:
        checkpoint = load_checkpoint(path, expected_hash=config.stage_hash(1))
        checkpoint.load_module("vdm", denoiser)
        checkpoint.load_optimizer("vdm", optimizer)
        losses = read_loss_csv(csv, optimizer.step_count)
        logger.info(f"Resuming stage 1 at step {optimizer.step_count}")

    def save():
        checkpoint = Checkpoint(config_hash=config.stage_hash(1))
        checkpoint.add_module("vdm", denoiser)
        checkpoint.add_optimizer("vdm", optimizer)
        checkpoint.save(path)
        write_loss_csv(csv, losses)

    for target in milestones(optimizer.step_count, config.training.vdm_steps, config.training.checkpoint_every):
        losses = train_vdm(denoiser, codec, schedule, dataset, config, optimizer, target, losses)
        save()
    if not path.exists():
        save()

    summary = loss_summary(losses)
    summary["gate_passed"] = bool(summary["final"] < config.gates.vdm_loss)
    write_json(config.path("stage1_summary.json"), summary)
    return path


def _train_stage2(config: RunConfig, variant: str, resume: bool) -> Path:
    if not uses_decouplers(variant):
        raise ConfigError(f"variant '{variant}' has no stage 2")
    cfg = variant_config(config, variant)
    mode = cfg.decouplers.mode
    denoiser, codec, schedule = load_video_stage(cfg)
    dataset = load_dataset(cfg)
    frozen = denoiser.checksum()
    decouplers = build_decouplers(cfg, cfg.training.seed)
    optimizers = {b: make_optimizer(decouplers[b], cfg) for b in BRANCHES}
    path = checkpoint_path(cfg, 2, variant)
    csvs = {b: loss_csv_path(cfg, 2, variant, b) for b in BRANCHES}
    losses: Dict[str, List[Tuple[int, float]]] = {b: [] for b in BRANCHES}
    if resume:
        checkpoint = load_checkpoint(path, expected_hash=cfg.stage_hash(2))
        for b in BRANCHES:
            checkpoint.load_module(f"decoupler.{b}", decouplers[b])
            checkpoint.load_optimizer(b, optimizers[b])
            losses[b] = read_loss_csv(csvs[b], optimizers[b].step_count)
        logger.info(f"Resuming stage 2 at step {optimizers['geo'].step_count}")

    logger.info(f"Stage 2 distillation mode: {mode}")
    cache = None
    if mode == "self":
        size = cfg.world.frame_size
        cache = TeacherCache(cfg.path(cfg.paths.teacher_cache), model_hash(denoiser),
                             (cfg.vdm.frames, size, size, 3))
    bank = build_distillation_bank(denoiser, codec, schedule, dataset, cfg, mode, cache)

    def save():
        checkpoint = Checkpoint(config_hash=cfg.stage_hash(2))
        for b in BRANCHES:
            checkpoint.add_module(f"decoupler.{b}", decouplers[b])
            checkpoint.add_optimizer(b, optimizers[b])
            write_loss_csv(csvs[b], losses[b])
        checkpoint.save(path)

    for target in milestones(optimizers["geo"].step_count, cfg.training.decoupler_steps,
                             cfg.training.checkpoint_every):
        losses = train_decouplers(decouplers, bank, cfg, optimizers, target, losses)
        save()
    if not path.exists():
        save()

    if denoiser.checksum() != frozen:
        raise SvamError("stage 2 modified the frozen video model")
    summary = {b: loss_summary(losses[b]) for b in BRANCHES}
    summary["mode"] = mode
    summary["teacher_generated"] = bank.teacher_generated
    summary["teacher_cache_verified"] = bank.teacher_cache_verified
    summary["gate_passed"] = all(summary[b]["drop"] >= cfg.gates.distill_drop for b in BRANCHES)
    write_json(cfg.path(path.stem + "_summary.json"), summary)
    return path


def _train_stage3(config: RunConfig, variant: str, resume: bool) -> Path:
    cfg = variant_config(config, variant)
    denoiser, codec, video_schedule = load_video_stage(cfg)
    decouplers = load_decoupler_stage(cfg, variant) if uses_decouplers(variant) else None
    dataset = load_dataset(cfg)
    frozen = [denoiser.checksum()] + ([d.checksum() for d in decouplers.values()] if decouplers else [])

    expert, schedule = build_action_expert(cfg, variant, cfg.training.seed)
    expert.normalizer = ActionNormalizer.fit(dataset.actions)
    optimizer = make_optimizer(expert, cfg)
    path = checkpoint_path(cfg, 3, variant)
    csv = loss_csv_path(cfg, 3, variant)
    losses: List[Tuple[int, float]] = []
    if resume:
        checkpoint = load_checkpoint(path, expected_hash=cfg.stage_hash(3))
        checkpoint.load_module("expert", expert)
        checkpoint.load_optimizer("expert", optimizer)
        losses = read_loss_csv(csv, optimizer.step_count)
        logger.info(f"Resuming stage 3 ({variant}) at step {optimizer.step_count}")

    bank = build_context_bank(denoiser, codec, video_schedule, decouplers, dataset, cfg)

    def save():
        checkpoint = Checkpoint(config_hash=cfg.stage_hash(3))
        checkpoint.add_module("expert", expert)
        checkpoint.add_optimizer("expert", optimizer)
        checkpoint.tensors["normalizer.mean"] = expert.normalizer.mean.astype(np.float32)
        checkpoint.tensors["normalizer.std"] = expert.normalizer.std.astype(np.float32)
        checkpoint.save(path)
        write_loss_csv(csv, losses)

    for target in milestones(optimizer.step_count, cfg.training.policy_steps, cfg.training.checkpoint_every):
        losses = train_policy(expert, bank, cfg, schedule, optimizer, target, losses)
        save()
    if not path.exists():
        save()

    after = [denoiser.checksum()] + ([d.checksum() for d in decouplers.values()] if decouplers else [])
    if after != frozen:
        raise SvamError("stage 3 modified a frozen upstream module")
    summary = loss_summary(losses)
    summary["variant"] = variant
    summary["gate_passed"] = bool(summary["final"] < cfg.gates.policy_loss)
    write_json(cfg.path(path.stem + "_summary.json"), summary)
    return path


def cmd_train(config: RunConfig, stage: int, variant: str = "full", resume: bool = False) -> Path:
    """
    Run one training stage and return its checkpoint path.

    Stages 2 and 3 load their frozen predecessors with hash verification, so a
    missing or incompatible checkpoint stops the run before any training.
    """
    check_variant(variant)
    save_config(config, config.path("config.json"))
    if stage == 1:
        return _train_stage1(config, resume)
    if stage == 2:
        return _train_stage2(config, variant, resume)
    if stage == 3:
        return _train_stage3(config, variant, resume)
    raise ConfigError(f"unknown stage {stage} (expected 1, 2 or 3)")


def _report_name(variant: str, untrained_policy: bool) -> str:
    if untrained_policy:
        return "eval_untrained"
    return "eval" if variant == "full" else f"eval_{variant}"


def cmd_eval(config: RunConfig, n_episodes: Optional[int] = None, n_seeds: Optional[int] = None,
             variant: str = "full", untrained_policy: bool = False) -> Dict:
    """
    Closed-loop success per task, mean ± std over evaluation seeds.

    Returns:
        The report written to <out>/<name>.json; per-episode rows go to the CSV
        and per-chunk timing records to the JSON-lines trace.
    """
    check_variant(variant)
    n_episodes = n_episodes or config.training.eval_episodes
    n_seeds = n_seeds or config.training.eval_seeds
    stack = build_stack(config, variant, untrained_policy)
    world = TabletopWorld(config.world)
    name = _report_name(variant, untrained_policy)

    rows: List[Dict] = []
    trace_path = config.path(f"{name}_trace.jsonl")
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    with open(trace_path, "w", encoding="utf-8") as trace_file:
        for task in config.training.eval_tasks:
            for seed_index in range(n_seeds):
                for episode in tqdm(range(n_episodes), desc=f"eval task {task} seed {seed_index}", disable=None):
                    env_seed = int(rng_stream(config.training.seed, "eval", task, seed_index, episode)
                                   .integers(0, 2 ** 63))
                    result = closed_loop_rollout(stack, world, env_seed, task, config.training.max_rollout_steps)
                    rows.append({"task": task, "seed_index": seed_index, "episode": episode, "env_seed": env_seed,
                                 "success": bool(result.success), "steps": result.steps,
                                 "denoiser_calls": result.denoiser_calls})
                    for record in result.trace:
                        trace_file.write(json.dumps({"task": task, "seed_index": seed_index,
                                                     "episode": episode, **record}) + "\n")

    frame = pd.DataFrame(rows)
    frame.to_csv(config.path(f"{name}.csv"), index=False)
    report = summarize_eval(frame, config, variant, untrained_policy)
    write_json(config.path(f"{name}.json"), report)
    logger.info(f"Evaluation {name}: success {report['overall']['success_mean']:.3f} "
                f"± {report['overall']['success_std']:.3f}")
    return report


def summarize_eval(frame: pd.DataFrame, config: RunConfig, variant: str, untrained_policy: bool) -> Dict:
    def seed_stats(part: pd.DataFrame) -> Dict:
        per_seed = part.groupby("seed_index")["success"].mean().astype(float).tolist()
        return {
            "success_mean": float(np.mean(per_seed)),
            "success_std": float(np.std(per_seed)),
            "per_seed": per_seed,
        }

    tasks = {}
    for task, part in frame.groupby("task"):
        entry = seed_stats(part)
        entry["steps"] = part["steps"].astype(int).tolist()
        tasks[str(task)] = entry
    overall = seed_stats(frame)
    if untrained_policy:
        gate = {"name": "random_success", "passed": overall["success_mean"] < config.gates.random_success}
    else:
        gate = {"name": "full_success", "passed": overall["success_mean"] >= config.gates.full_success}
    return {
        "config_hash": f"{config.stage_hash(3):016x}",
        "seed": config.training.seed,
        "variant": variant,
        "untrained_policy": untrained_policy,
        "episodes_per_seed": int(frame.groupby(["task", "seed_index"]).size().max()),
        "tasks": tasks,
        "overall": overall,
        "gate": gate,
    }


def bootstrap_delta(a: np.ndarray, b: np.ndarray, seed: int = 0) -> Tuple[float, float]:
    """Percentile bootstrap CI (95%) of mean(a) - mean(b) over episodes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = float(a.mean() - b.mean())
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return delta, delta
    kwargs = dict(n_resamples=BOOTSTRAP_RESAMPLES, method="percentile", vectorized=False)
    statistic = lambda x, y: np.mean(x) - np.mean(y)  # noqa: E731
    try:
        result = stats.bootstrap((a, b), statistic, rng=np.random.default_rng(seed), **kwargs)
    except TypeError:
        # scipy < 1.15 spells the generator argument random_state
        result = stats.bootstrap((a, b), statistic, random_state=np.random.default_rng(seed), **kwargs)
    return float(result.confidence_interval.low), float(result.confidence_interval.high)


def cmd_ablate(config: RunConfig, variants: Sequence[str], n_episodes: Optional[int] = None,
               n_seeds: Optional[int] = None) -> Dict:
    """
    Train what each variant needs on top of the shared stage-1 checkpoint and
    evaluate it next to the full model.
    """
    for v in variants:
        check_variant(v)
    if not checkpoint_path(config, 1).exists():
        raise CheckpointMismatchError(f"ablations share one stage-1 checkpoint; none at {checkpoint_path(config, 1)}")
    ordered = ["full"] + [v for v in variants if v != "full"]

    reports: Dict[str, Dict] = {}
    for variant in ordered:
        if uses_decouplers(variant) and not checkpoint_path(config, 2, variant).exists():
            logger.info(f"Ablation {variant}: training stage 2")
            cmd_train(config, 2, variant)
        elif not uses_decouplers(variant):
            logger.info(f"Ablation {variant}: skipping stage 2")
        if not checkpoint_path(config, 3, variant).exists():
            logger.info(f"Ablation {variant}: training stage 3")
            cmd_train(config, 3, variant)
        reports[variant] = cmd_eval(config, n_episodes, n_seeds, variant)

    full = reports["full"]["overall"]["success_mean"]
    matrix = []
    for variant in ordered:
        overall = reports[variant]["overall"]
        matrix.append({"variant": variant, "success_mean": overall["success_mean"],
                       "success_std": overall["success_std"], "delta_vs_full": overall["success_mean"] - full})
    pd.DataFrame(matrix).to_csv(config.path("ablation.csv"), index=False)

    result = {"config_hash": f"{config.stage_hash(3):016x}", "seed": config.training.seed, "matrix": matrix}
    if "raw_only" in reports:
        per_episode = {v: pd.read_csv(config.path(f"{_report_name(v, False)}.csv"))["success"].to_numpy(dtype=float)
                       for v in ("full", "raw_only")}
        low, high = bootstrap_delta(per_episode["full"], per_episode["raw_only"], config.training.seed)
        delta = full - reports["raw_only"]["overall"]["success_mean"]
        result["full_vs_raw_only"] = {
            "delta": delta,
            "ci95": [low, high],
            "gate_passed": bool(delta >= config.gates.ablation_margin),
        }
    write_json(config.path("ablation.json"), result)
    return result


def _median_ms(fn: Callable[[], object], trials: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(trials):
        start = time.perf_counter()
        fn()
        samples.append(1000.0 * (time.perf_counter() - start))
    return float(np.median(samples))


def cmd_bench_latency(config: RunConfig, trials: Optional[int] = None, warmup: Optional[int] = None,
                      untrained: bool = False) -> Dict:
    """
    Median wall time of S-step generation, one-step features, decouplers and the
    action expert, reported as dimensionless ratios.
    """
    trials = trials or config.training.bench_trials
    warmup = config.training.bench_warmup if warmup is None else warmup
    stack = build_stack(config, "full", untrained_policy=untrained)
    raw_stack = copy.copy(stack)
    raw_stack.expert, _ = build_action_expert(config, "raw_only", config.training.seed)
    raw_stack.expert.normalizer = stack.expert.normalizer
    raw_stack.decouplers = None

    world = TabletopWorld(config.world)
    task = config.training.eval_tasks[0]
    obs = world.render(world.reset(config.training.seed, task))
    seed = config.training.seed
    size = config.vdm.feature_size
    bundle, _ = stack.perceive(obs, task, seed)
    raw_bundle, _ = raw_stack.perceive(obs, task, seed)
    h = w = size
    anchors = {b: ta.reshape(reference_anchor(obs, b, size, config.world.n_classes), (1, 1, -1, h, w))
               for b in BRANCHES}
    z = initial_noise(seed, latent_shape(config))[None]

    def one_step():
        return one_step_features_batch(stack.denoiser, stack.codec, stack.video_schedule, obs[None],
                                       np.array([task]), z, size)

    def decouple():
        with ta.no_grad():
            return predict_foresight(stack.decouplers, bundle.features, anchors)

    def expert():
        return sample_actions(stack.expert, build_context(bundle, "full"), task, seed, stack.action_schedule)

    def raw_expert():
        return sample_actions(raw_stack.expert, build_context(raw_bundle, "raw_only"), task, seed,
                              raw_stack.action_schedule)

    timings = {
        "video_generation": _median_ms(lambda: ddpm_sample(stack.denoiser, stack.codec, stack.video_schedule,
                                                           obs, task, seed), trials, warmup),
        "one_step_features": _median_ms(one_step, trials, warmup),
        "decouplers": _median_ms(decouple, trials, warmup),
        "action_expert": _median_ms(expert, trials, warmup),
        "raw_action_expert": _median_ms(raw_expert, trials, warmup),
    }
    one = timings["one_step_features"]
    full_forward = one + timings["decouplers"] + timings["action_expert"]
    baseline_forward = one + timings["raw_action_expert"]
    report = {
        "trials": trials,
        "warmup": warmup,
        "median_ms": timings,
        "sampler_ratio": timings["video_generation"] / one,
        "overhead_fraction": (timings["decouplers"] + timings["action_expert"]) / one,
        "full_forward_ms": full_forward,
        "baseline_forward_ms": baseline_forward,
        "overhead_vs_baseline": full_forward / baseline_forward - 1.0,
        "control_hz": config.policy.chunk / (full_forward / 1000.0),
    }
    report["gates"] = {
        "sampler_ratio": bool(report["sampler_ratio"] >= config.gates.sampler_ratio),
        "overhead": bool(report["overhead_fraction"] < config.gates.overhead),
    }
    write_json(config.path("latency.json"), report)
    logger.info(f"Latency: generation/one-step {report['sampler_ratio']:.1f}x, "
                f"overhead {100 * report['overhead_fraction']:.1f}%, {report['control_hz']:.1f} Hz")
    return report


def micro_config(seed: int) -> RunConfig:
    config = config_from_dict(copy.deepcopy(MICRO_CONFIG))
    config.training.seed = seed
    return config


def gradcheck_blocks(config: RunConfig) -> Dict[str, Tuple[nn.Module, Callable[[], Tensor]]]:
    """Every parametric block at micro scale, each with a scalar loss closure."""
    rng = np.random.default_rng(config.training.seed)
    frames, size = config.vdm.frames, config.vdm.feature_size
    c = config.vdm.latent_channels
    latent = config.latent_size
    c_sigma = config.feature_channels
    blocks: Dict[str, Tuple[nn.Module, Callable[[], Tensor]]] = {}

    linear = nn.Linear(5, 3, rng_stream(config.training.seed, "gradcheck", "linear"))
    x_lin, y_lin = rng.standard_normal((4, 5)), rng.standard_normal((4, 3))
    blocks["linear"] = (linear, lambda: ta.mse(linear(Tensor(x_lin)), Tensor(y_lin)))

    denoiser = VideoDenoiser(config, rng_stream(config.training.seed, "gradcheck", "denoiser"))
    z = rng.standard_normal((1, frames, c, latent, latent))
    obs = rng.standard_normal((1, c, latent, latent))
    eps = rng.standard_normal(z.shape)

    def denoiser_loss():
        pred, taps = denoiser(Tensor(z), [config.vdm.steps], Tensor(obs), [1])
        return ta.mse(pred, Tensor(eps))

    blocks["denoiser"] = (denoiser, denoiser_loss)

    decouplers = build_decouplers(config, config.training.seed)
    for branch in BRANCHES:
        module = decouplers[branch]
        c_i = module.out_channels
        fused = rng.standard_normal((1, frames, c_sigma + c_i, size, size))
        target = rng.standard_normal((1, frames, c_i, size, size))
        blocks[f"decoupler_{branch}"] = (module, lambda m=module, f=fused, t=target: ta.mse(m(Tensor(f)), Tensor(t)))

    c_hol = config.decouplers.geo_channels + config.decouplers.sem_channels + c_sigma
    perceiver = UniPerceiver(c_hol, frames * size * size, config.policy.queries, config.policy.width,
                             config.policy.heads, config.policy.mlp_ratio,
                             rng_stream(config.training.seed, "gradcheck", "perceiver"))
    context = rng.standard_normal((1, frames, c_hol, size, size))
    agg_target = rng.standard_normal((1, config.policy.queries, config.policy.width))
    blocks["uni_perceiver"] = (perceiver, lambda: ta.mse(perceiver(Tensor(context)), Tensor(agg_target)))

    policy = PolicyNet(config, rng_stream(config.training.seed, "gradcheck", "policy"))
    a_j = rng.standard_normal((1, config.policy.chunk, 3))
    f_agg = rng.standard_normal((1, config.policy.queries, config.policy.width))
    a_eps = rng.standard_normal(a_j.shape)
    blocks["policy"] = (policy, lambda: ta.mse(policy(Tensor(a_j), [1], Tensor(f_agg), [1]), Tensor(a_eps)))
    return blocks


def cmd_gradcheck(config: RunConfig, tol: float = 1e-3, inject_fault: bool = False) -> Dict:
    """Finite-difference check of every parametric block in 64-bit at micro scale."""
    micro = micro_config(config.training.seed)
    corrupt = 2.0 if inject_fault else 1.0
    blocks = {}
    for name, (module, loss_fn) in gradcheck_blocks(micro).items():
        report = ta.grad_check(loss_fn, module.parameters(), tol=tol, seed=micro.training.seed,
                               corrupt_factor=corrupt)
        entry = report.to_dict()
        entry["groups"] = nn.parameter_groups(module)
        blocks[name] = entry
        logger.info(f"gradcheck {name}: worst {report.worst:.2e} ({'pass' if report.passed else 'FAIL'})")
    result = {
        "tol": tol,
        "inject_fault": inject_fault,
        "passed": all(b["passed"] for b in blocks.values()),
        "blocks": blocks,
    }
    write_json(config.path("gradcheck.json"), result)
    return result


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svam", description="Shortcut video-action pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: SVAM_CONFIG or built-in defaults)")
    common.add_argument("--seed", type=int, help="Run seed override")
    common.add_argument("--out", help="Output directory override")
    common.add_argument("--log-level", default=os.getenv("SVAM_LOG_LEVEL", "INFO"))

    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen-data", parents=[common], help="Generate expert demonstrations")
    gen.add_argument("--episodes", type=int)

    train = sub.add_parser("train", parents=[common], help="Run one training stage")
    train.add_argument("--stage", type=int, required=True, choices=[1, 2, 3])
    train.add_argument("--variant", default="full", choices=VARIANTS)
    train.add_argument("--resume", action="store_true", help="Continue from the stage checkpoint")

    ev = sub.add_parser("eval", parents=[common], help="Closed-loop evaluation")
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--seeds", type=int)
    ev.add_argument("--variant", default="full", choices=VARIANTS)
    ev.add_argument("--untrained-policy", action="store_true", help="Evaluate a freshly initialized action expert")

    ab = sub.add_parser("ablate", parents=[common], help="Train and evaluate an ablation variant")
    ab.add_argument("--variant", required=True, choices=list(VARIANTS) + ["all"])
    ab.add_argument("--episodes", type=int)
    ab.add_argument("--seeds", type=int)

    bench = sub.add_parser("bench-latency", parents=[common], help="Latency benchmark")
    bench.add_argument("--trials", type=int)
    bench.add_argument("--warmup", type=int)
    bench.add_argument("--untrained", action="store_true", help="Allow missing checkpoints")

    gc = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient checks")
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.add_argument("--inject-fault", action="store_true", help="Scale tape gradients by 2 (must fail)")
    return parser


def run(args: argparse.Namespace) -> int:
    config = load_config(args.config, seed=args.seed, out_dir=args.out)
    if args.command == "gen-data":
        cmd_gen_data(config, args.episodes)
    elif args.command == "train":
        cmd_train(config, args.stage, args.variant, args.resume)
    elif args.command == "eval":
        cmd_eval(config, args.episodes, args.seeds, args.variant, args.untrained_policy)
    elif args.command == "ablate":
        variants = list(VARIANTS) if args.variant == "all" else [args.variant]
        cmd_ablate(config, variants, args.episodes, args.seeds)
    elif args.command == "bench-latency":
        cmd_bench_latency(config, args.trials, args.warmup, args.untrained)
    elif args.command == "gradcheck":
        if not cmd_gradcheck(config, args.tol, args.inject_fault)["passed"]:
            return EXIT_FAILURE
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except SvamError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return exit_code_for(e)
    except OSError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
